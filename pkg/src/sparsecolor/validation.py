"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array, check_scalar

from .color_space import luminance


def check_color_image(image, name: str = "image") -> np.ndarray:
    """``(H, W, 3)`` RGB in 0-255, returned as uint8 (floats are rounded)."""
    arr = check_array(image, allow_nd=True, ensure_2d=False, dtype=None, input_name=name)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be an (H, W, 3) RGB array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    arr = arr.astype(np.float64)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"{name} values must lie in [0, 255]")
    return np.round(arr).astype(np.uint8)


def check_color_images(images, name: str = "X") -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim == 3:
        raise ValueError(f"{name} must be a sequence of images, got a single image")
    out = [check_color_image(img, f"{name}[{i}]") for i, img in enumerate(images)]
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_luminance(target, name: str = "target") -> np.ndarray:
    """L plane ``(H, W)`` in [0, 100]; an RGB image is converted to its L plane."""
    arr = np.asarray(target)
    if arr.ndim == 3:
        return luminance(check_color_image(arr, name))
    arr = check_array(arr, dtype=np.float64, input_name=name)
    if arr.min() < 0 or arr.max() > 100:
        raise ValueError(f"{name} luminance must lie in [0, 100]")
    return arr


def check_labels(y, n_samples: int, class_count: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"y must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("y must hold integer class ids")
    if y.min() < 0 or y.max() >= class_count:
        raise ValueError(f"class ids must lie in [0, {class_count})")
    return y.astype(np.int64)


def check_k_r_params(k, r) -> None:
    check_scalar(k, "k", numbers.Integral, min_val=0)
    check_scalar(r, "r", numbers.Integral, min_val=0)
