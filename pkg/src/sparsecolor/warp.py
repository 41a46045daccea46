"""Geometric reference synthesis: thin-plate-spline warps, rotation and crops.

All warps keep the image size. Randomness always comes from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .color_space import fit_to_resolution, rgb_to_lab

GRID_POINTS = 4
NORMAL_MAX = 0.08
VIOLENT_RANGE = (0.2, 0.4)
VIOLENT_PROB = 0.1
MAX_ROTATION = 45.0
MIN_CROP = 0.5
AUG_TYPES = ("TPS", "RR", "RC")


@dataclass(frozen=True)
class TpsWarpSpec:
    """Control points in normalized ``(x, y)`` image coordinates and their displacements.

    A source pixel at ``control_grid[i]`` appears at
    ``control_grid[i] + displacements[i]`` in the warped image.
    """

    control_grid: np.ndarray
    displacements: np.ndarray
    violent: bool = False

    @classmethod
    def identity(cls, grid_points: int = GRID_POINTS) -> "TpsWarpSpec":
        grid = control_grid(grid_points)
        return cls(grid, np.zeros_like(grid))

    @property
    def is_identity(self) -> bool:
        return not np.any(self.displacements)


@dataclass
class TrainingPair:
    target_L: np.ndarray
    reference_rgb: np.ndarray
    gt_ab: np.ndarray
    class_label: int | None = None


def control_grid(n: int = GRID_POINTS) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(t, t, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


# ---------------------------------------------------------------------------
# thin plate splines


def _tps_kernel(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0, r2 * np.log(r2), 0.0)


def _check_control_points(points: np.ndarray) -> None:
    if len(points) < 3 or np.linalg.matrix_rank(np.c_[np.ones(len(points)), points]) < 3:
        raise ValueError("TPS control points must contain at least 3 non-collinear points")


@dataclass(frozen=True)
class TpsCoefficients:
    centers: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n, m)
    affine: np.ndarray  # (3, m)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        r2 = ((points[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        return _tps_kernel(r2) @ self.weights + np.c_[np.ones(len(points)), points] @ self.affine


def solve_tps(centers: np.ndarray, values: np.ndarray) -> TpsCoefficients:
    """Fit the thin-plate spline through ``values`` at ``centers`` (exact interpolation)."""
    centers = np.asarray(centers, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    _check_control_points(centers)
    n = len(centers)
    P = np.c_[np.ones(n), centers]
    K = _tps_kernel(((centers[:, None] - centers[None]) ** 2).sum(-1))
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = K
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 3, values.shape[1]))
    rhs[:n] = values
    sol = np.linalg.solve(A, rhs)
    return TpsCoefficients(centers, sol[:n], sol[n:])


def backward_map(spec: TpsWarpSpec) -> TpsCoefficients:
    """TPS taking warped-image coordinates back to source coordinates."""
    moved = spec.control_grid + spec.displacements
    return solve_tps(moved, spec.control_grid)


def _sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sampling with edge replication; ``image`` is ``(H, W)`` or ``(H, W, C)``."""
    src = np.asarray(image, dtype=np.float64)
    planes = src[..., None] if src.ndim == 2 else src
    out = np.stack(
        [ndimage.map_coordinates(planes[..., c], [rows, cols], order=1, mode="nearest") for c in range(planes.shape[-1])],
        axis=-1,
    )
    out = out[..., 0] if src.ndim == 2 else out
    if np.asarray(image).dtype == np.uint8:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out


def tps_warp(image: np.ndarray, spec: TpsWarpSpec) -> np.ndarray:
    """Warp ``image`` so that each control point moves by its displacement."""
    image = np.asarray(image)
    if spec.is_identity:
        _check_control_points(spec.control_grid)
        return image.copy()
    h, w = image.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w]
    pts = np.stack([cc.ravel() / max(w - 1, 1), rr.ravel() / max(h - 1, 1)], axis=1)
    src = backward_map(spec)(pts)
    cols = (src[:, 0] * (w - 1)).reshape(h, w)
    rows = (src[:, 1] * (h - 1)).reshape(h, w)
    return _sample(image, rows, cols)


def random_spec(
    rng: np.random.Generator,
    violent: bool = False,
    grid_points: int = GRID_POINTS,
    normal_max: float = NORMAL_MAX,
    violent_range: tuple[float, float] = VIOLENT_RANGE,
) -> TpsWarpSpec:
    """Random displacements: uniform direction, magnitude uniform on the regime's range."""
    grid = control_grid(grid_points)
    n = len(grid)
    lo, hi = violent_range if violent else (0.0, normal_max)
    mag = rng.uniform(lo, hi, size=n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    disp = np.stack([mag * np.cos(theta), mag * np.sin(theta)], axis=1)
    return TpsWarpSpec(grid, disp, violent=violent)


# ---------------------------------------------------------------------------
# rotation and crop


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image center by ``angle`` degrees (counter-clockwise), same size."""
    image = np.asarray(image)
    if angle == 0:
        return image.copy()
    h, w = image.shape[:2]
    t = np.deg2rad(angle)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    y, x = rr - cy, cc - cx
    # inverse rotation gives the source location of each output pixel
    src_x = np.cos(t) * x - np.sin(t) * y + cx
    src_y = np.sin(t) * x + np.cos(t) * y + cy
    return _sample(image, src_y, src_x)


def random_rotation(image: np.ndarray, rng: np.random.Generator, max_angle: float = MAX_ROTATION) -> np.ndarray:
    return rotate(image, rng.uniform(-max_angle, max_angle))


def crop_resize(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Crop a window and resize it back to the full image size (bilinear)."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if (top, left, height, width) == (0, 0, h, w):
        return image.copy()
    window = image[top : top + height, left : left + width]
    if image.dtype == np.uint8:
        return np.asarray(Image.fromarray(window).resize((w, h), Image.BILINEAR))
    zoom = (h / height, w / width) + (1,) * (image.ndim - 2)
    return ndimage.zoom(window.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)


def random_crop(image: np.ndarray, rng: np.random.Generator, min_fraction: float = MIN_CROP) -> np.ndarray:
    h, w = np.asarray(image).shape[:2]
    ch = int(rng.integers(int(np.ceil(min_fraction * h)), h + 1))
    cw = int(rng.integers(int(np.ceil(min_fraction * w)), w + 1))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return crop_resize(image, top, left, ch, cw)


# ---------------------------------------------------------------------------
# pairs and triplets


def _check_color(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) color image, got shape {image.shape}")
    if np.array_equal(image[..., 0], image[..., 1]) and np.array_equal(image[..., 1], image[..., 2]):
        raise ValueError("grayscale source image carries no color to learn from")
    return image


def make_training_pair(
    color_image: np.ndarray,
    rng: np.random.Generator,
    violent_prob: float = VIOLENT_PROB,
    spec: TpsWarpSpec | None = None,
    class_label: int | None = None,
) -> TrainingPair:
    """Target luminance and ground-truth chroma of ``color_image`` plus a TPS-warped reference."""
    image = _check_color(color_image)
    lab = rgb_to_lab(image)
    if spec is None:
        violent = bool(rng.random() < violent_prob)
        spec = random_spec(rng, violent=violent)
    return TrainingPair(lab.L, tps_warp(image, spec), lab.ab, class_label)


def make_eval_triplet(color_image: np.ndarray, aug: str, rng: np.random.Generator, spec: TpsWarpSpec | None = None):
    """``(target_L, reference, gt_rgb)`` for self-augmentation evaluation."""
    image = _check_color(color_image)
    if aug == "TPS":
        reference = tps_warp(image, spec if spec is not None else random_spec(rng))
    elif aug == "RR":
        reference = random_rotation(image, rng)
    elif aug == "RC":
        reference = random_crop(image, rng)
    else:
        raise ValueError(f"unknown augmentation {aug!r}; expected one of {AUG_TYPES}")
    return rgb_to_lab(image).L, reference, image.copy()


# ---------------------------------------------------------------------------
# evaluation manifests (JSON lines: source_path, aug_type, seed[, digest])


def triplet_digest(target_L: np.ndarray, reference: np.ndarray, gt_rgb: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in (np.round(target_L, 6), reference, gt_rgb):
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode() + str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_manifest(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            missing = {"source_path", "aug_type", "seed"} - row.keys()
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if row["aug_type"] not in AUG_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown aug_type {row['aug_type']!r}")
            rows.append(row)
    return rows


def resolve_source(manifest_path, source_path) -> Path:
    p = Path(source_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def materialize(entry: dict, manifest_path, resolution: int):
    """Rebuild the triplet for one manifest row; raises FileNotFoundError for missing sources."""
    from .color_space import read_image

    image = fit_to_resolution(read_image(resolve_source(manifest_path, entry["source_path"])), resolution)
    rng = np.random.default_rng(entry["seed"])
    return make_eval_triplet(image, entry["aug_type"], rng)


def build_manifest(sources, aug_types=AUG_TYPES, seed: int = 0, resolution: int | None = None, manifest_dir=None):
    """Manifest rows for every (source, aug) with seeds drawn from ``seed``.

    With ``resolution`` set, each row also records the triplet digest so that
    regeneration can be checked later.
    """
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=(len(sources), len(aug_types)))
    rows = []
    for i, src in enumerate(sources):
        for j, aug in enumerate(aug_types):
            row = {"source_path": str(src), "aug_type": aug, "seed": int(seeds[i, j])}
            if resolution is not None:
                row["digest"] = triplet_digest(*materialize(row, Path(manifest_dir or ".") / "_", resolution))
            rows.append(row)
    return rows


def verify_manifest(path, resolution: int) -> list[str]:
    """Source paths whose regenerated triplet no longer matches the stored digest."""
    bad = []
    for row in read_manifest(path):
        if "digest" in row and triplet_digest(*materialize(row, path, resolution)) != row["digest"]:
            bad.append(row["source_path"])
    return bad
