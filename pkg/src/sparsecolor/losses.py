"""Training objectives: smooth-L1 per stage, classification, bin-histogram and TV terms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-8
PART_NAMES = ("stage1", "stage2", "tv", "cls", "his")


def _value(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, parts: dict):
        bad = {k: _value(v) for k, v in parts.items() if not math.isfinite(_value(v))}
        super().__init__(f"non-finite loss terms: {bad}")
        self.parts = parts


@dataclass(frozen=True)
class LossWeights:
    stage1: float = 100.0
    stage2: float = 100.0
    tv: float = 10.0
    cls: float = 0.1
    his: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


def smooth_l1(pred: torch.Tensor, gt: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Quadratic below ``delta``, linear above; mean over elements."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    e = (pred - gt).abs()
    return torch.where(e <= delta, 0.5 * e**2, delta * e - 0.5 * delta**2).mean()


def classification_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    label = torch.as_tensor(label, device=logits.device).long().reshape(-1)
    n = logits.shape[-1]
    if torch.any(label < 0) or torch.any(label >= n):
        raise ValueError(f"label out of range [0, {n})")
    return F.cross_entropy(logits.reshape(-1, n), label)


def histogram_loss(pred: torch.Tensor, gt: torch.Tensor, dim: int = -1, from_logits: bool = False) -> torch.Tensor:
    """Per-pixel cross-entropy between bin distributions, summed over pixels and divided by the pixel count.

    ``pred`` holds probabilities (or logits with ``from_logits=True``) along ``dim``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    log_pred = F.log_softmax(pred, dim=dim) if from_logits else torch.log(pred.clamp_min(LOG_FLOOR))
    per_pixel = -(gt * log_pred).sum(dim=dim)
    return per_pixel.sum() / per_pixel.numel()


def tv_regularization(ab: torch.Tensor) -> torch.Tensor:
    """Mean squared horizontal difference plus mean squared vertical difference."""
    if ab.shape[-1] < 2 or ab.shape[-2] < 2:
        raise ValueError("TV needs at least a 2x2 spatial extent")
    dh = ab[..., :, 1:] - ab[..., :, :-1]
    dv = ab[..., 1:, :] - ab[..., :-1, :]
    return (dh**2).mean() + (dv**2).mean()


def total_loss(parts: dict, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the five terms; missing or zero-weighted terms are left out of the graph."""
    for name in parts:
        if name not in PART_NAMES:
            raise KeyError(f"unknown loss term {name!r}")
    if not all(math.isfinite(_value(v)) for v in parts.values()):
        raise NonFiniteLossError(parts)
    total = 0.0
    for name in PART_NAMES:
        w = getattr(weights, name)
        if name in parts and w != 0:
            total = total + w * parts[name]
    return total if isinstance(total, torch.Tensor) else torch.tensor(float(total))
