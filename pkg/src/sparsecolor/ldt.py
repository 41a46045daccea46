"""Fine stage: CAM-guided sparse correspondence and the fusion U-Net decoder."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .gct import FeaturePyramid

CORRESPONDENCE_LEVELS = 4
CAM_LEVEL = 4


def quarter_size(height: int, width: int) -> tuple[int, int]:
    return height // 4, width // 4


def flatten_pyramid(pyramid: FeaturePyramid, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Resize levels 1-4 to ``size`` (default: the 1/4-scale level), concatenate, flatten.

    Returns ``(B, d, R)`` with regions in row-major order.
    """
    if len(pyramid) < CORRESPONDENCE_LEVELS:
        raise ValueError(f"need at least {CORRESPONDENCE_LEVELS} pyramid levels, got {len(pyramid)}")
    if size is None:
        size = tuple(pyramid[2].shape[-2:])
    parts = []
    for level in pyramid.levels[:CORRESPONDENCE_LEVELS]:
        if tuple(level.shape[-2:]) != tuple(size):
            level = F.interpolate(level, size=size, mode="bilinear", align_corners=False)
        parts.append(level)
    cat = torch.cat(parts, dim=1)
    return cat.flatten(2)


def unflatten(features: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return features.reshape(features.shape[0], features.shape[1], *size)


class Classifier(nn.Module):
    """Global-average-pool + linear head over the CAM level."""

    def __init__(self, channels: int, class_count: int):
        super().__init__()
        self.fc = nn.Linear(channels, class_count)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(features.mean(dim=(2, 3)))

    def cam(self, features: torch.Tensor, class_ids: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        """Class activation maps ``(B, R)`` upsampled to ``size`` and flattened."""
        n = self.fc.out_features
        if torch.any(class_ids < 0) or torch.any(class_ids >= n):
            raise ValueError(f"class id out of range [0, {n})")
        w = self.fc.weight[class_ids]  # (B, C)
        maps = torch.einsum("bc,bchw->bhw", w, features)[:, None]
        if tuple(maps.shape[-2:]) != tuple(size):
            maps = F.interpolate(maps, size=size, mode="bilinear", align_corners=False)
        return maps.flatten(1)


def compute_cam(pyramid: FeaturePyramid, classifier: Classifier, class_id=None, size=None):
    """Logits and flattened CAM scores for the given class (argmax class when absent)."""
    features = pyramid[CAM_LEVEL]
    logits = classifier(features)
    if class_id is None:
        ids = logits.argmax(dim=1)
    else:
        ids = torch.as_tensor(class_id, device=logits.device).reshape(-1).expand(logits.shape[0])
    if size is None:
        size = tuple(pyramid[2].shape[-2:])
    return logits, classifier.cam(features, ids, size)


@dataclass
class SparseSelection:
    cam: np.ndarray
    topk_indices: np.ndarray
    random_indices: np.ndarray

    @property
    def k(self) -> int:
        return len(self.topk_indices)

    @property
    def r(self) -> int:
        return len(self.random_indices)

    @property
    def indices(self) -> np.ndarray:
        """Key region ids, top-k first then random."""
        return np.concatenate([self.topk_indices, self.random_indices])


def select_regions(cam_scores, k: int, r: int, rng: np.random.Generator) -> SparseSelection:
    """Top-``k`` regions by CAM score (lowest index wins ties) plus ``r`` random others."""
    scores = np.asarray(cam_scores, dtype=np.float64).ravel()
    n = scores.size
    if k < 0 or r < 0:
        raise ValueError("k and r must be non-negative")
    if k + r > n:
        raise ValueError(f"k+r exceeds region count ({k}+{r} > {n})")
    order = np.argsort(-scores, kind="stable")
    topk = order[:k]
    rest = np.setdiff1d(np.arange(n), topk, assume_unique=True)
    rand = rng.choice(rest, size=r, replace=False) if r else np.empty(0, dtype=np.int64)
    return SparseSelection(scores, topk.astype(np.int64), np.asarray(rand, dtype=np.int64))


# ---------------------------------------------------------------------------
# correspondence attention


class MacCounter:
    """Multiply-accumulate tally for the matrix products run by :func:`attend`."""

    def __init__(self):
        self.by_tag = defaultdict(int)

    def matmul(self, a: torch.Tensor, b: torch.Tensor, tag: str) -> torch.Tensor:
        out = torch.matmul(a, b)
        batch = math.prod(out.shape[:-2])
        self.by_tag[tag] += batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
        return out

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())


class _Uncounted:
    @staticmethod
    def matmul(a, b, tag):
        return torch.matmul(a, b)


def attend(
    coarse: torch.Tensor,
    reference: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    key_index: torch.Tensor | None = None,
    counter: MacCounter | None = None,
):
    """Scaled dot-product correspondence from coarse regions to reference regions.

    ``coarse`` and ``reference`` are ``(B, d, R)``; ``key_index`` ``(B, n)``
    restricts the keys to the selected reference regions. Returns the
    attended features ``(B, d, R)`` and the weights ``(B, R, n_keys)``.
    """
    if coarse.ndim != 3 or reference.ndim != 3 or coarse.shape[:2] != reference.shape[:2]:
        raise ValueError(f"feature shapes do not match: {tuple(coarse.shape)} vs {tuple(reference.shape)}")
    d = coarse.shape[1]
    if w_q.shape != (d, d) or w_k.shape != (d, d) or w_v.shape != (d, d):
        raise ValueError(f"projection matrices must be {d}x{d}")
    mm = counter or _Uncounted
    keys = reference
    if key_index is not None:
        keys = torch.gather(reference, 2, key_index[:, None, :].expand(-1, d, -1))
    q = mm.matmul(w_q, coarse, "projection")  # (B, d, R)
    k = mm.matmul(w_k, keys, "projection")  # (B, d, n)
    v = mm.matmul(w_v, keys, "projection")
    logits = mm.matmul(q.transpose(1, 2), k, "correlation") / math.sqrt(d)  # (B, R, n)
    alpha = torch.softmax(logits, dim=-1)
    out = mm.matmul(v, alpha.transpose(1, 2), "correlation")  # (B, d, R)
    return out, alpha


class CorrespondenceAttention(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(d, d))
        self.w_k = nn.Parameter(torch.empty(d, d))
        self.w_v = nn.Parameter(torch.empty(d, d))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)

    def forward(self, coarse, reference, key_index=None, counter=None):
        return attend(coarse, reference, self.w_q, self.w_k, self.w_v, key_index, counter)


def attention_dump(alpha: torch.Tensor, key_index, query_indices=None, selection: SparseSelection | None = None) -> dict:
    """JSON-ready rows ``{query_index, key_indices, weights}`` for one sample."""
    alpha = alpha.detach().cpu().double().numpy()
    n_queries, n_keys = alpha.shape
    keys = np.arange(n_keys) if key_index is None else np.asarray(key_index)
    queries = range(n_queries) if query_indices is None else query_indices
    rows = [
        {"query_index": int(i), "key_indices": keys.tolist(), "weights": [float(x) for x in alpha[i]]}
        for i in queries
    ]
    out = {"rows": rows}
    if selection is not None:
        out["selection"] = {
            "topk_indices": selection.topk_indices.tolist(),
            "random_indices": selection.random_indices.tolist(),
            "cam": [float(x) for x in selection.cam],
        }
    return out


def write_attention_dump(path, dump: dict) -> None:
    with open(path, "w") as fh:
        json.dump(dump, fh)


# ---------------------------------------------------------------------------
# fusion decoder


def _conv_block(c_in, c_out, depth=2):
    layers = []
    for i in range(depth):
        layers += [nn.Conv2d(c_in if i == 0 else c_out, c_out, 3, 1, 1), nn.LeakyReLU(0.2)]
    return nn.Sequential(*layers)


class FusionDecoder(nn.Module):
    """U-Net decoder over the coarse pyramid with attended features injected at every scale.

    The attended map is projected to each scale's width at 1/4 resolution and
    then resized. Emits normalized ab at full resolution and bin logits at 1/4
    resolution.
    """

    def __init__(self, d: int, widths, q_bins: int):
        super().__init__()
        w1, w2, w3, w4, w5, w6 = widths
        self.att_proj = nn.ModuleDict(
            {name: nn.Conv2d(d, c, 1) for name, c in (("s8", w5), ("s4", w3), ("s2", w2), ("s1", w1))}
        )
        self.block8 = _conv_block(w6 + w5 + w5, w5)
        self.block4 = _conv_block(w5 + w4 + w3 + w3, w3)
        self.block2 = _conv_block(w3 + w2 + w2, w2, depth=1)
        self.block1 = _conv_block(w2 + w1 + w1, w1, depth=1)
        self.ab_head = nn.Conv2d(w1, 2, 1)
        self.dist_head = nn.Conv2d(w3, q_bins, 1)

    @staticmethod
    def _resize(x, like):
        if x.shape[-2:] == like.shape[-2:]:
            return x
        return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)

    def _att(self, attended, name, like):
        return self._resize(F.leaky_relu(self.att_proj[name](attended), 0.2), like)

    def forward(self, attended: torch.Tensor, pyramid: FeaturePyramid):
        l1, l2, l3, l4, l5, l6 = pyramid.levels
        x = self.block8(torch.cat([l6, l5, self._att(attended, "s8", l6)], 1))
        x = self.block4(torch.cat([self._resize(x, l4), l4, l3, self._att(attended, "s4", l4)], 1))
        dist_logits = self.dist_head(x)
        x = self.block2(torch.cat([self._resize(x, l2), l2, self._att(attended, "s2", l2)], 1))
        x = self.block1(torch.cat([self._resize(x, l1), l1, self._att(attended, "s1", l1)], 1))
        return torch.tanh(self.ab_head(x)), dist_logits


def fuse_and_decode(attended: torch.Tensor, coarse_pyramid: FeaturePyramid, decoder: FusionDecoder):
    """Final normalized ab ``(B, 2, H, W)`` and bin probabilities ``(B, Q, H/4, W/4)``."""
    ab, logits = decoder(attended, coarse_pyramid)
    return ab, torch.softmax(logits, dim=1)
