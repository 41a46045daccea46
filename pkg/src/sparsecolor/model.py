"""The full coarse-to-fine colorization network and the numpy-facing colorize call."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .color_space import (
    LabImage,
    denormalize_ab,
    normalize_ab,
    normalize_l,
    rgb_array_to_lab,
)
from .config import ModelConfig
from .gct import FeaturePyramid, GlobalColorTransfer, ResidualEncoder, style_from_features
from .ldt import (
    CAM_LEVEL,
    Classifier,
    CorrespondenceAttention,
    FusionDecoder,
    MacCounter,
    SparseSelection,
    flatten_pyramid,
    select_regions,
    unflatten,
)

MODES = ("dense", "sparse")


class UntrainedModelError(RuntimeError):
    """Raised when inference is requested from weights that were never trained or loaded."""


@dataclass
class ForwardOutput:
    ab: torch.Tensor  # (B, 2, H, W) normalized
    dist_logits: torch.Tensor  # (B, Q, H/4, W/4)
    logits: torch.Tensor  # (B, classes)
    coarse_ab: torch.Tensor | None
    selections: list[SparseSelection] | None
    attention: torch.Tensor  # (B, R, n_keys)
    key_index: torch.Tensor | None

    @property
    def dist(self) -> torch.Tensor:
        return torch.softmax(self.dist_logits, dim=1)


class ColorizationNet(nn.Module):
    """Reference encoder shared by both stages, GCT coarse stage, LDT fine stage.

    With ``stage_mode="gray_query"`` the coarse stage is dropped and a
    one-channel residual encoder of the target luminance supplies the query
    features and the decoder pyramid instead.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.ref_widths
        self.reference_encoder = ResidualEncoder(3, widths, tag="reference")
        if config.stage_mode == "two_stage":
            self.gct = GlobalColorTransfer(config, widths[-1])
        else:
            self.gray_encoder = ResidualEncoder(1, widths, tag="gray")
        self.classifier = Classifier(widths[CAM_LEVEL], config.class_count)
        self.attention = CorrespondenceAttention(config.feature_dim)
        self.fusion = FusionDecoder(config.feature_dim, widths, config.q_bins)
        self.weights_loaded = False

    @property
    def two_stage(self) -> bool:
        return self.config.stage_mode == "two_stage"

    def coarse(self, target_L, reference_pyramid: FeaturePyramid):
        style = style_from_features(reference_pyramid, self.gct.style_mlp)
        return self.gct(target_L, style)

    def forward(
        self,
        target_L: torch.Tensor,
        reference_lab: torch.Tensor,
        mode: str = "sparse",
        k: int = 256,
        r: int = 256,
        rng: np.random.Generator | None = None,
        class_ids: torch.Tensor | None = None,
        counter: MacCounter | None = None,
    ) -> ForwardOutput:
        """``target_L`` is ``(B, 1, H, W)`` and ``reference_lab`` ``(B, 3, H, W)``, both normalized."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        h, w = target_L.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image size must be a multiple of 16, got {h}x{w}")
        ref_pyr = self.reference_encoder(reference_lab)
        logits = self.classifier(ref_pyr[CAM_LEVEL])

        if self.two_stage:
            coarse_ab = self.coarse(target_L, ref_pyr)
            query_pyr = self.reference_encoder(torch.cat([target_L, coarse_ab], 1), tag="coarse")
        else:
            coarse_ab = None
            query_pyr = self.gray_encoder(target_L)

        size = (h // 4, w // 4)
        q_feats = flatten_pyramid(query_pyr, size)
        r_feats = flatten_pyramid(ref_pyr, size)

        selections = key_index = None
        if mode == "sparse":
            with torch.no_grad():
                ids = logits.argmax(1) if class_ids is None else class_ids
                cam = self.classifier.cam(ref_pyr[CAM_LEVEL], ids, size)
            rng = rng if rng is not None else np.random.default_rng(0)
            selections = [select_regions(c, k, r, rng) for c in cam.double().cpu().numpy()]
            # keys are a set; ascending order makes a full selection reproduce dense attention exactly
            key_index = torch.as_tensor(np.stack([np.sort(s.indices) for s in selections]), device=target_L.device)

        attended, alpha = self.attention(q_feats, r_feats, key_index, counter)
        ab, dist_logits = self.fusion(unflatten(attended, size), query_pyr)
        return ForwardOutput(ab, dist_logits, logits, coarse_ab, selections, alpha, key_index)


# ---------------------------------------------------------------------------
# numpy boundary


def lab_tensor(target_L: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(normalize_l(np.asarray(target_L, dtype=np.float32)))[None, None]


def reference_tensor(reference_rgb: np.ndarray) -> torch.Tensor:
    lab = rgb_array_to_lab(np.asarray(reference_rgb, dtype=np.float64))
    lab = np.concatenate([normalize_l(lab[..., :1]), normalize_ab(lab[..., 1:])], axis=-1)
    return torch.as_tensor(lab.astype(np.float32)).permute(2, 0, 1)[None]


def region_count(height: int, width: int) -> int:
    return (height // 4) * (width // 4)


def working_size(height: int, width: int) -> tuple[int, int]:
    """Nearest multiples of 16 (at least 16) used when the input size is not one already."""
    return tuple(max(16, int(round(v / 16)) * 16) for v in (height, width))


def check_k_r(k: int, r: int, height: int, width: int) -> None:
    n = region_count(height, width)
    if k < 0 or r < 0:
        raise ValueError("k and r must be non-negative")
    if k + r > n:
        raise ValueError(f"k+r exceeds region count ({k}+{r} > {n})")


def match_size(reference_rgb: np.ndarray, height: int, width: int) -> np.ndarray:
    reference_rgb = np.asarray(reference_rgb)
    if reference_rgb.shape[:2] == (height, width):
        return reference_rgb
    t = torch.as_tensor(reference_rgb.astype(np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


@torch.no_grad()
def colorize(
    model: ColorizationNet,
    target_L: np.ndarray,
    reference_rgb: np.ndarray,
    mode: str = "sparse",
    k: int = 256,
    r: int = 256,
    seed: int = 0,
    return_output: bool = False,
):
    """Colorize luminance ``target_L`` (``(H, W)``, 0-100) from an RGB reference.

    The L plane is passed through unchanged; only a and b are predicted. Sizes
    that are not multiples of 16 run at :func:`working_size` and the ab planes
    are resized back.
    """
    if not model.weights_loaded:
        raise UntrainedModelError("model has no trained weights; train or load a checkpoint first")
    target_L = np.asarray(target_L, dtype=np.float64)
    if target_L.ndim != 2:
        raise ValueError(f"target_L must be a 2-D luminance plane, got shape {target_L.shape}")
    h, w = target_L.shape
    wh, ww = working_size(h, w)
    if mode == "sparse":
        check_k_r(k, r, wh, ww)
    reference_rgb = match_size(reference_rgb, wh, ww)
    L_in = lab_tensor(target_L)
    if (wh, ww) != (h, w):
        L_in = F.interpolate(L_in, size=(wh, ww), mode="bilinear", align_corners=False)
    was_training = model.training
    model.eval()
    try:
        out = model(
            L_in,
            reference_tensor(reference_rgb),
            mode=mode,
            k=k,
            r=r,
            rng=np.random.default_rng(seed),
        )
    finally:
        model.train(was_training)
    ab_t = out.ab if (wh, ww) == (h, w) else F.interpolate(out.ab, size=(h, w), mode="bilinear", align_corners=False)
    ab = denormalize_ab(ab_t[0].permute(1, 2, 0).double().numpy())
    lab = LabImage(target_L.copy(), np.clip(ab[..., 0], -110, 110), np.clip(ab[..., 1], -110, 110))
    return (lab, out) if return_output else lab


@torch.no_grad()
def coarse_colorize(model: ColorizationNet, target_L: np.ndarray, reference_rgb: np.ndarray) -> np.ndarray:
    """Normalized coarse ab ``(H, W, 2)`` from the global stage alone."""
    if not model.two_stage:
        raise ValueError("model was built without the coarse stage")
    target_L = np.asarray(target_L, dtype=np.float64)
    h, w = target_L.shape
    ref = reference_tensor(match_size(reference_rgb, h, w))
    was_training = model.training
    model.eval()
    try:
        ab = model.coarse(lab_tensor(target_L), model.reference_encoder(ref))
    finally:
        model.train(was_training)
    return ab[0].permute(1, 2, 0).double().numpy()
