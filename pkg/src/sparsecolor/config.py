"""Architecture configuration shared by the networks, checkpoints and the trainer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .color_space import Q_BINS

STAGE_MODES = ("two_stage", "gray_query")

# reference encoder: one residual block per level, strides relative to the previous level
REF_BASE_WIDTHS = (64, 128, 256, 256, 512, 512)
REF_STRIDES = (1, 2, 2, 1, 2, 1)
# gray encoder: VGG19 conv stages, cut after relu1_2, relu2_2, relu3_4, relu4_4, relu5_2
VGG_BASE_WIDTHS = (64, 128, 256, 512, 512)
VGG_STAGE_CONVS = (2, 2, 4, 4, 2)
VGG_CUTS = ("relu1_2", "relu2_2", "relu3_4", "relu4_4", "relu5_2")


def _scaled(widths, scale):
    return tuple(max(4, int(round(w * scale))) for w in widths)


@dataclass(frozen=True)
class ModelConfig:
    scale_factor: float = 1.0
    class_count: int = 1000
    q_bins: int = Q_BINS
    mlp_hidden: int = 256
    stage_mode: str = "two_stage"

    def __post_init__(self):
        if self.stage_mode not in STAGE_MODES:
            raise ValueError(f"stage_mode must be one of {STAGE_MODES}, got {self.stage_mode!r}")
        if self.scale_factor <= 0 or self.class_count < 1:
            raise ValueError("scale_factor and class_count must be positive")

    @property
    def ref_widths(self) -> tuple[int, ...]:
        return _scaled(REF_BASE_WIDTHS, self.scale_factor)

    @property
    def vgg_widths(self) -> tuple[int, ...]:
        return _scaled(VGG_BASE_WIDTHS, self.scale_factor)

    @property
    def feature_dim(self) -> int:
        """Channels of the flattened correspondence features (levels 1-4)."""
        return sum(self.ref_widths[:4])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vgg_cuts"] = list(VGG_CUTS)
        d["ref_strides"] = list(REF_STRIDES)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
