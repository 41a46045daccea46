"""End-to-end optimization with per-epoch checkpoints and resumable state."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

from .color_space import (
    build_gamut,
    encode_ab,
    fit_to_resolution,
    normalize_ab,
    normalize_l,
    read_image,
    rgb_array_to_lab,
)
from .config import ModelConfig
from .losses import LossWeights, NonFiniteLossError, classification_loss, histogram_loss, smooth_l1, total_loss
from .losses import tv_regularization
from .model import ColorizationNet, ForwardOutput
from .warp import make_training_pair

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sparsecolor-checkpoint/1"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
DATA_ENV = "SSCN_DATA"
LOG_COLUMNS = ("step", "L_stage1", "L_stage2", "L_cls", "L_his", "L_TV", "total")


class EmptyDatasetError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    resolution: int = 256
    batch_size: int = 8
    epochs: int = 5
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    k: int = 256
    r: int = 256
    violent_prob: float = 0.1
    seed: int = 0
    dataset_root: str | None = None
    class_count: int = 1000
    scale_factor: float = 1.0
    stage_mode: str = "two_stage"
    weights: LossWeights = field(default_factory=LossWeights)
    val_fraction: float = 0.02
    max_steps: int | None = None
    out_dir: str = "runs/default"
    keep_epoch_checkpoints: bool = True

    def __post_init__(self):
        for name in ("resolution", "batch_size", "epochs", "class_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.scale_factor <= 0:
            raise ValueError("lr and scale_factor must be positive")
        if self.resolution % 16:
            raise ValueError("resolution must be a multiple of 16")
        regions = (self.resolution // 4) ** 2
        if self.k < 0 or self.r < 0 or self.k + self.r > regions:
            raise ValueError(f"k+r exceeds region count ({self.k}+{self.r} > {regions})")
        if not 0 <= self.violent_prob <= 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("violent_prob and val_fraction must be probabilities")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small CPU preset: 96x96, quarter-width channels, 10 classes, k=r=36 (1/8 of 576 regions)."""
        base = dict(resolution=96, scale_factor=0.25, class_count=10, k=36, r=36)
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        return ModelConfig(scale_factor=self.scale_factor, class_count=self.class_count, stage_mode=self.stage_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        with open(path) as fh:
            d = json.load(fh)
        d.update(overrides)
        return cls.from_dict(d)

    def with_env(self) -> "TrainConfig":
        root = os.environ.get(DATA_ENV)
        return replace(self, dataset_root=root) if root else self


# ---------------------------------------------------------------------------
# data


def load_image_folder(root, resolution: int):
    """Images and labels from ``root/<class>/<image>``; classes are sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDatasetError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                images.append(fit_to_resolution(read_image(path), resolution))
                labels.append(label)
    if not images:
        raise EmptyDatasetError(f"no images found under {root}")
    return images, np.asarray(labels, dtype=np.int64), classes


def split_validation(n: int, fraction: float, seed: int):
    """Fixed (train, val) index split; val is empty when ``fraction`` is 0."""
    order = np.random.default_rng([seed, 1]).permutation(n)
    n_val = int(round(n * fraction))
    if fraction > 0 and n > 1:
        n_val = max(n_val, 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class Batch:
    target_L: torch.Tensor  # (B, 1, H, W) normalized
    reference: torch.Tensor  # (B, 3, H, W) normalized Lab
    gt_ab: torch.Tensor  # (B, 2, H, W) normalized
    gt_dist: torch.Tensor  # (B, Q, H/4, W/4)
    labels: torch.Tensor | None


def _lab_planes(rgb: np.ndarray) -> np.ndarray:
    lab = rgb_array_to_lab(rgb)
    return np.concatenate([normalize_l(lab[..., :1]), normalize_ab(lab[..., 1:])], axis=-1)


def make_batch(images, labels, indices, rngs, violent_prob: float) -> Batch:
    gamut = build_gamut()
    tl, refs, abs_, dists = [], [], [], []
    for i, rng in zip(indices, rngs):
        pair = make_training_pair(images[i], rng, violent_prob)
        tl.append(normalize_l(pair.target_L)[None])
        refs.append(_lab_planes(pair.reference_rgb).transpose(2, 0, 1))
        ab = pair.gt_ab
        abs_.append(normalize_ab(ab).transpose(2, 0, 1))
        h, w = ab.shape[:2]
        small = ab.reshape(h // 4, 4, w // 4, 4, 2).mean(axis=(1, 3))
        dists.append(encode_ab(small, gamut).transpose(2, 0, 1))
    as_t = lambda xs: torch.as_tensor(np.stack(xs).astype(np.float32))
    lab_t = None if labels is None else torch.as_tensor(np.asarray(labels)[list(indices)])
    return Batch(as_t(tl), as_t(refs), as_t(abs_), as_t(dists), lab_t)


def compute_losses(out: ForwardOutput, batch: Batch, weights: LossWeights) -> dict:
    parts = {
        "stage2": smooth_l1(out.ab, batch.gt_ab, weights.delta),
        "tv": tv_regularization(out.ab),
        "his": histogram_loss(out.dist_logits, batch.gt_dist, dim=1, from_logits=True),
    }
    if out.coarse_ab is not None:
        parts["stage1"] = smooth_l1(out.coarse_ab, batch.gt_ab, weights.delta)
    if batch.labels is not None:
        parts["cls"] = classification_loss(out.logits, batch.labels)
    return parts


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: ColorizationNet
    optimizer: torch.optim.Adam
    config: TrainConfig
    step: int
    epoch: int
    batch_in_epoch: int
    header: dict


def make_optimizer(model, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.adam_betas))


def save_checkpoint(path, model, optimizer, config: TrainConfig, step=0, epoch=0, batch_in_epoch=0, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    state = optimizer.state_dict() if optimizer is not None else {"state": {}, "param_groups": []}
    for idx, st in state["state"].items():
        for key, value in st.items():
            tensors[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().contiguous().clone()
    groups = [{k: v for k, v in g.items() if k != "params"} for g in state["param_groups"]]
    header = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": config.to_dict(),
        "step": step,
        "epoch": epoch,
        "batch_in_epoch": batch_in_epoch,
        "param_groups": groups,
        **(extra or {}),
    }
    save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True, default=list)})
    return path


def read_header(path) -> dict:
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if "header" not in meta:
        raise CheckpointMismatchError(f"{path} is not a sparsecolor checkpoint (no header)")
    header = json.loads(meta["header"])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    return header


def config_diff(saved: dict, runtime: dict) -> list[str]:
    keys = sorted(set(saved) | set(runtime))
    return [f"{k}: checkpoint={saved.get(k)!r} runtime={runtime.get(k)!r}" for k in keys if saved.get(k) != runtime.get(k)]


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Rebuild model, optimizer and config from a checkpoint.

    When ``expected`` is given the stored architecture must match it.
    """
    header = read_header(path)
    model_cfg = ModelConfig.from_dict(header["model_config"])
    if expected is not None:
        diff = config_diff(model_cfg.to_dict(), expected.to_dict())
        if diff:
            raise CheckpointMismatchError("checkpoint/runtime config mismatch: " + "; ".join(diff))
    config = TrainConfig.from_dict(header["train_config"])
    model = ColorizationNet(model_cfg)
    with safe_open(str(path), framework="pt") as fh:
        keys = list(fh.keys())
        state = {k[len("model/") :]: fh.get_tensor(k) for k in keys if k.startswith("model/")}
        optim_tensors = {k: fh.get_tensor(k) for k in keys if k.startswith("optim/")}
    model.load_state_dict(state)
    model.weights_loaded = True
    optimizer = make_optimizer(model, config)
    if optim_tensors:
        opt_state = {}
        for key, value in optim_tensors.items():
            _, idx, name = key.split("/")
            opt_state.setdefault(int(idx), {})[name] = value
        groups = header["param_groups"]
        groups[0]["params"] = list(range(len(list(model.parameters()))))
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    return Checkpoint(model, optimizer, config, header["step"], header["epoch"], header.get("batch_in_epoch", 0), header)


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    def __init__(self, config: TrainConfig, images, labels=None, class_names=None, resume_from=None):
        if len(images) == 0:
            raise EmptyDatasetError("no training images")
        self.config = config
        self.images = list(images)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.class_names = class_names
        if resume_from is not None:
            ck = load_checkpoint(resume_from, expected=config.model_config())
            self.model, self.optimizer = ck.model, ck.optimizer
            self.step, self.epoch, self.batch_in_epoch = ck.step, ck.epoch, ck.batch_in_epoch
        else:
            torch.manual_seed(config.seed)
            self.model = ColorizationNet(config.model_config())
            self.optimizer = make_optimizer(self.model, config)
            self.step = self.epoch = self.batch_in_epoch = 0
        self.train_idx, self.val_idx = split_validation(len(self.images), config.val_fraction, config.seed)
        self.out_dir = Path(config.out_dir)
        self.history: list[dict] = []
        self.best_val = float("inf")

    # -- batches --------------------------------------------------------
    def epoch_order(self, epoch: int) -> np.ndarray:
        return self.train_idx[np.random.default_rng([self.config.seed, 2, epoch]).permutation(len(self.train_idx))]

    def batch_for(self, indices, epoch: int) -> Batch:
        rngs = [np.random.default_rng([self.config.seed, 3, epoch, int(i)]) for i in indices]
        return make_batch(self.images, self.labels, indices, rngs, self.config.violent_prob)

    def fixed_batch(self, indices, salt: int = 0) -> Batch:
        """Batch with epoch-independent references, for evaluation."""
        rngs = [np.random.default_rng([self.config.seed, 4, salt, int(i)]) for i in indices]
        return make_batch(self.images, self.labels, indices, rngs, 0.0)

    # -- steps ----------------------------------------------------------
    def forward(self, batch: Batch, rng) -> ForwardOutput:
        return self.model(
            batch.target_L, batch.reference, mode="sparse", k=self.config.k, r=self.config.r, rng=rng, class_ids=batch.labels
        )

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        rng = np.random.default_rng([self.config.seed, 5, self.step])
        out = self.forward(batch, rng)
        parts = compute_losses(out, batch, self.config.weights)
        try:
            loss = total_loss(parts, self.config.weights)
        except NonFiniteLossError as exc:
            path = self.save(self.out_dir / "last_good.safetensors")
            raise TrainingAborted(f"step {self.step}: {exc}; last good weights at {path}", path) from exc
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self.model.weights_loaded = True
        row = {"step": self.step, "total": float(loss.detach())}
        for name, col in (("stage1", "L_stage1"), ("stage2", "L_stage2"), ("cls", "L_cls"), ("his", "L_his"), ("tv", "L_TV")):
            row[col] = float(parts[name].detach()) if name in parts else 0.0
        self.history.append(row)
        return row

    @torch.no_grad()
    def stage2_loss(self, indices, salt: int = 0, batch_size: int | None = None) -> float:
        """Mean final-stage smooth-L1 over ``indices`` with fixed TPS references."""
        self.model.eval()
        bs = batch_size or self.config.batch_size
        total, count = 0.0, 0
        for s in range(0, len(indices), bs):
            chunk = indices[s : s + bs]
            batch = self.fixed_batch(chunk, salt)
            out = self.model(batch.target_L, batch.reference, k=self.config.k, r=self.config.r, rng=np.random.default_rng(0))
            total += float(smooth_l1(out.ab, batch.gt_ab, self.config.weights.delta)) * len(chunk)
            count += len(chunk)
        return total / max(count, 1)

    def save(self, path) -> Path:
        extra = {"class_names": self.class_names} if self.class_names else None
        return save_checkpoint(path, self.model, self.optimizer, self.config, self.step, self.epoch, self.batch_in_epoch, extra)

    def _write_log(self, rows):
        path = self.out_dir / "loss_log.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if new:
                writer.writeheader()
            for row in rows:
                writer.writerow({k: (row[k] if k == "step" else f"{row[k]:.8g}") for k in LOG_COLUMNS})

    def fit(self) -> Path:
        """Run until ``epochs`` or ``max_steps``; returns the last checkpoint path."""
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        bs = cfg.batch_size
        last = None
        while self.epoch < cfg.epochs:
            order = self.epoch_order(self.epoch)
            n_batches = (len(order) + bs - 1) // bs
            pending = []
            while self.batch_in_epoch < n_batches:
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    break
                chunk = order[self.batch_in_epoch * bs : (self.batch_in_epoch + 1) * bs]
                row = self.train_step(self.batch_for(chunk, self.epoch))
                self.batch_in_epoch += 1
                pending.append(row)
                if self.step % 50 == 0:
                    log.info("step %d total %.4f stage2 %.5f", self.step, row["total"], row["L_stage2"])
            self._write_log(pending)
            if self.batch_in_epoch < n_batches:  # stopped by max_steps
                last = self.save(self.out_dir / "last.safetensors")
                break
            self.epoch += 1
            self.batch_in_epoch = 0
            last = self.save(self.out_dir / "last.safetensors")
            if cfg.keep_epoch_checkpoints:
                self.save(self.out_dir / f"epoch_{self.epoch:03d}.safetensors")
            score = self.stage2_loss(self.val_idx) if len(self.val_idx) else float(np.mean([r["L_stage2"] for r in pending]))
            if score < self.best_val:
                self.best_val = score
                self.save(self.out_dir / "best.safetensors")
        if last is None:
            last = self.save(self.out_dir / "last.safetensors")
        return last


def train(config: TrainConfig, resume_from=None) -> Path:
    """Train on ``config.dataset_root`` (or ``$SSCN_DATA``); returns the last checkpoint path."""
    config = config.with_env() if config.dataset_root is None else config
    if config.dataset_root is None:
        raise EmptyDatasetError(f"no dataset root given (set dataset_root or ${DATA_ENV})")
    images, labels, classes = load_image_folder(config.dataset_root, config.resolution)
    if labels.max() >= config.class_count:
        raise ValueError(f"dataset has {labels.max() + 1} classes but class_count is {config.class_count}")
    trainer = Trainer(config, images, labels, classes, resume_from=resume_from)
    return trainer.fit()
