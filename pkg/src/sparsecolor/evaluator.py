"""Self-augmentation evaluation: PSNR/SSIM (and HIS) against the original color image."""

from __future__ import annotations

import csv
import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .color_space import LabImage, lab_to_rgb, to_uint8
from .warp import AUG_TYPES, materialize, read_manifest

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
HIS_BINS = 32
REPORT_COLOR_SPACE = "RGB"


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img_a, img_b) -> float:
    """PSNR in dB over all channels of two 8-bit-range images, capped at 99 dB."""
    a, b = _pair(img_a, img_b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10 * np.log10(255.0**2 / mse), PSNR_CAP))


def rgb_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(img_a, img_b) -> float:
    """Mean SSIM of the luma channel over all fully-contained 11x11 Gaussian windows."""
    a, b = _pair(img_a, img_b)
    a, b = rgb_luma(a), rgb_luma(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    half = SSIM_WINDOW // 2
    crop = (slice(half, a.shape[0] - half), slice(half, a.shape[1] - half))

    def filt(x):
        return ndimage.correlate(x, win, mode="constant")[crop]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def his(pred, reference, bins: int = HIS_BINS) -> float:
    """Histogram intersection of per-channel normalized 32-bin histograms, averaged over channels."""
    p = np.asarray(pred)
    r = np.asarray(reference)
    if p.shape[-1] != r.shape[-1]:
        raise ValueError("images must have the same channel count")
    total = 0.0
    for c in range(p.shape[-1]):
        hp, _ = np.histogram(p[..., c], bins=bins, range=(0, 256))
        hr, _ = np.histogram(r[..., c], bins=bins, range=(0, 256))
        total += np.minimum(hp / hp.sum(), hr / hr.sum()).sum()
    return float(total / p.shape[-1])


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalRow:
    source_path: str
    aug_type: str
    seed: int
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    manifest_hash: str
    method: str = "ours"
    checkpoint: str = ""
    missing: list[str] = field(default_factory=list)
    total: int = 0

    @property
    def coverage(self) -> float:
        return len(self.rows) / self.total if self.total else 0.0

    def aug_types(self):
        return [a for a in AUG_TYPES if any(r.aug_type == a for r in self.rows)]

    def mean(self, aug: str) -> tuple[float, float]:
        sel = [r for r in self.rows if r.aug_type == aug]
        return float(np.mean([r.psnr for r in sel])), float(np.mean([r.ssim for r in sel]))

    def overall(self) -> tuple[float, float]:
        """Mean of the per-augmentation means (the table's Mean column)."""
        cols = [self.mean(a) for a in self.aug_types()]
        return float(np.mean([c[0] for c in cols])), float(np.mean([c[1] for c in cols]))

    def header_lines(self) -> list[str]:
        return [
            f"# method={self.method}",
            f"# metric_color_space={REPORT_COLOR_SPACE}",
            f"# manifest_sha256={self.manifest_hash}",
            f"# checkpoint={self.checkpoint}",
            f"# coverage={len(self.rows)}/{self.total}",
        ] + [f"# missing={m}" for m in self.missing]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("\n".join(self.header_lines()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_path", "aug_type", "seed", "psnr", "ssim"])
        for r in self.rows:
            w.writerow([r.source_path, r.aug_type, r.seed, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
        for aug in self.aug_types():
            p, s = self.mean(aug)
            w.writerow(["MEAN", aug, "", f"{p:.6f}", f"{s:.6f}"])
        if self.rows:
            p, s = self.overall()
            w.writerow(["MEAN", "Mean", "", f"{p:.6f}", f"{s:.6f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".txt").write_text(render_table([self]))


def render_table(reports) -> str:
    """Text table with one row per method and ``PSNR/SSIM`` cells per augmentation plus Mean."""
    augs = list(AUG_TYPES)
    head = ["Methods"] + augs + ["Mean"]
    lines = []
    for rep in reports:
        cells = [rep.method]
        present = rep.aug_types()
        for a in augs:
            cells.append("{:.2f}/{:.3f}".format(*rep.mean(a)) if a in present else "-")
        cells.append("{:.2f}/{:.3f}".format(*rep.overall()) if rep.rows else "-")
        lines.append(cells)
    widths = [max(len(row[i]) for row in [head] + lines) for i in range(len(head))]
    fmt = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head), sep] + [fmt(r) for r in lines]) + "\n"


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _to_rgb(result) -> np.ndarray:
    if isinstance(result, LabImage):
        return to_uint8(lab_to_rgb(result))
    return to_uint8(np.asarray(result, dtype=np.float64))


def evaluate(
    colorize_fn,
    manifest_path,
    aug_types=AUG_TYPES,
    resolution: int = 256,
    method: str = "ours",
    checkpoint: str = "",
    jobs: int = 1,
) -> EvalReport:
    """Colorize every manifest triplet and score it against the original image.

    ``colorize_fn(target_L, reference_rgb)`` returns a :class:`LabImage` or an
    RGB array; it never sees the ground truth. Missing source files are listed
    in the report instead of aborting.
    """
    entries = [e for e in read_manifest(manifest_path) if e["aug_type"] in aug_types]

    def load(entry):
        try:
            return materialize(entry, manifest_path, resolution)
        except FileNotFoundError:
            return None

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            triplets = list(pool.map(load, entries))
    else:
        triplets = [load(e) for e in entries]

    rows, missing = [], []
    for entry, trip in zip(entries, triplets):
        if trip is None:
            missing.append(entry["source_path"])
            continue
        target_L, reference, gt_rgb = trip
        pred = _to_rgb(colorize_fn(target_L.copy(), reference.copy()))
        rows.append(EvalRow(entry["source_path"], entry["aug_type"], int(entry["seed"]), psnr(pred, gt_rgb), ssim(pred, gt_rgb)))
    return EvalReport(rows, file_sha256(manifest_path), method, checkpoint, sorted(set(missing)), len(entries))
