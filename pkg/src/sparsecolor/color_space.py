"""sRGB <-> CIE Lab conversion and the quantized ab gamut.

Lab values use the D65 white point. Chroma planes enter and leave the
networks divided by :data:`AB_SCALE` so they live in [-1, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

AB_SCALE = 110.0
GRID_SIZE = 10
Q_BINS = 313
SOFT_NEIGHBORS = 5
SOFT_SIGMA = 5.0
DEFAULT_TEMPERATURE = 0.38

# IEC 61966-2-1 primaries, D65 white
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


@dataclass(frozen=True)
class LabImage:
    """Luminance plane plus two chroma planes, all ``(H, W)`` float64."""

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.L), np.shape(self.a), np.shape(self.b)}
        if len(shapes) != 1 or np.ndim(self.L) != 2:
            raise ValueError(f"L, a, b must be equal 2-D planes, got {sorted(shapes)}")

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]

    @property
    def ab(self) -> np.ndarray:
        return np.stack([self.a, self.b], axis=-1)

    def to_array(self) -> np.ndarray:
        return np.stack([self.L, self.a, self.b], axis=-1)

    @classmethod
    def from_array(cls, lab: np.ndarray) -> "LabImage":
        lab = np.asarray(lab, dtype=np.float64)
        if lab.ndim != 3 or lab.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) Lab array, got shape {lab.shape}")
        return cls(
            np.clip(lab[..., 0], 0.0, 100.0),
            np.clip(lab[..., 1], -AB_SCALE, AB_SCALE),
            np.clip(lab[..., 2], -AB_SCALE, AB_SCALE),
        )

    @classmethod
    def from_planes(cls, L: np.ndarray, ab: np.ndarray) -> "LabImage":
        ab = np.asarray(ab, dtype=np.float64)
        return cls.from_array(np.concatenate([np.asarray(L, np.float64)[..., None], ab], axis=-1))


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    return image


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_finv(f):
    return np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))


def rgb_array_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Vectorized sRGB (``[..., 3]`` in 0-255, any float) to Lab, no range clipping."""
    lin = _srgb_to_linear(np.asarray(rgb, dtype=np.float64) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T / WHITE_D65
    f = _lab_f(xyz)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_array_to_linear_rgb(lab: np.ndarray) -> np.ndarray:
    """Lab to *unclamped* linear RGB in [0, 1] units; out-of-gamut shows as <0 or >1."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_finv(np.stack([fx, fy, fz], axis=-1)) * WHITE_D65
    return xyz @ _XYZ_TO_RGB.T


def rgb_to_lab(image: np.ndarray) -> LabImage:
    """Convert an ``(H, W, 3)`` sRGB image with values in [0, 255] to Lab."""
    image = _check_rgb(image)
    return LabImage.from_array(rgb_array_to_lab(image))


def lab_to_rgb(img: LabImage) -> np.ndarray:
    """Convert Lab back to sRGB as float64 in [0, 255]; out-of-gamut colors clamp.

    Use :func:`to_uint8` for a displayable 8-bit image.
    """
    return _linear_to_srgb(lab_array_to_linear_rgb(img.to_array())) * 255.0


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def luminance(image: np.ndarray) -> np.ndarray:
    """Lab L plane of an RGB image."""
    return rgb_to_lab(image).L


# ---------------------------------------------------------------------------
# quantized ab space


def _displayable_ab(samples_per_edge: int = 256) -> np.ndarray:
    # The ab projection of the sRGB solid is traced by the faces of the RGB cube.
    v = np.linspace(0.0, 255.0, samples_per_edge)
    u, w = (g.ravel() for g in np.meshgrid(v, v, indexing="ij"))
    faces = []
    for c in (0.0, 255.0):
        k = np.full_like(u, c)
        faces += [np.stack([k, u, w], 1), np.stack([u, k, w], 1), np.stack([u, w, k], 1)]
    return rgb_array_to_lab(np.concatenate(faces))[:, 1:]


@dataclass(frozen=True, eq=False)
class AbGamut:
    """Quantized ab bin centers (``(Q, 2)``) with a lattice-cell reverse index."""

    centers: np.ndarray
    grid_size: int = GRID_SIZE
    index: dict = field(default_factory=dict, compare=False)
    _tree: cKDTree = field(default=None, compare=False, repr=False)

    @property
    def size(self) -> int:
        return len(self.centers)

    def bin_of(self, a: float, b: float) -> int | None:
        """Bin id of the lattice cell containing ``(a, b)``, or None if outside the gamut."""
        key = (int(np.round(a / self.grid_size)), int(np.round(b / self.grid_size)))
        return self.index.get(key)

    def nearest(self, ab: np.ndarray, k: int = 1):
        """Distances and ids of the ``k`` nearest centers for ``[..., 2]`` chroma values."""
        ab = np.asarray(ab, dtype=np.float64)
        dist, idx = self._tree.query(ab.reshape(-1, 2), k=k)
        shape = ab.shape[:-1] + ((k,) if k > 1 else ())
        return dist.reshape(shape), idx.reshape(shape)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b"])
            for a, b in self.centers:
                writer.writerow([int(a), int(b)])


@lru_cache(maxsize=4)
def build_gamut(q: int = Q_BINS, grid_size: int = GRID_SIZE, extent: float = AB_SCALE) -> AbGamut:
    """The ``q`` lattice cells closest to the displayable sRGB chroma region.

    Cells are ranked by the Euclidean distance from their center to the
    sampled ab projection of the sRGB solid; ties break by (a, b). For grid
    10 the 313th and 314th cells sit 13.7 and 14.2 units away, so the set
    does not depend on the sampling density.
    """
    steps = np.arange(-extent, extent + 1e-9, grid_size)
    aa, bb = np.meshgrid(steps, steps, indexing="ij")
    lattice = np.stack([aa.ravel(), bb.ravel()], axis=1)
    dist, _ = cKDTree(_displayable_ab()).query(lattice)
    order = np.lexsort((lattice[:, 1], lattice[:, 0], np.round(dist, 6)))
    if q > len(order):
        raise ValueError(f"only {len(order)} lattice cells available, {q} requested")
    keep = np.sort(order[:q])
    centers = lattice[keep]
    centers.setflags(write=False)
    if len(centers) != q:
        raise RuntimeError(f"gamut construction produced {len(centers)} bins, expected {q}")
    index = {
        (int(round(a / grid_size)), int(round(b / grid_size))): i for i, (a, b) in enumerate(centers)
    }
    return AbGamut(centers=centers, grid_size=grid_size, index=index, _tree=cKDTree(centers))


def encode_ab(
    ab: np.ndarray,
    gamut: AbGamut,
    neighbors: int = SOFT_NEIGHBORS,
    sigma: float = SOFT_SIGMA,
) -> np.ndarray:
    """Soft-encode ``[..., 2]`` chroma (Lab units) over the gamut bins.

    Each pixel spreads Gaussian weights over its ``neighbors`` nearest bin
    centers. Returns ``[..., Q]`` probabilities.
    """
    ab = np.asarray(ab, dtype=np.float64)
    dist, idx = gamut.nearest(ab, k=neighbors)
    dist = dist.reshape(-1, neighbors)
    idx = idx.reshape(-1, neighbors)
    # shift by the nearest distance so far-away values do not underflow
    d2 = dist**2 - dist[:, :1] ** 2
    w = np.exp(-d2 / (2 * sigma**2))
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((len(idx), gamut.size))
    np.put_along_axis(out, idx, w, axis=1)
    return out.reshape(ab.shape[:-1] + (gamut.size,))


def decode_distribution(
    dist: np.ndarray, gamut: AbGamut, temperature: float = DEFAULT_TEMPERATURE
) -> np.ndarray:
    """Annealed-mean decode of ``[..., Q]`` distributions to ``[..., 2]`` chroma.

    ``temperature=1`` is the plain mean; ``temperature=0`` picks the mode.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if temperature <= 0:
        return gamut.centers[np.argmax(dist, axis=-1)].astype(np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(dist) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ gamut.centers


def normalize_ab(ab):
    return ab / AB_SCALE


def denormalize_ab(ab):
    return ab * AB_SCALE


def normalize_l(L):
    return L / 50.0 - 1.0


def denormalize_l(L):
    return (L + 1.0) * 50.0


# ---------------------------------------------------------------------------
# image files


def read_image(path) -> np.ndarray:
    """Load PNG/JPEG as ``(H, W, 3)`` uint8 RGB; gray files are replicated."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_luminance(path) -> np.ndarray:
    """Lab L plane of an image file (color files are converted)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            gray = np.asarray(im.convert("L"), dtype=np.float64)
            return luminance(np.repeat(gray[..., None], 3, axis=-1))
        return luminance(np.asarray(im.convert("RGB")))


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Image.fromarray(image).save(path)


def fit_to_resolution(image: np.ndarray, resolution: int) -> np.ndarray:
    """Center-crop to a square and resize to ``resolution`` (bilinear)."""
    h, w = image.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = image[top : top + s, left : left + s]
    if s == resolution:
        return np.ascontiguousarray(crop)
    return np.asarray(Image.fromarray(crop).resize((resolution, resolution), Image.BILINEAR))


# 16-bit two-plane ab files: stored = round((ab + AB_PNG_OFFSET) * AB_PNG_SCALE)
AB_PNG_OFFSET = 128.0
AB_PNG_SCALE = 256.0


def write_ab_png(path, ab: np.ndarray) -> None:
    """Save ``(H, W, 2)`` ab planes as a 16-bit gray+alpha PNG (a in gray, b in alpha)."""
    import png

    ab = np.asarray(ab, dtype=np.float64)
    if ab.ndim != 3 or ab.shape[-1] != 2:
        raise ValueError(f"ab must be (H, W, 2), got {ab.shape}")
    stored = np.clip(np.round((ab + AB_PNG_OFFSET) * AB_PNG_SCALE), 0, 65535).astype(np.uint16)
    h, w = stored.shape[:2]
    writer = png.Writer(width=w, height=h, greyscale=True, alpha=True, bitdepth=16)
    with open(path, "wb") as fh:
        writer.write(fh, stored.reshape(h, w * 2))


def read_ab_png(path) -> np.ndarray:
    import png

    w, h, rows, info = png.Reader(filename=str(path)).read()
    if info["bitdepth"] != 16 or info["planes"] != 2:
        raise ValueError(f"{path} is not a 16-bit two-plane ab PNG")
    stored = np.vstack([np.asarray(r, dtype=np.float64) for r in rows]).reshape(h, w, 2)
    return stored / AB_PNG_SCALE - AB_PNG_OFFSET
