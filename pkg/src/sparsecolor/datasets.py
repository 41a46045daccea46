"""Desk-scale labeled image sets cut from the color photos bundled with scikit-image.

Run ``python -m sparsecolor.datasets OUT_DIR`` to write an image-folder dataset.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

SOURCES = (
    "astronaut",
    "chelsea",
    "coffee",
    "rocket",
    "hubble_deep_field",
    "immunohistochemistry",
    "colorwheel",
    "retina",
)


def source_images() -> dict[str, np.ndarray]:
    from skimage import data

    return {name: np.ascontiguousarray(getattr(data, name)()[..., :3]) for name in SOURCES}


def desk_images(n: int = 50, resolution: int = 96, seed: int = 0):
    """``n`` random square crops, cycled over the source photos; label = source index."""
    rng = np.random.default_rng(seed)
    sources = list(source_images().values())
    images, labels = [], []
    for i in range(n):
        label = i % len(sources)
        src = sources[label]
        h, w = src.shape[:2]
        side = int(min(h, w) * rng.uniform(0.35, 0.8))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        crop = src[top : top + side, left : left + side]
        images.append(np.asarray(Image.fromarray(crop).resize((resolution, resolution), Image.BILINEAR)))
        labels.append(label)
    return images, np.asarray(labels, dtype=np.int64)


def write_image_folder(root, images, labels, class_names=None) -> Path:
    root = Path(root)
    for i, (img, label) in enumerate(zip(images, labels)):
        name = class_names[label] if class_names else f"class_{label:02d}"
        (root / name).mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(root / name / f"{i:05d}.png")
    return root


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    images, labels = desk_images(args.count, args.resolution, args.seed)
    write_image_folder(args.out_dir, images, labels, list(SOURCES))


if __name__ == "__main__":
    main()
