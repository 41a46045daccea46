"""Desk-scale overfit run used by the slow checks.

Trains on 50 fixed 96x96 crops for 2000 steps and measures the stage-2
smooth-L1 before and after, plus self-augmentation PSNR with TPS references.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

from sparsecolor.color_space import LabImage, denormalize_ab, lab_to_rgb, to_uint8
from sparsecolor.datasets import desk_images
from sparsecolor.evaluator import psnr
from sparsecolor.model import coarse_colorize, colorize
from sparsecolor.trainer import Trainer, TrainConfig
from sparsecolor.warp import make_eval_triplet

OVERFIT_IMAGES = 50
OVERFIT_STEPS = 2000
OVERFIT_BATCH = 4


def run_overfit(out_dir, steps: int = OVERFIT_STEPS, batch_size: int = OVERFIT_BATCH) -> dict:
    """Train, measure, and cache the numbers in ``out_dir/result.json``."""
    out_dir = Path(out_dir)
    cached = out_dir / "result.json"
    if cached.exists():
        return json.loads(cached.read_text())
    images, labels = desk_images(OVERFIT_IMAGES, 96, seed=0)
    config = TrainConfig.desk(
        batch_size=batch_size,
        max_steps=steps,
        epochs=10**6,
        val_fraction=0.0,
        keep_epoch_checkpoints=False,
        out_dir=str(out_dir),
    )
    trainer = Trainer(config, images, labels)
    everything = np.arange(len(images))
    initial = trainer.stage2_loss(everything)
    start = time.perf_counter()
    checkpoint = trainer.fit()
    seconds = time.perf_counter() - start
    final = trainer.stage2_loss(everything)

    model = trainer.model
    tps, coarse = [], []
    for i, img in enumerate(images):
        L, ref, gt = make_eval_triplet(img, "TPS", np.random.default_rng([7, i]))
        tps.append(psnr(to_uint8(lab_to_rgb(colorize(model, L, ref, k=config.k, r=config.r))), gt))
        ab = np.clip(denormalize_ab(coarse_colorize(model, L, img)), -110, 110)
        coarse.append(psnr(to_uint8(lab_to_rgb(LabImage(L, ab[..., 0], ab[..., 1]))), gt))
    result = {
        "steps": trainer.step,
        "batch_size": batch_size,
        "train_seconds": seconds,
        "initial_stage2": initial,
        "final_stage2": final,
        "ratio": final / initial,
        "tps_psnr": float(np.mean(tps)),
        "coarse_self_psnr": float(np.mean(coarse)),
        "checkpoint": str(checkpoint),
    }
    cached.write_text(json.dumps(result, indent=2))
    return result


if __name__ == "__main__":
    print(json.dumps(run_overfit(sys.argv[1] if len(sys.argv) > 1 else "overfit-run"), indent=2))
