"""Command-line interface: ``sparsecolor <command> [flags]``.

Every command exits 0 on success. Failures print a single line
``error: <Kind>: <message>`` to stderr and exit 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .color_space import LabImage, denormalize_ab, read_image, read_luminance, write_ab_png, write_image
from .color_space import lab_to_rgb, to_uint8
from .evaluator import evaluate, render_table
from .ldt import attention_dump, write_attention_dump
from .losses import LossWeights
from .model import MODES, check_k_r, coarse_colorize, colorize, working_size
from .trainer import DATA_ENV, TrainConfig, load_checkpoint, train
from .warp import AUG_TYPES, build_manifest, write_manifest

log = logging.getLogger("sparsecolor")

VARIANTS = ("two_stage", "gray_query", "no_cls", "no_his")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _aug_list(text: str) -> list[str]:
    augs = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in augs if a not in AUG_TYPES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown aug types {bad}; choose from {list(AUG_TYPES)}")
    return augs


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return p


# ---------------------------------------------------------------------------
# configuration


def _train_config(args) -> TrainConfig:
    """Defaults (or the desk preset), then ``--config`` JSON, then explicit flags."""
    base = TrainConfig.desk() if getattr(args, "desk", False) else TrainConfig()
    d = base.to_dict()
    if args.config:
        with open(_existing(args.config)) as fh:
            d.update(json.load(fh))
    d["seed"] = args.seed
    for flag in ("epochs", "max_steps", "batch_size", "lr", "resolution", "stage_mode", "out_dir", "k", "r"):
        value = getattr(args, flag, None)
        if value is not None:
            d[flag] = value
    data = getattr(args, "data", None)
    if data:
        d["dataset_root"] = data
    config = TrainConfig.from_dict(d)
    return config if config.dataset_root else config.with_env()


def _load(path):
    return load_checkpoint(_existing(path))


def _k_r(args, ck):
    return (ck.config.k if args.k is None else args.k, ck.config.r if args.r is None else args.r)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config = _train_config(args)
    path = train(config, resume_from=_existing(args.resume) if args.resume else None)
    print(path)
    return 0


def cmd_colorize(args) -> int:
    ck = _load(args.checkpoint)
    k, r = _k_r(args, ck)
    target_L = read_luminance(_existing(args.target))
    reference = read_image(_existing(args.ref))
    lab = colorize(ck.model, target_L, reference, args.mode, k, r, seed=args.seed)
    write_image(args.out, to_uint8(lab_to_rgb(lab)))
    if args.save_ab:
        write_ab_png(args.save_ab, lab.ab)
    print(args.out)
    return 0


def _colorize_fn(ck, mode, k, r, seed, stage="final"):
    if stage == "coarse":
        return lambda L, ref: _coarse_lab(ck.model, L, ref)
    return lambda L, ref: colorize(ck.model, L, ref, mode, k, r, seed=seed)


def _coarse_lab(model, L, ref) -> LabImage:
    ab = np.clip(denormalize_ab(coarse_colorize(model, L, ref)), -110, 110)
    return LabImage(np.asarray(L, dtype=np.float64), ab[..., 0], ab[..., 1])


def cmd_evaluate(args) -> int:
    ck = _load(args.checkpoint)
    k, r = _k_r(args, ck)
    resolution = args.resolution or ck.config.resolution
    if args.mode == "sparse":
        check_k_r(k, r, resolution, resolution)
    report = evaluate(
        _colorize_fn(ck, args.mode, k, r, args.seed, args.stage),
        _existing(args.manifest),
        args.aug,
        resolution=resolution,
        method=args.method,
        checkpoint=Path(args.checkpoint).name,
        jobs=args.jobs,
    )
    report.write(args.report)
    print(render_table([report]), end="")
    return 0


def cmd_make_manifest(args) -> int:
    out = Path(args.out)
    sources = []
    for item in args.images:
        p = _existing(item)
        if p.is_dir():
            sources += sorted(q for q in p.rglob("*") if q.suffix.lower() in {".png", ".jpg", ".jpeg"})
        else:
            sources.append(p)
    if not sources:
        raise FileNotFoundError("no images found for the manifest")
    base = out.resolve().parent
    rel = []
    for s in sources:
        s = s.resolve()
        rel.append(s.relative_to(base) if s.is_relative_to(base) else s)
    rows = build_manifest(rel, args.aug, args.seed, args.digest_resolution, manifest_dir=base)
    write_manifest(out, rows)
    print(f"{len(rows)} entries -> {out}")
    return 0


def cmd_dump_attention(args) -> int:
    ck = _load(args.checkpoint)
    k, r = _k_r(args, ck)
    target_L = read_luminance(_existing(args.target))
    reference = read_image(_existing(args.ref))
    _, out = colorize(ck.model, target_L, reference, args.mode, k, r, seed=args.seed, return_output=True)
    key_index = None if out.key_index is None else out.key_index[0].numpy()
    selection = out.selections[0] if out.selections else None
    queries = _int_list(args.queries) if args.queries else None
    n_queries = out.attention.shape[1]
    if queries and (min(queries) < 0 or max(queries) >= n_queries):
        raise ValueError(f"query indices must lie in [0, {n_queries})")
    dump = attention_dump(out.attention[0], key_index, queries, selection)
    dump["size"] = list(working_size(*target_L.shape))
    write_attention_dump(args.out, dump)
    print(args.out)
    return 0


def _parse_sweep(items) -> tuple[list[int], list[int]]:
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        if key not in ("k", "r") or not values:
            raise UsageError(f"--sweep expects k=... and r=..., got {item!r}")
        grid[key] = _int_list(values)
    if set(grid) != {"k", "r"}:
        raise UsageError("--sweep needs both k=... and r=...")
    return grid["k"], grid["r"]


def _variant_config(config: TrainConfig, variant: str, out_root: Path) -> TrainConfig:
    w = config.weights
    changes = {"out_dir": str(out_root / variant)}
    if variant == "gray_query":
        changes["stage_mode"] = "gray_query"
    elif variant == "no_cls":
        changes["weights"] = LossWeights(**{**w.to_dict(), "cls": 0.0})
    elif variant == "no_his":
        changes["weights"] = LossWeights(**{**w.to_dict(), "his": 0.0})
    return replace(config, **changes)


def cmd_ablate(args) -> int:
    manifest = _existing(args.manifest)
    report_path = Path(args.report)
    if bool(args.sweep) == bool(args.variants):
        raise UsageError("give exactly one of --sweep or --variants")
    if args.sweep:
        if not args.checkpoint:
            raise UsageError("--sweep needs --checkpoint")
        ks, rs = _parse_sweep(args.sweep)
        ck = _load(args.checkpoint)
        res = args.resolution or ck.config.resolution
        rows = []
        for k in ks:
            for r in rs:
                try:
                    check_k_r(k, r, res, res)
                except ValueError as exc:
                    rows.append({"k": k, "r": r, "status": "invalid", "psnr": "", "ssim": "", "note": str(exc)})
                    continue
                rep = evaluate(_colorize_fn(ck, "sparse", k, r, args.seed), manifest, args.aug, res, jobs=args.jobs)
                p, s = rep.overall()
                rows.append({"k": k, "r": r, "status": "ok", "psnr": f"{p:.6f}", "ssim": f"{s:.6f}", "note": ""})
        with open(report_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["k", "r", "status", "psnr", "ssim", "note"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        lines = [f"k={row['k']:<5} r={row['r']:<5} " + (f"{float(row['psnr']):.2f}/{float(row['ssim']):.3f}" if row["status"] == "ok" else "invalid") for row in rows]
        report_path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        return 0

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
    base = _train_config(args)
    out_root = Path(args.out_dir or base.out_dir)
    reports = []
    for variant in variants:
        config = _variant_config(base, variant, out_root)
        ck = load_checkpoint(train(config))
        fn = _colorize_fn(ck, "sparse", config.k, config.r, args.seed)
        rep = evaluate(fn, manifest, args.aug, config.resolution, method=variant, checkpoint=variant, jobs=args.jobs)
        reports.append(rep)
        if variant == "two_stage":
            coarse = evaluate(_colorize_fn(ck, "", 0, 0, args.seed, "coarse"), manifest, args.aug, config.resolution,
                              method="two_stage:coarse", checkpoint=variant, jobs=args.jobs)
            reports.append(coarse)
    with open(report_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "aug_type", "psnr", "ssim"])
        for rep in reports:
            for aug in rep.aug_types():
                p, s = rep.mean(aug)
                w.writerow([rep.method, aug, f"{p:.6f}", f"{s:.6f}"])
            p, s = rep.overall()
            w.writerow([rep.method, "Mean", f"{p:.6f}", f"{s:.6f}"])
    table = render_table(reports)
    report_path.with_suffix(".txt").write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="training config JSON")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for loading evaluation triplets")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sparsecolor", description="Exemplar-based colorization.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def inference_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--mode", choices=MODES, default="sparse")
        sp.add_argument("--k", type=int, help="top-CAM regions (default: from checkpoint)")
        sp.add_argument("--r", type=int, help="random regions (default: from checkpoint)")

    def train_flags(sp):
        sp.add_argument("--data", help=f"image-folder dataset root (default: ${DATA_ENV})")
        sp.add_argument("--out-dir")
        sp.add_argument("--desk", action="store_true", help="small CPU preset (96x96, quarter widths, 10 classes)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--resolution", type=int)
        sp.add_argument("--k", type=int)
        sp.add_argument("--r", type=int)

    sp = sub.add_parser("train", parents=[common], help="train a model")
    train_flags(sp)
    sp.add_argument("--stage-mode", choices=("two_stage", "gray_query"))
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("colorize", parents=[common], help="colorize one gray image from a reference")
    inference_flags(sp)
    sp.add_argument("--target", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--save-ab", help="also write the ab planes as a 16-bit two-plane PNG")
    sp.set_defaults(func=cmd_colorize)

    sp = sub.add_parser("evaluate", parents=[common], help="self-augmentation PSNR/SSIM over a manifest")
    inference_flags(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--aug", type=_aug_list, default=list(AUG_TYPES))
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--method", default="ours")
    sp.add_argument("--stage", choices=("final", "coarse"), default="final")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("make-manifest", parents=[common], help="write an evaluation manifest (JSON lines)")
    sp.add_argument("--images", nargs="+", required=True, help="image files or directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--aug", type=_aug_list, default=list(AUG_TYPES))
    sp.add_argument("--digest-resolution", type=int, help="store triplet digests computed at this resolution")
    sp.set_defaults(func=cmd_make_manifest)

    sp = sub.add_parser("dump-attention", parents=[common], help="write attention rows and the sparse selection as JSON")
    inference_flags(sp)
    sp.add_argument("--target", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--queries", help="comma-separated query region indices (default: all)")
    sp.set_defaults(func=cmd_dump_attention)

    sp = sub.add_parser("ablate", parents=[common], help="k/r sweep or trained-variant comparison")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--aug", type=_aug_list, default=list(AUG_TYPES))
    sp.add_argument("--checkpoint", help="model for --sweep")
    sp.add_argument("--sweep", nargs="+", metavar="k=..|r=..")
    sp.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    train_flags(sp)
    sp.set_defaults(func=cmd_ablate, stage_mode=None)
    return p


def _one_line(exc: BaseException) -> str:
    msg = str(exc).replace("\n", " ").strip()
    if isinstance(exc, KeyError) and msg.startswith("'"):
        msg = msg.strip("'")
    return f"{type(exc).__name__}: {msg}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every failure becomes one parseable line
        log.debug("command failed", exc_info=True)
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
