import json
import time

import numpy as np
import pytest
import torch
from PIL import Image

from sparsecolor.cli import main
from sparsecolor.color_space import read_ab_png, read_image, rgb_to_lab
from sparsecolor.datasets import write_image_folder
from sparsecolor.model import ColorizationNet
from sparsecolor.trainer import TrainConfig, save_checkpoint


@pytest.fixture(scope="module")
def desk_checkpoint(tmp_path_factory):
    config = TrainConfig.desk()
    torch.manual_seed(0)
    model = ColorizationNet(config.model_config())
    return save_checkpoint(tmp_path_factory.mktemp("ck") / "desk.safetensors", model, None, config)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_colorize_and_ab_png(desk_checkpoint, smoke_dir, tmp_path, capsys):
    out, ab = tmp_path / "c.png", tmp_path / "ab.png"
    args = ["colorize", "--checkpoint", desk_checkpoint, "--target", smoke_dir / "chelsea.png",
            "--ref", smoke_dir / "coffee.png", "--mode", "sparse", "--k", 36, "--r", 36, "--out", out, "--save-ab", ab]
    code, _, err = run(args, capsys)
    assert code == 0, err
    rgb = read_image(out)
    assert rgb.shape == (96, 96, 3)
    planes = read_ab_png(ab)
    assert planes.shape == (96, 96, 2)
    # the PNG carries the same chroma that produced the RGB output, to 8-bit rounding
    assert np.abs(rgb_to_lab(rgb).ab - planes).mean() < 2.0


def test_dense_and_full_sparse_files_identical(desk_checkpoint, smoke_dir, tmp_path, capsys):
    common = ["--checkpoint", desk_checkpoint, "--target", smoke_dir / "rocket.png", "--ref", smoke_dir / "astronaut.png"]
    assert run(["colorize", *common, "--mode", "dense", "--out", tmp_path / "d.png"], capsys)[0] == 0
    assert run(["colorize", *common, "--k", 300, "--r", 276, "--out", tmp_path / "s.png"], capsys)[0] == 0
    assert (tmp_path / "d.png").read_bytes() == (tmp_path / "s.png").read_bytes()


def test_seeded_runs_are_identical(desk_checkpoint, smoke_dir, tmp_path, capsys):
    common = ["colorize", "--checkpoint", desk_checkpoint, "--target", smoke_dir / "rocket.png",
              "--ref", smoke_dir / "coffee.png", "--seed", 11]
    run([*common, "--out", tmp_path / "a.png"], capsys)
    run([*common, "--out", tmp_path / "b.png"], capsys)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_k_r_guard_message(desk_checkpoint, tmp_path, capsys):
    rng = np.random.default_rng(0)
    img = tmp_path / "big.png"
    Image.fromarray(rng.integers(0, 256, size=(256, 256, 3)).astype(np.uint8)).save(img)
    code, _, err = run(["colorize", "--checkpoint", desk_checkpoint, "--target", img, "--ref", img,
                        "--k", 4096, "--r", 1, "--out", tmp_path / "x.png"], capsys)
    assert code != 0
    assert len(err.strip().splitlines()) == 1 and "k+r exceeds region count" in err


def test_errors_are_one_line(tmp_path, smoke_dir, capsys):
    code, _, err = run(["colorize", "--checkpoint", tmp_path / "none.safetensors", "--target", "a", "--ref", "b",
                        "--out", "c"], capsys)
    assert code == 1 and err.startswith("error: FileNotFoundError:") and err.count("\n") == 1
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run(["evaluate", "--checkpoint", bad, "--manifest", smoke_dir / "manifest.jsonl",
                        "--report", tmp_path / "r.csv"], capsys)
    assert code == 1 and err.startswith("error:") and err.count("\n") == 1
    code, _, err = run(["colorize", "--unknown-flag"], capsys)
    assert code == 2 and err.startswith("error: usage:")
    code, _, err = run(["paint"], capsys)
    assert code == 2


def test_evaluate_smoke_manifest_under_a_minute(desk_checkpoint, smoke_dir, tmp_path, capsys):
    report = tmp_path / "report.csv"
    start = time.perf_counter()
    code, out, err = run(["evaluate", "--manifest", smoke_dir / "manifest.jsonl", "--checkpoint", desk_checkpoint,
                          "--report", report, "--jobs", 2], capsys)
    assert code == 0, err
    assert time.perf_counter() - start < 60
    text = report.read_text()
    assert "# coverage=15/15" in text and "MEAN,Mean" in text
    assert report.with_suffix(".txt").read_text().startswith("Methods")
    first = report.read_bytes()
    run(["evaluate", "--manifest", smoke_dir / "manifest.jsonl", "--checkpoint", desk_checkpoint,
         "--report", report], capsys)
    assert report.read_bytes() == first


def test_make_manifest(tmp_path, smoke_dir, capsys):
    images = tmp_path / "imgs"
    images.mkdir()
    for name in ("chelsea.png", "coffee.png"):
        (images / name).write_bytes((smoke_dir / name).read_bytes())
    out = tmp_path / "m.jsonl"
    code, _, err = run(["make-manifest", "--images", images, "--out", out, "--aug", "TPS,RC", "--seed", 3,
                        "--digest-resolution", 96], capsys)
    assert code == 0, err
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 4 and rows[0]["source_path"] == "imgs/chelsea.png" and "digest" in rows[0]
    again = tmp_path / "m2.jsonl"
    run(["make-manifest", "--images", images, "--out", again, "--aug", "TPS,RC", "--seed", 3,
         "--digest-resolution", 96], capsys)
    assert again.read_bytes() == out.read_bytes()
    code, _, err = run(["make-manifest", "--images", images, "--out", out, "--aug", "TPS,XX"], capsys)
    assert code == 2


def test_dump_attention(desk_checkpoint, smoke_dir, tmp_path, capsys):
    out = tmp_path / "att.json"
    code, _, err = run(["dump-attention", "--checkpoint", desk_checkpoint, "--target", smoke_dir / "chelsea.png",
                        "--ref", smoke_dir / "coffee.png", "--out", out, "--queries", "0,100"], capsys)
    assert code == 0, err
    dump = json.loads(out.read_text())
    assert [r["query_index"] for r in dump["rows"]] == [0, 100]
    assert len(dump["rows"][0]["key_indices"]) == 72 == len(dump["rows"][0]["weights"])
    assert len(dump["selection"]["topk_indices"]) == 36 and dump["size"] == [96, 96]


def test_ablate_sweep_marks_invalid(desk_checkpoint, smoke_dir, tmp_path, capsys):
    report = tmp_path / "sweep.csv"
    code, out, err = run(["ablate", "--manifest", smoke_dir / "manifest.jsonl", "--checkpoint", desk_checkpoint,
                          "--report", report, "--aug", "TPS", "--sweep", "k=128,512", "r=0,128"], capsys)
    assert code == 0, err
    lines = report.read_text().splitlines()
    assert lines[0] == "k,r,status,psnr,ssim,note" and len(lines) == 5
    assert lines[-1].startswith("512,128,invalid")
    assert "k=128" in out


def test_train_and_variant_ablation(tmp_path, smoke_dir, monkeypatch, capsys):
    rng = np.random.default_rng(1)
    images = [rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8) for _ in range(4)]
    root = write_image_folder(tmp_path / "ds", images, [0, 1, 0, 1])
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"resolution": 32, "scale_factor": 0.125, "class_count": 2, "k": 8, "r": 8,
                                  "batch_size": 2, "epochs": 1, "val_fraction": 0.0}))
    monkeypatch.setenv("SSCN_DATA", str(root))
    code, out, err = run(["train", "--config", config, "--out-dir", tmp_path / "run", "--max-steps", 1], capsys)
    assert code == 0, err
    assert (tmp_path / "run" / "last.safetensors").exists()
    assert (tmp_path / "run" / "loss_log.csv").read_text().startswith("step,L_stage1,L_stage2")

    report = tmp_path / "ablate.csv"
    code, out, err = run(["ablate", "--config", config, "--manifest", smoke_dir / "manifest.jsonl",
                          "--report", report, "--variants", "two_stage,gray_query", "--out-dir", tmp_path / "abl",
                          "--aug", "TPS", "--resolution", 32], capsys)
    assert code == 0, err
    table = report.with_suffix(".txt").read_text().splitlines()
    assert [row.split("|")[0].strip() for row in table[2:]] == ["two_stage", "two_stage:coarse", "gray_query"]


def test_train_without_data_fails(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SSCN_DATA", raising=False)
    code, _, err = run(["train", "--desk", "--out-dir", tmp_path / "run"], capsys)
    assert code == 1 and "SSCN_DATA" in err
