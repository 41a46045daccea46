import math

import numpy as np
import pytest

from oracles import loop_his, loop_psnr, loop_ssim

import sparsecolor.warp as warp
from sparsecolor.color_space import LabImage, rgb_to_lab
from sparsecolor.evaluator import (
    PSNR_CAP,
    EvalReport,
    EvalRow,
    evaluate,
    his,
    psnr,
    render_table,
    ssim,
)
from sparsecolor.warp import write_manifest


@pytest.fixture
def pair(rng):
    a = rng.integers(0, 256, size=(20, 18, 3)).astype(np.uint8)
    b = np.clip(a.astype(int) + rng.integers(-30, 30, size=a.shape), 0, 255).astype(np.uint8)
    return a, b


def test_psnr_cases(pair):
    a, b = pair
    assert psnr(a, a) == PSNR_CAP
    off = np.clip(a.astype(int), 0, 239)
    assert abs(psnr(off, off + 16) - 10 * math.log10(255**2 / 256)) < 1e-12
    assert abs(psnr(a, b) - loop_psnr(a.astype(float), b.astype(float))) < 1e-9
    assert psnr(a, b) == psnr(b, a)


def test_ssim_cases(pair, rng):
    a, b = pair
    assert abs(ssim(a, a) - 1) < 1e-12
    assert abs(ssim(a, b) - loop_ssim(a.astype(float), b.astype(float))) < 1e-6
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    noisy = rng.integers(0, 256, size=(32, 32)).astype(float)
    assert ssim(noisy, 255 - noisy) < 0.3


def test_ssim_constant_window_by_hand():
    c, k = 100.0, 20.0
    a, b = np.full((11, 11), c), np.full((11, 11), c + k)
    c1 = (0.01 * 255) ** 2
    want = (2 * c * (c + k) + c1) / (c**2 + (c + k) ** 2 + c1)
    assert abs(ssim(a, b) - want) < 1e-12
    assert want < 1
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_his_cases(pair):
    a, b = pair
    assert abs(his(a, a) - 1) < 1e-12
    dark, light = np.zeros((4, 4, 3), np.uint8), np.full((4, 4, 3), 255, np.uint8)
    assert his(dark, light) == 0
    assert abs(his(a, b) - loop_his(a, b)) < 1e-9


# -- reports -------------------------------------------------------------------


def _copy_chroma(L, ref):
    """Oracle colorizer: the reference's own chroma on the target luminance."""
    lab = rgb_to_lab(ref)
    return LabImage(L, lab.a, lab.b)


def test_identity_tps_copy_oracle_is_capped(smoke_dir, monkeypatch):
    monkeypatch.setattr(warp, "random_spec", lambda rng, **kw: warp.TpsWarpSpec.identity())
    rep = evaluate(_copy_chroma, smoke_dir / "manifest.jsonl", ["TPS"], resolution=96)
    assert len(rep.rows) == 5
    assert all(r.psnr == PSNR_CAP and abs(r.ssim - 1) < 1e-12 for r in rep.rows)


def test_colorizer_sees_only_target_and_reference(smoke_dir):
    calls = []

    def spy(*args, **kwargs):
        calls.append((args, kwargs))
        return np.zeros(args[1].shape)

    evaluate(spy, smoke_dir / "manifest.jsonl", ["RR"], resolution=96)
    assert calls and all(len(a) == 2 and not kw for a, kw in calls)
    assert all(a[0].ndim == 2 and a[1].shape[-1] == 3 for a, _ in calls)


def test_mean_column_and_layout():
    rows = [
        EvalRow("x.png", "TPS", 1, 30.0, 0.9),
        EvalRow("y.png", "TPS", 2, 32.0, 0.8),
        EvalRow("x.png", "RR", 3, 20.0, 0.7),
        EvalRow("x.png", "RC", 4, 25.0, 0.6),
    ]
    rep = EvalReport(rows, "abc", method="toy", total=4)
    p, s = rep.overall()
    assert abs(p - (31 + 20 + 25) / 3) < 1e-12 and abs(s - (0.85 + 0.7 + 0.6) / 3) < 1e-12
    table = render_table([rep]).splitlines()
    assert table[0].split(" | ")[0].strip() == "Methods"
    assert [c.strip() for c in table[0].split("|")] == ["Methods", "TPS", "RR", "RC", "Mean"]
    assert "31.00/0.850" in table[2] and "25.33/0.717" in table[2]
    csv_text = rep.to_csv()
    assert "# metric_color_space=RGB" in csv_text and "MEAN,Mean," in csv_text


def test_report_regenerates_byte_identically(smoke_dir, tmp_path):
    fn = lambda L, ref: _copy_chroma(L, ref)
    a = evaluate(fn, smoke_dir / "manifest.jsonl", resolution=96, jobs=2)
    b = evaluate(fn, smoke_dir / "manifest.jsonl", resolution=96, jobs=1)
    a.write(tmp_path / "a.csv")
    b.write(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_missing_sources_are_listed(tmp_path, smoke_dir):
    rows = [
        {"source_path": str(smoke_dir / "coffee.png"), "aug_type": "RC", "seed": 1},
        {"source_path": "gone.png", "aug_type": "RC", "seed": 2},
    ]
    write_manifest(tmp_path / "m.jsonl", rows)
    rep = evaluate(_copy_chroma, tmp_path / "m.jsonl", resolution=96)
    assert rep.missing == ["gone.png"] and rep.coverage == 0.5
    assert "# missing=gone.png" in rep.to_csv()
