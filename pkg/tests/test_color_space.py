import numpy as np
import pytest

from sparsecolor.color_space import (
    AB_SCALE,
    LabImage,
    build_gamut,
    decode_distribution,
    encode_ab,
    lab_array_to_linear_rgb,
    lab_to_rgb,
    read_ab_png,
    rgb_array_to_lab,
    rgb_to_lab,
    to_uint8,
    write_ab_png,
)


def _scalar_lab(r, g, b):
    """Textbook sRGB -> XYZ (D65) -> Lab, one color at a time."""

    def lin(c):
        c /= 255.0
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    R, G, B = lin(r), lin(g), lin(b)
    X = 0.4124564 * R + 0.3575761 * G + 0.1804375 * B
    Y = 0.2126729 * R + 0.7151522 * G + 0.0721750 * B
    Z = 0.0193339 * R + 0.1191920 * G + 0.9503041 * B
    # white = RGB(1, 1, 1) through the same matrix
    Xn = 0.4124564 + 0.3575761 + 0.1804375
    Yn = 0.2126729 + 0.7151522 + 0.0721750
    Zn = 0.0193339 + 0.1191920 + 0.9503041

    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29

    fx, fy, fz = f(X / Xn), f(Y / Yn), f(Z / Zn)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def test_black_and_white_points():
    lab = rgb_array_to_lab(np.array([[0, 0, 0], [255, 255, 255]], dtype=float))
    np.testing.assert_allclose(lab[0], 0, atol=1e-12)
    assert abs(lab[1, 0] - 100) < 1e-6
    assert abs(lab[1, 1]) < 0.5 and abs(lab[1, 2]) < 0.5


def test_lab_to_rgb_extremes():
    img = LabImage(np.array([[0.0, 100.0]]), np.zeros((1, 2)), np.zeros((1, 2)))
    rgb = lab_to_rgb(img)
    np.testing.assert_allclose(rgb[0, 0], 0, atol=1e-9)
    np.testing.assert_allclose(rgb[0, 1], 255, atol=1e-6)


def test_lab_matches_scalar_formula(rng):
    colors = rng.integers(0, 256, size=(200, 3)).astype(float)
    got = rgb_array_to_lab(colors)
    want = np.array([_scalar_lab(*c) for c in colors])
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_lab_close_to_skimage(rng):
    skcolor = pytest.importorskip("skimage.color")
    img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    ours = rgb_to_lab(img).to_array()
    theirs = skcolor.rgb2lab(img)
    # skimage rounds the primaries to 6 digits
    np.testing.assert_allclose(ours, theirs, atol=0.02)


def test_gray_128_round_trip():
    img = np.full((1, 1, 3), 128, dtype=np.uint8)
    back = lab_to_rgb(rgb_to_lab(img))
    assert np.abs(back - 128).max() <= 1.0


def test_rgb_round_trip_grid():
    v = np.linspace(0, 255, 22)
    grid = np.stack(np.meshgrid(v, v, v, indexing="ij"), -1).reshape(-1, 1, 3)
    assert len(grid) >= 10_000
    back = lab_to_rgb(rgb_to_lab(np.round(grid)))
    assert np.array_equal(to_uint8(back), np.round(grid).astype(np.uint8))


def test_lab_round_trip_random_in_gamut(rng):
    rgb = rng.uniform(0, 255, size=(1000, 3))
    lab = rgb_array_to_lab(rgb)
    back = rgb_array_to_lab(lab_to_rgb(LabImage.from_array(lab[:, None, :])).reshape(-1, 3))
    assert np.abs(back - lab).max() < 1e-3


def test_lab_image_rejects_mismatched_planes():
    with pytest.raises(ValueError):
        LabImage(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        rgb_to_lab(np.zeros((4, 4)))


def test_from_array_clips_ranges():
    lab = LabImage.from_array(np.array([[[120.0, 200.0, -300.0]]]))
    assert lab.L[0, 0] == 100 and lab.a[0, 0] == AB_SCALE and lab.b[0, 0] == -AB_SCALE


# -- gamut --------------------------------------------------------------------


def test_gamut_size_and_grid():
    g = build_gamut()
    assert g.size == 313
    assert np.all(np.mod(g.centers, 10) == 0)
    assert np.abs(g.centers).max() <= 110


def test_gamut_origin_bin():
    g = build_gamut()
    i = g.bin_of(0, 0)
    assert i is not None
    assert tuple(g.centers[i]) == (0, 0)


def test_gamut_is_deterministic_and_read_only():
    a = build_gamut()
    build_gamut.cache_clear()
    b = build_gamut()
    assert np.array_equal(a.centers, b.centers)
    with pytest.raises(ValueError):
        b.centers[0, 0] = 5


def _lattice():
    steps = np.arange(-110, 111, 10.0)
    return np.stack(np.meshgrid(steps, steps, indexing="ij"), -1).reshape(-1, 2)


def test_gamut_contains_cells_displayable_at_l50():
    lattice = _lattice()
    lab = np.concatenate([np.full((len(lattice), 1), 50.0), lattice], axis=1)
    lin = lab_array_to_linear_rgb(lab)
    inside = lattice[np.all((lin >= 0) & (lin <= 1), axis=1)]
    centers = {tuple(c) for c in build_gamut().centers}
    assert inside.size and all(tuple(c) in centers for c in inside)


def test_gamut_contains_every_reachable_cell():
    v = np.linspace(0, 255, 52)
    rgb = np.stack(np.meshgrid(v, v, v, indexing="ij"), -1).reshape(-1, 3)
    ab = rgb_array_to_lab(rgb)[:, 1:]
    cells = {tuple(c) for c in (np.round(ab / 10) * 10).astype(int)}
    centers = {tuple(c) for c in build_gamut().centers.astype(int)}
    assert cells <= centers


def test_gamut_csv(tmp_path):
    path = tmp_path / "gamut.csv"
    build_gamut().to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "a,b" and len(lines) == 314


# -- soft encoding -------------------------------------------------------------


def test_encode_at_center_peaks_there():
    g = build_gamut()
    c = g.centers[100]
    dist = encode_ab(c, g)
    assert np.argmax(dist) == 100


def test_encode_sums_to_one(rng):
    g = build_gamut()
    dist = encode_ab(rng.uniform(-110, 110, size=(50, 2)), g)
    np.testing.assert_allclose(dist.sum(-1), 1, atol=1e-6)
    assert np.all((dist > 0).sum(-1) == 5)


def test_encode_weights_are_gaussian():
    g = build_gamut()
    ab = np.array([3.0, -4.0])
    dist = encode_ab(ab, g)
    d2 = ((g.centers - ab) ** 2).sum(1)
    near = np.argsort(d2, kind="stable")[:5]
    w = np.exp(-d2[near] / (2 * 5.0**2))
    np.testing.assert_allclose(dist[near], w / w.sum(), atol=1e-12)


def test_nearest_bin_matches_brute_force():
    g = build_gamut()
    ab = np.array([30.0, -20.0])
    _, idx = g.nearest(ab)
    brute = np.argmin(((g.centers - ab) ** 2).sum(1))
    assert int(idx) == brute


def test_encode_argmax_decode_within_one_step(rng):
    g = build_gamut()
    rgb = rng.uniform(0, 255, size=(2000, 3))
    ab = rgb_array_to_lab(rgb)[:, 1:]
    back = decode_distribution(encode_ab(ab, g), g, temperature=0)
    assert np.linalg.norm(back - ab, axis=1).max() <= 10


def test_decode_one_hot_and_uniform():
    g = build_gamut()
    onehot = np.zeros(g.size)
    onehot[42] = 1
    np.testing.assert_array_equal(decode_distribution(onehot, g), g.centers[42])
    uniform = np.full(g.size, 1 / g.size)
    np.testing.assert_allclose(decode_distribution(uniform, g), g.centers.mean(0), atol=1e-9)


def test_decode_two_bin_mixture_annealed():
    g = build_gamut()
    p = np.zeros(g.size)
    p[10], p[20] = 0.7, 0.3
    t = 0.38
    w1, w2 = 0.7 ** (1 / t), 0.3 ** (1 / t)
    want = (w1 * g.centers[10] + w2 * g.centers[20]) / (w1 + w2)
    np.testing.assert_allclose(decode_distribution(p, g, 0.38), want, atol=1e-9)
    # temperature 1 is the plain mean
    np.testing.assert_allclose(decode_distribution(p, g, 1.0), 0.7 * g.centers[10] + 0.3 * g.centers[20], atol=1e-9)


def test_ab_png_round_trip(tmp_path, rng):
    ab = rng.uniform(-110, 110, size=(6, 9, 2))
    path = tmp_path / "ab.png"
    write_ab_png(path, ab)
    back = read_ab_png(path)
    assert back.shape == ab.shape
    assert np.abs(back - ab).max() <= 0.5 / 256 + 1e-12
