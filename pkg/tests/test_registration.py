import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from correlreg.analogy import ConfidenceMap
from correlreg.image import Image
from correlreg.registration import (EmptyOverlapError, RegistrationConfig, entropy,
                                    evaluate_landmarks, grid_points, mutual_information,
                                    register_affine, ssd, transform_error, warp, wssd)
from correlreg.synthetic import Texture
from correlreg.transform import AffineTransform2D, SingularTransformError


def test_warp_identity(rng):
    img = Image(rng.random((9, 11)))
    out, mask = warp(img, AffineTransform2D.identity())
    assert np.array_equal(out.data, img.data) and mask.all()


def test_warp_integer_shift(rng):
    data = rng.random((10, 12))
    out, mask = warp(Image(data), AffineTransform2D.similarity(0, 1, 3, 2))
    assert np.array_equal(out.data[2:, 3:], data[:-2, :-3])
    assert not mask[:2].any() and not mask[:, :3].any() and mask[2:, 3:].all()


def test_warp_rotation_by_hand():
    data = np.arange(9.0).reshape(3, 3) / 8
    t = AffineTransform2D.similarity(np.pi / 2, 1.0, center=(1.0, 1.0))
    out, mask = warp(Image(data), t)
    # output (x, y) takes input at t^-1(x, y) = (y, 2 - x)
    expect = np.array([[data[2 - x, y] for x in range(3)] for y in range(3)])
    np.testing.assert_allclose(out.data, expect, atol=1e-12)
    assert mask.all()


def test_warp_singular():
    with pytest.raises(SingularTransformError):
        warp(Image(np.zeros((3, 3))), AffineTransform2D(np.zeros((2, 3))))


def test_warp_composition():
    yy, xx = np.mgrid[0:64, 0:64] / 64.0
    smooth = Image(0.5 + 0.25 * np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy))
    t1 = AffineTransform2D.similarity(0.05, 1.02, 1.5, -0.7, center=(32, 32))
    t2 = AffineTransform2D.similarity(-0.08, 0.97, -0.4, 1.1, center=(32, 32))
    a, ma = warp(warp(smooth, t1)[0], t2)
    b, mb = warp(smooth, t2.compose(t1))
    inner = np.zeros_like(ma)
    inner[8:-8, 8:-8] = True
    sel = inner & ma & mb
    assert np.max(np.abs(a.data[sel] - b.data[sel])) < 2e-2


def test_ssd_examples(rng):
    a = rng.random((5, 5))
    assert ssd(a, a) == 0.0
    assert wssd(a, rng.random((5, 5)), 0.0) == 0.0
    assert ssd(np.zeros((4, 4)), np.full((4, 4), 0.5)) == 0.25


def test_ssd_empty_mask():
    with pytest.raises(EmptyOverlapError):
        ssd(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))


def test_wssd_weight_checks(rng):
    with pytest.raises(ValueError):
        wssd(rng.random((3, 3)), rng.random((3, 3)), np.full((3, 3), 2.0))
    cmap = ConfidenceMap(np.full((3, 3), 0.5))
    a, b = rng.random((3, 3)), rng.random((3, 3))
    assert wssd(a, b, cmap) == pytest.approx(0.5 * ssd(a, b))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_ssd_is_unit_weight_wssd(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 7)), rng.random((6, 7))
    m = rng.random((6, 7)) > 0.3
    if not m.any():
        return
    assert ssd(a, b, m) == wssd(a, b, np.ones((6, 7)), m)


def test_mi_self_information(rng):
    a = rng.random((50, 50))
    counts = np.bincount(np.clip(np.floor(a.ravel() * 32), 0, 31).astype(int), minlength=32)
    assert mutual_information(a, a, 32) == pytest.approx(entropy(counts), abs=1e-12)


def test_mi_independent_noise():
    rng = np.random.default_rng(0)
    a, b = rng.random((300, 300)), rng.random((300, 300))
    assert mutual_information(a, b, 8) < 0.05


def test_mi_inversion_with_aligned_bins():
    # values on bin centres so 1 - a lands in mirrored bins exactly
    rng = np.random.default_rng(1)
    a = (rng.integers(0, 16, (40, 40)) + 0.5) / 16
    assert mutual_information(a, 1 - a, 16) == pytest.approx(mutual_information(a, a, 16),
                                                              abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_mi_nonnegative_and_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    bins = 8
    ka, kb = rng.integers(0, bins, (20, 20)), rng.integers(0, bins, (20, 20))
    a, b = (ka + 0.5) / bins, (kb + 0.5) / bins
    mi = mutual_information(a, b, bins)
    assert mi >= -1e-12
    perm = np.sort(rng.choice(bins, bins, replace=False))  # strictly increasing remap of bins
    remap = (np.argsort(np.argsort(perm))[ka] + 0.5) / bins
    assert abs(mutual_information(remap, b, bins) - mi) < 1e-12


def test_mi_bad_bins(rng):
    with pytest.raises(ValueError):
        mutual_information(rng.random((3, 3)), rng.random((3, 3)), 1)


def test_register_identity(texture64):
    res = register_affine(texture64, texture64, "ssd")
    assert transform_error(res.transform, AffineTransform2D.identity(), (64, 64)) < 1e-3
    assert res.final_metric < 1e-8
    assert np.isfinite(res.final_metric)


@pytest.fixture(scope="module")
def round_trip():
    # rendering avoids the zero fill a warped copy would carry at its borders
    tex = Texture(0, (128, 128))
    fixed = tex.render((128, 128))
    t = AffineTransform2D.similarity(np.deg2rad(5), 1.05, 3, -2, center=(63.5, 63.5))
    moving = tex.render((128, 128), t)
    return tex, fixed, moving, t.inverse()


def test_register_ssd_round_trip(round_trip):
    _, fixed, moving, t = round_trip
    res = register_affine(moving, fixed, "ssd")
    pts = grid_points((128, 128), 8)
    rep = evaluate_landmarks(res.transform, t.inverse().apply(pts), pts)
    assert rep.mae < 0.1
    assert res.metric_kind == "ssd"


def test_register_mi_inverted(round_trip):
    _, fixed, moving, t = round_trip
    res = register_affine(Image(1 - moving.data), fixed, "mi")
    pts = grid_points((128, 128), 8)
    assert evaluate_landmarks(res.transform, t.inverse().apply(pts), pts).mae < 0.1


def test_register_wssd_needs_weights(round_trip):
    _, fixed, moving, _ = round_trip
    with pytest.raises(ValueError):
        register_affine(moving, fixed, "wssd")
    res = register_affine(moving, fixed, "wssd", weights=np.ones((32, 32)))
    assert transform_error(res.transform, round_trip[3], (128, 128)) < 0.1


def test_register_deterministic(round_trip):
    _, fixed, moving, _ = round_trip
    cfg = RegistrationConfig(levels=2)
    a = register_affine(moving, fixed, "ssd", config=cfg)
    b = register_affine(moving, fixed, "ssd", config=cfg)
    assert np.array_equal(a.transform.matrix, b.transform.matrix)


def test_register_bad_metric(texture64):
    with pytest.raises(ValueError):
        register_affine(texture64, texture64, "ncc")


def test_result_json(tmp_path, texture64):
    res = register_affine(texture64, texture64, "ssd", config=RegistrationConfig(levels=1))
    res.to_json(tmp_path / "r.json")
    text = (tmp_path / "r.json").read_text()
    assert '"metric": "ssd"' in text and '"iterations"' in text


def test_evaluate_examples(tmp_path):
    t = AffineTransform2D.identity()
    pts = np.array([[1.0, 2.0], [3.0, 4.0]])
    rep = evaluate_landmarks(t, pts, pts)
    assert rep.mae == 0 and rep.std == 0
    rep = evaluate_landmarks(t, [[0.0, 0.0]], [[3.0, 4.0]], 0.069)
    assert rep.mae == pytest.approx(0.345) and rep.std == 0
    rep.to_json(tmp_path / "e.json")
    rep.to_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "id,error"


def test_evaluate_population_std():
    t = AffineTransform2D.identity()
    rep = evaluate_landmarks(t, [[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [3.0, 0.0]])
    assert rep.mae == 2.0 and rep.std == 1.0


def test_evaluate_size_mismatch():
    with pytest.raises(ValueError):
        evaluate_landmarks(AffineTransform2D.identity(), [[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])
