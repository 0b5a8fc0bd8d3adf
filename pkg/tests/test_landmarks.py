import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from correlreg.image import Image
from correlreg.landmarks import (DegenerateConfigurationError, InsufficientLandmarksError,
                                 LandmarkError, NoRatioMatchError, ThresholdError, binarize,
                                 centroids, compute_ratios, connected_components,
                                 fit_affine_lsq, match_and_select, mean_residual,
                                 mutual_nearest_pairs, otsu_threshold, refine_least_squares,
                                 register_landmarks)
from correlreg.synthetic import bead_scene, point_scene, random_points
from correlreg.transform import AffineTransform2D


def _dots():
    data = np.zeros((20, 20))
    data[2:4, 2:4] = 1.0
    data[10:13, 5:8] = 1.0
    return Image(data)


def test_binarize_fixed():
    out = binarize(_dots(), 0.5)
    assert np.array_equal(out.data, _dots().data)


def test_binarize_dark_is_complement():
    bright = binarize(_dots(), 0.5).data
    dark = binarize(_dots(), 0.5, polarity="dark").data
    assert np.array_equal(dark, 1.0 - bright)


def test_binarize_constant_fails():
    with pytest.raises(ThresholdError, match="no threshold separates classes"):
        binarize(Image(np.full((8, 8), 0.3)))


def _otsu_oracle(data, bins=256):
    # direct criterion: weighted within-class variance minimum over all cut points
    hist, _ = np.histogram(data, bins=bins, range=(0, 1))
    c = (np.arange(bins) + 0.5) / bins
    best, arg = np.inf, None
    for k in range(1, bins):
        w0, w1 = hist[:k].sum(), hist[k:].sum()
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[:k] * c[:k]).sum() / w0
        m1 = (hist[k:] * c[k:]).sum() / w1
        v = (hist[:k] * (c[:k] - m0) ** 2).sum() + (hist[k:] * (c[k:] - m1) ** 2).sum()
        if v < best - 1e-12:
            best, arg = v, k
    return arg / bins


def test_otsu_bimodal(rng):
    data = np.concatenate([rng.normal(0.2, 0.05, 5000), rng.normal(0.8, 0.05, 5000)])
    data = np.clip(data, 0, 1)
    t = otsu_threshold(data)
    assert 0.4 <= t <= 0.6
    assert t == pytest.approx(_otsu_oracle(data), abs=1.5 / 256)


def test_components_single_pixel():
    data = np.zeros((5, 5))
    data[2, 3] = 1
    comps = connected_components(Image(data))
    assert len(comps) == 1 and comps[0].tolist() == [[2, 3]]


def test_components_diagonal():
    data = np.zeros((4, 4))
    data[1, 1] = data[2, 2] = 1
    assert len(connected_components(Image(data), 4)) == 2
    assert len(connected_components(Image(data), 8)) == 1


def test_components_squares_and_order():
    data = np.zeros((30, 30))
    for y, x in [(20, 2), (2, 20), (2, 2)]:
        data[y:y + 5, x:x + 5] = 1
    comps = connected_components(Image(data))
    assert [len(c) for c in comps] == [25, 25, 25]
    assert [tuple(c.min(axis=0)) for c in comps] == [(2, 2), (2, 20), (20, 2)]


def test_components_empty():
    assert connected_components(Image(np.zeros((3, 3)))) == []


def test_centroids_examples():
    sq = np.array([(y, x) for y in range(5) for x in range(5)])
    pix = np.array([[3, 7]])
    ell = np.array([[10, 10], [11, 10], [12, 10], [12, 11], [12, 12]])
    ls = centroids([sq, pix, ell], min_area=1, max_area=100)
    np.testing.assert_allclose(ls.points[0], [2, 2])
    np.testing.assert_allclose(ls.points[1], [7, 3])
    np.testing.assert_allclose(ls.points[2], [ell[:, 1].mean(), ell[:, 0].mean()])


def test_centroids_insufficient():
    sq = np.array([(y, x) for y in range(3) for x in range(3)])
    with pytest.raises(InsufficientLandmarksError, match="insufficient landmarks"):
        centroids([sq, sq + 10, np.array([[40, 40]])], min_area=4)


def test_ratios_equilateral():
    pts = np.array([[0, 0], [1, 0], [0.5, np.sqrt(3) / 2]])
    np.testing.assert_allclose(compute_ratios(pts).ratios, 1.0, atol=1e-12)


def test_ratios_collinear():
    ls = compute_ratios(np.array([[0.0, 0], [1, 0], [3, 0]]))
    assert ls.ratios[0] == pytest.approx(1 / 3)
    assert ls.neighbor_ids[0].tolist() == [1, 2]


def test_ratios_duplicates():
    with pytest.raises(LandmarkError):
        compute_ratios(np.array([[0.0, 0], [1, 1], [0, 0]]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), angle=st.floats(-np.pi, np.pi), scale=st.floats(0.5, 2.0))
def test_ratios_similarity_invariant(seed, angle, scale):
    pts = random_points(12, (200, 200), np.random.default_rng(seed), margin=5, min_dist=5)
    t = AffineTransform2D.similarity(angle, scale, 3.0, -7.0)
    a, b = compute_ratios(pts), compute_ratios(t.apply(pts))
    np.testing.assert_allclose(a.ratios, b.ratios, atol=1e-12)
    assert np.array_equal(a.neighbor_ids, b.neighbor_ids)


def _sim():
    return AffineTransform2D.similarity(np.deg2rad(30), 1.3, 5.0, -2.0)


def test_match_identity():
    pts = random_points(15, (256, 256), np.random.default_rng(3))
    ls = compute_ratios(pts)
    hyp = match_and_select(ls, ls)
    np.testing.assert_allclose(hyp.transform.matrix, AffineTransform2D.identity().matrix, atol=1e-12)
    assert hyp.median_error == 0.0
    assert len({s for s, _ in hyp.pairs}) == 3 and len({t for _, t in hyp.pairs}) == 3


def test_match_known_similarity():
    pts = random_points(15, (256, 256), np.random.default_rng(4))
    hyp = match_and_select(compute_ratios(pts), compute_ratios(_sim().apply(pts)))
    np.testing.assert_allclose(hyp.transform.matrix, _sim().matrix, atol=1e-9)
    assert hyp.median_error < 1e-9


def test_match_with_spurious_targets():
    rng = np.random.default_rng(5)
    pts = random_points(25, (256, 256), rng)
    src, extra = pts[:20], pts[20:]
    tgt = np.vstack([_sim().apply(src), extra * 1.1])
    hyp = match_and_select(compute_ratios(src), compute_ratios(tgt))
    assert hyp.median_error < 1e-6


def test_match_no_ratio_candidates():
    src = compute_ratios(np.array([[0.0, 0], [1, 0], [0.5, np.sqrt(3) / 2]]))
    tgt = compute_ratios(np.array([[0.0, 0], [1, 0], [10, 0]]))
    with pytest.raises(NoRatioMatchError, match="no ratio matches"):
        match_and_select(src, tgt, 0.05)


@pytest.mark.parametrize("seed", range(100))
def test_match_recovers_random_similarity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 16))
    pts = random_points(n, (256, 256), rng, min_dist=10)
    t = AffineTransform2D.similarity(rng.uniform(-np.pi, np.pi), rng.uniform(0.7, 1.4),
                                     *rng.uniform(-20, 20, 2))
    hyp = match_and_select(compute_ratios(pts), compute_ratios(t.apply(pts)))
    assert np.max(np.abs(hyp.transform.apply(pts) - t.apply(pts))) < 1e-6


def test_refine_exact_affine():
    rng = np.random.default_rng(6)
    pts = random_points(20, (256, 256), rng)
    t = AffineTransform2D(np.array([[1.05, 0.1, 3.0], [-0.08, 0.97, -4.0]]))
    init = AffineTransform2D(t.matrix + 1e-3)
    out = refine_least_squares(compute_ratios(pts), compute_ratios(t.apply(pts)), init)
    np.testing.assert_allclose(out.matrix, t.matrix, atol=1e-10)


def test_refine_collinear():
    src = np.column_stack([np.arange(6.0) * 20, np.zeros(6)])
    with pytest.raises(DegenerateConfigurationError, match="degenerate configuration"):
        fit_affine_lsq(src, src)


def test_refine_too_few_inliers():
    pts = random_points(6, (256, 256), np.random.default_rng(8))
    far = AffineTransform2D.similarity(0, 1, 500, 500)
    with pytest.raises(DegenerateConfigurationError):
        refine_least_squares(compute_ratios(pts), compute_ratios(pts), far, inlier_radius=1.0)


@pytest.mark.parametrize("seed", range(100))
def test_refine_never_worse_than_init(seed):
    rng = np.random.default_rng(seed)
    pts = random_points(30, (256, 256), rng, margin=20, min_dist=12)
    t = AffineTransform2D.similarity(rng.uniform(-1, 1), rng.uniform(0.9, 1.1), *rng.uniform(-5, 5, 2),
                                     center=(128, 128))
    src = pts + rng.normal(0, 0.5, pts.shape)
    tgt = t.apply(pts) + rng.normal(0, 0.5, pts.shape)
    s, g = compute_ratios(src), compute_ratios(tgt)
    init = match_and_select(s, g).transform
    pairs = mutual_nearest_pairs(src, tgt, init, 30.0)
    out = refine_least_squares(s, g, init, 30.0)
    # least squares is optimal for the squared residual on the init's pairs
    assert mean_residual(out, src, tgt, pairs, squared=True) <= \
        mean_residual(init, src, tgt, pairs, squared=True) + 1e-12
    assert mean_residual(out, src, tgt, pairs) <= mean_residual(init, src, tgt, pairs) + 1e-12


def test_point_scene_shapes():
    sc = point_scene(20, seed=1)
    assert sc.source.shape == (24, 2) and sc.target.shape == (24, 2)
    assert sc.true_source.shape == (20, 2)


def test_pipeline_identity_beads():
    sc = bead_scene(20, seed=2)
    reg = register_landmarks(sc.target, sc.source)
    np.testing.assert_allclose(reg.transform.matrix, AffineTransform2D.identity().matrix, atol=1e-9)
    assert reg.initial.median_error < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_similarity_beads(seed):
    t = AffineTransform2D.similarity(np.deg2rad(30), 1.3, 5, -2, center=(127.5, 127.5))
    sc = bead_scene(20, seed=seed, transform=t)
    reg = register_landmarks(sc.target, sc.source)
    err = np.linalg.norm(reg.transform.apply(sc.source_points) - sc.target_points, axis=1)
    assert err.mean() < 0.5
