import numpy as np
import pytest

from correlreg.analogy import (AnalogyTrainingPair, ConfidenceMap, prediction_confidence,
                               synthesize_nn, synthesize_sparse, train_joint_dictionary,
                               training_patches)
from correlreg.image import Image, ImageError
from correlreg.sparse.coding import sparse_code_analogy
from correlreg.sparse.dictionary import JointDictionary
from correlreg.synthetic import Texture, modality_pair


def total_variation(x):
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())


@pytest.fixture(scope="module")
def negation():
    big = Texture(4, (64, 64)).render((64, 64))
    pair = AnalogyTrainingPair(big, Image(1.0 - big.data))
    b = Image(big.data[8:40, 16:48])
    return pair, b


@pytest.fixture(scope="module")
def small_dict():
    a, ap = modality_pair((160, 160), seed=11)
    d, _, _ = train_joint_dictionary([AnalogyTrainingPair(a, ap)], 6, 32, 0.1,
                                     num_patches=600, outer_iters=8)
    return d


def test_training_pair_checks():
    with pytest.raises(ImageError):
        AnalogyTrainingPair(Image(np.zeros((4, 4))), Image(np.zeros((4, 5))))
    with pytest.raises(ImageError):
        AnalogyTrainingPair(Image(np.zeros((4, 4, 3))), Image(np.zeros((4, 4, 3))))


def test_nn_identity_filter(texture64):
    img = Image(texture64.data[:32, :32])
    out = synthesize_nn(AnalogyTrainingPair(img, img), img, kappa=1.0)
    assert np.array_equal(out.data[2:-2, 2:-2], img.data[2:-2, 2:-2])


def test_nn_negation_interior(negation):
    pair, b = negation
    out = synthesize_nn(pair, b)
    # parent-level neighbourhoods reach one pixel past the fine half-patch
    assert np.array_equal(out.data[3:-3, 3:-3], 1.0 - b.data[3:-3, 3:-3])


def test_nn_kappa_zero_is_plain_nn(negation):
    pair, b = negation
    noisy = Image(np.clip(b.data + np.random.default_rng(0).normal(0, 0.05, b.shape), 0, 1))
    a = synthesize_nn(pair, noisy, kappa=0.0)
    c = synthesize_nn(pair, noisy, coherence=False)
    assert np.array_equal(a.data, c.data)


def test_nn_copies_values_and_is_deterministic(negation):
    pair, b = negation
    noisy = Image(np.clip(b.data + np.random.default_rng(1).normal(0, 0.05, b.shape), 0, 1))
    a, src = synthesize_nn(pair, noisy, kappa=2.0, return_sources=True)
    again = synthesize_nn(pair, noisy, kappa=2.0)
    assert np.array_equal(a.data, again.data)
    assert np.isin(a.data, pair.a_prime.data).all()
    assert np.array_equal(a.data, pair.a_prime.data[src[..., 0], src[..., 1]])


def test_nn_errors(negation):
    pair, b = negation
    with pytest.raises(ValueError):
        synthesize_nn(pair, b, patch_size=4)
    tiny = AnalogyTrainingPair(Image(np.zeros((3, 3))), Image(np.zeros((3, 3))))
    with pytest.raises(ImageError):
        synthesize_nn(tiny, b, levels=1, patch_size=5)


def test_training_patches_offset_and_count():
    a, ap = modality_pair((40, 40), seed=2)
    P1, P2 = training_patches([AnalogyTrainingPair(a, ap)], 5, num_patches=20, seed=1)
    assert P1.shape == (25, 20) and P2.shape == (25, 20)
    np.testing.assert_allclose(P1 + P2, 0.0, atol=1e-12)   # inversion, centred at 0.5


def test_train_rejects_constant_data():
    flat = Image(np.full((30, 30), 0.5))
    with pytest.raises(ValueError, match="zero variance"):
        train_joint_dictionary([AnalogyTrainingPair(flat, flat)], 5, 4, 0.1)


def test_sparse_is_shifted_coding(small_dict):
    b = Texture(21, (24, 24)).render((24, 24))
    den, pred = synthesize_sparse(small_dict, b, 0.01, 0.1, max_iter=50)
    u1, u2, _, _ = sparse_code_analogy(b.data - 0.5, small_dict, 0.01, 0.1, max_iter=50)
    np.testing.assert_array_equal(den.data, u1.data + 0.5)
    np.testing.assert_array_equal(pred.data, u2.data + 0.5)


def test_sparse_inversion_prediction(small_dict):
    b = Texture(22, (32, 32)).render((32, 32))
    den, pred = synthesize_sparse(small_dict, b, 0.01, 0.1, stride=2, max_iter=400)
    assert np.mean(np.abs(pred.data - (1.0 - den.data))) < 0.06


def test_sparse_smoother_than_nn(small_dict, negation):
    # regression against the recorded baseline of the copy-based method
    pair, b = negation
    nn = synthesize_nn(pair, b)
    _, sparse = synthesize_sparse(small_dict, b, 0.01, 0.1, stride=1, max_iter=300)
    assert total_variation(sparse.data) <= total_variation(nn.data)


def _pairs(err_fn, n=1, shape=(40, 40)):
    rng = np.random.default_rng(0)
    out = []
    for _ in range(n):
        a = Image(rng.random(shape))
        out.append(AnalogyTrainingPair(a, Image(np.clip(a.data + err_fn(rng, shape), 0, 1))))
    return out


def test_confidence_perfect_predictor():
    d = JointDictionary(np.eye(4), np.eye(4), 2)
    val = _pairs(lambda r, s: 0.0)
    cmap = prediction_confidence(d, val, 5, predictor=lambda img: img)
    assert np.all(cmap.weights == 1.0)


def test_confidence_left_half_error():
    def err(rng, shape):
        e = np.zeros(shape)
        e[:, : shape[1] // 2] = rng.normal(0, 0.2, (shape[0], shape[1] // 2))
        return e

    val = [AnalogyTrainingPair(Image(np.full((40, 40), 0.5)), Image(np.clip(0.5 + err(np.random.default_rng(3), (40, 40)), 0, 1)))]
    cmap = prediction_confidence(None, val, 5, predictor=lambda img: img)
    w = cmap.weights
    assert w[:, :20].mean() < w[:, 20:].mean()
    assert w.min() >= 0 and w.max() <= 1


def test_confidence_constant_error():
    val = [AnalogyTrainingPair(Image(np.full((20, 20), 0.3)), Image(np.full((20, 20), 0.7)))]
    cmap = prediction_confidence(None, val, 5, predictor=lambda img: img)
    assert np.all(cmap.weights == 1.0)


def test_confidence_empty():
    with pytest.raises(ValueError):
        prediction_confidence(None, [], predictor=lambda img: img)


def test_confidence_map_resize_and_checks():
    cmap = ConfidenceMap(np.linspace(0, 1, 16).reshape(4, 4))
    big = cmap.resize((8, 8))
    assert big.shape == (8, 8)
    assert big.weights.min() >= 0 and big.weights.max() <= 1
    with pytest.raises(ValueError):
        ConfidenceMap(np.full((2, 2), 1.5))
