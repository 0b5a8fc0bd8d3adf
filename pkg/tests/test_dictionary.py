import numpy as np
import pytest

from correlreg.sparse.dictionary import (DeadAtomsError, JointDictionary, MAGIC, SparseCodeSet,
                                         dictionary_update, learn_joint_dictionary,
                                         learning_energy, normalize_atoms, sparse_code)

from oracles import lasso_sign_oracle


def test_save_load_round_trip(tmp_path, rng):
    d = JointDictionary(rng.normal(size=(9, 5)), rng.normal(size=(9, 5)), 3)
    d.save(tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == 20 + 2 * 9 * 5 * 8
    back = JointDictionary.load(tmp_path / "d.bin")
    assert np.array_equal(back.d1, d.d1) and np.array_equal(back.d2, d.d2)
    assert back.patch_size == 3
    assert (tmp_path / "d.bin.json").exists()


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        JointDictionary.load(tmp_path / "x.bin")


def test_dictionary_shape_checks(rng):
    with pytest.raises(ValueError):
        JointDictionary(rng.normal(size=(9, 5)), rng.normal(size=(9, 4)), 3)
    with pytest.raises(ValueError):
        JointDictionary(rng.normal(size=(8, 5)), rng.normal(size=(8, 5)), 3)


def test_support_sizes():
    codes = SparseCodeSet(np.array([[0.0, 1.0], [1e-9, -2.0]]), 1.0)
    assert codes.support_sizes.tolist() == [0, 2]


def test_update_single_sample(rng):
    p = rng.normal(size=(6, 1))
    a = np.zeros((3, 1))
    a[0, 0] = 1.0
    D = dictionary_update(p, a)
    np.testing.assert_allclose(D[:, 0], p[:, 0], atol=1e-12)
    assert np.all(D[:, 1:] == 0)


def test_update_identity_codes(rng):
    P = rng.normal(size=(6, 4))
    np.testing.assert_allclose(dictionary_update(P, np.eye(4)), P, atol=1e-12)


def test_update_gradient_vanishes(rng):
    P, A = rng.normal(size=(10, 40)), rng.normal(size=(6, 40))
    D = dictionary_update(P, A)
    grad = (D @ A - P) @ A.T
    assert np.linalg.norm(grad) < 1e-8


def test_update_all_dead():
    with pytest.raises(DeadAtomsError, match="dead atoms") as info:
        dictionary_update(np.ones((4, 3)), np.zeros((2, 3)))
    assert info.value.atoms == [0, 1]


def test_renormalisation_invariance(rng):
    D, A = rng.normal(size=(8, 5)), rng.normal(size=(5, 30))
    Dn, An = normalize_atoms(D, A)
    np.testing.assert_allclose(np.linalg.norm(Dn, axis=0), 1.0, atol=1e-14)
    np.testing.assert_allclose(Dn @ An, D @ A, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_sparse_code_matches_sign_oracle(seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(10, 6))
    X = rng.normal(size=(10, 3))
    alphas, rep = sparse_code(X, D, 0.3, tol=1e-10, max_iter=20000)
    assert rep.converged
    for i in range(3):
        _, e_ref = lasso_sign_oracle(D, X[:, i], 0.3)
        e = learning_energy(X[:, [i]], D, alphas[:, [i]], 0.3)
        assert abs(e - e_ref) <= 1e-6 * max(1.0, abs(e_ref))


def test_sparse_code_warm_start_fixed_point(rng):
    D = rng.normal(size=(10, 6))
    X = rng.normal(size=(10, 4))
    a, _ = sparse_code(X, D, 0.3, tol=1e-11, max_iter=20000)
    a2, rep = sparse_code(X, D, 0.3, tol=1e-6, alpha0=a)
    assert rep.iterations <= 2
    np.testing.assert_allclose(a2, a, atol=1e-6)


def test_one_atom_closed_form(rng):
    p = rng.normal(size=8)
    X = np.tile(p[:, None], (1, 5))
    lam = 0.2
    d, codes, hist = learn_joint_dictionary((X[:4], X[4:]), 1, lam, outer_iters=5,
                                            patch_size=2, tol=1e-12, inner_iters=5000)
    atom = d.stacked[:, 0]
    assert abs(abs(atom @ p) / np.linalg.norm(p) - 1.0) < 1e-9
    a = np.linalg.norm(p) - lam
    np.testing.assert_allclose(np.abs(codes.alphas), a, rtol=1e-6)
    expected = 5 * (0.5 * lam ** 2 + lam * a)
    assert hist.energy[-1] == pytest.approx(expected, rel=1e-6)


def test_interpolation_regime(rng):
    X = rng.normal(size=(8, 6))
    d, codes, _ = learn_joint_dictionary((X[:4], X[4:]), 6, 0.0, outer_iters=3, patch_size=2,
                                         tol=1e-10, inner_iters=5000)
    err = np.linalg.norm(d.stacked @ codes.alphas - X) / np.linalg.norm(X)
    assert err < 1e-6


def test_learning_energy_monotone(rng):
    X = rng.normal(size=(18, 120))
    _, _, hist = learn_joint_dictionary((X[:9], X[9:]), 12, 0.3, outer_iters=10, seed=3,
                                        patch_size=3)
    e = np.array(hist.energy)
    assert np.all(np.diff(e) <= 1e-9)
    assert len(e) == 11


def test_learned_atoms_unit_norm(rng):
    X = rng.normal(size=(18, 100))
    d, _, _ = learn_joint_dictionary((X[:9], X[9:]), 10, 0.3, outer_iters=4, patch_size=3)
    np.testing.assert_allclose(np.linalg.norm(d.stacked, axis=0), 1.0, atol=1e-12)


def test_learning_deterministic(rng):
    X = rng.normal(size=(8, 60))
    a = learn_joint_dictionary((X[:4], X[4:]), 5, 0.2, outer_iters=3, seed=9, patch_size=2)[0]
    b = learn_joint_dictionary((X[:4], X[4:]), 5, 0.2, outer_iters=3, seed=9, patch_size=2)[0]
    assert np.array_equal(a.stacked, b.stacked)


def test_too_few_distinct_columns():
    X = np.tile(np.arange(1.0, 9.0)[:, None], (1, 10))
    with pytest.raises(DeadAtomsError):
        learn_joint_dictionary((X[:4], X[4:]), 3, 0.1, patch_size=2)


def planted_recovery(seed, noise=0.0, K=8, m=16, N=400, lam=0.05):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(2 * m, K))
    D /= np.linalg.norm(D, axis=0)
    A = np.zeros((K, N))
    k = rng.integers(0, K, N)
    A[k, np.arange(N)] = rng.choice([-1.0, 1.0], N) * rng.uniform(0.5, 2.0, N)
    X = D @ A + rng.normal(0, noise, (2 * m, N))
    d, _, _ = learn_joint_dictionary((X[:m], X[m:]), K, lam, outer_iters=30, seed=seed,
                                     patch_size=int(np.sqrt(m)))
    L = d.stacked / np.linalg.norm(d.stacked, axis=0)
    return np.abs(D.T @ L).max(axis=1)


def test_planted_noisy_recovery():
    hits = sum(planted_recovery(s, noise=0.05).min() > 0.99 for s in range(10))
    assert hits >= 8
