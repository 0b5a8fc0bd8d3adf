"""Joint sparse coding of an image against a two-modality dictionary.

Given ``f1`` only, solve

    E(u1, u2, a) = gamma/2 ||u1 - f1||^2
                   + 1/N sum_i [ 1/2 ||R_i u1 - D1 a_i||^2 + 1/2 ||R_i u2 - D2 a_i||^2
                                 + lam ||a_i||_1 ]
                   (+ gamma_alpha/2 ||a||^2)

so that ``u1`` is a denoised ``f1`` and ``u2`` its prediction in the other
modality. The SDMM splitting uses one data term on ``u1``, one joint patch
term per patch on ``(R_i u1, R_i u2, a_i)`` and one l1 term per patch on
``a_i``. With those operators ``P = sum L^T L`` is diagonal: coverage counts
on the images (plus one on ``u1``) and 2 (or 3) on the codes.
"""

from __future__ import annotations

import numpy as np

from ..image import Image, ImageLike, PatchGrid, as_array, patch_adjoint
from .dictionary import JointDictionary, SparseCodeSet, sparse_code
from .prox import JointPatchSolver, prox_l1
from .sdmm import DIVERGENCE_LIMIT, DivergenceError, SolveReport


def analogy_energy(u1, u2, alphas, f1, dictionary: JointDictionary, grid: PatchGrid,
                   gamma: float, lam: float, gamma_alpha: float = 0.0) -> float:
    idx = grid.pixel_indices()
    n = idx.shape[1]
    u1 = np.asarray(u1).ravel()
    u2 = np.asarray(u2).ravel()
    r1 = u1[idx] - dictionary.d1 @ alphas
    r2 = u2[idx] - dictionary.d2 @ alphas
    data = 0.5 * gamma * float(np.sum((u1 - np.asarray(f1).ravel()) ** 2))
    patches = 0.5 * float(np.sum(r1 ** 2) + np.sum(r2 ** 2)) + lam * float(np.abs(alphas).sum())
    ridge = 0.5 * gamma_alpha * float(np.sum(alphas ** 2))
    return data + patches / n + ridge


def sparse_code_analogy(f1: ImageLike, dictionary: JointDictionary, gamma: float = 0.01,
                        lam: float = 1.0, grid: PatchGrid | None = None, tol: float = 1e-5,
                        max_iter: int = 500, sigma: float = 1.0, stride: int = 1,
                        gamma_alpha: float = 0.0, warm_start: bool = False):
    """Return ``(u1, u2, codes, report)``.

    The solver works on ``N * E`` (same minimizer) so that the patch terms
    carry unit weight; ``report.final_energy`` is ``E`` itself. With
    ``warm_start`` the codes start from a short lasso fit of the ``f1``
    patches against ``D1`` and ``u2`` from their ``D2`` reconstruction;
    otherwise the iteration starts at ``(f1, 0, 0)``.
    """
    f = as_array(f1)
    if f.ndim != 2:
        raise ValueError("sparse coding needs a single-channel image")
    ps = dictionary.patch_size
    if grid is None:
        grid = PatchGrid.regular(f.shape, ps, stride)
    if grid.patch_size != ps:
        raise ValueError(f"grid patch size {grid.patch_size} != dictionary patch size {ps}")
    if tuple(grid.image_dims) != f.shape:
        raise ValueError("grid does not match image dimensions")
    cov = grid.coverage().ravel()
    if np.any(cov == 0):
        raise ValueError("patch grid leaves pixels uncovered")

    idx = grid.pixel_indices()
    m, n_patches = idx.shape
    npix = f.size
    D1, D2 = dictionary.d1, dictionary.d2
    K = dictionary.K
    g_data = gamma * n_patches
    g_ridge = gamma_alpha * n_patches
    joint = JointPatchSolver(np.vstack([D1, D2]), 1.0, sigma)
    fv = f.ravel()

    def ext(u):
        return u[idx]

    def adj(cols):
        return patch_adjoint(cols, grid).ravel()

    u1 = fv.copy()
    if warm_start:
        a, _ = sparse_code(ext(fv), D1, lam, sigma=sigma, max_iter=50)
        u2 = adj(D2 @ a) / cov
    else:
        u2 = np.zeros(npix)
        a = np.zeros((K, n_patches))
    p_u1 = 1.0 + cov
    p_a = 3.0 if g_ridge > 0 else 2.0

    y_d = u1.copy()
    y_p1, y_p2, y_pa = ext(u1), ext(u2), a.copy()
    y_s = a.copy()
    y_r = a.copy()
    z_d = np.zeros_like(y_d)
    z_p1, z_p2, z_pa = np.zeros_like(y_p1), np.zeros_like(y_p2), np.zeros_like(y_pa)
    z_s = np.zeros_like(y_s)
    z_r = np.zeros_like(y_r)

    report = SolveReport()
    for it in range(1, max_iter + 1):
        # averaging
        u1 = (y_d - z_d + adj(y_p1 - z_p1)) / p_u1
        u2 = adj(y_p2 - z_p2) / cov
        acc = (y_pa - z_pa) + (y_s - z_s)
        if g_ridge > 0:
            acc = acc + (y_r - z_r)
        a = acc / p_a

        # per-term prox and dual updates
        s1, s2 = ext(u1), ext(u2)
        v_d = u1 + z_d
        y_d = (g_data * fv + sigma * v_d) / (g_data + sigma)
        z_d = v_d - y_d

        v1 = np.vstack([s1 + z_p1, s2 + z_p2])
        va = a + z_pa
        x1, y_pa = joint(v1, va)
        y_p1, y_p2 = x1[:m], x1[m:]
        z_p1 = s1 + z_p1 - y_p1
        z_p2 = s2 + z_p2 - y_p2
        z_pa = va - y_pa

        v_s = a + z_s
        y_s = prox_l1(v_s, lam, sigma)
        z_s = v_s - y_s

        res = max(np.max(np.abs(u1 - y_d)), np.max(np.abs(s1 - y_p1)),
                  np.max(np.abs(s2 - y_p2)), np.max(np.abs(a - y_pa)),
                  np.max(np.abs(a - y_s)))
        if g_ridge > 0:
            v_r = a + z_r
            y_r = sigma * v_r / (g_ridge + sigma)
            z_r = v_r - y_r
            res = max(res, np.max(np.abs(a - y_r)))
        res = float(res)
        report.primal_residual_history.append(res)
        report.iterations = it
        if not np.isfinite(res) or res > DIVERGENCE_LIMIT:
            raise DivergenceError(f"analogy coding diverged at iteration {it}", report)
        if res < tol:
            report.converged = True
            break

    report.final_energy = analogy_energy(u1, u2, a, fv, dictionary, grid, gamma, lam, gamma_alpha)
    shape = f.shape
    return (Image(u1.reshape(shape)), Image(u2.reshape(shape)),
            SparseCodeSet(y_s, lam), report)
