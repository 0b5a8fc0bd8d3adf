"""Proximity operators ``prox_{g/sigma}(y) = argmin_x g(x) + sigma/2 ||x - y||^2``."""

from __future__ import annotations

import numpy as np
from scipy import linalg


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def _check_finite(*arrays) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to proximity operator")


def prox_l1(y, c: float, sigma: float) -> np.ndarray:
    """Soft shrinkage for ``g = c ||x||_1``."""
    _check_sigma(sigma)
    y = np.asarray(y, dtype=np.float64)
    t = c / sigma
    return np.sign(y) * np.maximum(np.abs(y) - t, 0.0)


def prox_squared_distance(y, target, weight: float, sigma: float) -> np.ndarray:
    """``g = weight/2 ||x - target||^2``."""
    _check_sigma(sigma)
    return (weight * np.asarray(target) + sigma * np.asarray(y)) / (weight + sigma)


def prox_ridge(y, weight: float, sigma: float) -> np.ndarray:
    """``g = weight/2 ||x||^2``."""
    _check_sigma(sigma)
    return sigma * np.asarray(y, dtype=np.float64) / (weight + sigma)


def prox_quad_dict(y, D, p, V=None, c: float = 1.0, sigma: float = 1.0) -> np.ndarray:
    """``g = c/2 ||p - D x||_V^2``; solves ``(sigma I + c D^T V D) x = sigma y + c D^T V p``."""
    _check_sigma(sigma)
    y = np.asarray(y, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    V = np.eye(D.shape[0]) if V is None else np.asarray(V, dtype=np.float64)
    _check_finite(y, D, p, V)
    if c == 0:
        return y.copy()
    dtv = D.T @ V
    lhs = sigma * np.eye(D.shape[1]) + c * (dtv @ D)
    rhs = sigma * y + c * (dtv @ p)
    return linalg.solve(lhs, rhs, assume_a="pos")


def joint_patch_matrix(D, V, c: float, sigma: float) -> np.ndarray:
    """Left-hand side of the stationarity system for the joint patch prox:
    ``[[cV + sigma I, -cVD], [-c D^T V, c D^T V D + sigma I]]``."""
    D = np.asarray(D, dtype=np.float64)
    m, k = D.shape
    vd = V @ D
    top = np.hstack([c * V + sigma * np.eye(m), -c * vd])
    bot = np.hstack([-c * vd.T, c * (D.T @ vd) + sigma * np.eye(k)])
    return np.vstack([top, bot])


def prox_joint_patch(y1, y2, D, V=None, c: float = 1.0, sigma: float = 1.0):
    """``g(x1, x2) = c/2 ||x1 - D x2||_V^2``.

    Solves both stationarity equations
    ``c V (x1 - D x2) + sigma (x1 - y1) = 0`` and
    ``c D^T V (D x2 - x1) + sigma (x2 - y2) = 0`` as one symmetric block system.
    """
    _check_sigma(sigma)
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    V = np.eye(D.shape[0]) if V is None else np.asarray(V, dtype=np.float64)
    _check_finite(y1, y2, D, V)
    if c == 0:
        return y1.copy(), y2.copy()
    m = D.shape[0]
    lhs = joint_patch_matrix(D, V, c, sigma)
    rhs = sigma * np.concatenate([y1, y2], axis=0)
    try:
        x = linalg.solve(lhs, rhs, assume_a="pos")
    except linalg.LinAlgError as exc:  # pragma: no cover - SPD for sigma > 0
        raise RuntimeError("joint patch system is singular") from exc
    return x[:m], x[m:]


class JointPatchSolver:
    """Batched joint-patch prox for ``V = I``.

    Eliminating ``x1 = (c D x2 + sigma y1) / (c + sigma)`` leaves the K x K
    system ``(rho D^T D + I) x2 = y2 + rho D^T y1`` with ``rho = c/(c+sigma)``,
    which is factorized once.
    """

    def __init__(self, D, c: float, sigma: float):
        _check_sigma(sigma)
        self.D = np.asarray(D, dtype=np.float64)
        self.c = float(c)
        self.sigma = float(sigma)
        self.rho = self.c / (self.c + self.sigma)
        k = self.D.shape[1]
        self._chol = linalg.cho_factor(self.rho * (self.D.T @ self.D) + np.eye(k))

    def __call__(self, y1: np.ndarray, y2: np.ndarray):
        x2 = linalg.cho_solve(self._chol, y2 + self.rho * (self.D.T @ y1))
        x1 = (self.c * (self.D @ x2) + self.sigma * y1) / (self.c + self.sigma)
        return x1, x2
