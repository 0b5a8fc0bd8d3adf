"""Simultaneous-direction method of multipliers.

Minimizes ``sum_k g_k(L_k x)`` given a proximity operator for every ``g_k``:

    x   <- P^{-1} sum_k L_k^T (y_k - z_k),   P = sum_k L_k^T L_k
    s_k  = L_k x
    y_k  = prox_{g_k / sigma}(s_k + z_k)
    z_k <- z_k + s_k - y_k

Iteration stops once ``max_k ||s_k - y_k||_inf < tol``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse.linalg import factorized

from . import prox

DIVERGENCE_LIMIT = 1e6


class SolverSetupError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    iterations: int = 0
    primal_residual_history: list = field(default_factory=list)
    final_energy: float = float("nan")
    converged: bool = False

    @property
    def final_residual(self) -> float:
        return self.primal_residual_history[-1] if self.primal_residual_history else float("inf")


# --------------------------------------------------------------------------
# proximable terms


class ProxTerm:
    def value(self, v) -> float:
        raise NotImplementedError

    def prox(self, v, sigma: float) -> np.ndarray:
        raise NotImplementedError


@dataclass
class SquaredDistance(ProxTerm):
    """``weight/2 ||v - target||^2`` (data fidelity)."""

    target: np.ndarray
    weight: float = 1.0

    def value(self, v):
        return 0.5 * self.weight * float(np.sum((np.asarray(v) - self.target) ** 2))

    def prox(self, v, sigma):
        return prox.prox_squared_distance(v, self.target, self.weight, sigma)


@dataclass
class L1Norm(ProxTerm):
    weight: float = 1.0

    def value(self, v):
        return self.weight * float(np.sum(np.abs(v)))

    def prox(self, v, sigma):
        return prox.prox_l1(v, self.weight, sigma)


@dataclass
class Ridge(ProxTerm):
    weight: float = 0.0

    def value(self, v):
        return 0.5 * self.weight * float(np.sum(np.asarray(v) ** 2))

    def prox(self, v, sigma):
        return prox.prox_ridge(v, self.weight, sigma)


@dataclass
class QuadDict(ProxTerm):
    """``weight/2 ||p - D v||_V^2``."""

    D: np.ndarray
    p: np.ndarray
    V: Optional[np.ndarray] = None
    weight: float = 1.0

    def value(self, v):
        r = self.p - self.D @ v
        vr = r if self.V is None else self.V @ r
        return 0.5 * self.weight * float(r @ vr)

    def prox(self, v, sigma):
        return prox.prox_quad_dict(v, self.D, self.p, self.V, self.weight, sigma)


@dataclass
class JointPatch(ProxTerm):
    """``weight/2 ||v1 - D v2||_V^2`` on ``v = (v1, v2)`` with ``len(v1) = D.shape[0]``."""

    D: np.ndarray
    V: Optional[np.ndarray] = None
    weight: float = 1.0

    def value(self, v):
        m = self.D.shape[0]
        r = v[:m] - self.D @ v[m:]
        vr = r if self.V is None else self.V @ r
        return 0.5 * self.weight * float(r @ vr)

    def prox(self, v, sigma):
        m = self.D.shape[0]
        x1, x2 = prox.prox_joint_patch(v[:m], v[m:], self.D, self.V, self.weight, sigma)
        return np.concatenate([x1, x2])


@dataclass
class SdmmProblem:
    """``sum_k prox_terms[k](linear_ops[k] @ x)``; ``weights`` is informational."""

    linear_ops: Sequence
    prox_terms: Sequence[ProxTerm]
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.linear_ops) != len(self.prox_terms):
            raise SolverSetupError("need one proximable term per linear operator")
        if not self.linear_ops:
            raise SolverSetupError("empty problem")
        n = self.linear_ops[0].shape[1]
        if any(op.shape[1] != n for op in self.linear_ops):
            raise SolverSetupError("linear operators disagree on the variable size")

    @property
    def size(self) -> int:
        return self.linear_ops[0].shape[1]

    def energy(self, x) -> float:
        return float(sum(g.value(op @ x) for op, g in zip(self.linear_ops, self.prox_terms)))


def _factor_gram(ops) -> callable:
    if any(sp.issparse(op) for op in ops):
        gram = sum(sp.csc_matrix(op).T @ sp.csc_matrix(op) for op in ops)
        gram = sp.csc_matrix(gram)
        try:
            return factorized(gram)
        except RuntimeError as exc:
            raise SolverSetupError("P = sum L^T L is singular") from exc
    gram = sum(np.asarray(op).T @ np.asarray(op) for op in ops)
    try:
        chol = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise SolverSetupError("P = sum L^T L is not positive definite") from exc
    return lambda b: linalg.cho_solve(chol, b)


def sdmm_solve(problem: SdmmProblem, sigma: float = 1.0, tol: float = 1e-5,
               max_iter: int = 500, x0=None) -> tuple[np.ndarray, SolveReport]:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    ops = list(problem.linear_ops)
    solve_p = _factor_gram(ops)
    x = np.zeros(problem.size) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    ys = [op @ x for op in ops]
    zs = [np.zeros_like(y) for y in ys]
    report = SolveReport()
    for it in range(1, max_iter + 1):
        rhs = sum(op.T @ (y - z) for op, y, z in zip(ops, ys, zs))
        x = solve_p(rhs)
        res = 0.0
        for k, (op, g) in enumerate(zip(ops, problem.prox_terms)):
            s = op @ x
            ys[k] = g.prox(s + zs[k], sigma)
            zs[k] = zs[k] + s - ys[k]
            if s.size:
                res = max(res, float(np.max(np.abs(s - ys[k]))))
        report.primal_residual_history.append(res)
        report.iterations = it
        if not np.isfinite(res) or res > DIVERGENCE_LIMIT:
            report.final_energy = float("nan")
            raise DivergenceError(f"SDMM diverged at iteration {it} (residual {res:.3g})", report)
        if res < tol:
            report.converged = True
            break
    report.final_energy = problem.energy(x)
    return x, report


def lasso_problem(A, b, lam: float) -> SdmmProblem:
    """``1/2 ||A x - b||^2 + lam ||x||_1`` split as ``w = A x``, ``q = x``."""
    A = np.asarray(A, dtype=np.float64)
    return SdmmProblem([A, np.eye(A.shape[1])],
                       [SquaredDistance(np.asarray(b, dtype=np.float64), 1.0), L1Norm(lam)],
                       {"lambda": lam})
