"""Joint dictionaries, batched lasso coding and alternating dictionary learning."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .prox import prox_l1
from .sdmm import DIVERGENCE_LIMIT, DivergenceError, SolveReport

log = logging.getLogger(__name__)

MAGIC = b"CRJD"
VERSION = 1
SUPPORT_EPS = 1e-8
COND_LIMIT = 1e12
_HEADER = struct.Struct("<4sIIII")


class DeadAtomsError(ValueError):
    def __init__(self, message: str, atoms):
        super().__init__(message)
        self.atoms = list(atoms)


@dataclass(frozen=True)
class JointDictionary:
    """Per-modality atom matrices ``d1`` (m1 x K) and ``d2`` (m2 x K) sharing codes."""

    d1: np.ndarray
    d2: np.ndarray
    patch_size: int

    def __post_init__(self):
        d1 = np.asarray(self.d1, dtype=np.float64)
        d2 = np.asarray(self.d2, dtype=np.float64)
        if d1.ndim != 2 or d2.ndim != 2 or d1.shape[1] != d2.shape[1]:
            raise ValueError(f"incompatible dictionary shapes {d1.shape} and {d2.shape}")
        if d1.shape[0] != self.patch_size ** 2 or d2.shape[0] != self.patch_size ** 2:
            raise ValueError(f"atoms must have patch_size**2 = {self.patch_size ** 2} rows")
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d2", d2)

    @property
    def K(self) -> int:
        return self.d1.shape[1]

    @property
    def m(self) -> int:
        return self.d1.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.d1, self.d2])

    @classmethod
    def from_stacked(cls, D, patch_size: int) -> "JointDictionary":
        m = patch_size ** 2
        return cls(D[:m], D[m:], patch_size)

    def save(self, path) -> None:
        """Binary file: header (magic, version, m, K, patch_size), then
        little-endian float64 ``d1`` and ``d2`` row-major; JSON sidecar mirrors the header."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.m, self.K, self.patch_size))
            fh.write(np.ascontiguousarray(self.d1, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.d2, dtype="<f8").tobytes())
        meta = {"magic": MAGIC.decode(), "version": VERSION, "m": self.m, "K": self.K,
                "patch_size": self.patch_size, "dtype": "<f8", "order": "row-major",
                "payload": ["d1", "d2"]}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "JointDictionary":
        raw = Path(path).read_bytes()
        magic, version, m, k, ps = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a joint dictionary file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported dictionary version {version}")
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != 2 * m * k:
            raise ValueError(f"{path}: truncated dictionary payload")
        return cls(body[: m * k].reshape(m, k).copy(), body[m * k:].reshape(m, k).copy(), ps)


@dataclass(frozen=True)
class SparseCodeSet:
    alphas: np.ndarray  # (K, N)
    lam: float

    @property
    def support_sizes(self) -> np.ndarray:
        return np.count_nonzero(np.abs(self.alphas) > SUPPORT_EPS, axis=0)


def lasso_column_energies(X, D, alphas, lam: float) -> np.ndarray:
    r = X - D @ alphas
    return 0.5 * np.einsum("ij,ij->j", r, r) + lam * np.abs(alphas).sum(axis=0)


def learning_energy(X, D, alphas, lam: float) -> float:
    """``sum_i 1/2 ||x_i - D a_i||^2 + lam ||a_i||_1``."""
    return float(lasso_column_energies(X, D, alphas, lam).sum())


def sparse_code(X, D, lam: float, sigma: float = 1.0, tol: float = 1e-5,
                max_iter: int = 100, alpha0: Optional[np.ndarray] = None):
    """Solve every column's lasso ``1/2 ||x_i - D a||^2 + lam ||a||_1`` by SDMM.

    Columns are independent; they are iterated together with splitting
    ``w = D a`` (quadratic term) and ``q = a`` (l1 term), so ``P = D^T D + I``.
    Returns the l1 copy ``q`` (exact zeros off the support) and the report.
    """
    X = np.asarray(X, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    k = D.shape[1]
    chol = linalg.cho_factor(D.T @ D + np.eye(k))
    alpha = np.zeros((k, X.shape[1])) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    y1 = D @ alpha
    y2 = alpha.copy()
    # duals consistent with the stationarity conditions at alpha0, so an
    # optimal warm start is a fixed point
    z1 = (y1 - X) / sigma
    z2 = np.clip(-(D.T @ z1), -lam / sigma, lam / sigma)
    report = SolveReport()
    for it in range(1, max_iter + 1):
        alpha = linalg.cho_solve(chol, D.T @ (y1 - z1) + (y2 - z2))
        s1 = D @ alpha
        v1 = s1 + z1
        y1 = (X + sigma * v1) / (1.0 + sigma)
        v2 = alpha + z2
        y2 = prox_l1(v2, lam, sigma)
        z1 = v1 - y1
        z2 = v2 - y2
        res = max(float(np.max(np.abs(s1 - y1), initial=0.0)),
                  float(np.max(np.abs(alpha - y2), initial=0.0)))
        report.primal_residual_history.append(res)
        report.iterations = it
        if not np.isfinite(res) or res > DIVERGENCE_LIMIT:
            raise DivergenceError(f"lasso coding diverged at iteration {it}", report)
        if res < tol:
            report.converged = True
            break
    report.final_energy = learning_energy(X, D, y2, lam)
    return y2, report


def dictionary_update(patches, alphas) -> np.ndarray:
    """Least-squares dictionary ``D = B A^{-1}`` with ``B = sum p_i a_i^T``,
    ``A = sum a_i a_i^T``; a rank-deficient ``A`` uses its pseudo-inverse.

    Atoms never used by any code come back as zero columns. Raises
    :class:`DeadAtomsError` when no atom is used at all.
    """
    P = np.asarray(patches, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    if P.ndim != 2 or alphas.ndim != 2 or P.shape[1] != alphas.shape[1] or P.shape[1] < 1:
        raise ValueError("patches (m x N) and alphas (K x N) must share N >= 1")
    A = alphas @ alphas.T
    B = P @ alphas.T
    used = np.any(alphas != 0, axis=1)
    if not np.any(used):
        raise DeadAtomsError("dead atoms: no atom is used by any code", range(alphas.shape[0]))
    if np.linalg.cond(A) < COND_LIMIT:
        return linalg.solve(A, B.T, assume_a="pos").T
    return B @ np.linalg.pinv(A, hermitian=True)


def normalize_atoms(D, alphas):
    """Scale atoms to unit norm and code rows inversely; zero atoms are left alone."""
    norms = np.linalg.norm(D, axis=0)
    scale = np.where(norms > 0, norms, 1.0)
    return D / scale, alphas * scale[:, None]


def _spread_columns(X, count: int, rng: np.random.Generator,
                    cos_limit: float = 1 - 1e-6) -> list:
    """Seeded k-means++ style pick of training columns on the unit sphere:
    each next column is drawn with probability proportional to
    ``(1 - max |cos|)**2`` against the columns already chosen."""
    norms = np.linalg.norm(X, axis=0)
    ok = np.flatnonzero(norms > 0)
    if len(ok) == 0:
        return []
    U = X[:, ok] / norms[ok]
    first = int(rng.integers(len(ok)))
    chosen = [first]
    best = np.abs(U.T @ U[:, first])
    while len(chosen) < count:
        w = np.where(best > cos_limit, 0.0, (1.0 - best) ** 2)
        total = w.sum()
        if total <= 0:
            break
        j = int(rng.choice(len(ok), p=w / total))
        chosen.append(j)
        best = np.maximum(best, np.abs(U.T @ U[:, j]))
    return [int(ok[j]) for j in chosen]


def _distinct_columns(X, order, count: int, cos_limit: float = 1 - 1e-6) -> list:
    norms = np.linalg.norm(X, axis=0)
    chosen: list = []
    dirs = []
    for j in order:
        if norms[j] == 0:
            continue
        d = X[:, j] / norms[j]
        if dirs and np.max(np.abs(np.asarray(dirs) @ d)) > cos_limit:
            continue
        chosen.append(int(j))
        dirs.append(d)
        if len(chosen) == count:
            break
    return chosen


@dataclass
class LearningHistory:
    energy: list = field(default_factory=list)
    reseeded: int = 0
    rejected_steps: int = 0
    inner_reports: list = field(default_factory=list)


def learn_joint_dictionary(patch_pairs, K: int, lam: float, outer_iters: int = 30,
                           seed: int = 0, patch_size: Optional[int] = None,
                           sigma: float = 1.0, tol: float = 1e-5, inner_iters: int = 100,
                           init: str = "spread"):
    """Alternate lasso coding and closed-form dictionary updates on stacked patch pairs.

    Each closed-form dictionary step is followed by unit-norm atom scaling
    with the inverse scaling on the codes. That rescaling changes the l1
    term, so the step is kept only if re-coding afterwards does not raise
    the energy. Otherwise a column-wise step under ``||d_k|| <= 1`` is taken,
    which never increases it. With per-column safeguarding of the coding
    step the recorded energy is non-increasing.

    ``init="spread"`` seeds atoms from training columns drawn k-means++
    style (favouring new directions); ``init="random"`` takes the first K
    non-parallel columns of a seeded permutation.
    """
    P1, P2 = (np.asarray(p, dtype=np.float64) for p in patch_pairs)
    if P1.shape[1] != P2.shape[1]:
        raise ValueError("patch pair matrices must have the same number of columns")
    X = np.vstack([P1, P2])
    m2, n = X.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        log.warning("only %d training patches for %d atoms", n, K)
    if patch_size is None:
        patch_size = int(round(np.sqrt(P1.shape[0])))
    rng = np.random.default_rng(seed)
    cols = _spread_columns(X, K, rng) if init == "spread" else \
        _distinct_columns(X, rng.permutation(n), K)
    if len(cols) < K:
        raise DeadAtomsError(f"dead atoms: only {len(cols)} distinct training columns for K={K}",
                             range(len(cols), K))
    D = X[:, cols] / np.linalg.norm(X[:, cols], axis=0)

    hist = LearningHistory()
    code = dict(sigma=sigma, tol=tol, max_iter=inner_iters)
    alphas, rep = sparse_code(X, D, lam, **code)
    hist.inner_reports.append(rep)
    energy = learning_energy(X, D, alphas, lam)
    hist.energy.append(energy)

    for _ in range(outer_iters):
        D_ls = dictionary_update(X, alphas)
        dead = np.flatnonzero(~np.any(alphas != 0, axis=1))
        if len(dead):
            D_ls[:, dead] = _reseed(X, D, alphas, lam, len(dead))
            D[:, dead] = D_ls[:, dead]
            hist.reseeded += len(dead)
        Dc, ac = normalize_atoms(D_ls, alphas)
        an, rep = sparse_code(X, Dc, lam, alpha0=ac, **code)
        an = _keep_better(X, Dc, lam, ac, an)
        e_new = learning_energy(X, Dc, an, lam)
        if e_new > energy:
            # rescaled closed-form step went uphill: take the norm-constrained
            # column-wise step instead, which cannot
            hist.rejected_steps += 1
            Dc, ac = _projected_column_step(D, X, alphas)
            an, rep = sparse_code(X, Dc, lam, alpha0=ac, **code)
            an = _keep_better(X, Dc, lam, ac, an)
            e_new = learning_energy(X, Dc, an, lam)
        if e_new <= energy:
            D, alphas, energy = Dc, an, e_new
        hist.inner_reports.append(rep)
        hist.energy.append(energy)

    return JointDictionary.from_stacked(D, patch_size), SparseCodeSet(alphas, lam), hist


def _projected_column_step(D, X, alphas):
    """One sweep of exact per-atom minimization under ``||d_k|| <= 1``,
    then atoms shorter than one are stretched to unit norm (codes shrink)."""
    D = D.copy()
    A = alphas @ alphas.T
    B = X @ alphas.T
    for k in range(D.shape[1]):
        if A[k, k] <= 0:
            continue
        u = D[:, k] + (B[:, k] - D @ A[:, k]) / A[k, k]
        nrm = np.linalg.norm(u)
        D[:, k] = u / nrm if nrm > 1.0 else u
    return normalize_atoms(D, alphas)


def _keep_better(X, D, lam, old, new):
    e_old = lasso_column_energies(X, D, old, lam)
    e_new = lasso_column_energies(X, D, new, lam)
    return np.where(e_new <= e_old, new, old)


def _reseed(X, D, alphas, lam, count: int) -> np.ndarray:
    """Unit directions of the worst-reconstructed training columns."""
    err = np.linalg.norm(X - D @ alphas, axis=0)
    order = np.argsort(-err, kind="stable")
    cols = _distinct_columns(X, order, count)
    while len(cols) < count:
        cols.append(cols[-1] if cols else int(order[0]))
    out = X[:, cols]
    norms = np.linalg.norm(out, axis=0)
    return out / np.where(norms > 0, norms, 1.0)
