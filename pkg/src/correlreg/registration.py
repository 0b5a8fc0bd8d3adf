"""Intensity-based affine registration and landmark evaluation.

Convention: a transform ``t`` maps moving-image coordinates to fixed-image
coordinates, and ``warp(moving, t)`` resamples the moving image onto the
fixed grid. Registration looks for ``t`` with ``warp(moving, t) ~ fixed``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize

from .analogy import ConfidenceMap
from .image import Image, ImageLike, as_array, as_image, bilinear_sample, blur
from .landmarks import LandmarkSet
from .transform import AffineTransform2D, SingularTransformError

log = logging.getLogger(__name__)

METRICS = ("ssd", "wssd", "mi")


class EmptyOverlapError(ValueError):
    pass


# --------------------------------------------------------------------------
# warping and metrics


def warp(img: ImageLike, t: AffineTransform2D, out_dims=None) -> tuple[Image, np.ndarray]:
    """Backward bilinear warp. Returns ``(image, valid_mask)``.

    Output pixel ``x`` takes the input value at ``t^{-1}(x)``; pixels whose
    preimage falls outside the input are zero and flagged invalid.
    """
    img = as_image(img)
    if not t.is_invertible():
        raise SingularTransformError(f"cannot warp with a singular transform (det={t.det:.3g})")
    if img.channels != 1:
        raise ValueError("warp expects a single-channel image")
    h, w = (img.height, img.width) if out_dims is None else (int(out_dims[0]), int(out_dims[1]))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = t.inverse().apply(np.column_stack([xs.ravel(), ys.ravel()]))
    vals, valid = bilinear_sample(img.data, src[:, 1], src[:, 0])
    return Image(vals.reshape(h, w), img.pixel_size), valid.reshape(h, w)


def _pair(i0, i1, mask):
    a, b = as_array(i0), as_array(i1)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ValueError("mask dims differ from image dims")
    if not m.any():
        raise EmptyOverlapError("empty valid region")
    return a, b, m


def wssd(i0: ImageLike, i1: ImageLike, w, mask=None) -> float:
    """Mean of ``w * (i0 - i1)**2`` over the valid mask."""
    a, b, m = _pair(i0, i1, mask)
    weights = w.weights if isinstance(w, ConfidenceMap) else np.broadcast_to(
        np.asarray(w, dtype=np.float64), a.shape)
    if weights.shape != a.shape:
        raise ValueError("weight map dims differ from image dims")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("weights must lie in [0, 1]")
    d = a[m] - b[m]
    return float(np.sum(weights[m] * d * d) / d.size)


def ssd(i0: ImageLike, i1: ImageLike, mask=None) -> float:
    return wssd(i0, i1, 1.0, mask)


def _bin_index(v: np.ndarray, bins: int) -> np.ndarray:
    return np.clip(np.floor(v * bins), 0, bins - 1).astype(np.intp)


def entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def mutual_information(i0: ImageLike, i1: ImageLike, bins: int = 32, mask=None) -> float:
    """``H(I0) + H(I1) - H(I0, I1)`` in nats; uniform bins on [0, 1]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    a, b, m = _pair(i0, i1, mask)
    ia, ib = _bin_index(a[m], bins), _bin_index(b[m], bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    return entropy(joint.sum(axis=1)) + entropy(joint.sum(axis=0)) - entropy(joint.ravel())


# --------------------------------------------------------------------------
# optimisation


@dataclass
class RegistrationConfig:
    levels: int = 3
    bins: int = 32
    max_iter: int = 600
    xatol: float = 1e-4
    fatol: float = 1e-10
    step: float = 2.0          # initial simplex size in pixels
    min_overlap: float = 0.25  # fraction of fixed pixels; below this the metric is +inf
    restarts: int = 1          # extra simplex restarts at the finest level

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.min_overlap <= 1:
            raise ValueError("min_overlap must lie in (0, 1]")


@dataclass
class RegistrationResult:
    transform: AffineTransform2D
    final_metric: float
    metric_kind: str
    iterations: int
    converged: bool
    level_metrics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"transform": self.transform.to_list(), "metric": self.metric_kind,
                "final_metric": self.final_metric, "iterations": self.iterations,
                "converged": self.converged}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _scale_transform(t: AffineTransform2D, s: float) -> AffineTransform2D:
    """Express ``t`` (fine pixel coordinates) on a grid decimated by ``s``."""
    return AffineTransform2D(np.column_stack([t.linear, t.translation / s]))


def _pyramid(data: np.ndarray, levels: int) -> list:
    out = [data]
    for _ in range(levels - 1):
        out.append(blur(out[-1])[::2, ::2])
    return out


class _Objective:
    """Metric as a function of 6 scaled parameters about the image centre."""

    def __init__(self, moving, fixed, kind, weights, cfg: RegistrationConfig):
        self.moving, self.fixed = moving, fixed
        self.kind, self.weights, self.cfg = kind, weights, cfg
        h, w = fixed.shape
        self.center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        # a unit change of a linear parameter moves the image corner by ~1 px
        self.radius = max(np.hypot(w, h) / 2.0, 1.0)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        self.pts = np.column_stack([xs.ravel(), ys.ravel()])
        self.n_min = cfg.min_overlap * h * w
        self.evals = 0

    def to_transform(self, p) -> AffineTransform2D:
        lin = np.eye(2) + np.asarray(p[:4]).reshape(2, 2) / self.radius
        return AffineTransform2D.from_linear(lin, p[4:6], self.center)

    def from_transform(self, t: AffineTransform2D) -> np.ndarray:
        lin = t.linear
        tr = t.apply(self.center) - self.center
        return np.concatenate([((lin - np.eye(2)) * self.radius).ravel(), tr])

    def __call__(self, p) -> float:
        self.evals += 1
        t = self.to_transform(p)
        if not t.is_invertible():
            return np.inf
        src = t.inverse().apply(self.pts)
        vals, valid = bilinear_sample(self.moving, src[:, 1], src[:, 0])
        if valid.sum() < self.n_min:
            return np.inf
        f = self.fixed.ravel()
        if self.kind == "mi":
            return -mutual_information(vals, f, self.cfg.bins, valid)
        w = 1.0 if self.weights is None else self.weights.ravel()
        return wssd(vals, f, w, valid)


def register_affine(moving: ImageLike, fixed: ImageLike, metric: str = "ssd",
                    init: Optional[AffineTransform2D] = None,
                    config: Optional[RegistrationConfig] = None,
                    weights: Union[ConfidenceMap, np.ndarray, None] = None) -> RegistrationResult:
    """Affine registration by Nelder-Mead over a coarse-to-fine pyramid.

    Parameters
    ----------
    moving, fixed : Image
        Single-channel images; the result maps moving to fixed coordinates.
    metric : {"ssd", "wssd", "mi"}
        SSD and weighted SSD are minimised, MI is maximised.
    init : AffineTransform2D, optional
        Starting transform, identity by default.
    weights : ConfidenceMap or array, optional
        Per-pixel weights on the fixed grid, required for ``wssd``.
    """
    cfg = config or RegistrationConfig()
    cfg.validate()
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    mov, fix = as_array(moving), as_array(fixed)
    if mov.ndim != 2 or fix.ndim != 2:
        raise ValueError("registration needs single-channel images")
    w_full = None
    if metric == "wssd":
        if weights is None:
            raise ValueError("wssd needs a weight map")
        cmap = weights if isinstance(weights, ConfidenceMap) else ConfidenceMap(weights)
        w_full = cmap.resize(fix.shape).weights
    t = AffineTransform2D.identity() if init is None else init
    if not t.is_invertible():
        raise SingularTransformError("initial transform is singular")

    levels = cfg.levels
    while levels > 1 and min(fix.shape + mov.shape) // 2 ** (levels - 1) < 8:
        levels -= 1
    pm, pf = _pyramid(mov, levels), _pyramid(fix, levels)
    pw = _pyramid(w_full, levels) if w_full is not None else [None] * levels

    iterations = 0
    converged = False
    level_metrics = []
    value = np.inf
    for lvl in range(levels - 1, -1, -1):
        s = 2.0 ** lvl
        obj = _Objective(pm[lvl], pf[lvl], metric,
                         None if pw[lvl] is None else np.clip(pw[lvl], 0, 1), cfg)
        p0 = obj.from_transform(_scale_transform(t, s))
        rounds = 1 + (cfg.restarts if lvl == 0 else 0)
        for _ in range(rounds):
            simplex = np.vstack([p0, p0 + cfg.step * np.eye(6)])
            res = minimize(obj, p0, method="Nelder-Mead",
                           options={"maxiter": cfg.max_iter, "xatol": cfg.xatol,
                                    "fatol": cfg.fatol, "initial_simplex": simplex})
            iterations += int(res.nit)
            if np.isfinite(res.fun) and res.fun <= obj(p0):
                p0 = res.x
            converged = bool(res.success)
        value = float(obj(p0))
        level_metrics.append(value)
        t = _scale_transform(obj.to_transform(p0), 1.0 / s)

    if not np.isfinite(value):
        raise EmptyOverlapError("no overlap between images at the final transform")
    final = -value if metric == "mi" else value
    return RegistrationResult(t, final, metric, iterations, converged, level_metrics)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationReport:
    mae: float
    std: float
    per_landmark_errors: list
    pixel_size: float

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["id", "error"])
            for i, e in enumerate(self.per_landmark_errors):
                wr.writerow([i, repr(float(e))])


def _points(p) -> np.ndarray:
    return np.asarray(p.points if isinstance(p, LandmarkSet) else p, dtype=np.float64).reshape(-1, 2)


def evaluate_landmarks(t: AffineTransform2D, src_pts, tgt_pts,
                       pixel_size: float = 1.0) -> EvaluationReport:
    """Residuals ``||t(src_i) - tgt_i|| * pixel_size``; STD is the population form."""
    src, tgt = _points(src_pts), _points(tgt_pts)
    if len(src) != len(tgt):
        raise ValueError(f"landmark count mismatch: {len(src)} vs {len(tgt)}")
    if len(src) == 0:
        raise ValueError("no landmarks to evaluate")
    if not pixel_size > 0:
        raise ValueError("pixel_size must be positive")
    err = np.linalg.norm(t.apply(src) - tgt, axis=1) * pixel_size
    return EvaluationReport(float(err.mean()), float(err.std()), [float(e) for e in err],
                            float(pixel_size))


def grid_points(shape, n: int = 8, margin: float = 0.1) -> np.ndarray:
    """``n x n`` evaluation points ``(x, y)`` spread over the image."""
    h, w = shape
    ys = np.linspace(margin * (h - 1), (1 - margin) * (h - 1), n)
    xs = np.linspace(margin * (w - 1), (1 - margin) * (w - 1), n)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def transform_error(t_est: AffineTransform2D, t_true: AffineTransform2D, shape,
                    n: int = 8) -> float:
    """Mean distance between ``t_est`` and ``t_true`` over a grid of points."""
    pts = grid_points(shape, n)
    return float(np.mean(np.linalg.norm(t_est.apply(pts) - t_true.apply(pts), axis=1)))
