"""Fiducial landmark registration.

Beads are thresholded, labelled and reduced to centroids. Each landmark
carries the ratio of distances to its two nearest neighbours, which is
invariant under similarity transforms. Matching a landmark and its two
neighbours fixes an affine map through three pairs; the map with the least
median nearest-landmark error wins and is then refined by least squares
over mutual nearest neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .image import Image, ImageLike, as_image
from .transform import AffineTransform2D, SingularTransformError, affine_from_pairs

TIE_EPS = 1e-9


class LandmarkError(ValueError):
    """Base class for failures of the landmark pipeline."""


class ThresholdError(LandmarkError):
    pass


class InsufficientLandmarksError(LandmarkError):
    pass


class NoRatioMatchError(LandmarkError):
    pass


class DegenerateConfigurationError(LandmarkError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray          # (n, 2) as (x, y)
    ratios: np.ndarray          # (n,) d1 / d2
    neighbor_ids: np.ndarray    # (n, 2) nearest, second nearest
    neighbor_dists: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class MatchHypothesis:
    pairs: tuple                # three (source_id, target_id)
    transform: AffineTransform2D
    median_error: float


# --------------------------------------------------------------------------
# detection


def otsu_threshold(data: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold over ``bins`` uniform bins on [0, 1].

    Returns the lower edge of the first foreground bin.
    """
    hist, _ = np.histogram(np.clip(data, 0, 1), bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    total = hist.sum()
    centers = (np.arange(bins) + 0.5) / bins
    w0 = np.cumsum(hist)[:-1]          # class 0 = bins [0, k)
    w1 = total - w0
    m0 = np.cumsum(hist * centers)[:-1]
    m1 = (hist * centers).sum() - m0
    ok = (w0 > 0) & (w1 > 0)
    if not np.any(ok):
        raise ThresholdError("no threshold separates classes")
    between = np.zeros_like(w0)
    between[ok] = w0[ok] * w1[ok] * (m0[ok] / w0[ok] - m1[ok] / w1[ok]) ** 2
    k = int(np.argmax(between)) + 1
    return k / bins


def binarize(img: ImageLike, threshold: Union[str, float] = "otsu",
             polarity: str = "bright") -> Image:
    """Foreground = intensity >= threshold (``polarity='dark'`` complements)."""
    img = as_image(img)
    if img.channels != 1:
        raise ValueError("binarize requires a single-channel image")
    if threshold == "otsu":
        t = otsu_threshold(img.data)
    else:
        t = float(threshold)
    mask = img.data >= t
    if polarity == "dark":
        mask = ~mask
    elif polarity != "bright":
        raise ValueError(f"unknown polarity {polarity!r}")
    return img.with_data(mask.astype(np.float64))


def connected_components(binary: ImageLike, connectivity: int = 8) -> list[np.ndarray]:
    """Foreground components as ``(k, 2)`` arrays of ``(y, x)`` pixel indices,
    ordered by (min y, min x)."""
    data = as_image(binary).data > 0.5
    if connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, n = ndimage.label(data, structure=structure)
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    comps = [np.column_stack([y, x]) for y, x in zip(np.split(ys, splits), np.split(xs, splits))]
    comps.sort(key=lambda c: (int(c[:, 0].min()), int(c[:, 1].min())))
    return comps


def centroids(components, min_area: int = 4, max_area: int = 400) -> LandmarkSet:
    """Mean pixel coordinate of each component whose area is within bounds."""
    pts = [c[:, ::-1].mean(axis=0) for c in components if min_area <= len(c) <= max_area]
    if len(pts) < 3:
        raise InsufficientLandmarksError(
            f"insufficient landmarks: {len(pts)} components within area bounds, need 3")
    return compute_ratios(np.asarray(pts, dtype=np.float64))


def compute_ratios(points) -> LandmarkSet:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise InsufficientLandmarksError(f"insufficient landmarks: {n}, need 3")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    if np.any(dist == 0):
        i, j = np.argwhere(dist == 0)[0]
        raise LandmarkError(f"duplicate landmarks {i} and {j}")
    idx = np.arange(n)
    nbr = np.empty((n, 2), dtype=np.intp)
    for i in range(n):
        order = np.lexsort((idx, dist[i]))
        nbr[i] = order[:2]
    nd = np.take_along_axis(dist, nbr, axis=1)
    return LandmarkSet(pts, nd[:, 0] / nd[:, 1], nbr, nd)


def detect_landmarks(img: ImageLike, threshold: Union[str, float] = "otsu",
                     polarity: str = "bright", connectivity: int = 8,
                     min_area: int = 4, max_area: int = 400) -> LandmarkSet:
    comps = connected_components(binarize(img, threshold, polarity), connectivity)
    return centroids(comps, min_area, max_area)


# --------------------------------------------------------------------------
# matching


def _triple_orderings(ls: LandmarkSet, i: int) -> list[tuple]:
    n1, n2 = ls.neighbor_ids[i]
    d1, d2 = ls.neighbor_dists[i]
    orders = [(i, int(n1), int(n2))]
    if d2 - d1 <= TIE_EPS * max(1.0, d2):
        orders.append((i, int(n2), int(n1)))
    return orders


def median_nearest_error(t: AffineTransform2D, src_pts: np.ndarray, tree: cKDTree) -> float:
    d, _ = tree.query(t.apply(src_pts))
    return float(np.median(d))


def _nearest_errors(t: AffineTransform2D, src_pts: np.ndarray, tree: cKDTree) -> tuple:
    d, _ = tree.query(t.apply(src_pts))
    return float(np.median(d)), float(np.mean(d))


def match_and_select(src: LandmarkSet, tgt: LandmarkSet, ratio_tol: float = 0.05) -> MatchHypothesis:
    """Hypothesize source-target correspondences from distance ratios and
    keep the affine map with the least median nearest-target distance."""
    if len(src) < 3 or len(tgt) < 3:
        raise InsufficientLandmarksError("matching needs >= 3 landmarks in each set")
    tree = cKDTree(tgt.points)
    best: Optional[MatchHypothesis] = None
    best_mean = np.inf
    any_candidate = False
    for i in range(len(src)):
        cands = np.flatnonzero(np.abs(tgt.ratios - src.ratios[i]) <= ratio_tol)
        if len(cands):
            any_candidate = True
        src_orders = _triple_orderings(src, i)
        for j in cands:
            for so in src_orders:
                for to in _triple_orderings(tgt, int(j)):
                    try:
                        t = affine_from_pairs(src.points[list(so)], tgt.points[list(to)])
                    except SingularTransformError:
                        continue
                    if not t.is_invertible():
                        continue
                    err, mean = _nearest_errors(t, src.points, tree)
                    if best is None:
                        better = True
                    elif abs(err - best.median_error) <= TIE_EPS * max(1.0, best.median_error):
                        # equal medians (e.g. five points, where every exact
                        # triple gives median 0): fall back to the mean
                        better = mean < best_mean
                    else:
                        better = err < best.median_error
                    if better:
                        best = MatchHypothesis(tuple(zip(so, to)), t, err)
                        best_mean = mean
    if not any_candidate:
        raise NoRatioMatchError(f"no ratio matches within tolerance {ratio_tol}")
    if best is None:
        raise DegenerateConfigurationError("all candidate triples are degenerate")
    return best


# --------------------------------------------------------------------------
# refinement


def default_inlier_radius(tgt_pts) -> float:
    """Three times the median nearest-neighbour spacing of the target landmarks."""
    pts = np.asarray(tgt_pts, dtype=np.float64)
    d, _ = cKDTree(pts).query(pts, k=2)
    return 3.0 * float(np.median(d[:, 1]))


def mutual_nearest_pairs(src_pts, tgt_pts, t: AffineTransform2D,
                         radius: float) -> np.ndarray:
    """Index pairs ``(k, 2)`` of mutual nearest neighbours after mapping ``src`` by ``t``."""
    src_pts = np.asarray(src_pts, dtype=np.float64)
    tgt_pts = np.asarray(tgt_pts, dtype=np.float64)
    mapped = t.apply(src_pts)
    d_st, j_st = cKDTree(tgt_pts).query(mapped)
    _, i_ts = cKDTree(mapped).query(tgt_pts)
    i = np.arange(len(src_pts))
    keep = (i_ts[j_st] == i) & (d_st <= radius)
    return np.column_stack([i[keep], j_st[keep]])


def mean_residual(t: AffineTransform2D, src_pts, tgt_pts, pairs, squared: bool = False) -> float:
    r = t.apply(np.asarray(src_pts)[pairs[:, 0]]) - np.asarray(tgt_pts)[pairs[:, 1]]
    d2 = (r ** 2).sum(axis=1)
    return float(d2.mean() if squared else np.sqrt(d2).mean())


def fit_affine_lsq(src, tgt) -> AffineTransform2D:
    """Least-squares affine over point pairs via the 3x3 normal equations."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 2)
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need >= 3 pairs, got {len(src)}")
    x = np.column_stack([src, np.ones(len(src))])
    normal = x.T @ x
    s = np.linalg.svd(normal, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise DegenerateConfigurationError("degenerate configuration: point pairs are collinear")
    sol = np.linalg.solve(normal, x.T @ tgt)   # (3, 2)
    return AffineTransform2D(sol.T)


def refine_least_squares(src: LandmarkSet, tgt: LandmarkSet, init: AffineTransform2D,
                         inlier_radius: Optional[float] = None) -> AffineTransform2D:
    src_pts = src.points if isinstance(src, LandmarkSet) else np.asarray(src, dtype=np.float64)
    tgt_pts = tgt.points if isinstance(tgt, LandmarkSet) else np.asarray(tgt, dtype=np.float64)
    if inlier_radius is None:
        inlier_radius = default_inlier_radius(tgt_pts)
    pairs = mutual_nearest_pairs(src_pts, tgt_pts, init, inlier_radius)
    if len(pairs) < 3:
        raise DegenerateConfigurationError(f"only {len(pairs)} inlier pairs, need 3")
    return fit_affine_lsq(src_pts[pairs[:, 0]], tgt_pts[pairs[:, 1]])


@dataclass(frozen=True)
class LandmarkRegistration:
    transform: AffineTransform2D      # refined
    initial: MatchHypothesis
    source: LandmarkSet
    target: LandmarkSet
    inlier_pairs: np.ndarray


def register_landmarks(target: ImageLike, source: ImageLike, threshold="otsu",
                       polarity: str = "bright", ratio_tol: float = 0.05,
                       min_area: int = 4, max_area: int = 400,
                       inlier_radius: Optional[float] = None) -> LandmarkRegistration:
    """Full fiducial pipeline returning the refined source-to-target transform."""
    src = detect_landmarks(source, threshold, polarity, min_area=min_area, max_area=max_area)
    tgt = detect_landmarks(target, threshold, polarity, min_area=min_area, max_area=max_area)
    return register_landmark_sets(src, tgt, ratio_tol, inlier_radius)


def register_landmark_sets(src: LandmarkSet, tgt: LandmarkSet, ratio_tol: float = 0.05,
                           inlier_radius: Optional[float] = None) -> LandmarkRegistration:
    hyp = match_and_select(src, tgt, ratio_tol)
    if inlier_radius is None:
        inlier_radius = default_inlier_radius(tgt.points)
    pairs = mutual_nearest_pairs(src.points, tgt.points, hyp.transform, inlier_radius)
    refined = refine_least_squares(src, tgt, hyp.transform, inlier_radius)
    return LandmarkRegistration(refined, hyp, src, tgt, pairs)
