"""Image analogies: predict B' from B given a training pair (A, A').

Two predictors are provided. ``synthesize_nn`` is the classic
coarse-to-fine patch search with a coherence candidate; it copies A'
values. ``synthesize_sparse`` codes B against a joint dictionary and reads
off the second-modality reconstruction. ``prediction_confidence`` turns
validation errors into per-pixel weights for weighted SSD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .image import Image, ImageError, ImageLike, PatchGrid, as_array, as_image, \
    extract_patches, gaussian_pyramid
from .sparse.coding import sparse_code_analogy
from .sparse.dictionary import JointDictionary, learn_joint_dictionary

# intensities are shifted by this before sparse coding so that an affine
# intensity relation between modalities becomes a linear one
INTENSITY_OFFSET = 0.5


@dataclass(frozen=True)
class AnalogyTrainingPair:
    a: Image
    a_prime: Image

    def __post_init__(self):
        a, ap = as_image(self.a), as_image(self.a_prime)
        if a.channels != 1 or ap.channels != 1:
            raise ImageError("training pair images must be single-channel")
        if a.shape != ap.shape:
            raise ImageError(f"training pair dims differ: {a.shape} vs {ap.shape}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "a_prime", ap)


@dataclass(frozen=True)
class ConfidenceMap:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("confidence weights must be 2D")
        if not np.all(np.isfinite(w)) or w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("confidence weights must lie in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple:
        return self.weights.shape

    def resize(self, shape) -> "ConfidenceMap":
        """Bilinear resampling onto ``shape`` (pixel centres aligned)."""
        shape = (int(shape[0]), int(shape[1]))
        if shape == self.shape:
            return self
        return ConfidenceMap(np.clip(_resize(self.weights, shape), 0.0, 1.0))


def _resize(data: np.ndarray, shape) -> np.ndarray:
    h, w = data.shape
    ys = (np.arange(shape[0]) + 0.5) * h / shape[0] - 0.5
    xs = (np.arange(shape[1]) + 0.5) * w / shape[1] - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(data, [gy, gx], order=1, mode="nearest")


# --------------------------------------------------------------------------
# nearest-neighbour analogies


def _causal_offsets(p: int) -> np.ndarray:
    """Window offsets ``(dy, dx)`` preceding the centre in scan-line order."""
    r = p // 2
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy < 0 or (dy == 0 and dx < 0)]
    return np.asarray(offs, dtype=np.intp).reshape(-1, 2)


def _patch_features(data: np.ndarray, p: int) -> np.ndarray:
    """All ``p x p`` neighbourhoods (mirror padded), shape ``(h*w, p*p)``."""
    r = p // 2
    padded = np.pad(data, r, mode="symmetric")
    win = sliding_window_view(padded, (p, p))
    return win.reshape(data.size, p * p)


def _causal_features(data: np.ndarray, offs: np.ndarray) -> np.ndarray:
    r = int(np.abs(offs).max()) if len(offs) else 0
    padded = np.pad(data, r, mode="symmetric")
    h, w = data.shape
    cols = [padded[r + dy:r + dy + h, r + dx:r + dx + w].ravel() for dy, dx in offs]
    return np.stack(cols, axis=1) if cols else np.zeros((data.size, 0))


def _coarse_features(data: np.ndarray, fine_shape, p: int) -> np.ndarray:
    """Neighbourhood of the parent pixel ``(y // 2, x // 2)`` for every fine pixel."""
    feats = _patch_features(data, p).reshape(data.shape + (p * p,))
    h, w = fine_shape
    py = np.minimum(np.arange(h) // 2, data.shape[0] - 1)
    px = np.minimum(np.arange(w) // 2, data.shape[1] - 1)
    return feats[py[:, None], px[None, :]].reshape(h * w, p * p)


def synthesize_nn(train: AnalogyTrainingPair, b: ImageLike, levels: int = 3,
                  patch_size: int = 5, kappa: float = 1.0, coherence: bool = True,
                  return_sources: bool = False):
    """Nearest-neighbour image analogy with coherence search.

    Parameters
    ----------
    train : AnalogyTrainingPair
        Aligned example pair (A, A').
    b : Image
        Input in A's modality.
    levels : int
        Pyramid levels, processed coarsest first.
    patch_size : int
        Odd neighbourhood size at each level. Parent-level neighbourhoods use
        ``patch_size // 2`` rounded up to odd.
    kappa : float
        Coherence bias. The coherence candidate wins when its distance is
        below ``d_nn * (1 + 2**(l - L) * kappa)``; ``kappa = 0`` gives plain
        nearest-neighbour synthesis.
    coherence : bool
        Set to False to skip the coherence candidate entirely.
    return_sources : bool
        Also return the ``(y, x)`` source position chosen for every pixel.

    Returns
    -------
    Image
        B', whose values are all copied from A'.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError("patch_size must be odd")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    a, ap = train.a, train.a_prime
    bimg = as_image(b)
    if bimg.channels != 1:
        raise ImageError("synthesize_nn needs a single-channel input")
    if a.height < patch_size or a.width < patch_size:
        raise ImageError(f"training images ({a.height}x{a.width}) smaller than patch {patch_size}")
    pa = gaussian_pyramid(a, levels, min_size=1)[::-1]
    pap = gaussian_pyramid(ap, levels, min_size=1)[::-1]
    pb = gaussian_pyramid(bimg, levels, min_size=1)[::-1]
    pc = (patch_size // 2) | 1
    offs = _causal_offsets(patch_size)
    L = levels - 1

    out_prev = None
    src_pos = None
    for l in range(levels):
        A, Ap, B = pa[l].data, pap[l].data, pb[l].data
        ha, wa = A.shape
        hb, wb = B.shape
        fa = [_patch_features(A, patch_size)]
        fb = [_patch_features(B, patch_size)]
        if l > 0:
            fa += [_coarse_features(pa[l - 1].data, A.shape, pc),
                   _coarse_features(pap[l - 1].data, A.shape, pc)]
            fb += [_coarse_features(pb[l - 1].data, B.shape, pc),
                   _coarse_features(out_prev, B.shape, pc)]
        fa_static = np.hstack(fa)
        fb_static = np.hstack(fb)
        fa_causal = _causal_features(Ap, offs)
        ap_flat = Ap.ravel()
        factor = 1.0 + 2.0 ** (l - L) * kappa

        out = np.zeros((hb, wb))
        src = np.zeros((hb, wb, 2), dtype=np.intp)
        for y in range(hb):
            for x in range(wb):
                qy, qx = y + offs[:, 0], x + offs[:, 1]
                ok = (qy >= 0) & (qy < hb) & (qx >= 0) & (qx < wb)
                q = y * wb + x
                diff = fa_static - fb_static[q]
                dist = np.einsum("ij,ij->i", diff, diff)
                if np.any(ok):
                    dc = fa_causal[:, ok] - out[qy[ok], qx[ok]]
                    dist += np.einsum("ij,ij->i", dc, dc)
                best = int(np.argmin(dist))
                d_nn = dist[best]
                # coherence: continue the source patch of each synthesized neighbour
                if coherence and np.any(ok):
                    cy = src[qy[ok], qx[ok], 0] - offs[ok, 0]
                    cx = src[qy[ok], qx[ok], 1] - offs[ok, 1]
                    inside = (cy >= 0) & (cy < ha) & (cx >= 0) & (cx < wa)
                    if np.any(inside):
                        cand = cy[inside] * wa + cx[inside]
                        k = int(np.argmin(dist[cand]))
                        if dist[cand[k]] < d_nn * factor:
                            best = int(cand[k])
                out[y, x] = ap_flat[best]
                src[y, x] = divmod(best, wa)
        out_prev = out
        src_pos = src
    result = Image(out_prev, bimg.pixel_size)
    return (result, src_pos) if return_sources else result


# --------------------------------------------------------------------------
# sparse analogies


def training_patches(pairs: Sequence[AnalogyTrainingPair], patch_size: int,
                     num_patches: Optional[int] = None, seed: int = 0,
                     stride: Optional[int] = None, offset: float = INTENSITY_OFFSET):
    """Aligned patch columns ``(P1, P2)`` from training pairs.

    Patches come from a non-overlapping grid (``stride = patch_size`` by
    default), optionally subsampled to ``num_patches`` at random.
    """
    if not pairs:
        raise ValueError("no training pairs")
    stride = patch_size if stride is None else stride
    cols1, cols2 = [], []
    for pair in pairs:
        grid = PatchGrid.regular(pair.a.shape, patch_size, stride)
        cols1.append(extract_patches(pair.a, grid) - offset)
        cols2.append(extract_patches(pair.a_prime, grid) - offset)
    P1, P2 = np.hstack(cols1), np.hstack(cols2)
    if num_patches is not None and num_patches < P1.shape[1]:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(P1.shape[1], num_patches, replace=False))
        P1, P2 = P1[:, pick], P2[:, pick]
    return P1, P2


def train_joint_dictionary(pairs: Sequence[AnalogyTrainingPair], patch_size: int, K: int,
                           lam: float, num_patches: Optional[int] = None, seed: int = 0,
                           outer_iters: int = 30, offset: float = INTENSITY_OFFSET, **kw):
    """Sample training patches and learn a joint dictionary.

    Returns ``(dictionary, codes, history)`` as ``learn_joint_dictionary``.
    Raises ``ValueError`` when all training patches are constant.
    """
    P1, P2 = training_patches(pairs, patch_size, num_patches, seed, offset=offset)
    X = np.vstack([P1, P2])
    if np.all(np.ptp(X, axis=1) == 0):
        raise ValueError("degenerate training data (zero variance)")
    return learn_joint_dictionary((P1, P2), K, lam, outer_iters=outer_iters, seed=seed,
                                  patch_size=patch_size, **kw)


def synthesize_sparse(dictionary: JointDictionary, b: ImageLike, gamma: float = 0.01,
                      lam: float = 1.0, stride: int = 1, offset: float = INTENSITY_OFFSET,
                      return_report: bool = False, **solver):
    """Sparse-representation analogy.

    Returns ``(b_denoised, b_prime)`` and, with ``return_report``, the
    solver report as a third element. Values are not clamped.
    """
    bimg = as_image(b)
    if bimg.channels != 1:
        raise ImageError("synthesize_sparse needs a single-channel input")
    u1, u2, _, report = sparse_code_analogy(bimg.data - offset, dictionary, gamma=gamma,
                                            lam=lam, stride=stride, **solver)
    den = Image(u1.data + offset, bimg.pixel_size)
    pred = Image(u2.data + offset, bimg.pixel_size)
    return (den, pred, report) if return_report else (den, pred)


# --------------------------------------------------------------------------
# confidence


def _local_std(e: np.ndarray, window: int) -> np.ndarray:
    mean = ndimage.uniform_filter(e, window, mode="reflect")
    sq = ndimage.uniform_filter(e * e, window, mode="reflect")
    return np.sqrt(np.maximum(sq - mean * mean, 0.0))


Predictor = Callable[[Image], Image]


def prediction_confidence(dictionary: Optional[JointDictionary],
                          validation: Sequence[AnalogyTrainingPair], window: int = 7,
                          predictor: Optional[Predictor] = None,
                          **synth) -> ConfidenceMap:
    """Confidence weights from prediction errors on validation pairs.

    Each validation source is predicted (with ``predictor`` if given,
    otherwise ``synthesize_sparse`` with ``dictionary``), the squared error
    against the validation target is formed and its local standard deviation
    over ``window x window`` neighbourhoods is averaged across pairs. The
    result is mapped to ``w = 1 - std / max(std)``, or ones when the maximum
    is zero. Use ``ConfidenceMap.resize`` to evaluate it on another grid.
    """
    if not validation:
        raise ValueError("empty validation set")
    if predictor is None:
        if dictionary is None:
            raise ValueError("need a dictionary or a predictor")

        def predictor(img):
            return synthesize_sparse(dictionary, img, **synth)[1]

    ref_shape = validation[0].a.shape
    acc = np.zeros(ref_shape)
    for pair in validation:
        pred = as_array(predictor(pair.a))
        err = (pred - pair.a_prime.data) ** 2
        std = _local_std(err, window)
        if std.shape != ref_shape:
            std = _resize(std, ref_shape)
        acc += std
    acc /= len(validation)
    peak = acc.max()
    if peak <= 0:
        return ConfidenceMap(np.ones(ref_shape))
    return ConfidenceMap(np.clip(1.0 - acc / peak, 0.0, 1.0))

