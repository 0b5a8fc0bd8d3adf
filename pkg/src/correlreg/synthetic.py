"""Synthetic test scenes: Gaussian bead images and smooth textures with a second modality."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .image import Image
from .transform import AffineTransform2D


def random_points(n: int, shape, rng: np.random.Generator, margin: float = 10.0,
                  min_dist: float = 12.0, max_tries: int = 10000) -> np.ndarray:
    """Uniform points ``(x, y)`` inside ``shape`` with a minimum pairwise distance."""
    h, w = shape
    pts: list = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {n} points with spacing {min_dist} in {h}x{w}")
        p = np.array([rng.uniform(margin, w - 1 - margin), rng.uniform(margin, h - 1 - margin)])
        if all(np.hypot(*(p - q)) >= min_dist for q in pts):
            pts.append(p)
    return np.asarray(pts)


def render_beads(points, shape, sigma: float = 1.5, amplitude: float = 1.0,
                 background: float = 0.0, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Image:
    """Sum of isotropic Gaussian spots centred at ``points`` (x, y), clipped to [0, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), background, dtype=np.float64)
    r = int(np.ceil(4 * sigma))
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        y0, y1 = max(int(y) - r, 0), min(int(y) + r + 2, h)
        x0, x1 = max(int(x) - r, 0), min(int(x) + r + 2, w)
        if y0 >= y1 or x0 >= x1:
            continue
        d2 = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2
        img[y0:y1, x0:x1] += amplitude * np.exp(-0.5 * d2 / sigma ** 2)
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        img = img + rng.normal(0.0, noise, size=img.shape)
    return Image(np.clip(img, 0.0, 1.0))


@dataclass(frozen=True)
class BeadScene:
    source: Image
    target: Image
    transform: AffineTransform2D     # source -> target
    source_points: np.ndarray
    target_points: np.ndarray


def bead_scene(n: int = 20, shape=(256, 256), transform: Optional[AffineTransform2D] = None,
               seed: int = 0, sigma: float = 1.5, noise: float = 0.0,
               min_dist: float = 14.0) -> BeadScene:
    """Source beads at random positions; target beads are their images under ``transform``.

    Source points are drawn in the central region so that the mapped points
    stay inside the target for moderate transforms.
    """
    rng = np.random.default_rng(seed)
    t = AffineTransform2D.identity() if transform is None else transform
    h, w = shape
    pts = random_points(n, shape, rng, margin=min(h, w) * 0.2, min_dist=min_dist)
    tpts = t.apply(pts)
    src = render_beads(pts, shape, sigma, noise=noise, rng=rng)
    tgt = render_beads(tpts, shape, sigma, noise=noise, rng=rng)
    return BeadScene(src, tgt, t, pts, tpts)


class Texture:
    """Smooth random texture defined everywhere in the plane.

    A sum of random plane waves; values are affinely mapped so that the
    reference ``shape`` spans ``[0, 1]`` and clipped elsewhere.
    """

    def __init__(self, seed: int = 0, shape=(128, 128), n_waves: int = 24,
                 wavelengths=(6.0, 40.0)):
        rng = np.random.default_rng(seed)
        lo, hi = np.log(wavelengths[0]), np.log(wavelengths[1])
        lam = np.exp(rng.uniform(lo, hi, n_waves))
        theta = rng.uniform(0, np.pi, n_waves)
        self.k = np.column_stack([np.cos(theta), np.sin(theta)]) * (2 * np.pi / lam)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(0.5, 1.0, n_waves) * np.sqrt(lam / lam.max())
        self.offset = 0.0
        self.scale = 1.0
        ref = self._raw(*np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64))
        self.offset = float(ref.min())
        self.scale = float(ref.max() - ref.min())

    def _raw(self, ys, xs):
        arg = xs[..., None] * self.k[:, 0] + ys[..., None] * self.k[:, 1] + self.phase
        return np.cos(arg) @ self.amp

    def sample(self, ys, xs) -> np.ndarray:
        return np.clip((self._raw(ys, xs) - self.offset) / self.scale, 0.0, 1.0)

    def render(self, shape, transform: Optional[AffineTransform2D] = None) -> Image:
        """Image ``I(x) = T(t^{-1} x)``: the texture as seen after moving it by ``transform``."""
        ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
        if transform is not None:
            pts = transform.inverse().apply(np.column_stack([xs.ravel(), ys.ravel()]))
            xs = pts[:, 0].reshape(shape)
            ys = pts[:, 1].reshape(shape)
        return Image(self.sample(ys, xs))


def other_modality(img, kind: str = "inversion", gamma: float = 2.0,
                   low: float = 1.0, high: float = 4.0) -> Image:
    """Deterministic intensity/structure mapping standing in for a second microscope.

    ``inversion``: 1 - a. ``contrast``: a**gamma. ``bandpass``: difference of
    Gaussians rescaled to [0, 1].
    """
    data = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if kind == "inversion":
        out = 1.0 - data
    elif kind == "contrast":
        out = data ** gamma
    elif kind == "bandpass":
        dog = ndimage.gaussian_filter(data, low, mode="reflect") \
            - ndimage.gaussian_filter(data, high, mode="reflect")
        span = np.ptp(dog)
        out = (dog - dog.min()) / span if span > 0 else np.zeros_like(dog)
    else:
        raise ValueError(f"unknown modality kind {kind!r}")
    ps = img.pixel_size if isinstance(img, Image) else None
    return Image(out, ps)


def modality_pair(shape=(128, 128), seed: int = 0, kind: str = "inversion") -> tuple[Image, Image]:
    a = Texture(seed, shape).render(shape)
    return a, other_modality(a, kind)


@dataclass(frozen=True)
class PointScene:
    source: np.ndarray          # observed source landmarks (jittered, with spurious)
    target: np.ndarray          # observed target landmarks (jittered, with spurious)
    true_source: np.ndarray     # noise-free centres of the real beads
    transform: AffineTransform2D


def random_similarity(rng: np.random.Generator, center=(127.5, 127.5), max_angle: float = np.pi,
                      scale=(0.8, 1.25), max_shift: float = 10.0) -> AffineTransform2D:
    return AffineTransform2D.similarity(rng.uniform(-max_angle, max_angle),
                                        float(np.exp(rng.uniform(*np.log(scale)))),
                                        *rng.uniform(-max_shift, max_shift, 2), center=center)


def point_scene(n: int = 20, seed: int = 0, shape=(256, 256), jitter: float = 0.5,
                spurious: float = 0.2, transform: Optional[AffineTransform2D] = None,
                min_dist: float = 14.0) -> PointScene:
    """Bead centres as detected landmarks: a similarity-related pair of point
    sets with Gaussian centroid jitter and ``spurious * n`` unmatched extra
    points in each set."""
    rng = np.random.default_rng(seed)
    h, w = shape
    t = transform if transform is not None else random_similarity(rng, ((w - 1) / 2, (h - 1) / 2))
    n_extra = int(round(spurious * n))
    pts = random_points(n + 2 * n_extra, shape, rng, margin=min(h, w) * 0.2, min_dist=min_dist)
    real, extra_src, extra_tgt = pts[:n], pts[n:n + n_extra], pts[n + n_extra:]
    src = np.vstack([real + rng.normal(0, jitter, real.shape), extra_src])
    tgt = np.vstack([t.apply(real) + rng.normal(0, jitter, real.shape), t.apply(extra_tgt)])
    return PointScene(src, tgt, real, t)
