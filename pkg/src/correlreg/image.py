"""Image container, channel handling, resampling, pyramids and patch operators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageError(ValueError):
    """Invalid image or parameter passed to an image operation."""


@dataclass(frozen=True)
class Image:
    """2D raster, shape ``(height, width)`` or ``(height, width, channels)``.

    Intensities are floats, nominally in ``[0, 1]`` after loading.
    ``pixel_size`` is the physical length of one pixel (unit left to the
    caller), or ``None`` when unknown.
    """

    data: np.ndarray
    pixel_size: Optional[float] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
            raise ImageError(f"unsupported image shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ImageError("image must be at least 1x1")
        if not np.all(np.isfinite(data)):
            raise ImageError("image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Image":
        return replace(self, data=data)


ImageLike = Union[Image, np.ndarray]


def as_image(img: ImageLike) -> Image:
    return img if isinstance(img, Image) else Image(img)


def as_array(img: ImageLike) -> np.ndarray:
    return img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def _require_gray(img: Image, what: str) -> None:
    if img.channels != 1:
        raise ImageError(f"{what} requires a single-channel image")


def to_grayscale(img: ImageLike, mode: str = "luminance", channel: int = 0) -> Image:
    """Collapse to one channel by luminance or by selecting a single channel.

    ``mode='channel'`` copies plane ``channel``; the green plane of a
    confocal RGB image is ``channel=1``.
    """
    img = as_image(img)
    if img.channels == 1:
        if mode == "channel" and channel != 0:
            raise ImageError(f"channel {channel} out of range for 1-channel image")
        return img
    if mode == "luminance":
        gray = img.data @ np.asarray(LUMA_WEIGHTS)
    elif mode == "channel":
        if not 0 <= channel < img.channels:
            raise ImageError(f"channel {channel} out of range for {img.channels}-channel image")
        gray = img.data[:, :, channel].copy()
    else:
        raise ImageError(f"unknown grayscale mode {mode!r}")
    return img.with_data(gray)


def bilinear_sample(data: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                    cval: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Sample a 2D array at real coordinates.

    Returns ``(values, valid)``; samples outside ``[0, h-1] x [0, w-1]``
    are set to ``cval`` and flagged invalid. Coordinates within 1e-9 of an
    integer are snapped so integer shifts reproduce pixels exactly.
    """
    h, w = data.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ry, rx = np.round(ys), np.round(xs)
    ys = np.where(np.abs(ys - ry) < 1e-9, ry, ys)
    xs = np.where(np.abs(xs - rx) < 1e-9, rx, xs)
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    yc = np.clip(ys, 0, h - 1)
    xc = np.clip(xs, 0, w - 1)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yc - y0
    fx = xc - x0
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out = np.where(valid, out, cval)
    return out, valid


def resample(img: ImageLike, factor: float) -> Image:
    """Bilinear resampling by ``factor`` with pixel-center alignment."""
    img = as_image(img)
    if not factor > 0:
        raise ImageError("resample factor must be positive")
    h, w = img.height, img.width
    oh, ow = int(round(h * factor)), int(round(w * factor))
    if oh < 1 or ow < 1:
        raise ImageError(f"resampled size {oh}x{ow} is empty")
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    planes = [img.data] if img.channels == 1 else [img.data[:, :, c] for c in range(img.channels)]
    out = [bilinear_sample(p, gy, gx)[0] for p in planes]
    data = out[0] if len(out) == 1 else np.stack(out, axis=2)
    pixel_size = None if img.pixel_size is None else img.pixel_size / factor
    return Image(data, pixel_size)


def gaussian_kernel_1d(sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(data: np.ndarray, sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    """Separable Gaussian blur (5x5 by default) with mirror padding."""
    k = gaussian_kernel_1d(sigma, radius)
    out = ndimage.correlate1d(data, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def gaussian_pyramid(img: ImageLike, levels: int, min_size: int = 8) -> list[Image]:
    """Return ``[finest, ..., coarsest]``; each level is blurred then decimated by 2."""
    img = as_image(img)
    _require_gray(img, "gaussian_pyramid")
    if levels < 1:
        raise ImageError("levels must be >= 1")
    h, w = img.height, img.width
    scale = 2 ** (levels - 1)
    if levels > 1 and (-(-h // scale) < min_size or -(-w // scale) < min_size):
        raise ImageError(f"{levels} levels too many for a {h}x{w} image")
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        data = blur(prev.data)[::2, ::2]
        ps = None if prev.pixel_size is None else prev.pixel_size * 2
        pyr.append(Image(data, ps))
    return pyr


@dataclass(frozen=True)
class PatchGrid:
    """Square patch layout over an image; origins are ``(y, x)`` top-left corners."""

    patch_size: int
    stride: int
    image_dims: tuple  # (height, width)
    origins: np.ndarray = field(repr=False)

    @classmethod
    def regular(cls, image_dims: Sequence[int], patch_size: int, stride: int) -> "PatchGrid":
        """Cover the image; a trailing row/column of origins is clamped inward
        when the stride does not divide evenly."""
        h, w = int(image_dims[0]), int(image_dims[1])
        if patch_size < 1 or stride < 1:
            raise ImageError("patch_size and stride must be >= 1")
        if patch_size > h or patch_size > w:
            raise ImageError(f"patch size {patch_size} exceeds image {h}x{w}")
        ys = _axis_origins(h, patch_size, stride)
        xs = _axis_origins(w, patch_size, stride)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        origins = np.stack([gy.ravel(), gx.ravel()], axis=1)
        return cls(patch_size, stride, (h, w), origins)

    @classmethod
    def from_origins(cls, image_dims, patch_size: int, origins) -> "PatchGrid":
        origins = np.asarray(origins, dtype=np.intp).reshape(-1, 2)
        h, w = int(image_dims[0]), int(image_dims[1])
        if np.any(origins < 0) or np.any(origins[:, 0] + patch_size > h) \
                or np.any(origins[:, 1] + patch_size > w):
            raise ImageError("patch origin outside image bounds")
        return cls(patch_size, patch_size, (h, w), origins)

    def __len__(self) -> int:
        return len(self.origins)

    def pixel_indices(self) -> np.ndarray:
        """Flat pixel indices, shape ``(patch_size**2, N)``, row-major within each patch."""
        p = self.patch_size
        w = self.image_dims[1]
        dy, dx = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        offs = (dy * w + dx).ravel()
        base = self.origins[:, 0] * w + self.origins[:, 1]
        return offs[:, None] + base[None, :]

    def coverage(self) -> np.ndarray:
        """Number of patches covering each pixel (the diagonal of sum R_i^T R_i)."""
        h, w = self.image_dims
        idx = self.pixel_indices().ravel()
        return np.bincount(idx, minlength=h * w).reshape(h, w).astype(np.float64)


def _axis_origins(n: int, p: int, stride: int) -> np.ndarray:
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return np.asarray(starts, dtype=np.intp)


def _check_grid(data: np.ndarray, grid: PatchGrid) -> None:
    if tuple(data.shape) != tuple(grid.image_dims):
        raise ImageError(f"grid built for {grid.image_dims}, image is {data.shape}")


def extract_patches(img: ImageLike, grid: PatchGrid) -> np.ndarray:
    """Stack patches as columns, shape ``(patch_size**2, N)``."""
    data = as_array(img)
    if data.ndim != 2:
        raise ImageError("extract_patches requires a single-channel image")
    _check_grid(data, grid)
    return data.ravel()[grid.pixel_indices()]


def patch_adjoint(columns: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Sum of R_i^T p_i: scatter-add patch columns back into an image."""
    h, w = grid.image_dims
    idx = grid.pixel_indices()
    if columns.shape != idx.shape:
        raise ImageError(f"columns shape {columns.shape} does not match grid {idx.shape}")
    return np.bincount(idx.ravel(), weights=columns.ravel(), minlength=h * w).reshape(h, w)


def reassemble_patches(columns: np.ndarray, grid: PatchGrid,
                       weights: Optional[np.ndarray] = None) -> Image:
    """Average overlapping patch columns back into an image.

    ``weights`` is the per-pixel coverage count; it is computed from the
    grid when omitted.
    """
    columns = np.asarray(columns, dtype=np.float64)
    cov = grid.coverage() if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(cov == 0):
        ys, xs = np.nonzero(cov == 0)
        raise ImageError(f"{len(ys)} pixels not covered by any patch, first at ({ys[0]}, {xs[0]})")
    return Image(patch_adjoint(columns, grid) / cov)
