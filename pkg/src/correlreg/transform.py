"""2D affine transforms in pixel coordinates, points given as ``(x, y)``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DET_EPS = 1e-10


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform2D:
    """``p' = M[:, :2] @ p + M[:, 2]`` mapping source to target coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix has non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def similarity(cls, angle: float = 0.0, scale: float = 1.0, tx: float = 0.0,
                   ty: float = 0.0, center=(0.0, 0.0)) -> "AffineTransform2D":
        """Rotation by ``angle`` radians and isotropic scale about ``center``, then shift."""
        c, s = np.cos(angle) * scale, np.sin(angle) * scale
        return cls.from_linear(np.array([[c, -s], [s, c]]), (tx, ty), center)

    @classmethod
    def from_linear(cls, linear, translation=(0.0, 0.0), center=(0.0, 0.0)) -> "AffineTransform2D":
        """``p' = A (p - center) + center + translation``."""
        a = np.asarray(linear, dtype=np.float64).reshape(2, 2)
        c = np.asarray(center, dtype=np.float64)
        b = c + np.asarray(translation, dtype=np.float64) - a @ c
        return cls(np.column_stack([a, b]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def is_invertible(self) -> bool:
        return abs(self.det) > DET_EPS

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    __call__ = apply

    def inverse(self) -> "AffineTransform2D":
        if not self.is_invertible():
            raise SingularTransformError(f"transform is singular (det={self.det:.3g})")
        ainv = np.linalg.inv(self.linear)
        return AffineTransform2D(np.column_stack([ainv, -ainv @ self.translation]))

    def compose(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """``self ∘ other``: apply ``other`` first."""
        a = self.linear @ other.linear
        b = self.linear @ other.translation + self.translation
        return AffineTransform2D(np.column_stack([a, b]))

    def to_list(self) -> list:
        return [float(v) for v in self.matrix.ravel()]

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"matrix": self.to_list()}, indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "AffineTransform2D":
        obj = json.loads(Path(path).read_text())
        vals = obj["matrix"] if isinstance(obj, dict) else obj
        if isinstance(vals, dict):
            vals = vals["matrix"]
        return cls(np.asarray(vals, dtype=np.float64).reshape(2, 3))


def affine_from_pairs(src, tgt) -> AffineTransform2D:
    """Exact affine map through three point pairs (6x6 solve)."""
    src = np.asarray(src, dtype=np.float64).reshape(3, 2)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(3, 2)
    a = np.zeros((6, 6))
    a[0::2, 0:2] = src
    a[0::2, 2] = 1.0
    a[1::2, 3:5] = src
    a[1::2, 5] = 1.0
    # collinear triples make the system singular
    d = src[1:] - src[0]
    area = abs(d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0])
    scale = max(np.max(np.abs(d)), 1.0) ** 2
    if area <= 1e-10 * scale:
        raise SingularTransformError("collinear point triple")
    sol = np.linalg.solve(a, tgt.ravel())
    return AffineTransform2D(sol.reshape(2, 3))
