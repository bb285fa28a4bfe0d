"""Similarity transforms ``x -> s R x + t``."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


def rotation_from_axis_angle(axis, angle) -> np.ndarray:
    """Rodrigues formula; ``angle`` in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def rotation_from_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return rotation_from_axis_angle(w, float(np.linalg.norm(w)))


def rotation_angle(r) -> float:
    """Angle (radians) of a rotation matrix, robust near 0 and pi."""
    r = np.asarray(r)
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(s, c))


def random_rotation(rng, max_angle) -> np.ndarray:
    """Uniform axis, angle uniform in ``[0, max_angle]`` radians."""
    axis = rng.normal(size=3)
    return rotation_from_axis_angle(axis, rng.uniform(0.0, max_angle))


def project_to_rotation(m) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float = 1.0
    rotation: np.ndarray = None
    translation: np.ndarray = None

    def __post_init__(self):
        r = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.zeros(3) if self.translation is None else np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def rigid(cls, rotation, translation):
        return cls(1.0, rotation, translation)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        a = m[:3, :3]
        s = float(np.cbrt(np.linalg.det(a)))
        if abs(s - 1.0) < 1e-12:
            # keep rigid matrices bit-exact through save/load
            return cls(1.0, a.copy(), m[:3, 3].copy())
        return cls(s, a / s, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation

    def apply_normals(self, normals):
        return np.asarray(normals, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self o other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def is_valid(self, tol=1e-9):
        r = self.rotation
        return (np.abs(r.T @ r - np.eye(3)).max() < tol) and abs(np.linalg.det(r) - 1.0) < tol

    def error_to(self, other: "SimilarityTransform", center=None):
        """(rotation error in degrees, translation error in mm at ``center``)."""
        dr = rotation_angle(self.rotation @ other.rotation.T)
        c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        dt = float(np.linalg.norm(self.apply(c[None])[0] - other.apply(c[None])[0]))
        return float(np.degrees(dr)), dt

    def save(self, path):
        """Write as a 4x4 row-major matrix, full double precision."""
        rows = [" ".join(repr(float(x)) for x in row) for row in self.matrix()]
        Path(path).write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, path):
        vals = np.array(Path(path).read_text().split(), dtype=np.float64)
        if vals.size != 16:
            raise ValueError(f"{path}: expected 16 numbers, got {vals.size}")
        return cls.from_matrix(vals.reshape(4, 4))
