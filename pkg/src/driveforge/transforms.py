"""Rigid-body transforms on 3D points.

Conventions, fixed for the whole package:

* A transform maps points of its source frame into its target frame via
  ``p' = R @ p + t``. Rotations are 3x3 row-major orthonormal matrices
  with determinant +1; translations are in meters.
* The ego frame is +x forward, +y left, +z up; yaw is counterclockwise
  about +z (so positive yaw turns the nose to the left).

Rotation and translation are stored as plain float tuples so that frozen
dataclass equality is exact and records round-trip through JSON without
drift. NumPy views are exposed for math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) element: 3x3 rotation (row-major tuple of 9) + translation."""

    rotation: tuple[float, ...]
    translation: tuple[float, float, float]

    def __post_init__(self):
        if len(self.rotation) != 9:
            raise GeometryError("rotation must have 9 row-major entries")
        if len(self.translation) != 3:
            raise GeometryError("translation must have 3 entries")

    # -- constructors -----------------------------------------------------

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform((1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
                              (0.0, 0.0, 0.0))

    @staticmethod
    def from_arrays(rotation, translation) -> "RigidTransform":
        r = np.asarray(rotation, dtype=float).reshape(3, 3)
        t = np.asarray(translation, dtype=float).reshape(3)
        return RigidTransform(tuple(r.ravel().tolist()), tuple(t.tolist()))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Pure yaw rotation about +z plus a translation."""
        c, s = math.cos(yaw), math.sin(yaw)
        return RigidTransform.from_arrays(
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)

    # -- views ------------------------------------------------------------

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float).reshape(3, 3)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=float)

    def as_vector(self) -> np.ndarray:
        """12-vector: the 9 rotation entries (row-major) then translation."""
        return np.concatenate([self.R.ravel(), self.t])

    def yaw(self) -> float:
        """Heading angle of the rotated +x axis, in radians."""
        r = self.R
        return math.atan2(r[1, 0], r[0, 0])

    # -- algebra ----------------------------------------------------------

    def apply(self, points) -> np.ndarray:
        """Map one (3,) point or a stack (N, 3) into the target frame."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self after other: ``(a.compose(b)).apply(x) == a.apply(b.apply(x))``."""
        return RigidTransform.from_arrays(self.R @ other.R,
                                          self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        rt = self.R.T
        return RigidTransform.from_arrays(rt, -rt @ self.t)

    # -- validation -------------------------------------------------------

    def orthonormality_error(self) -> float:
        """Max deviation of R^T R from identity and of det(R) from +1."""
        r = self.R
        dev = float(np.max(np.abs(r.T @ r - np.eye(3))))
        return max(dev, abs(float(np.linalg.det(r)) - 1.0))

    def require_orthonormal(self, tol: float = ORTHONORMAL_TOL) -> None:
        err = self.orthonormality_error()
        if err > tol:
            raise GeometryError(
                f"rotation not orthonormal with det +1 (error {err:.3e} > {tol:.1e})")


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi
