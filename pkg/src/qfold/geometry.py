"""Rigid-body transforms, distances and optimal superposition.

Conventions
-----------
Points are stored as rows of an ``(N, 3)`` array, but transforms are
defined for column vectors: ``x' = R @ x + t``.  Applying a transform to a
row array is therefore ``points @ R.T + t``.  All coordinates are in
Angstrom and all public angles are in degrees unless a name says otherwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

ORTHO_TOL = 1e-9


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2


def as_points(points) -> np.ndarray:
    """Coerce ``points`` to a float ``(N, 3)`` array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) point array, got shape {arr.shape}")
    return arr


def rotation_matrix(axis: Axis, radians: float) -> np.ndarray:
    c, s = math.cos(radians), math.sin(radians)
    axis = Axis(axis)
    if axis is Axis.X:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis is Axis.Y:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(matrix: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(
        np.allclose(m @ m.T, np.eye(3), atol=tol, rtol=0.0)
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise GeometryError("transform contains non-finite values")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def then(self, other: RigidTransform) -> RigidTransform:
        """Transform equal to applying ``self`` first and ``other`` second."""
        return compose(other, self)

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return is_rotation(self.rotation, tol)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b``: applying the result equals applying ``b`` then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rotation_about_axis(axis: Axis, degrees: float) -> RigidTransform:
    """Pure rotation about a Cartesian axis through the origin."""
    if not math.isfinite(degrees):
        raise GeometryError("rotation angle must be finite")
    return RigidTransform(rotation_matrix(axis, math.radians(degrees)))


@dataclass(frozen=True)
class Pose:
    """Placement of the ligand relative to its input coordinates.

    A point ``p`` of the input ligand goes to
    ``rotation @ (p - rotation_center) + rotation_center + translation``.
    ``rotation_center`` is normally the centroid of the input ligand and
    stays fixed for the lifetime of an episode; further world-frame moves
    are folded in with :meth:`followed_by`.
    """

    transform: RigidTransform = field(default_factory=RigidTransform)
    rotation_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        c = np.array(self.rotation_center, dtype=float).reshape(3)
        if not np.all(np.isfinite(c)):
            raise GeometryError("rotation center must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "rotation_center", c)

    @classmethod
    def identity(cls, rotation_center=(0.0, 0.0, 0.0)) -> Pose:
        return cls(RigidTransform(), rotation_center)

    @property
    def rotation(self) -> np.ndarray:
        return self.transform.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.transform.translation

    @property
    def center(self) -> np.ndarray:
        """Where ``rotation_center`` ends up after the pose is applied."""
        return self.rotation_center + self.translation

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        c = self.rotation_center
        return (pts - c) @ self.rotation.T + c + self.translation

    def as_transform(self) -> RigidTransform:
        """The equivalent transform about the global origin."""
        r = self.rotation
        c = self.rotation_center
        return RigidTransform(r, c + self.translation - r @ c)

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(RigidTransform(rt, -self.translation), self.center)

    def translated(self, delta) -> Pose:
        delta = np.asarray(delta, dtype=float).reshape(3)
        return Pose(RigidTransform(self.rotation, self.translation + delta), self.rotation_center)

    def rotated(self, rotation: np.ndarray, pivot=None) -> Pose:
        """Rotate the posed ligand about ``pivot`` (default: its current centre)."""
        rot = np.asarray(rotation, dtype=float)
        pivot = self.center if pivot is None else np.asarray(pivot, dtype=float)
        return self.followed_by(RigidTransform(rot, pivot - rot @ pivot))

    def followed_by(self, transform: RigidTransform) -> Pose:
        """Pose equal to applying ``self`` and then the world-frame ``transform``."""
        r = transform.rotation
        c = self.rotation_center
        new_t = r @ (c + self.translation) + transform.translation - c
        return Pose(RigidTransform(r @ self.rotation, new_t), c)


def apply_pose(pose: Pose, points) -> np.ndarray:
    return pose.apply(points)


def centroid(points) -> np.ndarray:
    return as_points(points).mean(axis=0)


def rmsd(a, b) -> float:
    a, b = as_points(a), as_points(b)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def pairwise_distances(a, b) -> np.ndarray:
    a, b = as_points(a), as_points(b)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def kabsch_superpose(mobile, fixed) -> tuple[RigidTransform, float]:
    """Least-squares rigid fit of ``mobile`` onto ``fixed``.

    Returns the transform taking ``mobile`` onto ``fixed`` and the RMSD
    after fitting.  Reflections are excluded.
    """
    p, q = as_points(mobile), as_points(fixed)
    if p.shape != q.shape:
        raise GeometryError(f"point count mismatch: {len(p)} vs {len(q)}")
    if len(p) < 3:
        raise GeometryError("superposition needs at least 3 points")
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    p0, q0 = p - pc, q - qc
    if np.linalg.matrix_rank(p0, tol=1e-8) < 2 or np.linalg.matrix_rank(q0, tol=1e-8) < 2:
        raise GeometryError("superposition of collinear points is undefined")
    h = p0.T @ q0
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) > 0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    transform = RigidTransform(rot, qc - rot @ pc)
    return transform, rmsd(transform.apply(p), q)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (unit quaternion method)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def bounding_radius(points) -> float:
    """Largest distance from the centroid to any point."""
    pts = as_points(points)
    return float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
