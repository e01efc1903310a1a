#!/usr/bin/env python3
"""
Rigid-Body Geometry
SE(3) transforms, weighted point-set alignment and geodesic pose interpolation
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from errors import AntipodalRotation, DegenerateConfiguration, DimensionMismatch

ORTHONORMAL_TOL = 1e-9
RANK_TOL = 1e-9
ANTIPODAL_TOL = 1e-9


# ==================== TYPES ====================

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (3x3, det +1) and translation (meters)"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("RigidTransform requires finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'rotation', R)
        object.__setattr__(self, 'translation', t)

    # Constructors

    @classmethod
    def identity(cls) -> 'RigidTransform':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> 'RigidTransform':
        return cls(np.eye(3), translation)

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float],
                    translation: Optional[Sequence[float]] = None) -> 'RigidTransform':
        t = np.zeros(3) if translation is None else translation
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), t)

    @classmethod
    def from_quaternion(cls, wxyz: Sequence[float],
                        translation: Optional[Sequence[float]] = None) -> 'RigidTransform':
        """Build from a (w, x, y, z) rotation 4-vector, normalized on ingest"""
        q = np.asarray(wxyz, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("rotation 4-vector must be finite and non-zero")
        q = q / norm
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        t = np.zeros(3) if translation is None else translation
        return cls(R, t)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'RigidTransform':
        M = np.asarray(matrix, dtype=float).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_dict(cls, data: Dict) -> 'RigidTransform':
        """Inverse of to_dict: {'pos': [x,y,z], 'rot': [w,x,y,z]}"""
        return cls.from_quaternion(data.get('rot', [1.0, 0.0, 0.0, 0.0]),
                                   data.get('pos', [0.0, 0.0, 0.0]))

    # Conversions

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def quaternion_wxyz(self) -> np.ndarray:
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        return -q if w < 0 else q

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            'pos': [float(v) for v in self.translation],
            'rot': [float(v) for v in self.quaternion_wxyz()],
        }

    # Algebra

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a point (3,) or points (N, 3)"""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> 'RigidTransform':
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: 'RigidTransform') -> 'RigidTransform':
        return compose(self, other)

    def allclose(self, other: 'RigidTransform', atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        pos = np.array2string(self.translation, precision=6)
        rot = np.array2string(self.quaternion_wxyz(), precision=6)
        return f"RigidTransform(pos={pos}, rot_wxyz={rot})"


@dataclass(frozen=True, eq=False)
class PointSet:
    """Ordered 3-D points (meters) with optional nonnegative weights"""

    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.array(self.points, dtype=float)
        if P.size == 0:
            P = P.reshape(0, 3)
        if P.ndim != 2 or P.shape[1] != 3:
            raise DimensionMismatch(f"points must have shape (N, 3), got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, 'points', P)

        if self.weights is not None:
            w = np.array(self.weights, dtype=float).reshape(-1)
            if w.shape[0] != P.shape[0]:
                raise DimensionMismatch("weights must match point count")
            if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
                raise ValueError("weights must be finite, nonnegative and sum to > 0")
            object.__setattr__(self, 'weights', w)

    def __len__(self) -> int:
        return self.points.shape[0]


# ==================== OPERATIONS ====================

def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """(a o b) p = a (b p)"""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def rotation_angle(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle (rad) between the rotations of a and b"""
    return float(np.linalg.norm(Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec()))


def kabsch_align(source: PointSet, target: PointSet):
    """
    Weighted least-squares rigid alignment of source onto target.

    Centroid subtraction, SVD of the weighted cross-covariance and a
    determinant sign correction against reflections. Source weights are
    used when present, otherwise target weights, otherwise uniform.

    Returns (RigidTransform, rms_error).
    """
    if len(source) != len(target):
        raise DimensionMismatch(f"point counts differ: {len(source)} vs {len(target)}")
    n = len(source)
    if n < 3:
        raise DegenerateConfiguration(f"alignment needs at least 3 points, got {n}")

    if source.weights is not None:
        w = source.weights
    elif target.weights is not None:
        w = target.weights
    else:
        w = np.ones(n)
    w = w / w.sum()

    X = source.points
    Y = target.points
    cx = w @ X
    cy = w @ Y
    Xc = X - cx
    Yc = Y - cy

    # centered source must span at least a plane
    sw = np.sqrt(w)[:, None]
    sv = np.linalg.svd(sw * Xc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= RANK_TOL * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")

    H = (w[:, None] * Xc).T @ Yc
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    if d == 0:
        d = 1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    t = cy - R @ cx

    residuals = X @ R.T + t - Y
    rms = math.sqrt(float(w @ np.sum(residuals ** 2, axis=1)))
    return RigidTransform(R, t), rms


def interpolate_pose(a: RigidTransform, b: RigidTransform, s: float) -> RigidTransform:
    """Geodesic rotation and linear translation between a (s=0) and b (s=1)"""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation parameter must be in [0, 1], got {s}")

    rel = Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec()
    angle = float(np.linalg.norm(rel))
    if abs(angle - math.pi) <= ANTIPODAL_TOL:
        raise AntipodalRotation("relative rotation of pi has no unique geodesic")

    if s == 0.0:
        return a
    if s == 1.0:
        return b

    R = a.rotation @ Rotation.from_rotvec(s * rel).as_matrix()
    t = a.translation + s * (b.translation - a.translation)
    return RigidTransform(R, t)
