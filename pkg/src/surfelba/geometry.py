"""Rigid transforms on SE(3).

A ``Pose`` maps points from its local frame into its parent frame,
``x_parent = R @ x_local + t``.  Twists are ordered ``(v, w)``: translational
part first (meters), rotational part last (radians).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AlignmentDegenerateError, GeometryError

SMALL_ANGLE = 1e-8
UNIT_TOL = 1e-6


def skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=float
    )


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def is_valid(self, tol=1e-9) -> bool:
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def _one_minus_cos_over_sq(theta):
    # half-angle form avoids the cancellation in 1 - cos for small angles
    h = np.sin(0.5 * theta) / theta
    return 2.0 * h * h


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = _one_minus_cos_over_sq(theta)
    return np.eye(3) + a * W + b * W @ W


def se3_exp(delta) -> Pose:
    """Exponential map of a twist ``(v, w)`` to a pose.

    Below ``|w| = 1e-8`` the rotation and the left Jacobian ``V`` use their
    second-order Taylor expansions.
    """
    delta = np.asarray(delta, dtype=float).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise GeometryError("se3_exp requires a finite twist")
    v, w = delta[:3], delta[3:]
    theta = np.linalg.norm(w)
    W = skew(w)
    WW = W @ W
    if theta < SMALL_ANGLE:
        R = np.eye(3) + W + 0.5 * WW
        V = np.eye(3) + 0.5 * W + WW / 6.0
    else:
        s = np.sin(theta)
        b = _one_minus_cos_over_sq(theta)
        R = np.eye(3) + (s / theta) * W + b * WW
        V = np.eye(3) + b * W + ((theta - s) / theta**3) * WW
    return Pose(R, V @ v)


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def apply_point(a: Pose, p) -> np.ndarray:
    """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
    p = np.asarray(p, dtype=float)
    return p @ a.rotation.T + a.translation


def apply_direction(a: Pose, n) -> np.ndarray:
    """Rotate unit direction(s); translation never affects directions."""
    n = np.asarray(n, dtype=float)
    norms = np.linalg.norm(np.atleast_2d(n), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise GeometryError(f"apply_direction expects unit vectors, got norms {norms}")
    return n @ a.rotation.T


def _translations(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return np.asarray(poses, dtype=float).reshape(-1, 3)
    return np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)


def _check_spread(X, name, rel_tol=1e-9):
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    scale = max(s[0], np.abs(X).max(), 1.0)
    if s[0] <= rel_tol * scale or s[1] <= rel_tol * scale:
        raise AlignmentDegenerateError(f"{name} positions are collinear or coincident")


def horn_align(source: Sequence[Pose] | np.ndarray, target: Sequence[Pose] | np.ndarray) -> Pose:
    """Rigid transform ``G`` minimising ``sum |G(src_i) - tgt_i|^2`` over positions.

    Closed-form unit-quaternion solution: the optimal rotation is the
    eigenvector of the largest eigenvalue of the 4x4 symmetric matrix built
    from the cross-covariance of the centred point sets.  Accepts pose
    sequences or ``(N, 3)`` position arrays.
    """
    A = _translations(source)
    B = _translations(target)
    if A.shape != B.shape:
        raise GeometryError(f"horn_align length mismatch: {len(A)} vs {len(B)}")
    if len(A) < 3:
        raise AlignmentDegenerateError(f"horn_align needs at least 3 positions, got {len(A)}")
    _check_spread(A, "source")
    _check_spread(B, "target")

    ca, cb = A.mean(axis=0), B.mean(axis=0)
    S = (A - ca).T @ (B - cb)
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array(
        [
            [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
            [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
            [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
            [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
        ]
    )
    _, vecs = np.linalg.eigh(N)
    qw, qx, qy, qz = vecs[:, -1]
    R = np.array(
        [
            [qw * qw + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
            [2 * (qy * qx + qw * qz), qw * qw - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - qw * qx)],
            [2 * (qz * qx - qw * qy), 2 * (qz * qy + qw * qx), qw * qw - qx * qx - qy * qy + qz * qz],
        ]
    )
    return Pose(R, cb - R @ ca)
