"""Minimal rigid-body geometry: rotations, poses, se(3) twists.

Twists are ordered [rho; phi] with the translational part first, so the
derivative of a perturbed point with respect to the twist is [I | -skew(p)].
All types are immutable values and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 skew-symmetric matrix S with S @ w == np.cross(v, w)."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a second-order Taylor fallback for tiny angles."""
    phi = np.asarray(phi, dtype=float)
    angle_sq = float(phi @ phi)
    s = skew(phi)
    s2 = s @ s
    if angle_sq < _SMALL_ANGLE**2:
        a = 1.0 - angle_sq / 6.0
        b = 0.5 - angle_sq / 24.0
    else:
        angle = np.sqrt(angle_sq)
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle_sq
    return np.eye(3) + a * s + b * s2


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian V(phi) mapping the twist translation to SE(3)."""
    phi = np.asarray(phi, dtype=float)
    angle_sq = float(phi @ phi)
    s = skew(phi)
    s2 = s @ s
    if angle_sq < _SMALL_ANGLE**2:
        b = 0.5 - angle_sq / 24.0
        c = 1.0 / 6.0 - angle_sq / 120.0
    else:
        angle = np.sqrt(angle_sq)
        b = (1.0 - np.cos(angle)) / angle_sq
        c = (angle - np.sin(angle)) / (angle_sq * angle)
    return np.eye(3) + b * s + c * s2


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform a point or an (..., 3) array of points."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


def exp_se3(xi: np.ndarray) -> RigidTransform:
    """Exponential map se(3) -> SE(3) for a twist xi = [rho; phi]."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return RigidTransform(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def transform_point(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return t.apply(p)
