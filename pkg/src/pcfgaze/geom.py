"""Gaze angle/vector conversions, angular difference and Euler rotations.

Conventions
-----------
Camera looks along -z. A gaze with ``pitch = yaw = 0`` is ``(0, 0, -1)``;
positive pitch points toward -y and positive yaw toward -x::

    g = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))

Angle arrays carry ``(pitch, yaw)`` in their last axis, in radians.
All functions are vectorized over leading axes.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

UNIT_TOL = 1e-6


def _check_unit(v, name="v"):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise InvalidInputError(f"{name} must have 3 components, got shape {v.shape}")
    norm = np.linalg.norm(v, axis=-1)
    if not np.all(np.abs(norm - 1.0) <= UNIT_TOL):
        raise InvalidInputError(f"{name} is not a unit vector (norm deviation > {UNIT_TOL})")
    return v


def angles_to_vector(angles):
    """Convert ``(..., 2)`` pitch/yaw angles to ``(..., 3)`` unit gaze vectors."""
    angles = np.asarray(angles, dtype=float)
    pitch, yaw = angles[..., 0], angles[..., 1]
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def direction_angles(u):
    """Pitch/yaw of arbitrary (not necessarily unit) direction vectors.

    Pitch is ``atan2(-y, hypot(x, z))``, which equals ``asin(-y)`` on the unit
    sphere but stays accurate near the poles. Yaw is ``atan2(-x, -z)`` mapped
    into ``(-pi, pi]`` and set to 0 at the poles.
    """
    u = np.asarray(u, dtype=float)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    horiz = np.hypot(x, z)
    pitch = np.arctan2(-y, horiz)
    yaw = np.arctan2(-x, -z)
    yaw = np.where(horiz == 0.0, 0.0, yaw)
    yaw = np.where(yaw <= -np.pi, yaw + 2.0 * np.pi, yaw)
    return np.stack([pitch, yaw], axis=-1)


def vector_to_angles(v):
    """Convert unit gaze vectors ``(..., 3)`` to pitch/yaw ``(..., 2)``.

    Raises
    ------
    InvalidInputError
        If any vector's norm deviates from 1 by more than 1e-6.
    """
    return direction_angles(_check_unit(v))


def angular_difference(a, b):
    """Angle in radians between unit vectors, ``acos(clip(a.b, -1, 1))``."""
    a = _check_unit(a, "a")
    b = _check_unit(b, "b")
    dot = np.sum(a * b, axis=-1)
    return np.arccos(np.clip(dot, -1.0, 1.0))


def rotation_from_euler(z, y, x):
    """Rotation matrix ``Rz(z) @ Ry(y) @ Rx(x)``."""
    cz, sz = np.cos(z), np.sin(z)
    cy, sy = np.cos(y), np.sin(y)
    cx, sx = np.cos(x), np.sin(x)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def euler_from_rotation(R):
    """Inverse of :func:`rotation_from_euler`; returns ``(z, y, x)``."""
    R = np.asarray(R, dtype=float)
    y = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(R[2, 0]) < 1.0 - 1e-12:
        z = np.arctan2(R[1, 0], R[0, 0])
        x = np.arctan2(R[2, 1], R[2, 2])
    else:
        # gimbal lock: only z - x (or z + x) is determined
        z = np.arctan2(-R[0, 1], R[1, 1])
        x = 0.0
    return float(z), float(y), float(x)
