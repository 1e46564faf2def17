"""Spherical/Cartesian conversions and the roll-pitch-yaw rotation pipeline.

All functions broadcast over numpy arrays of angles so the same code serves
single measurements and whole measurement columns.
"""

from __future__ import annotations

import numpy as np

from .topology import Orientation, wrap_angle

_POLE_TOL = 1e-12


def unit_from_angles(azimuth, elevation) -> np.ndarray:
    """Unit vector(s) ``(cos el cos az, cos el sin az, sin el)``; shape ``(..., 3)``."""
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


def angles_from_unit(v):
    """Inverse of :func:`unit_from_angles`.

    Returns ``(azimuth, elevation)`` with azimuth in (-pi, pi] and elevation
    in [-pi/2, pi/2].  At the poles the azimuth is defined as 0.  Inputs are
    normalised first; a zero vector raises ``ValueError``.
    """
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm == 0):
        raise ValueError("zero-norm direction vector")
    u = v / norm[..., None]
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    el = np.arcsin(np.clip(z, -1.0, 1.0))
    polar = np.hypot(x, y) < _POLE_TOL
    az = np.where(polar, 0.0, np.arctan2(y, x))
    az = wrap_angle(az)
    if np.ndim(el) == 0:
        return float(az), float(el)
    return az, el


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(o: Orientation | np.ndarray) -> np.ndarray:
    """Body-to-world rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    roll, pitch, yaw = o.as_array() if isinstance(o, Orientation) else np.asarray(o, dtype=float)
    return _rot_z(yaw) @ _rot_y(pitch) @ _rot_x(roll)


def rotation_matrices(rpy: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rotation_matrix` for an ``(n, 3)`` array of roll/pitch/yaw."""
    rpy = np.asarray(rpy, dtype=float).reshape(-1, 3)
    ca, sa = np.cos(rpy[:, 0]), np.sin(rpy[:, 0])
    cb, sb = np.cos(rpy[:, 1]), np.sin(rpy[:, 1])
    cg, sg = np.cos(rpy[:, 2]), np.sin(rpy[:, 2])
    R = np.empty((len(rpy), 3, 3))
    R[:, 0, 0] = cg * cb
    R[:, 0, 1] = cg * sb * sa - sg * ca
    R[:, 0, 2] = cg * sb * ca + sg * sa
    R[:, 1, 0] = sg * cb
    R[:, 1, 1] = sg * sb * sa + cg * ca
    R[:, 1, 2] = sg * sb * ca - cg * sa
    R[:, 2, 0] = -sb
    R[:, 2, 1] = cb * sa
    R[:, 2, 2] = cb * ca
    return R


def rotation_matrix_partials(rpy: np.ndarray) -> np.ndarray:
    """Derivatives of :func:`rotation_matrices` w.r.t. roll, pitch, yaw; shape ``(n, 3, 3, 3)``."""
    rpy = np.asarray(rpy, dtype=float).reshape(-1, 3)
    n = len(rpy)

    def stack(fn, angles, deriv):
        c, s = np.cos(angles), np.sin(angles)
        if deriv:
            c, s = -np.sin(angles), np.cos(angles)
        return fn(c, s, deriv)

    def rx(c, s, d):
        M = np.zeros((n, 3, 3))
        M[:, 0, 0] = 0.0 if d else 1.0
        M[:, 1, 1], M[:, 1, 2], M[:, 2, 1], M[:, 2, 2] = c, -s, s, c
        return M

    def ry(c, s, d):
        M = np.zeros((n, 3, 3))
        M[:, 1, 1] = 0.0 if d else 1.0
        M[:, 0, 0], M[:, 0, 2], M[:, 2, 0], M[:, 2, 2] = c, s, -s, c
        return M

    def rz(c, s, d):
        M = np.zeros((n, 3, 3))
        M[:, 2, 2] = 0.0 if d else 1.0
        M[:, 0, 0], M[:, 0, 1], M[:, 1, 0], M[:, 1, 1] = c, -s, s, c
        return M

    X, dX = stack(rx, rpy[:, 0], False), stack(rx, rpy[:, 0], True)
    Y, dY = stack(ry, rpy[:, 1], False), stack(ry, rpy[:, 1], True)
    Z, dZ = stack(rz, rpy[:, 2], False), stack(rz, rpy[:, 2], True)
    return np.stack([Z @ Y @ dX, Z @ dY @ X, dZ @ Y @ X], axis=1)


def orientation_from_matrix(R: np.ndarray) -> Orientation:
    """Roll/pitch/yaw of a proper rotation matrix (Z-Y-X convention)."""
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    if abs(np.cos(pitch)) < 1e-12:
        # gimbal lock: put everything into yaw
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    return Orientation(float(roll), float(pitch), float(yaw)).wrapped()


def transform_aoa(azimuth, elevation, o: Orientation | np.ndarray):
    """Re-express a body-frame AoA in the frame that ``o`` rotates into."""
    v = unit_from_angles(azimuth, elevation) @ rotation_matrix(o).T
    return angles_from_unit(v)


def transform_aoa_many(azimuth, elevation, rpy: np.ndarray):
    """Per-row :func:`transform_aoa`: row ``k`` uses orientation ``rpy[k]``."""
    u = unit_from_angles(azimuth, elevation)
    v = np.einsum("kij,kj->ki", rotation_matrices(rpy), u)
    return angles_from_unit(v)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))
