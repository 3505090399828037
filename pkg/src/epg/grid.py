"""5D grid keying: map camera poses to discrete (i, j, k, l, m) cell keys.

Positions are floored into cubic cells of edge ``dl``. View directions are
binned on the sphere: pitch rings of height ``d_phi``, each ring split in yaw
by a step shrunk with the ring's circumference so cells stay near-uniform.
Rings touching a pole are kept as a single cap cell (m = 0).

Convention: a pose maps camera coordinates into world coordinates, the camera
looks along its +z axis, and roll is deliberately ignored by the keying.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TAU = 2.0 * math.pi
_POLE_EPS = 1e-9


def wrap_angle(a):
    """Wrap an angle into (-pi, pi]."""
    t = math.remainder(a, TAU)
    if t <= -math.pi:
        t += TAU
    return t


@dataclass(frozen=True)
class GridParams:
    """Grid resolution: spatial edge (m), yaw step at the equator, pitch step (rad)."""

    dl: float
    d_theta: float = math.pi / 6
    d_phi: float = math.pi / 6

    def __post_init__(self):
        if not (self.dl > 0):
            raise ValueError(f"dl must be > 0, got {self.dl}")
        if not (0 < self.d_theta <= math.pi):
            raise ValueError(f"d_theta must be in (0, pi], got {self.d_theta}")
        if not (0 < self.d_phi <= math.pi / 2):
            raise ValueError(f"d_phi must be in (0, pi/2], got {self.d_phi}")


class PoseKey(NamedTuple):
    i: int
    j: int
    k: int
    l: int
    m: int


@dataclass(frozen=True)
class ViewAngles:
    """Yaw theta in (-pi, pi] and pitch phi in [-pi/2, pi/2]."""

    theta: float
    phi: float


class Pose:
    """Rigid camera pose: x_world = rotation @ x_cam + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, check=True):
        R = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if check:
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
                raise ValueError("rotation is not orthonormal")
            if abs(np.linalg.det(R) - 1.0) > 1e-6:
                raise ValueError("rotation determinant is not +1")
        self.rotation = R
        self.translation = t

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), check=False)

    @classmethod
    def from_matrix(cls, T, check=True):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3], check=check)

    @classmethod
    def from_quaternion(cls, q, translation, check=True):
        """Build from a unit quaternion (x, y, z, w) and a translation."""
        return cls(rotation_from_quaternion(q), translation, check=check)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def forward(self):
        """Camera viewing direction in world coordinates (+z camera axis)."""
        return self.rotation[:, 2].copy()

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, check=False)

    def compose(self, other):
        """self then applied after other: (self @ other) as 4x4 matrices."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            check=False,
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self):
        t = self.translation
        return f"Pose(t=({t[0]:.3f}, {t[1]:.3f}, {t[2]:.3f}))"


def rotation_from_quaternion(q):
    """Rotation matrix from a quaternion given as (x, y, z, w)."""
    x, y, z, w = (float(v) for v in q)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if n == 0:
        raise ValueError("zero quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_from_rotation(R):
    """Quaternion (x, y, z, w) with w >= 0 from a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_looking(forward, up=(0.0, 0.0, 1.0)):
    """Roll-free rotation whose +z column points along ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    n = np.linalg.norm(f)
    if n == 0:
        raise ValueError("zero forward direction")
    f = f / n
    u = np.asarray(up, dtype=np.float64)
    r = np.cross(u, f)
    rn = np.linalg.norm(r)
    if rn < 1e-12:
        # forward parallel to up: fall back to x as the right axis
        r = np.cross((1.0, 0.0, 0.0), f)
        rn = np.linalg.norm(r)
    r = r / rn
    d = np.cross(f, r)
    return np.column_stack([r, d, f])


def pose_looking(position, forward, up=(0.0, 0.0, 1.0)):
    return Pose(rotation_looking(forward, up), position, check=False)


def view_angles(pose):
    """Yaw/pitch of the camera forward axis; roll is discarded.

    theta = atan2(f_y, f_x) with theta = 0 when the view is vertical
    (f_x = f_y = 0); phi = asin(f_z).
    """
    f = pose.rotation[:, 2]
    fx, fy, fz = float(f[0]), float(f[1]), float(f[2])
    n = math.sqrt(fx * fx + fy * fy + fz * fz)
    fx, fy, fz = fx / n, fy / n, fz / n
    theta = math.atan2(fy, fx)
    if theta <= -math.pi:
        theta = math.pi
    phi = math.asin(min(1.0, max(-1.0, fz)))
    return ViewAngles(theta, phi)


def spatial_key(position, dl):
    """Floor a position into integer cell indices (negatives toward -inf)."""
    x, y, z = (float(v) for v in position)
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise ValueError(f"non-finite position ({x}, {y}, {z})")
    return (math.floor(x / dl), math.floor(y / dl), math.floor(z / dl))


def is_cap_ring(l, params):
    """True when pitch ring l touches a pole and stays a single cell."""
    return (
        (l + 1) * params.d_phi >= math.pi / 2 - _POLE_EPS
        or l * params.d_phi <= -math.pi / 2 + _POLE_EPS
    )


def ring_theta_step(l, params):
    """Yaw step of ring l, shrunk with the ring's circumference."""
    return params.d_theta * math.cos((l + 0.5) * params.d_phi)


def angular_key(angles, params):
    """Pitch ring index l and in-ring yaw index m. Cap rings force m = 0."""
    l = math.floor(angles.phi / params.d_phi)
    if is_cap_ring(l, params):
        return (l, 0)
    return (l, math.floor(angles.theta / ring_theta_step(l, params)))


def pose_key(pose, params):
    """Full 5D key of a pose: spatial indices plus angular indices."""
    i, j, k = spatial_key(pose.translation, params.dl)
    l, m = angular_key(view_angles(pose), params)
    return PoseKey(i, j, k, l, m)


def cell_center(key, params):
    """Center position and view angles of a cell.

    Cap cells center on the pole pitch (clamped) with theta = 0. For the
    partial last cell of a ring (the span straddling theta = +-pi) the
    nominal center is wrapped back into (-pi, pi].
    """
    position = (np.array(key[:3], dtype=np.float64) + 0.5) * params.dl
    l, m = key.l, key.m
    phi_c = (l + 0.5) * params.d_phi
    phi_c = min(math.pi / 2, max(-math.pi / 2, phi_c))
    if is_cap_ring(l, params):
        theta_c = 0.0
    else:
        theta_c = wrap_angle((m + 0.5) * ring_theta_step(l, params))
    return position, ViewAngles(theta_c, phi_c)
