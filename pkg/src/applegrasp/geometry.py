"""Grasp-pose parametrization, label normalization and evaluation metrics.

Conventions
-----------
Camera frame: origin at the camera, +Z along the optical axis.

Grasp orientation is stored as Euler-ZYX angles (theta about Z, phi about Y,
roll fixed at zero). The angles are measured in a fixed *approach frame*
whose +X axis points back along the optical axis toward the camera::

    approach X = -camera Z
    approach Y = +camera Y
    approach Z = +camera X

so a fruit seen head-on has its grasp direction at theta = phi = 0 and every
camera-facing grasp of a fruit inside the field of view lands well inside
the +/- pi/4 range. Positions (x, y, z) stay in the camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from applegrasp.errors import OutOfRange

ANGLE_LIMIT = math.pi / 4
# boundary tolerance so exact +/- pi/4 survives a trig round trip
_ANGLE_TOL = 1e-12

CAMERA_TO_APPROACH = np.array(
    [[0.0, 0.0, -1.0],
     [0.0, 1.0, 0.0],
     [1.0, 0.0, 0.0]]
)
APPROACH_TO_CAMERA = CAMERA_TO_APPROACH.T


def _check_angle(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise OutOfRange(f"{name} is not finite: {value}")
    if abs(value) > ANGLE_LIMIT + _ANGLE_TOL:
        raise OutOfRange(f"{name}={value:.6f} rad outside [-pi/4, pi/4]")
    return max(-ANGLE_LIMIT, min(ANGLE_LIMIT, float(value)))


def as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite point {arr}")
    return arr


@dataclass(frozen=True, eq=False)
class SphereModel:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    def translated(self, offset) -> "SphereModel":
        return SphereModel(self.center + as_point(offset), self.radius)

    def __repr__(self):
        c = ", ".join(f"{v:.4f}" for v in self.center)
        return f"SphereModel(center=({c}), radius={self.radius:.4f})"


@dataclass(frozen=True)
class GraspPose:
    """Fruit grasp pose: center position (camera frame) and approach angles."""

    x: float
    y: float
    z: float
    theta: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "theta", _check_angle("theta", self.theta))
        object.__setattr__(self, "phi", _check_angle("phi", self.phi))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def direction(self) -> np.ndarray:
        """Unit grasp direction expressed in the camera frame."""
        return APPROACH_TO_CAMERA @ grasp_direction(self.theta, self.phi)


@dataclass(frozen=True)
class NormalizationConfig:
    scale: float = 0.30  # mean fruit scale S, meters

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")


@dataclass(frozen=True)
class UnitedParams:
    """Normalized regression targets [x_u, y_u, z_u, r_u, theta_u, phi_u]."""

    x_u: float
    y_u: float
    z_u: float
    r_u: float
    theta_u: float
    phi_u: float

    def __post_init__(self):
        if not self.r_u > 0:
            raise ValueError(f"r_u must be positive, got {self.r_u}")
        for name in ("theta_u", "phi_u"):
            if abs(getattr(self, name)) > 1.0 + _ANGLE_TOL:
                raise ValueError(f"{name} outside [-1, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_u, self.y_u, self.z_u, self.r_u, self.theta_u, self.phi_u])

    @classmethod
    def from_array(cls, values) -> "UnitedParams":
        v = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(*(float(a) for a in v))


@dataclass(frozen=True, eq=False)
class Aabb3:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = as_point(self.lo), as_point(self.hi)
        if np.any(lo > hi):
            raise ValueError("AABB min corner exceeds max corner")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


def euler_zyx_rotation(theta: float, phi: float) -> np.ndarray:
    """Rotation block of the grasp transform, Rz(theta) @ Ry(phi), roll = 0."""
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    return np.array(
        [[ct * cp, -st, ct * sp],
         [st * cp, ct, st * sp],
         [-sp, 0.0, cp]]
    )


def grasp_direction(theta: float, phi: float) -> np.ndarray:
    """First column of the grasp rotation: the approach axis."""
    cp = math.cos(phi)
    return np.array([math.cos(theta) * cp, math.sin(theta) * cp, -math.sin(phi)])


def direction_to_angles(d) -> tuple[float, float]:
    """Invert :func:`grasp_direction` for a unit vector in the approach frame.

    Raises:
        ValueError: if ``d`` is not unit length (tolerance 1e-9).
        OutOfRange: if either recovered angle leaves [-pi/4, pi/4].
    """
    d = as_point(d)
    norm = float(np.linalg.norm(d))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, |d|={norm}")
    theta = math.atan2(d[1], d[0])
    phi = -math.asin(max(-1.0, min(1.0, d[2])))
    return _check_angle("theta", theta), _check_angle("phi", phi)


def camera_direction_to_angles(d_cam) -> tuple[float, float]:
    return direction_to_angles(CAMERA_TO_APPROACH @ as_point(d_cam))


def normalize_label(
    centroid,
    sphere: SphereModel,
    theta: float,
    phi: float,
    cfg: NormalizationConfig = NormalizationConfig(),
) -> UnitedParams:
    theta = _check_angle("theta", theta)
    phi = _check_angle("phi", phi)
    offset = (sphere.center - as_point(centroid)) / cfg.scale
    return UnitedParams(
        float(offset[0]),
        float(offset[1]),
        float(offset[2]),
        sphere.radius / cfg.scale,
        theta / ANGLE_LIMIT,
        phi / ANGLE_LIMIT,
    )


def denormalize(
    u: UnitedParams, centroid, cfg: NormalizationConfig = NormalizationConfig()
) -> tuple[SphereModel, GraspPose]:
    center = as_point(centroid) + np.array([u.x_u, u.y_u, u.z_u]) * cfg.scale
    sphere = SphereModel(center, u.r_u * cfg.scale)
    pose = GraspPose(
        float(center[0]),
        float(center[1]),
        float(center[2]),
        u.theta_u * ANGLE_LIMIT,
        u.phi_u * ANGLE_LIMIT,
    )
    return sphere, pose


def activate(raw) -> UnitedParams:
    """Output activations: identity on offsets, exp on radius, tanh on angles."""
    raw = np.asarray(raw, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw network output is not finite")
    return UnitedParams(
        float(raw[0]),
        float(raw[1]),
        float(raw[2]),
        math.exp(raw[3]),
        math.tanh(raw[4]),
        math.tanh(raw[5]),
    )


def activate_array(raw: np.ndarray) -> np.ndarray:
    """Vectorized :func:`activate` over a ``(B, 6)`` batch."""
    out = np.array(raw, dtype=np.float64, copy=True)
    out[:, 3] = np.exp(raw[:, 3])
    out[:, 4:] = np.tanh(raw[:, 4:])
    return out


def sphere_aabb(s: SphereModel) -> Aabb3:
    return Aabb3(s.center - s.radius, s.center + s.radius)


def iou_3d(a: Aabb3, b: Aabb3) -> float:
    overlap = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        # two identical zero-volume boxes
        return 1.0 if np.array_equal(a.lo, b.lo) and np.array_equal(a.hi, b.hi) else 0.0
    return min(1.0, max(0.0, inter / union))


def sphere_iou(a: SphereModel, b: SphereModel) -> float:
    return iou_3d(sphere_aabb(a), sphere_aabb(b))


def orientation_error(pred: GraspPose, gt: GraspPose) -> float:
    """Angle in degrees between the two grasp directions.

    Uses atan2(|a x b|, a . b), which agrees with the clamped arccos of the
    dot product but stays accurate near 0 degrees.
    """
    a = grasp_direction(pred.theta, pred.phi)
    b = grasp_direction(gt.theta, gt.phi)
    cos = max(-1.0, min(1.0, float(np.dot(a, b))))
    sin = float(np.linalg.norm(np.cross(a, b)))
    return math.degrees(math.atan2(sin, cos))
