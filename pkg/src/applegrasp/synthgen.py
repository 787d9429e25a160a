"""Synthetic single-view fruit clouds with exact ground truth.

Every sample is a sphere placed in front of a camera at the origin (looking
down +Z). Only the camera-facing hemisphere is emitted. The ground-truth grasp
direction runs from the sphere center to the centroid of that ideal
hemisphere, which is always the unit vector pointing back at the camera.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from applegrasp.errors import DatasetFormatError, OutOfRange
from applegrasp.geometry import (
    ANGLE_LIMIT,
    APPROACH_TO_CAMERA,
    CAMERA_TO_APPROACH,
    GraspPose,
    SphereModel,
    camera_direction_to_angles,
    euler_zyx_rotation,
)

CONDITIONS = ("normal", "noise", "outlier", "dense_clutter", "combined")
DEFAULT_SPLITS = {"train": 300, "val": 50, "test": 220}
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class GenConfig:
    radius_range: tuple[float, float] = (0.03, 0.05)
    n_points: int = 600
    noise_sigma: float = 0.02  # per-axis standard deviation, meters
    outlier_fraction_range: tuple[float, float] = (0.01, 0.05)
    clutter_neighbors: tuple[int, int] = (1, 3)
    distance_range: tuple[float, float] = (0.4, 1.0)
    fov_half_angle_deg: float = 30.0
    max_tries: int = 1000

    def __post_init__(self):
        for name in ("radius_range", "outlier_fraction_range", "clutter_neighbors", "distance_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a nonempty positive range, got {(lo, hi)}")
        if self.n_points < 1 or self.noise_sigma < 0 or self.max_tries < 1:
            raise ValueError("invalid generator configuration")


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple[float, float] = (0.8, 1.2)
    translation: float = 0.15
    rotation_deg: float = 10.0


@dataclass(eq=False)
class LabeledSample:
    points: np.ndarray
    sphere: SphereModel
    theta: float
    phi: float
    condition: str = "normal"
    seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a sample needs at least one point")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        # validates the angle range
        self.pose

    @property
    def pose(self) -> GraspPose:
        c = self.sphere.center
        return GraspPose(float(c[0]), float(c[1]), float(c[2]), self.theta, self.phi)


def _unit_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def visible_hemisphere(center, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the half of the sphere facing the camera origin."""
    center = np.asarray(center, dtype=np.float64)
    view = center / np.linalg.norm(center)
    u = _unit_rows(rng, n)
    # reflecting the far half keeps the distribution uniform
    u[u @ view > 0] *= -1.0
    return center + radius * u


def generate_sample(cfg: GenConfig, rng: np.random.Generator, seed: int = 0) -> LabeledSample:
    half = math.radians(cfg.fov_half_angle_deg)
    for _ in range(cfg.max_tries):
        dist = rng.uniform(*cfg.distance_range)
        ray = np.array([math.tan(rng.uniform(-half, half)), math.tan(rng.uniform(-half, half)), 1.0])
        center = dist * ray / np.linalg.norm(ray)
        radius = rng.uniform(*cfg.radius_range)
        toward_camera = -center / np.linalg.norm(center)
        try:
            theta, phi = camera_direction_to_angles(toward_camera)
        except OutOfRange:
            continue
        points = visible_hemisphere(center, radius, cfg.n_points, rng)
        return LabeledSample(points, SphereModel(center, radius), theta, phi, "normal", seed)
    raise RuntimeError(f"no admissible camera geometry after {cfg.max_tries} tries")


def generate_split(
    cfg: GenConfig, split: str, seed: int, count: int | None = None
) -> list[LabeledSample]:
    """Generate a dataset split; splits drawn from one seed never share samples."""
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}")
    count = DEFAULT_SPLITS[split] if count is None else count
    master = np.random.default_rng([seed, _SPLIT_CODES[split]])
    seeds = master.integers(0, 2**62, size=count)
    return [generate_sample(cfg, np.random.default_rng(int(s)), int(s)) for s in seeds]


def _add_noise(points, sigma, rng):
    return points + rng.normal(0.0, sigma, size=points.shape)


def _add_outliers(points, fraction, rng):
    n_out = int(round(fraction * len(points)))
    lo, hi = points.min(axis=0), points.max(axis=0)
    mid, extent = (lo + hi) / 2, hi - lo
    box = rng.uniform(mid - 1.5 * extent, mid + 1.5 * extent, size=(n_out, 3))
    return np.vstack([points, box])


def _clutter_points(sample: LabeledSample, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    c1, r1 = sample.sphere.center, sample.sphere.radius
    view = c1 / np.linalg.norm(c1)
    lo, hi = cfg.clutter_neighbors
    patches = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        r2 = rng.uniform(*cfg.radius_range)
        # neighbours sit mostly beside the target, as seen from the camera
        w = rng.normal(size=3)
        w -= (w @ view) * view
        w = w / np.linalg.norm(w) + rng.uniform(-0.5, 0.5) * view
        w /= np.linalg.norm(w)
        c2 = c1 + rng.uniform(1.0, 1.2) * (r1 + r2) * w
        n2 = max(1, int(round(cfg.n_points * (r2 / r1) ** 2)))
        pts = visible_hemisphere(c2, r2, n2, rng)
        # only the region bleeding into the target's segmentation mask
        patches.append(pts[np.linalg.norm(pts - c1, axis=1) <= 2.0 * r1])
    return np.vstack(patches) if patches else np.empty((0, 3))


def corrupt(
    sample: LabeledSample, cfg: GenConfig, condition: str, rng: np.random.Generator
) -> LabeledSample:
    """Apply one evaluation condition; the ground-truth label is left untouched."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    pts = sample.points.copy()
    if condition in ("dense_clutter", "combined"):
        pts = np.vstack([pts, _clutter_points(sample, cfg, rng)])
    if condition in ("noise", "combined"):
        pts = _add_noise(pts, cfg.noise_sigma, rng)
    if condition in ("outlier", "combined"):
        pts = _add_outliers(pts, rng.uniform(*cfg.outlier_fraction_range), rng)
    return replace(sample, points=pts, condition=condition)


def augment(
    sample: LabeledSample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    *,
    scale: float | None = None,
    translation=None,
    rotation: tuple[float, float] | None = None,
) -> LabeledSample:
    """Random similarity transform of a sample and its label.

    Explicit ``scale``, ``translation`` (meters) or ``rotation`` (radians on
    theta and phi) override the random draws.
    """
    c = sample.sphere.center
    theta, phi = sample.theta, sample.phi
    if rotation is None:
        lim = math.radians(cfg.rotation_deg)
        for _ in range(1000):
            d_theta, d_phi = rng.uniform(-lim, lim, size=2)
            if abs(theta + d_theta) <= ANGLE_LIMIT and abs(phi + d_phi) <= ANGLE_LIMIT:
                break
        else:
            d_theta = d_phi = 0.0
    else:
        d_theta, d_phi = rotation
    new_theta, new_phi = theta + d_theta, phi + d_phi
    if max(abs(new_theta), abs(new_phi)) > ANGLE_LIMIT:
        raise OutOfRange("augmented orientation leaves the admissible range")
    rot = euler_zyx_rotation(new_theta, new_phi) @ euler_zyx_rotation(theta, phi).T
    rot_cam = APPROACH_TO_CAMERA @ rot @ CAMERA_TO_APPROACH
    pts = c + (sample.points - c) @ rot_cam.T

    s = rng.uniform(*cfg.scale_range) if scale is None else float(scale)
    t = (
        rng.uniform(-cfg.translation, cfg.translation, size=3)
        if translation is None
        else np.asarray(translation, dtype=np.float64)
    )
    mid = pts.mean(axis=0)
    pts = mid + s * (pts - mid) + t
    center = mid + s * (c - mid) + t
    sphere = SphereModel(center, s * sample.sphere.radius)
    return replace(sample, points=pts, sphere=sphere, theta=new_theta, phi=new_phi)


# -- dataset files ----------------------------------------------------------

_FIELDS = ("points", "center", "radius", "theta", "phi", "condition", "seed")


def _format_record(s: LabeledSample) -> str:
    pts = ",".join("[%.9g,%.9g,%.9g]" % tuple(p) for p in s.points)
    head = {
        "center": [float(v) for v in s.sphere.center],
        "radius": s.sphere.radius,
        "theta": s.theta,
        "phi": s.phi,
        "condition": s.condition,
        "seed": int(s.seed),
    }
    return '{"points":[' + pts + "]," + json.dumps(head, separators=(",", ":"))[1:]


def write_dataset(samples: Iterable[LabeledSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(_format_record(s) + "\n")


def _parse_record(line: str, line_no: int) -> LabeledSample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(line_no, f"invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise DatasetFormatError(line_no, "record is not an object")
    missing = [k for k in _FIELDS if k not in rec]
    if missing:
        raise DatasetFormatError(line_no, f"missing fields {missing}")
    try:
        points = np.array(rec["points"], dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValueError("points must be a nonempty list of [x, y, z]")
        if not isinstance(rec["seed"], int) or not isinstance(rec["condition"], str):
            raise ValueError("seed must be an integer and condition a string")
        sphere = SphereModel(rec["center"], rec["radius"])
        return LabeledSample(points, sphere, float(rec["theta"]), float(rec["phi"]),
                             rec["condition"], rec["seed"])
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(line_no, str(exc)) from None


def read_dataset(path) -> list[LabeledSample]:
    samples = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            samples.append(_parse_record(line, line_no))
    return samples
