"""Sphere and grasp estimators: learned regressor, sphere-RANSAC, sphere-Hough."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from applegrasp import preprocess
from applegrasp.errors import (
    Degenerate,
    DegenerateOutput,
    EmptyAccumulator,
    NoConsensus,
    TooFewPoints,
)
from applegrasp.geometry import (
    GraspPose,
    NormalizationConfig,
    SphereModel,
    activate,
    camera_direction_to_angles,
    denormalize,
)
from applegrasp.tinynn import RegressorModel, predict


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    threshold: float = 0.01
    min_inlier_fraction: float = 0.2
    radius_bounds: tuple[float, float] = (0.01, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0 or self.iterations < 1:
            raise ValueError("RANSAC needs threshold > 0 and at least one iteration")


@dataclass(frozen=True)
class HoughConfig:
    center_bin: float = 0.005
    radius_bin: float = 0.005
    radius_bounds: tuple[float, float] = (0.01, 0.15)
    directions: int = 512

    def __post_init__(self):
        if self.center_bin <= 0 or self.radius_bin <= 0:
            raise ValueError("Hough bin sizes must be positive")
        if self.directions < 1:
            raise ValueError("need at least one voting direction")


# -- sphere primitives ------------------------------------------------------


def sphere_from_4_points(p1, p2, p3, p4) -> SphereModel:
    """Circumsphere of four points.

    Subtracting ``|p1 - c|^2 = r^2`` from the other three sphere equations
    leaves the linear system ``2 (pi - p1) . c = |pi|^2 - |p1|^2``.
    """
    p = np.array([p1, p2, p3, p4], dtype=np.float64)
    a = 2.0 * (p[1:] - p[0])
    b = (p[1:] ** 2).sum(axis=1) - (p[0] ** 2).sum()
    if abs(np.linalg.det(a)) <= 1e-12:
        raise Degenerate("points are coplanar or nearly so")
    center = np.linalg.solve(a, b)
    return SphereModel(center, float(np.linalg.norm(p[0] - center)))


def algebraic_sphere_fit(points) -> SphereModel:
    """Linear least squares on ``|p|^2 = 2 c . p + (r^2 - |c|^2)``.

    The cloud is shifted to its centroid first to keep the system well
    conditioned for clouds far from the origin.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 4:
        raise TooFewPoints(f"sphere fit needs >= 4 points, got {len(pts)}")
    mid = pts.mean(axis=0)
    q = pts - mid
    a = np.hstack([2.0 * q, np.ones((len(q), 1))])
    b = (q**2).sum(axis=1)
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 4:
        raise Degenerate("points do not determine a sphere")
    c = sol[:3]
    r2 = sol[3] + c @ c
    if r2 <= 0:
        raise Degenerate("least-squares solution has no real radius")
    return SphereModel(c + mid, math.sqrt(r2))


def sphere_residuals(points, sphere: SphereModel) -> np.ndarray:
    return np.abs(np.linalg.norm(np.asarray(points) - sphere.center, axis=1) - sphere.radius)


# -- RANSAC -----------------------------------------------------------------


@dataclass
class RansacResult:
    sphere: SphereModel
    inliers: np.ndarray
    best_count: int


def ransac(points, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 4:
        raise TooFewPoints(f"RANSAC needs >= 4 points, got {n}")
    rng = np.random.default_rng(cfg.seed)
    # row k depends only on the first k rows of draws, so extra iterations
    # extend the same hypothesis sequence
    keys = rng.random((cfg.iterations, n))
    samples = np.argpartition(keys, 3, axis=1)[:, :4]
    quads = pts[samples]
    a = 2.0 * (quads[:, 1:] - quads[:, :1])
    b = (quads[:, 1:] ** 2).sum(axis=2) - (quads[:, :1] ** 2).sum(axis=2)
    valid = np.abs(np.linalg.det(a)) > 1e-12
    centers = np.zeros((cfg.iterations, 3))
    if valid.any():
        centers[valid] = np.linalg.solve(a[valid], b[valid][..., None])[..., 0]
    radii = np.linalg.norm(quads[:, 0] - centers, axis=1)
    lo, hi = cfg.radius_bounds
    valid &= (radii >= lo) & (radii <= hi)

    best_count, best = 0, -1
    for k in np.flatnonzero(valid):
        resid = np.abs(np.linalg.norm(pts - centers[k], axis=1) - radii[k])
        count = int((resid <= cfg.threshold).sum())
        if count > best_count:
            best_count, best = count, k
    if best < 0 or best_count < cfg.min_inlier_fraction * n:
        raise NoConsensus(f"best hypothesis has {best_count}/{n} inliers")
    inliers = sphere_residuals(pts, SphereModel(centers[best], radii[best])) <= cfg.threshold
    return RansacResult(algebraic_sphere_fit(pts[inliers]), inliers, best_count)


def ransac_fit(points, cfg: RansacConfig = RansacConfig()) -> SphereModel:
    return ransac(points, cfg).sphere


# -- Hough ------------------------------------------------------------------


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` quasi-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(1.0 - z * z)
    ang = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.column_stack([rho * np.cos(ang), rho * np.sin(ang), z])


_DENSE_CELLS = 4_000_000


@dataclass
class HoughResult:
    peak: SphereModel
    peak_votes: int
    total_votes: int
    sphere: SphereModel


def hough(points, cfg: HoughConfig = HoughConfig()) -> HoughResult:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 4:
        raise TooFewPoints(f"Hough fit needs >= 4 points, got {len(pts)}")
    r_lo, r_hi = cfg.radius_bounds
    n_r = max(1, int(math.ceil((r_hi - r_lo) / cfg.radius_bin - 1e-9)))
    radii = r_lo + (np.arange(n_r) + 0.5) * cfg.radius_bin
    dirs = fibonacci_directions(cfg.directions)

    lo = pts.min(axis=0) - r_hi
    n_c = np.floor((pts.max(axis=0) + r_hi - lo) / cfg.center_bin).astype(np.int64) + 1

    n_cells = int(np.prod(n_c))
    strides = np.array([n_c[1] * n_c[2], n_c[2], 1])
    grid_pts = (pts - lo) / cfg.center_bin

    def cast(k):
        # padding by the largest radius keeps every vote inside the grid
        votes = (grid_pts[:, None, :] + (radii[k] / cfg.center_bin) * dirs[None, :, :]).reshape(-1, 3)
        return votes, np.floor(votes).astype(np.int64) @ strides

    # accumulator counts supporting points per bin, one radius slice at a
    # time; ties keep the lowest radius bin, then the lowest cell index
    best_votes, best_k, best_cell = 0, -1, -1
    for k in range(n_r):
        _, flat = cast(k)
        # a point supports each cell at most once; otherwise small radii,
        # whose vote shells cover few cells, collect repeated votes
        rows = np.sort(flat.reshape(len(pts), -1), axis=1)
        first = np.ones(rows.shape, dtype=bool)
        first[:, 1:] = rows[:, 1:] != rows[:, :-1]
        flat = rows[first]
        if n_cells <= _DENSE_CELLS:
            acc = np.bincount(flat, minlength=n_cells)
            cell = int(np.argmax(acc))
            count = int(acc[cell])
        else:
            # sparse fallback for spread-out clouds; unique keys come sorted,
            # so ties still resolve to the lowest cell index
            keys, counts = np.unique(flat, return_counts=True)
            i = int(np.argmax(counts))
            cell, count = int(keys[i]), int(counts[i])
        if count > best_votes:
            best_votes, best_k, best_cell = count, k, cell
    if best_votes < 4:
        raise EmptyAccumulator("no accumulator bin received 4 votes")

    votes, flat = cast(best_k)
    # sub-bin peak location: mean of the votes that landed in the winning bin
    center = lo + votes[flat == best_cell].mean(axis=0) * cfg.center_bin
    peak = SphereModel(center, float(radii[best_k]))

    support = pts[sphere_residuals(pts, peak) <= cfg.center_bin]
    try:
        refined = algebraic_sphere_fit(support)
    except (Degenerate, TooFewPoints):
        refined = peak
    return HoughResult(peak, best_votes, len(pts) * len(dirs) * n_r, refined)


def hough_fit(points, cfg: HoughConfig = HoughConfig()) -> SphereModel:
    return hough(points, cfg).sphere


# -- grasp rule and learned estimator ---------------------------------------


def grasp_from_sphere(sphere: SphereModel, visible_points) -> GraspPose:
    """Grasp along the ray from the sphere center to the visible-part centroid."""
    pts = np.asarray(visible_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one visible point")
    d = pts.mean(axis=0) - sphere.center
    norm = float(np.linalg.norm(d))
    if norm < 1e-12:
        raise Degenerate("visible centroid coincides with the sphere center")
    theta, phi = camera_direction_to_angles(d / norm)
    c = sphere.center
    return GraspPose(float(c[0]), float(c[1]), float(c[2]), theta, phi)


def pointnet_estimate(
    model: RegressorModel,
    points,
    cfg: NormalizationConfig = NormalizationConfig(),
    rng: np.random.Generator | None = None,
    *,
    prep: preprocess.PreprocessConfig = preprocess.PreprocessConfig(),
    radius_floor: float = 0.01,
) -> tuple[SphereModel, GraspPose]:
    rng = np.random.default_rng(0) if rng is None else rng
    centered, centroid = preprocess.network_input(points, rng, prep)
    return regress_centered(model, centered, centroid, cfg, radius_floor=radius_floor)


def regress_centered(
    model: RegressorModel,
    centered,
    centroid,
    cfg: NormalizationConfig = NormalizationConfig(),
    *,
    radius_floor: float = 0.01,
) -> tuple[SphereModel, GraspPose]:
    """Network pass on an already centered cloud, mapped back to the camera frame."""
    raw = predict(model, np.asarray(centered)[None])[0]
    sphere, pose = denormalize(activate(raw), centroid, cfg)
    if sphere.radius < radius_floor:
        raise DegenerateOutput(
            f"predicted radius {sphere.radius * 1000:.2f} mm below floor {radius_floor * 1000:.1f} mm"
        )
    return sphere, pose
