"""Point-cloud conditioning applied between segmentation and estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from applegrasp.errors import InsufficientPoints, TooFewPoints


@dataclass(frozen=True)
class PreprocessConfig:
    rejection_passes: int = 3
    rejection_multiplier: float = 2.0
    voxel_size: float = 0.003
    n_points: int = 200


def _as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) cloud, got shape {pts.shape}")
    return pts


def reject_outliers(points, passes: int = 3, multiplier: float = 2.0) -> np.ndarray:
    """Drop points far from the cloud centroid, repeated ``passes`` times.

    A point is rejected when its distance to the centroid is strictly greater
    than ``multiplier`` times the mean distance. Centroid and mean distance are
    recomputed on the survivors before every pass.
    """
    pts = _as_cloud(points)
    if len(pts) < 4:
        raise TooFewPoints(f"outlier rejection needs >= 4 points, got {len(pts)}")
    for _ in range(passes):
        dist = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        pts = pts[dist <= multiplier * dist.mean()]
    return pts


def voxel_indices(points, resolution: float) -> np.ndarray:
    return np.floor(_as_cloud(points) / resolution).astype(np.int64)


def voxel_downsample(points, resolution: float = 0.003) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid.

    The grid is anchored at the origin. Output is ordered by voxel index.
    """
    if not resolution > 0:
        raise ValueError("voxel resolution must be positive")
    pts = _as_cloud(points)
    if len(pts) == 0:
        return pts
    keys = voxel_indices(pts, resolution)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def sample_fixed(points, n: int = 200, rng: np.random.Generator | None = None) -> np.ndarray:
    pts = _as_cloud(points)
    if len(pts) < n:
        raise InsufficientPoints(f"need {n} points, cloud has {len(pts)}")
    rng = np.random.default_rng() if rng is None else rng
    return pts[rng.choice(len(pts), size=n, replace=False)]


def center_cloud(points) -> tuple[np.ndarray, np.ndarray]:
    pts = _as_cloud(points)
    if len(pts) == 0:
        raise ValueError("cannot center an empty cloud")
    centroid = pts.mean(axis=0)
    return pts - centroid, centroid


def condition_cloud(points, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Outlier rejection followed by voxel downsampling (no size cap)."""
    pts = reject_outliers(points, cfg.rejection_passes, cfg.rejection_multiplier)
    return voxel_downsample(pts, cfg.voxel_size)


def network_input(
    points, rng: np.random.Generator, cfg: PreprocessConfig = PreprocessConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Full pipeline for the learned regressor: reject, voxelize, sample, center.

    Returns the centered ``(n_points, 3)`` cloud and the removed centroid.
    """
    # rejection and voxelization only shrink a cloud
    if len(_as_cloud(points)) < cfg.n_points:
        raise InsufficientPoints(f"need {cfg.n_points} points, cloud has {len(_as_cloud(points))}")
    pts = sample_fixed(condition_cloud(points, cfg), cfg.n_points, rng)
    return center_cloud(pts)
