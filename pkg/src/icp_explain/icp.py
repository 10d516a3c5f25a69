"""Point-to-point ICP with an SVD transform estimator.

Each iteration matches every (optionally subsampled) source point to its
exact nearest reference neighbor, optionally drops pairs beyond a distance
cap and a worst-distance quantile, then re-estimates the full transform
from the original source coordinates. Convergence is measured on the
incremental update between iterations.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .errors import DegenerateConfiguration, NoCorrespondences
from .se3 import RigidTransform


@dataclasses.dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    translation_tol: float = 1e-6  # m, on the incremental update
    rotation_tol: float = 1e-6  # rad, on the incremental update
    max_correspondence_dist: float = math.inf
    subsample_fraction: float = 1.0
    outlier_trim_fraction: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.translation_tol <= 0 or self.rotation_tol <= 0:
            raise ValueError("convergence tolerances must be positive")
        if self.max_correspondence_dist <= 0:
            raise ValueError("max_correspondence_dist must be positive")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must be in (0, 1]")
        if not 0 <= self.outlier_trim_fraction < 1:
            raise ValueError("outlier_trim_fraction must be in [0, 1)")


@dataclasses.dataclass(frozen=True)
class Correspondences:
    """Matched index pairs and their distances at the current pose."""

    source_indices: np.ndarray
    reference_indices: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.source_indices.shape[0]

    @property
    def cost(self) -> float:
        """Mean squared correspondence distance."""
        return float(np.mean(self.distances**2))


@dataclasses.dataclass(frozen=True)
class IcpResult:
    estimate: RigidTransform
    iterations: int
    converged: bool
    final_cost: float
    correspondence_count: int
    cost_history: np.ndarray  # cost before each update, one entry per iteration


def find_correspondences(
    source_transformed: np.ndarray,
    reference_index: SpatialIndex,
    config: IcpConfig,
    rng: np.random.Generator | None = None,
    source_subset: np.ndarray | None = None,
) -> Correspondences:
    """Match source points (already posed) to nearest reference points.

    Subsampling draws source rows without replacement; passing an explicit
    source_subset reuses one draw across calls, which keeps the matched set
    stable over the iterations of a single ICP run. After matching, pairs
    beyond max_correspondence_dist are dropped, then the worst
    floor(q * N) by distance.
    """
    n = source_transformed.shape[0]
    if source_subset is not None:
        selected = source_subset
    elif config.subsample_fraction < 1.0:
        if rng is None:
            raise ValueError("subsampling requires an rng")
        count = max(1, int(round(config.subsample_fraction * n)))
        selected = np.sort(rng.choice(n, size=count, replace=False))
    else:
        selected = np.arange(n)

    distances, reference_indices = reference_index.query(source_transformed[selected])
    keep = distances <= config.max_correspondence_dist
    selected = selected[keep]
    reference_indices = reference_indices[keep]
    distances = distances[keep]

    if config.outlier_trim_fraction > 0 and distances.size > 0:
        trim = int(math.floor(config.outlier_trim_fraction * distances.size))
        if trim > 0:
            order = np.argsort(distances, kind="stable")[: distances.size - trim]
            order = np.sort(order)
            selected = selected[order]
            reference_indices = reference_indices[order]
            distances = distances[order]

    if distances.size == 0:
        raise NoCorrespondences("no source points matched within the distance cap")
    return Correspondences(selected, reference_indices, distances)


def estimate_rigid_transform(source_points: np.ndarray, reference_points: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping source points onto reference points.

    Standard SVD solution of the orthogonal Procrustes problem with the
    determinant sign fix, so the result is always a proper rotation.
    """
    source_points = np.asarray(source_points, dtype=float)
    reference_points = np.asarray(reference_points, dtype=float)
    if source_points.shape != reference_points.shape or source_points.ndim != 2:
        raise ValueError("source and reference point arrays must have matching (n, 3) shapes")
    n = source_points.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {n}")

    source_centroid = source_points.mean(axis=0)
    reference_centroid = reference_points.mean(axis=0)
    cross = (source_points - source_centroid).T @ (reference_points - reference_centroid)
    u, singular, vt = np.linalg.svd(cross)
    if singular[0] == 0.0 or singular[1] / singular[0] < 1e-9:
        raise DegenerateConfiguration("cross-covariance rank below 2 (collinear or coincident points)")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, 1.0, d]) @ u.T
    translation = reference_centroid - rotation @ source_centroid
    return RigidTransform(rotation, translation)


def _update_magnitudes(previous: RigidTransform, current: RigidTransform) -> tuple[float, float]:
    delta = previous.inverse().compose(current)
    return delta.rotation_angle(), float(np.linalg.norm(delta.translation))


def run_icp(
    source: PointCloud,
    reference: PointCloud,
    init: RigidTransform,
    config: IcpConfig = IcpConfig(),
    rng: np.random.Generator | None = None,
    reference_index: SpatialIndex | None = None,
) -> IcpResult:
    """Iterate correspondence search and re-estimation from an initial pose.

    The subsample draw (when enabled) happens once per run, so the same
    source subset is matched every iteration. A prebuilt reference_index can
    be shared across runs against the same reference cloud.
    """
    if len(source) == 0 or len(reference) == 0:
        raise ValueError("source and reference clouds must be nonempty")
    if reference_index is None:
        reference_index = SpatialIndex(reference)

    source_subset = None
    if config.subsample_fraction < 1.0:
        if rng is None:
            raise ValueError("subsampling requires an rng")
        count = max(1, int(round(config.subsample_fraction * len(source))))
        source_subset = np.sort(rng.choice(len(source), size=count, replace=False))

    estimate = init
    converged = False
    costs: list[float] = []
    pairs: Correspondences | None = None
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        transformed = estimate.apply(source.points)
        pairs = find_correspondences(transformed, reference_index, config, rng, source_subset)
        costs.append(pairs.cost)
        updated = estimate_rigid_transform(
            source.points[pairs.source_indices],
            reference_index.points[pairs.reference_indices],
        )
        angle, shift = _update_magnitudes(estimate, updated)
        estimate = updated
        if angle < config.rotation_tol and shift < config.translation_tol:
            converged = True
            break

    return IcpResult(
        estimate=estimate,
        iterations=iterations,
        converged=converged,
        final_cost=costs[-1],
        correspondence_count=len(pairs),
        cost_history=np.array(costs),
    )
