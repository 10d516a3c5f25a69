"""Pose-estimate distributions and the KL uncertainty scalar.

A scenario fixes two local-frame clouds with ground-truth poses plus a
perturbation setting and per-stage seeds. Perturbing the inputs once and
rerunning ICP from randomly drawn initial poses yields a cloud of estimates;
their errors against the ground truth, taken in SE(3) tangent coordinates,
are summarized by a Gaussian. Uncertainty is the KL divergence from the
perturbed distribution to a pseudo-true distribution obtained the same way
at the unperturbed setting.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .cloud import (
    DEFAULT_OVERLAP_DISTANCE,
    PointCloud,
    WORLD,
    add_sensor_noise,
    SpatialIndex,
    select_overlap_reduction,
    transform_cloud,
)
from .errors import AngleNearPi, DegenerateConfiguration, NoCorrespondences, SingularCovariance
from .icp import IcpConfig, run_icp
from .kernel_shap import PerturbationSetting
from .se3 import (
    PoseCovariance,
    RigidTransform,
    TangentVector,
    default_pose_covariance,
    log_se3,
    sample_pose_perturbation,
)
from .seeding import per_sample_seeds, spawn_rng

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = "pose-distribution v1"


@dataclasses.dataclass(frozen=True)
class StageSeeds:
    """Independent seeds for the three random stages of one scenario evaluation."""

    sensor_noise: int
    overlap: int
    init: int


@dataclasses.dataclass(frozen=True)
class Scenario:
    """A registration pair plus the perturbation setting and seeds to evaluate it under."""

    source: PointCloud  # local frame
    reference: PointCloud  # local frame
    source_pose: RigidTransform  # local -> world
    reference_pose: RigidTransform
    setting: PerturbationSetting
    seeds: StageSeeds

    @property
    def ground_truth(self) -> RigidTransform:
        """Transform registering the source cloud onto the reference cloud."""
        return self.reference_pose.inverse().compose(self.source_pose)


@dataclasses.dataclass(frozen=True)
class InitSampler:
    """Concentrated Gaussian over initial poses: center @ exp(xi), xi ~ N(0, scale * cov)."""

    center: RigidTransform
    covariance: PoseCovariance
    scale: float

    def sample(self, rng: np.random.Generator) -> RigidTransform:
        return sample_pose_perturbation(self.center, self.covariance, self.scale, rng)


@dataclasses.dataclass(frozen=True)
class EstimatorConfig:
    """Everything estimate_uncertainty needs besides the scenario itself."""

    sample_count: int = 100
    min_successes: int = 7
    base_covariance: PoseCovariance = dataclasses.field(default_factory=default_pose_covariance)
    overlap_distance: float = DEFAULT_OVERLAP_DISTANCE
    icp: IcpConfig = dataclasses.field(default_factory=IcpConfig)
    kl_include_means: bool = False
    regularization: float = 1e-12
    workers: int = 1

    def __post_init__(self):
        if self.sample_count < 7:
            raise ValueError("sample_count must be at least 7 for a usable 6x6 covariance")
        if not 7 <= self.min_successes <= self.sample_count:
            raise ValueError("min_successes must lie in [7, sample_count]")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


def apply_perturbations(
    scenario: Scenario,
    base_covariance: PoseCovariance,
    overlap_distance: float = DEFAULT_OVERLAP_DISTANCE,
) -> tuple[PointCloud, PointCloud, InitSampler]:
    """Realize the scenario's setting: perturbed clouds plus the init-pose sampler.

    Overlap reduction is decided on the clean world-frame clouds (the target
    ratio refers to the unperturbed overlap) and applied to the local
    reference cloud; sensor noise is added afterwards to both local clouds.
    Raises InsufficientOverlap when the clean ratio does not exceed the
    requested reduction.
    """
    setting = scenario.setting
    reference = scenario.reference
    if setting.overlap_reduction > 0:
        source_world = transform_cloud(scenario.source, scenario.source_pose, WORLD)
        reference_world = transform_cloud(reference, scenario.reference_pose, WORLD)
        removed = select_overlap_reduction(
            source_world,
            reference_world,
            setting.overlap_reduction,
            overlap_distance,
            spawn_rng(scenario.seeds.overlap),
        )
        if removed.size:
            reference = PointCloud(np.delete(reference.points, removed, axis=0), reference.frame)

    noise_rng = spawn_rng(scenario.seeds.sensor_noise)
    source = add_sensor_noise(scenario.source, setting.sensor_noise, noise_rng)
    reference = add_sensor_noise(reference, setting.sensor_noise, noise_rng)

    sampler = InitSampler(
        center=scenario.ground_truth,
        covariance=base_covariance,
        scale=setting.init_pose_scale,
    )
    return source, reference, sampler


@dataclasses.dataclass(frozen=True)
class PoseSampleSet:
    """ICP estimates from repeated runs plus their tangent-space errors."""

    estimates: tuple[RigidTransform, ...]
    ground_truth: RigidTransform
    tangent_errors: np.ndarray  # (n, 6), log(gt^-1 @ estimate)
    failure_count: int


def sample_pose_estimates(
    source: PointCloud,
    reference: PointCloud,
    sampler: InitSampler,
    count: int,
    icp_config: IcpConfig,
    seed: int,
    min_successes: int = 7,
    workers: int = 1,
    engine=run_icp,
) -> PoseSampleSet:
    """Run ICP `count` times from freshly sampled initial poses.

    Each run consumes its own pre-split seed, so results do not depend on
    worker count or completion order. Runs that fail (no correspondences,
    degenerate geometry, or an error rotation at the log-map cut) are
    dropped; fewer than min_successes survivors is an error.
    """
    if count < 7:
        raise ValueError("count must be at least 7")
    ground_truth = sampler.center
    gt_inverse = ground_truth.inverse()
    reference_index = SpatialIndex(reference)
    seeds = per_sample_seeds(seed, count)

    def one_run(sample_seed: int):
        rng = spawn_rng(sample_seed)
        init = sampler.sample(rng)
        try:
            result = engine(source, reference, init, icp_config, rng, reference_index=reference_index)
            error = log_se3(gt_inverse.compose(result.estimate))
        except (NoCorrespondences, DegenerateConfiguration, AngleNearPi) as exc:
            return None, exc
        return (result.estimate, error), None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one_run, seeds))
    else:
        outcomes = [one_run(s) for s in seeds]

    estimates: list[RigidTransform] = []
    errors: list[TangentVector] = []
    failures = 0
    for outcome, exc in outcomes:
        if outcome is None:
            failures += 1
            logger.warning("dropping failed registration run: %s", exc)
        else:
            estimates.append(outcome[0])
            errors.append(outcome[1])
    if len(estimates) < min_successes:
        raise ValueError(f"only {len(estimates)} of {count} registration runs succeeded (need {min_successes})")
    return PoseSampleSet(
        estimates=tuple(estimates),
        ground_truth=ground_truth,
        tangent_errors=np.array([e.vector for e in errors]),
        failure_count=failures,
    )


@dataclasses.dataclass(frozen=True)
class GaussianPoseDistribution:
    mean: TangentVector
    covariance: PoseCovariance


def fit_gaussian(samples: PoseSampleSet, regularization: float = 1e-12) -> GaussianPoseDistribution:
    """Sample mean and unbiased covariance of the tangent errors, ridge-regularized."""
    errors = samples.tangent_errors
    n = errors.shape[0]
    if n < 7:
        raise ValueError(f"need at least 7 samples to fit a 6x6 covariance, got {n}")
    if regularization < 0:
        raise ValueError("regularization must be nonnegative")
    mean = errors.mean(axis=0)
    centered = errors - mean
    covariance = centered.T @ centered / (n - 1) + regularization * np.eye(6)
    return GaussianPoseDistribution(TangentVector.from_vector(mean), PoseCovariance(covariance))


def kl_divergence(
    p: GaussianPoseDistribution,
    q: GaussianPoseDistribution,
    include_means: bool = False,
) -> float:
    """KL(p || q) between Gaussian pose distributions, clamped at zero.

    By default only the covariances enter; include_means adds the
    Mahalanobis term on the mean difference. Raises SingularCovariance when
    either covariance is not positive definite.
    """
    dim = 6
    try:
        factor = cho_factor(q.covariance.matrix, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"q covariance is not positive definite: {exc}") from None
    sign_p, logdet_p = np.linalg.slogdet(p.covariance.matrix)
    if sign_p <= 0:
        raise SingularCovariance("p covariance is not positive definite")
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    trace = float(np.trace(cho_solve(factor, p.covariance.matrix)))
    value = trace - dim + logdet_q - logdet_p
    if include_means:
        diff = p.mean.vector - q.mean.vector
        value += float(diff @ cho_solve(factor, diff))
    return max(0.5 * value, 0.0)


def fit_pose_distribution(scenario: Scenario, config: EstimatorConfig) -> GaussianPoseDistribution:
    """Distribution of ICP estimates under the scenario's perturbation setting."""
    source, reference, sampler = apply_perturbations(scenario, config.base_covariance, config.overlap_distance)
    samples = sample_pose_estimates(
        source,
        reference,
        sampler,
        count=config.sample_count,
        icp_config=config.icp,
        seed=scenario.seeds.init,
        min_successes=config.min_successes,
        workers=config.workers,
    )
    return fit_gaussian(samples, config.regularization)


def estimate_uncertainty(
    scenario: Scenario,
    pseudo_true: GaussianPoseDistribution,
    config: EstimatorConfig,
) -> float:
    """KL divergence of the scenario's estimate distribution from the pseudo-true one."""
    perturbed = fit_pose_distribution(scenario, config)
    return kl_divergence(perturbed, pseudo_true, config.kl_include_means)


def save_distribution(distribution: GaussianPoseDistribution, path, seed_manifest: dict | None = None) -> None:
    """Write a distribution (and optionally its seed provenance) as versioned text."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# {CACHE_FORMAT_VERSION}\n")
        handle.write("mean " + " ".join(repr(float(v)) for v in distribution.mean.vector) + "\n")
        for row in distribution.covariance.matrix:
            handle.write("cov " + " ".join(repr(float(v)) for v in row) + "\n")
        for key, value in sorted((seed_manifest or {}).items()):
            handle.write(f"seed {key} {value}\n")


def load_distribution(path) -> tuple[GaussianPoseDistribution, dict]:
    """Inverse of save_distribution; returns the distribution and the seed manifest."""
    mean = None
    rows: list[list[float]] = []
    manifest: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().strip()
        if header != f"# {CACHE_FORMAT_VERSION}":
            raise ValueError(f"unsupported cache format {header!r} in {path}")
        for line in handle:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "mean":
                mean = np.array([float(t) for t in tokens[1:]])
            elif tokens[0] == "cov":
                rows.append([float(t) for t in tokens[1:]])
            elif tokens[0] == "seed":
                manifest[tokens[1]] = int(tokens[2])
    if mean is None or len(rows) != 6:
        raise ValueError(f"incomplete distribution cache in {path}")
    distribution = GaussianPoseDistribution(
        TangentVector.from_vector(mean), PoseCovariance(np.array(rows))
    )
    return distribution, manifest
