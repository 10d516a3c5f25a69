"""Kernel SHAP over the three registration perturbation sources.

Features are, in order: sensor noise std (sn, meters), initial-pose
covariance scale (ip, dimensionless >= 1), overlap reduction (po). A
coalition picks, per feature, either the explained setting's value or the
reference value; the reference is the unperturbed setting (0, 1, 0).

With all 2^M coalitions enumerable the kernel regression reproduces exact
Shapley values. The infinite weights on the empty and full coalitions are
handled by constraint elimination: the model is forced through f(empty) and
f(full) and the remaining coefficients come from a small weighted
least-squares solve over the interior coalitions.
"""

from __future__ import annotations

import dataclasses
import math
from fractions import Fraction

import numpy as np

from .errors import SingularDesign

FEATURE_KEYS = ("sn", "ip", "po")


@dataclasses.dataclass(frozen=True)
class PerturbationSetting:
    """One point in perturbation space."""

    sensor_noise: float  # m
    init_pose_scale: float  # multiplies the base pose covariance
    overlap_reduction: float  # subtracted from the overlap ratio

    def __post_init__(self):
        values = (self.sensor_noise, self.init_pose_scale, self.overlap_reduction)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("setting values must be finite")
        if self.sensor_noise < 0:
            raise ValueError("sensor_noise must be nonnegative")
        if self.init_pose_scale <= 0:
            raise ValueError("init_pose_scale must be positive")
        if self.overlap_reduction < 0:
            raise ValueError("overlap_reduction must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.sensor_noise, self.init_pose_scale, self.overlap_reduction)


REFERENCE_SETTING = PerturbationSetting(0.0, 1.0, 0.0)


@dataclasses.dataclass(frozen=True)
class SettingBounds:
    """Validity box for settings; the defaults match the sweep protocol."""

    sensor_noise_min: float = 0.0
    sensor_noise_max: float = 0.1
    init_pose_scale_min: float = 1.0
    init_pose_scale_max: float = 2.0
    overlap_reduction_min: float = 0.0
    overlap_reduction_max: float = 0.1

    def check(self, setting: PerturbationSetting) -> None:
        spans = (
            ("sensor_noise", setting.sensor_noise, self.sensor_noise_min, self.sensor_noise_max),
            ("init_pose_scale", setting.init_pose_scale, self.init_pose_scale_min, self.init_pose_scale_max),
            ("overlap_reduction", setting.overlap_reduction, self.overlap_reduction_min, self.overlap_reduction_max),
        )
        for name, value, low, high in spans:
            if not low <= value <= high:
                raise ValueError(f"{name}={value!r} outside [{low!r}, {high!r}]")


def enumerate_coalitions(num_features: int) -> list[tuple[int, ...]]:
    """All bit tuples, ordered by the integer value of the pattern (feature 0 = LSB)."""
    if num_features < 1:
        raise ValueError("need at least one feature")
    return [tuple((i >> j) & 1 for j in range(num_features)) for i in range(2**num_features)]


def map_coalition(
    bits: tuple[int, ...],
    x: PerturbationSetting,
    reference: PerturbationSetting,
) -> PerturbationSetting:
    """Setting evaluated for a coalition: x where the bit is set, reference elsewhere."""
    xv, rv = x.as_tuple(), reference.as_tuple()
    if len(bits) != len(xv):
        raise ValueError(f"expected {len(xv)} bits, got {len(bits)}")
    return PerturbationSetting(*(xv[j] if b else rv[j] for j, b in enumerate(bits)))


def shapley_kernel_weight(num_features: int, coalition_size: int):
    """Shapley kernel weight as an exact Fraction; inf at the full/empty coalitions."""
    if not 0 <= coalition_size <= num_features:
        raise ValueError("coalition size out of range")
    if coalition_size in (0, num_features):
        return math.inf
    return Fraction(num_features - 1) / (
        math.comb(num_features, coalition_size) * coalition_size * (num_features - coalition_size)
    )


def weighted_linear_regression(design: np.ndarray, weights: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Solve argmin_c sum_i w_i (y_i - z_i . c)^2 via the normal equations."""
    design = np.asarray(design, dtype=float)
    weights = np.asarray(weights, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if design.ndim != 2 or weights.shape != (design.shape[0],) or targets.shape != (design.shape[0],):
        raise ValueError("design (n, k), weights (n,), targets (n,) required")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    weighted = design * weights[:, None]
    normal = design.T @ weighted
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond >= 1e12:
        raise SingularDesign(f"normal matrix condition number {cond:.3e}")
    return np.linalg.solve(normal, weighted.T @ targets)


@dataclasses.dataclass(frozen=True)
class ShapExplanation:
    """Attribution of f(x) - f(reference) to the three perturbation features.

    coalition_values holds f at every coalition, indexed like
    enumerate_coalitions(3); phi follows the feature order of FEATURE_KEYS.
    """

    phi: np.ndarray
    f_empty: float
    f_full: float
    coalition_values: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float).reshape(-1)
        values = np.array(self.coalition_values, dtype=float).reshape(-1)
        if values.shape[0] != 2 ** phi.shape[0]:
            raise ValueError("coalition_values length must be 2**num_features")
        phi.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "coalition_values", values)

    @property
    def phi_sn(self) -> float:
        return float(self.phi[0])

    @property
    def phi_ip(self) -> float:
        return float(self.phi[1])

    @property
    def phi_po(self) -> float:
        return float(self.phi[2])

    def local_accuracy_gap(self) -> float:
        return abs(float(np.sum(self.phi)) - (self.f_full - self.f_empty))


def _coalition_values(f, x: PerturbationSetting, reference: PerturbationSetting) -> np.ndarray:
    """Evaluate f on all 8 coalitions, calling it once per distinct mapped setting.

    When x and the reference share a component, several coalitions collapse
    to one setting; the cache makes the collapsed features' attributions
    exactly zero instead of merely small.
    """
    cache: dict[tuple[float, float, float], float] = {}
    values = np.empty(8)
    for i, bits in enumerate(enumerate_coalitions(3)):
        setting = map_coalition(bits, x, reference)
        key = setting.as_tuple()
        if key not in cache:
            cache[key] = float(f(setting))
        values[i] = cache[key]
    return values


def _restrict_values(values: np.ndarray, active: list[int]) -> np.ndarray:
    """Coalition values of the game restricted to the active features.

    Null features map to bit 0; by construction their bit never changes the
    cached value, so any choice would do.
    """
    out = np.empty(2 ** len(active))
    for i in range(out.shape[0]):
        full = 0
        for j_sub, j_full in enumerate(active):
            if (i >> j_sub) & 1:
                full |= 1 << j_full
        out[i] = values[full]
    return out


def _solve_constrained(values: np.ndarray, num_features: int) -> np.ndarray:
    """Kernel regression with f(empty) and f(full) fixed exactly.

    Centering by f(empty) removes the intercept; substituting
    sum(phi) = f(full) - f(empty) eliminates the last coefficient, leaving a
    plain weighted least-squares problem over the interior coalitions.
    """
    m = num_features
    delta = values[-1] - values[0]
    if m == 1:
        return np.array([delta])
    coalitions = enumerate_coalitions(m)
    interior = [i for i in range(2**m) if 0 < i < 2**m - 1]
    bits = np.array([coalitions[i] for i in interior], dtype=float)
    weights = np.array([float(shapley_kernel_weight(m, int(bits[r].sum()))) for r in range(len(interior))])
    targets = values[interior] - values[0] - delta * bits[:, m - 1]
    design = bits[:, : m - 1] - bits[:, [m - 1]]
    head = weighted_linear_regression(design, weights, targets)
    return np.append(head, delta - head.sum())


def _solve_large_weight(values: np.ndarray, num_features: int, boundary_weight: float) -> np.ndarray:
    """Comparison mode: no constraint, boundary coalitions get a large finite weight."""
    m = num_features
    coalitions = enumerate_coalitions(m)
    bits = np.array(coalitions, dtype=float)
    weights = np.array(
        [
            boundary_weight if size in (0, m) else float(shapley_kernel_weight(m, size))
            for size in bits.sum(axis=1).astype(int)
        ]
    )
    return weighted_linear_regression(bits, weights, values - values[0])


def explain(
    f,
    x: PerturbationSetting,
    reference: PerturbationSetting = REFERENCE_SETTING,
    infinite_weight: float | None = None,
) -> ShapExplanation:
    """Exact Shapley attribution of f(x) - f(reference) over the three features.

    f maps a PerturbationSetting to a scalar. The default path enforces the
    boundary constraints exactly; passing infinite_weight (e.g. 1e6) instead
    approximates them with a large finite regression weight.
    """
    values = _coalition_values(f, x, reference)
    if infinite_weight is None:
        # A feature equal to the reference is a dummy: its bit never changes
        # the evaluated setting, so its attribution is zero by construction,
        # not as a small residual of the regression. Solve over the rest.
        active = [j for j in range(3) if x.as_tuple()[j] != reference.as_tuple()[j]]
        phi = np.zeros(3)
        if active:
            phi[active] = _solve_constrained(_restrict_values(values, active), len(active))
    else:
        if not infinite_weight > 0:
            raise ValueError("infinite_weight must be positive")
        phi = _solve_large_weight(values, 3, infinite_weight)
    return ShapExplanation(phi=phi, f_empty=float(values[0]), f_full=float(values[-1]), coalition_values=values)


def brute_force_shapley(f, x: PerturbationSetting, reference: PerturbationSetting = REFERENCE_SETTING) -> np.ndarray:
    """Shapley values by direct enumeration of marginal contributions.

    Independent of the regression path; used to cross-check explain().
    """
    values = _coalition_values(f, x, reference)
    m = 3
    phi = np.zeros(m)
    for j in range(m):
        for i in range(2**m):
            if (i >> j) & 1:
                continue
            size = bin(i).count("1")
            weight = math.factorial(size) * math.factorial(m - size - 1) / math.factorial(m)
            phi[j] += weight * (values[i | (1 << j)] - values[i])
    return phi
