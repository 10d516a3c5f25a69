"""Acceptance gate: one test per guarantee the package ships with.

Every test prints a single "ACCEPTANCE <id> <label>: PASS/FAIL" line (run
with -s to see the passing ones) and asserts the same condition, so this
file doubles as a release checklist. The room-scene block at the bottom
shares one expensive fixture: five full per-axis grid runs on a 20k-point
scan pair at 100 registrations per fit. Expect roughly fifteen minutes for
it on one core; everything above it finishes in seconds.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from icp_explain.cli import main as cli_main
from icp_explain.cloud import (
    WORLD,
    PointCloud,
    overlap_ratio,
    save_cloud,
    select_overlap_reduction,
)
from icp_explain.experiments import PerturbationGrid, run_grid_experiment, save_pose_file
from icp_explain.icp import IcpConfig, run_icp
from icp_explain.kernel_shap import (
    PerturbationSetting,
    REFERENCE_SETTING,
    brute_force_shapley,
    explain,
    shapley_kernel_weight,
)
from icp_explain.se3 import (
    PoseCovariance,
    TangentVector,
    exp_se3,
    hat6,
    log_se3,
    pose_error,
)
from icp_explain.uncertainty import (
    EstimatorConfig,
    GaussianPoseDistribution,
    kl_divergence,
)
from scenes import box_cloud, room_pair


def _verdict(criterion, label, ok, detail=""):
    line = f"\nACCEPTANCE {criterion} {label}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line.rstrip(), flush=True)
    assert ok, f"{label}: {detail}"


# ---------------------------------------------------------------------------
# Kernel SHAP solver


def test_explain_matches_brute_force(rng):
    """Kernel solution equals the enumeration formula for arbitrary set functions."""
    x = PerturbationSetting(0.03, 1.4, 0.07)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(100):
        values = {}

        def f(setting):
            key = setting.as_tuple()
            if key not in values:
                values[key] = float(rng.uniform(-10.0, 10.0))
            return values[key]

        gap = np.abs(explain(f, x).phi - brute_force_shapley(f, x))
        worst = max(worst, float(gap.max()))
    elapsed = time.perf_counter() - start
    _verdict(
        "1",
        "kernel-vs-enumeration",
        worst <= 1e-9 and elapsed < 1.0,
        f"max |dphi|={worst:.2e} elapsed={elapsed:.2f}s",
    )


def test_kernel_weights_exact_rationals():
    w1 = shapley_kernel_weight(3, 1)
    w2 = shapley_kernel_weight(3, 2)
    ok = (
        isinstance(w1, Fraction)
        and isinstance(w2, Fraction)
        and w1 == Fraction(1, 3)
        and w2 == Fraction(1, 3)
    )
    _verdict("2", "kernel-weights", ok, f"w(3,1)={w1} w(3,2)={w2}")


# ---------------------------------------------------------------------------
# SE(3) maps


def test_exp_log_round_trip_and_linearization(rng):
    count = 10_000
    directions = rng.standard_normal((count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    delta = directions * rng.uniform(0.0, 3.0, size=(count, 1))
    rho = rng.uniform(-10.0, 10.0, size=(count, 3))
    xi = np.hstack([delta, rho])

    start = time.perf_counter()
    worst_round_trip = 0.0
    for row in xi:
        back = log_se3(exp_se3(row)).vector
        worst_round_trip = max(worst_round_trip, float(np.abs(back - row).max()))

    # Near the identity the exponential is its own linearization to second
    # order: ||exp(xi) - (I + hat(xi))||_F <= ||xi||^2.
    small = xi[:2000] * (rng.uniform(0.01, 0.1, size=(2000, 1)) / np.linalg.norm(xi[:2000], axis=1, keepdims=True))
    worst_ratio = 0.0
    for row in small:
        residual = exp_se3(row).as_matrix() - (np.eye(4) + hat6(row))
        norm_sq = float(np.dot(row, row))
        worst_ratio = max(worst_ratio, float(np.linalg.norm(residual)) / norm_sq)
    elapsed = time.perf_counter() - start
    _verdict(
        "4",
        "exp-log-maps",
        worst_round_trip < 1e-9 and worst_ratio <= 1.0 and elapsed < 5.0,
        f"round-trip={worst_round_trip:.2e} linearization-ratio={worst_ratio:.3f} elapsed={elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# ICP on a clean pair


def test_icp_exact_recovery(rng):
    points = box_cloud(5000, rng)
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    truth = exp_se3(np.concatenate([0.2 * axis, [0.3, -0.35, 0.2]]))
    assert abs(np.linalg.norm(truth.translation) - 0.5) < 0.05

    source = PointCloud(points)
    reference = PointCloud(truth.apply(points))
    nudge = exp_se3(np.array([0.025, -0.02, 0.015, 0.03, 0.02, -0.015]))
    init = truth.compose(nudge)

    start = time.perf_counter()
    result = run_icp(source, reference, init, IcpConfig())
    elapsed = time.perf_counter() - start
    error = pose_error(result.estimate, truth)
    _verdict(
        "5",
        "icp-exact-recovery",
        error < 1e-6 and result.iterations <= 50 and elapsed < 2.0,
        f"pose-error={error:.2e} iterations={result.iterations} elapsed={elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# Gaussian KL


def test_kl_closed_form_and_monte_carlo(rng):
    zero = TangentVector(np.zeros(3), np.zeros(3))
    p = GaussianPoseDistribution(zero, PoseCovariance(2.0 * np.eye(6)))
    q = GaussianPoseDistribution(zero, PoseCovariance(np.eye(6)))
    expected = 3.0 - 3.0 * np.log(2.0)
    value = kl_divergence(p, q)

    samples = rng.standard_normal((100_000, 6)) * np.sqrt(2.0)
    # log p - log q for these two isotropic Gaussians reduces to a quadratic.
    mc = float(np.mean(0.25 * np.sum(samples**2, axis=1) - 3.0 * np.log(2.0)))
    closed_ok = abs(value - expected) <= 1e-12
    mc_ok = abs(mc - expected) / expected <= 0.02
    _verdict(
        "6",
        "gaussian-kl",
        closed_ok and mc_ok,
        f"closed-form-err={abs(value - expected):.1e} mc={mc:.4f} target={expected:.4f}",
    )


# ---------------------------------------------------------------------------
# Overlap measurement and reduction


def test_overlap_against_quadratic_oracle(rng):
    distance = 0.2
    exact = True
    for _ in range(20):
        a = rng.uniform(0.0, 2.0, size=(500, 3))
        b = rng.uniform(0.0, 2.0, size=(500, 3)) + rng.uniform(-0.5, 0.5, size=3)
        report = overlap_ratio(PointCloud(a, WORLD), PointCloud(b, WORLD), distance)
        nearest = cdist(b, a).min(axis=1)
        oracle_valid = np.flatnonzero(nearest <= distance)
        exact = (
            exact
            and report.ratio == oracle_valid.size / 500
            and np.array_equal(report.valid_indices, oracle_valid)
        )

    # On a coincident pair the ratio is exactly 1, so removing the selected
    # rows should land within one point (plus slack) of the requested drop.
    points = rng.uniform(0.0, 4.0, size=(500, 3))
    p1 = PointCloud(points, WORLD)
    worst_gap = 0.0
    for reduction in (0.1, 0.25, 0.4):
        p2 = PointCloud(points, WORLD)
        drop = select_overlap_reduction(p1, p2, reduction, distance, rng)
        kept = np.delete(points, drop, axis=0)
        reduced = overlap_ratio(p1, PointCloud(kept, WORLD), distance).ratio
        worst_gap = max(worst_gap, abs(reduced - (1.0 - reduction)))
    reduction_ok = worst_gap <= 1.0 / 500 + 0.01
    _verdict(
        "7",
        "overlap-ratio",
        exact and reduction_ok,
        f"oracle-exact={exact} worst-reduction-gap={worst_gap:.4f}",
    )


# ---------------------------------------------------------------------------
# Deterministic experiment reruns


def test_experiment_rerun_is_byte_identical(tmp_path, rng):
    world = box_cloud(800, rng)
    entries = []
    for i, pose_xi in enumerate(([0.0] * 6, [0.0, 0.0, 0.04, 0.06, 0.0, 0.0])):
        pose = exp_se3(np.array(pose_xi))
        cloud_path = tmp_path / f"cloud{i}.csv"
        pose_path = tmp_path / f"pose{i}.txt"
        save_cloud(PointCloud(pose.inverse().apply(world)), cloud_path)
        save_pose_file(pose, pose_path)
        entries.append({"cloud": cloud_path.name, "pose": pose_path.name})
    manifest = tmp_path / "pair.json"
    manifest.write_text(json.dumps({"name": "pair", "entries": entries}))

    config = tmp_path / "fast.cfg"
    config.write_text(
        "estimator.sample_count = 10\n"
        "icp.max_iterations = 8\n"
        "icp.translation_tol = 1e-4\n"
        "icp.rotation_tol = 1e-4\n"
        "icp.subsample_fraction = 0.5\n"
        "grid.sensor_noise_values = 0.0, 0.02\n"
        "grid.init_pose_scale_values = 1.0, 1.3\n"
        "grid.overlap_reduction_values = 0.0, 0.04\n"
    )

    outputs = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        code = cli_main(
            [
                "experiment",
                "--manifest",
                str(manifest),
                "--mode",
                "grid",
                "--out",
                str(out),
                "--config",
                str(config),
                "--seed",
                "7",
            ]
        )
        assert code == 0
        outputs.append((out / "records.jsonl").read_bytes())
    identical = outputs[0] == outputs[1] and len(outputs[0]) > 0
    _verdict("9", "experiment-rerun", identical, f"records-bytes={len(outputs[0])}")


# ---------------------------------------------------------------------------
# Room-scene protocol: five per-axis grid runs plus one mixed setting each.

_MASTER_SEEDS = (1, 2, 3, 4, 5)
_MIXED = PerturbationSetting(0.05, 1.5, 0.05)
_EXPERIMENT_ICP = IcpConfig(
    max_iterations=6,
    translation_tol=3e-4,
    rotation_tol=3e-4,
    max_correspondence_dist=0.5,
    subsample_fraction=0.25,
)
_AXES = (
    ("sn", "sensor_noise_values", 0),
    ("ip", "init_pose_scale_values", 1),
    ("po", "overlap_reduction_values", 2),
)


@pytest.fixture(scope="module")
def room_corpus():
    pair = room_pair(20_000, 20_000, 0)
    config = EstimatorConfig(sample_count=100, icp=_EXPERIMENT_ICP)
    grid = PerturbationGrid()
    per_seed = []
    start = time.perf_counter()
    for master in _MASTER_SEEDS:
        errors = []
        sink = {}
        records = run_grid_experiment(
            pair, config, master, grid=grid, error_log=errors, session_sink=sink
        )
        assert not errors, errors
        mixed = sink[pair.pair_id].record(_MIXED)
        per_seed.append({"records": records, "mixed": mixed})
    elapsed = time.perf_counter() - start
    return {"per_seed": per_seed, "elapsed": elapsed, "grid": grid}


def _median_phi(corpus, axis_name, attr, index):
    """Median over seeds of the named feature's phi at each grid value on its axis."""
    grid_values = getattr(corpus["grid"], attr)
    medians = []
    for value in grid_values:
        setting = [0.0, 1.0, 0.0]
        setting[index] = value
        key = tuple(setting)
        phis = []
        for seed in corpus["per_seed"]:
            matches = [r for r in seed["records"] if r.setting.as_tuple() == key]
            assert matches, f"no record at {key}"
            phis.append(float(matches[0].explanation.phi[index]))
        medians.append(float(np.median(phis)))
    return np.asarray(grid_values, dtype=float), np.asarray(medians)


def test_room_scene_phi_floor(room_corpus):
    floors = [s["records"][0].explanation.f_empty for s in room_corpus["per_seed"]]
    threshold = -2.0 * float(np.median(floors))
    worst = np.inf
    for name, attr, index in _AXES:
        values, medians = _median_phi(room_corpus, name, attr, index)
        worst = min(worst, float(medians[values != values[0]].min()))
    _verdict(
        "8a",
        "phi-floor",
        worst >= threshold,
        f"min-median-phi={worst:.3f} threshold={threshold:.3f}",
    )


def test_room_scene_trend_alignment(room_corpus):
    rhos = {}
    for name, attr, index in _AXES:
        values, medians = _median_phi(room_corpus, name, attr, index)
        rhos[name] = float(spearmanr(values, medians).statistic)
    ok = all(rho > 0.8 for rho in rhos.values())
    detail = " ".join(f"rho_{name}={rho:.3f}" for name, rho in rhos.items())
    _verdict("8b", "trend-alignment", ok, detail)


def test_room_scene_dominant_source(room_corpus):
    meds = {
        name: float(
            np.median([s["mixed"].explanation.phi[index] for s in room_corpus["per_seed"]])
        )
        for name, _, index in _AXES
    }
    ok = meds["sn"] > meds["po"] and meds["sn"] > meds["ip"]
    detail = f"phi_sn={meds['sn']:.3f} phi_ip={meds['ip']:.3f} phi_po={meds['po']:.3f}"
    _verdict("8c", "dominant-source", ok, detail)


def test_room_scene_runtime(room_corpus):
    elapsed = room_corpus["elapsed"]
    _verdict("8", "runtime", elapsed < 1800.0, f"elapsed={elapsed:.0f}s")


def test_local_accuracy_on_all_records(room_corpus):
    worst = 0.0
    for seed in room_corpus["per_seed"]:
        for record in list(seed["records"]) + [seed["mixed"]]:
            e = record.explanation
            gap = abs(float(e.phi.sum()) - (e.f_full - e.f_empty))
            worst = max(worst, gap / max(1.0, abs(e.f_full)))
    _verdict("3", "local-accuracy", worst < 1e-9, f"worst-gap={worst:.2e}")
