"""Experiment protocols: grids over perturbation settings, sequence sweeps,
record aggregation, and plot-data emission.

A PairSession owns the caches for one registration pair: the pseudo-true
distribution is computed once, and every coalition evaluation is memoized by
its exact setting, so per-axis grids and the SHAP coalitions share work.
All randomness is derived from one master seed through labeled paths, which
makes records reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time

import numpy as np

from .cloud import PointCloud, load_cloud
from .errors import ArityMismatch, EmptyGroup, IcpExplainError, ParseError
from .kernel_shap import (
    FEATURE_KEYS,
    PerturbationSetting,
    REFERENCE_SETTING,
    SettingBounds,
    ShapExplanation,
    explain,
)
from .se3 import RigidTransform
from .seeding import derive_seed
from .uncertainty import (
    EstimatorConfig,
    GaussianPoseDistribution,
    Scenario,
    StageSeeds,
    estimate_uncertainty,
    fit_pose_distribution,
)

logger = logging.getLogger(__name__)

SEED_SCHEME = "v1"

GRID_MODES = ("per_axis", "full_product")

_FEATURE_FIELDS = ("sensor_noise", "init_pose_scale", "overlap_reduction")


def load_pose_file(path) -> RigidTransform:
    """Read a 4x4 row-major pose from 16 whitespace-separated floats."""
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    tokens = text.split()
    if len(tokens) != 16:
        raise ParseError(path, 1, f"expected 16 values for a 4x4 pose, got {len(tokens)}")
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(path, 1, str(exc)) from None
    try:
        return RigidTransform.from_matrix(np.array(values).reshape(4, 4))
    except ValueError as exc:
        raise ParseError(path, 1, f"invalid pose matrix: {exc}") from None


def save_pose_file(transform: RigidTransform, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in transform.as_matrix():
            handle.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    cloud_path: str
    pose_path: str


@dataclasses.dataclass(frozen=True)
class SequenceManifest:
    name: str
    entries: tuple[ManifestEntry, ...]


def load_manifest(path) -> SequenceManifest:
    """Read a sequence manifest: {"name": ..., "entries": [{"cloud": ..., "pose": ...}]}.

    Relative paths are resolved against the manifest's directory.
    """
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.msg) from None
    if not isinstance(data, dict) or "entries" not in data:
        raise ParseError(path, 1, "manifest must be an object with an 'entries' list")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    entries = []
    for i, entry in enumerate(data["entries"]):
        if not isinstance(entry, dict) or "cloud" not in entry or "pose" not in entry:
            raise ParseError(path, 1, f"entry {i} must have 'cloud' and 'pose' paths")
        entries.append(ManifestEntry(resolve(entry["cloud"]), resolve(entry["pose"])))
    return SequenceManifest(name=str(data.get("name", "sequence")), entries=tuple(entries))


@dataclasses.dataclass(frozen=True)
class CloudPair:
    """Two local-frame clouds with ground-truth poses, ready to register."""

    pair_id: str
    sequence: str
    source: PointCloud
    reference: PointCloud
    source_pose: RigidTransform
    reference_pose: RigidTransform


@dataclasses.dataclass(frozen=True)
class PerturbationGrid:
    """Axis values swept by grid experiments; defaults follow the standard protocol."""

    sensor_noise_values: tuple[float, ...] = tuple(round(0.01 * i, 2) for i in range(11))
    init_pose_scale_values: tuple[float, ...] = tuple(round(1.0 + 0.1 * i, 1) for i in range(11))
    overlap_reduction_values: tuple[float, ...] = tuple(round(0.01 * i, 2) for i in range(11))

    def __post_init__(self):
        for name in _FEATURE_FIELDS:
            values = getattr(self, name + "_values")
            if len(values) == 0:
                raise ValueError(f"{name} axis is empty")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} axis must be strictly ascending")

    def check_bounds(self, bounds: SettingBounds) -> None:
        for sn in self.sensor_noise_values:
            bounds.check(PerturbationSetting(sn, 1.0, 0.0))
        for ip in self.init_pose_scale_values:
            bounds.check(PerturbationSetting(0.0, ip, 0.0))
        for po in self.overlap_reduction_values:
            bounds.check(PerturbationSetting(0.0, 1.0, po))

    def settings(self, mode: str) -> list[PerturbationSetting]:
        """Deterministic setting order for a grid mode.

        per_axis varies one feature at a time against the reference values
        (11 + 11 + 11 settings for the default axes); full_product nests the
        three axes with overlap reduction fastest.
        """
        if mode == "per_axis":
            return (
                [PerturbationSetting(v, 1.0, 0.0) for v in self.sensor_noise_values]
                + [PerturbationSetting(0.0, v, 0.0) for v in self.init_pose_scale_values]
                + [PerturbationSetting(0.0, 1.0, v) for v in self.overlap_reduction_values]
            )
        if mode == "full_product":
            return [
                PerturbationSetting(sn, ip, po)
                for sn in self.sensor_noise_values
                for ip in self.init_pose_scale_values
                for po in self.overlap_reduction_values
            ]
        raise ValueError(f"unknown grid mode {mode!r}; expected one of {GRID_MODES}")


@dataclasses.dataclass(frozen=True)
class ExplanationRecord:
    """One explained setting on one pair, with full seed provenance.

    elapsed_seconds is measurement metadata and deliberately kept out of
    the JSON form so reruns are byte-identical.
    """

    pair_id: str
    sequence: str
    setting: PerturbationSetting
    explanation: ShapExplanation
    uncertainty: float
    seed_manifest: dict
    elapsed_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "sequence": self.sequence,
            "setting": dict(zip(FEATURE_KEYS, self.setting.as_tuple())),
            "f_empty": self.explanation.f_empty,
            "f_full": self.explanation.f_full,
            "phi_sn": self.explanation.phi_sn,
            "phi_ip": self.explanation.phi_ip,
            "phi_po": self.explanation.phi_po,
            "coalition_values": [float(v) for v in self.explanation.coalition_values],
            "uncertainty": self.uncertainty,
            "seed_manifest": self.seed_manifest,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    def feature_value(self, key: str) -> float:
        return self.setting.as_tuple()[FEATURE_KEYS.index(key)]

    def shap_value(self, key: str) -> float:
        return float(self.explanation.phi[FEATURE_KEYS.index(key)])


class PairSession:
    """Caches for evaluating one pair under many settings with one master seed."""

    def __init__(self, pair: CloudPair, config: EstimatorConfig, master_seed: int):
        self.pair = pair
        self.config = config
        self.master_seed = master_seed
        self._pseudo_true: GaussianPoseDistribution | None = None
        self._f_cache: dict[tuple[float, float, float], float] = {}

    def _stage_seeds(self, *path) -> StageSeeds:
        return StageSeeds(
            sensor_noise=derive_seed(self.master_seed, self.pair.pair_id, *path, "sensor-noise"),
            overlap=derive_seed(self.master_seed, self.pair.pair_id, *path, "overlap"),
            init=derive_seed(self.master_seed, self.pair.pair_id, *path, "init"),
        )

    def scenario(self, setting: PerturbationSetting) -> Scenario:
        return Scenario(
            source=self.pair.source,
            reference=self.pair.reference,
            source_pose=self.pair.source_pose,
            reference_pose=self.pair.reference_pose,
            setting=setting,
            seeds=self._stage_seeds("setting", setting.as_tuple()),
        )

    def pseudo_true_seeds(self) -> StageSeeds:
        return self._stage_seeds("pseudo-true")

    def cached_pseudo_true(self) -> GaussianPoseDistribution | None:
        """The pseudo-true distribution if it has been computed, else None."""
        return self._pseudo_true

    def pseudo_true(self) -> GaussianPoseDistribution:
        """Estimate distribution at the unperturbed setting, computed once.

        Its seeds are disjoint from every setting evaluation's, so the
        unperturbed coalition value stays a small positive noise floor
        rather than an exact zero.
        """
        if self._pseudo_true is None:
            scenario = Scenario(
                source=self.pair.source,
                reference=self.pair.reference,
                source_pose=self.pair.source_pose,
                reference_pose=self.pair.reference_pose,
                setting=REFERENCE_SETTING,
                seeds=self.pseudo_true_seeds(),
            )
            self._pseudo_true = fit_pose_distribution(scenario, self.config)
        return self._pseudo_true

    def f(self, setting: PerturbationSetting) -> float:
        """Uncertainty at one setting, memoized on the exact setting values."""
        key = setting.as_tuple()
        if key not in self._f_cache:
            self._f_cache[key] = estimate_uncertainty(self.scenario(setting), self.pseudo_true(), self.config)
        return self._f_cache[key]

    def explain(self, setting: PerturbationSetting) -> ShapExplanation:
        return explain(self.f, setting, REFERENCE_SETTING)

    def seed_manifest(self, setting: PerturbationSetting) -> dict:
        full = self.scenario(setting).seeds
        pseudo = self.pseudo_true_seeds()
        return {
            "scheme": SEED_SCHEME,
            "master": self.master_seed,
            "pseudo_true": dataclasses.asdict(pseudo),
            "full_setting": dataclasses.asdict(full),
        }

    def record(self, setting: PerturbationSetting) -> ExplanationRecord:
        start = time.perf_counter()
        explanation = self.explain(setting)
        elapsed = time.perf_counter() - start
        return ExplanationRecord(
            pair_id=self.pair.pair_id,
            sequence=self.pair.sequence,
            setting=setting,
            explanation=explanation,
            uncertainty=explanation.f_full,
            seed_manifest=self.seed_manifest(setting),
            elapsed_seconds=elapsed,
        )


def _log_failure(error_log: list[dict] | None, pair_id: str, setting, exc: Exception) -> None:
    logger.warning("skipping %s at %s: %s", pair_id, setting, exc)
    if error_log is not None:
        entry = {"pair_id": pair_id, "error": type(exc).__name__, "message": str(exc)}
        if setting is not None:
            entry["setting"] = dict(zip(FEATURE_KEYS, setting.as_tuple()))
        error_log.append(entry)


def run_grid_experiment(
    pair: CloudPair,
    config: EstimatorConfig,
    master_seed: int,
    grid: PerturbationGrid = PerturbationGrid(),
    mode: str = "per_axis",
    bounds: SettingBounds = SettingBounds(),
    error_log: list[dict] | None = None,
    on_record=None,
    session_sink: dict | None = None,
) -> list[ExplanationRecord]:
    """Explain every grid setting on one pair.

    Settings that cannot be realized (insufficient overlap) are logged and
    skipped. on_record, when given, sees each record as it is produced;
    session_sink collects the PairSession for cache inspection.
    """
    grid.check_bounds(bounds)
    session = PairSession(pair, config, master_seed)
    if session_sink is not None:
        session_sink[pair.pair_id] = session
    records: list[ExplanationRecord] = []
    for setting in grid.settings(mode):
        try:
            record = session.record(setting)
        except IcpExplainError as exc:
            _log_failure(error_log, pair.pair_id, setting, exc)
            continue
        records.append(record)
        if on_record is not None:
            on_record(record)
    return records


def consecutive_pairs(manifest: SequenceManifest) -> list[CloudPair]:
    """Load manifest entries and pair each with its successor."""
    loaded = [(load_cloud(e.cloud_path), load_pose_file(e.pose_path)) for e in manifest.entries]
    pairs = []
    for i in range(len(loaded) - 1):
        source, source_pose = loaded[i]
        reference, reference_pose = loaded[i + 1]
        pairs.append(
            CloudPair(
                pair_id=f"{manifest.name}:{i:04d}-{i + 1:04d}",
                sequence=manifest.name,
                source=source,
                reference=reference,
                source_pose=source_pose,
                reference_pose=reference_pose,
            )
        )
    return pairs


def run_fixed_setting_sweep(
    manifest: SequenceManifest,
    setting: PerturbationSetting,
    config: EstimatorConfig,
    master_seed: int,
    bounds: SettingBounds = SettingBounds(),
    error_log: list[dict] | None = None,
    on_record=None,
    session_sink: dict | None = None,
) -> list[ExplanationRecord]:
    """Explain one fixed setting on every consecutive pair of a sequence.

    A pair that fails (unreadable files, insufficient overlap, failed
    registration) is logged and the sweep moves on.
    """
    bounds.check(setting)
    records: list[ExplanationRecord] = []
    try:
        pairs = consecutive_pairs(manifest)
    except (IcpExplainError, OSError, ValueError) as exc:
        _log_failure(error_log, manifest.name, None, exc)
        return records
    for pair in pairs:
        session = PairSession(pair, config, master_seed)
        if session_sink is not None:
            session_sink[pair.pair_id] = session
        try:
            record = session.record(setting)
        except (IcpExplainError, ValueError) as exc:
            _log_failure(error_log, pair.pair_id, setting, exc)
            continue
        records.append(record)
        if on_record is not None:
            on_record(record)
    return records


def sort_records(records: list[ExplanationRecord]) -> list[ExplanationRecord]:
    """Deterministic output order: by pair id, then setting values."""
    return sorted(records, key=lambda r: (r.pair_id, r.setting.as_tuple()))


def remove_outliers_iqr(values) -> tuple[np.ndarray, np.ndarray]:
    """Partition values into (inliers, outliers) by the 1.5 IQR fences.

    Quartiles use linear interpolation. Order is preserved within each part.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise EmptyGroup("cannot compute quartiles of an empty set")
    q1, q3 = np.percentile(values, [25.0, 75.0])
    iqr = q3 - q1
    low, high = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    keep = (values >= low) & (values <= high)
    return values[keep], values[~keep]


@dataclasses.dataclass(frozen=True)
class MedianRow:
    sequence: str
    record_count: int
    phi_sn: float
    phi_ip: float
    phi_po: float


def median_table(records: list[ExplanationRecord]) -> list[MedianRow]:
    """Per-sequence medians of each attribution, after IQR outlier removal.

    Outliers are removed independently per feature, matching how the sweep
    results are reported.
    """
    if not records:
        raise EmptyGroup("no records to aggregate")
    by_sequence: dict[str, list[ExplanationRecord]] = {}
    for record in records:
        by_sequence.setdefault(record.sequence, []).append(record)
    rows = []
    for sequence in sorted(by_sequence):
        group = by_sequence[sequence]
        medians = {}
        for key in FEATURE_KEYS:
            inliers, _ = remove_outliers_iqr([r.shap_value(key) for r in group])
            if inliers.size == 0:
                raise EmptyGroup(f"all {key} values removed as outliers in {sequence}")
            medians[key] = float(np.median(inliers))
        rows.append(
            MedianRow(
                sequence=sequence,
                record_count=len(group),
                phi_sn=medians["sn"],
                phi_ip=medians["ip"],
                phi_po=medians["po"],
            )
        )
    return rows


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    def cell(v) -> str:
        if isinstance(v, bool):
            return str(v)
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    with open(path, "w", encoding="utf-8") as handle:
        handle.write(",".join(header) + "\n")
        for row in rows:
            handle.write(",".join(cell(v) for v in row) + "\n")


def write_median_table(rows: list[MedianRow], path) -> None:
    _write_csv(
        path,
        ["sequence", "record_count", "phi_sn", "phi_ip", "phi_po"],
        [[r.sequence, r.record_count, r.phi_sn, r.phi_ip, r.phi_po] for r in rows],
    )


def emit_plot_data(records: list[ExplanationRecord], kind: str, path, axes: tuple[str, str] | None = None) -> None:
    """Write plot-ready CSV plus a JSON sidecar describing it.

    Kinds: "summary" (per record and feature: value, attribution, and the
    feature value normalized to [0, 1] across records), "waterfall" (single
    record: attributions ordered by magnitude with running totals from
    f_empty to f_full), "dependence" (one feature against its attribution,
    colored by a second feature; axes required).
    """
    if kind == "summary":
        header = ["feature", "feature_value", "shap_value", "normalized_feature_value"]
        if not records:
            raise EmptyGroup("no records to summarize")
        rows = []
        spans = {}
        for key in FEATURE_KEYS:
            values = [r.feature_value(key) for r in records]
            low, high = min(values), max(values)
            spans[key] = (low, high - low)
        for record in records:
            for key in FEATURE_KEYS:
                value = record.feature_value(key)
                low, span = spans[key]
                normalized = (value - low) / span if span > 0 else 0.5
                rows.append([key, value, record.shap_value(key), normalized])
        meta = {"kind": kind, "features": list(FEATURE_KEYS), "record_count": len(records)}
    elif kind == "waterfall":
        if len(records) != 1:
            raise ArityMismatch(f"waterfall needs exactly 1 record, got {len(records)}")
        record = records[0]
        order = sorted(FEATURE_KEYS, key=lambda k: -abs(record.shap_value(k)))
        header = ["feature", "shap_value", "start", "end"]
        rows = []
        level = record.explanation.f_empty
        for key in order:
            phi = record.shap_value(key)
            rows.append([key, phi, level, level + phi])
            level += phi
        gap = abs(level - record.explanation.f_full)
        if gap > 1e-9 * max(1.0, abs(record.explanation.f_full)):
            raise AssertionError(f"waterfall does not close: gap {gap:.3e}")
        meta = {
            "kind": kind,
            "features": order,
            "record_count": 1,
            "f_empty": record.explanation.f_empty,
            "f_full": record.explanation.f_full,
        }
    elif kind == "dependence":
        if axes is None:
            raise ValueError("dependence plots need axes=(feature, color_feature)")
        feature, color = axes
        for name in (feature, color):
            if name not in FEATURE_KEYS:
                raise ValueError(f"unknown feature {name!r}; expected one of {FEATURE_KEYS}")
        if not records:
            raise EmptyGroup("no records to plot")
        header = ["feature_value", "shap_value", "color_value"]
        rows = [
            [r.feature_value(feature), r.shap_value(feature), r.feature_value(color)]
            for r in records
        ]
        meta = {"kind": kind, "axes": [feature, color], "record_count": len(records)}
    else:
        raise ValueError(f"unknown plot kind {kind!r}")

    _write_csv(path, header, rows)
    with open(str(path) + ".json", "w", encoding="utf-8") as handle:
        json.dump(meta, handle, sort_keys=True, indent=2)
        handle.write("\n")
