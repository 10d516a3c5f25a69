"""Flat key = value configuration with defaults, file, and override layers.

The file format is deliberately tiny: one `key = value` per line, `#`
comments, dotted keys for grouping. Precedence is command-line overrides,
then the file, then built-in defaults. The fully resolved mapping can be
written back out and re-read to reproduce a run exactly.
"""

from __future__ import annotations

import dataclasses
import math

from .errors import ParseError
from .icp import IcpConfig
from .kernel_shap import PerturbationSetting, SettingBounds
from .experiments import GRID_MODES, PerturbationGrid
from .se3 import PoseCovariance
from .uncertainty import EstimatorConfig


def _parse_bool(token: str) -> bool:
    if token == "true":
        return True
    if token == "false":
        return False
    raise ValueError(f"expected true or false, got {token!r}")


def _parse_int(token: str) -> int:
    return int(token, 10)


def _parse_float_list(token: str) -> tuple[float, ...]:
    return tuple(float(t.strip()) for t in token.split(","))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


_PARSERS = {
    "seed": _parse_int,
    "workers": _parse_int,
    "icp.max_iterations": _parse_int,
    "icp.translation_tol": float,
    "icp.rotation_tol": float,
    "icp.max_correspondence_dist": float,
    "icp.subsample_fraction": float,
    "icp.outlier_trim_fraction": float,
    "perturbation.rotation_std": float,
    "perturbation.translation_std": float,
    "perturbation.overlap_distance": float,
    "estimator.sample_count": _parse_int,
    "estimator.min_successes": _parse_int,
    "estimator.regularization": float,
    "estimator.kl_include_means": _parse_bool,
    "bounds.sensor_noise_min": float,
    "bounds.sensor_noise_max": float,
    "bounds.init_pose_scale_min": float,
    "bounds.init_pose_scale_max": float,
    "bounds.overlap_reduction_min": float,
    "bounds.overlap_reduction_max": float,
    "grid.sensor_noise_values": _parse_float_list,
    "grid.init_pose_scale_values": _parse_float_list,
    "grid.overlap_reduction_values": _parse_float_list,
    "grid.mode": str,
    "setting.sensor_noise": float,
    "setting.init_pose_scale": float,
    "setting.overlap_reduction": float,
}

_DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "icp.max_iterations": 50,
    "icp.translation_tol": 1e-6,
    "icp.rotation_tol": 1e-6,
    "icp.max_correspondence_dist": math.inf,
    "icp.subsample_fraction": 1.0,
    "icp.outlier_trim_fraction": 0.0,
    "perturbation.rotation_std": 0.02,
    "perturbation.translation_std": 0.05,
    "perturbation.overlap_distance": 0.2,
    "estimator.sample_count": 100,
    "estimator.min_successes": 7,
    "estimator.regularization": 1e-12,
    "estimator.kl_include_means": False,
    "bounds.sensor_noise_min": 0.0,
    "bounds.sensor_noise_max": 0.1,
    "bounds.init_pose_scale_min": 1.0,
    "bounds.init_pose_scale_max": 2.0,
    "bounds.overlap_reduction_min": 0.0,
    "bounds.overlap_reduction_max": 0.1,
    "grid.sensor_noise_values": PerturbationGrid().sensor_noise_values,
    "grid.init_pose_scale_values": PerturbationGrid().init_pose_scale_values,
    "grid.overlap_reduction_values": PerturbationGrid().overlap_reduction_values,
    "grid.mode": "per_axis",
    # Default explained/swept setting: the standard comparison point.
    "setting.sensor_noise": 0.05,
    "setting.init_pose_scale": 1.5,
    "setting.overlap_reduction": 0.05,
}


def parse_config_file(path) -> dict[str, object]:
    """Read one key = value per line; unknown keys and bad values are ParseErrors."""
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(path, line_number, f"expected key = value, got {line!r}")
            key, _, token = line.partition("=")
            key = key.strip()
            token = token.strip()
            if key not in _PARSERS:
                raise ParseError(path, line_number, f"unknown configuration key {key!r}")
            try:
                values[key] = _PARSERS[key](token)
            except ValueError as exc:
                raise ParseError(path, line_number, f"bad value for {key}: {exc}") from None
    return values


@dataclasses.dataclass(frozen=True)
class ResolvedConfig:
    """Typed view of the merged configuration layers."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def workers(self) -> int:
        return self.values["workers"]

    @property
    def grid_mode(self) -> str:
        return self.values["grid.mode"]

    def icp_config(self) -> IcpConfig:
        return IcpConfig(
            max_iterations=self.values["icp.max_iterations"],
            translation_tol=self.values["icp.translation_tol"],
            rotation_tol=self.values["icp.rotation_tol"],
            max_correspondence_dist=self.values["icp.max_correspondence_dist"],
            subsample_fraction=self.values["icp.subsample_fraction"],
            outlier_trim_fraction=self.values["icp.outlier_trim_fraction"],
        )

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            sample_count=self.values["estimator.sample_count"],
            min_successes=self.values["estimator.min_successes"],
            base_covariance=PoseCovariance.diagonal(
                self.values["perturbation.rotation_std"],
                self.values["perturbation.translation_std"],
            ),
            overlap_distance=self.values["perturbation.overlap_distance"],
            icp=self.icp_config(),
            kl_include_means=self.values["estimator.kl_include_means"],
            regularization=self.values["estimator.regularization"],
            workers=self.values["workers"],
        )

    def bounds(self) -> SettingBounds:
        return SettingBounds(
            sensor_noise_min=self.values["bounds.sensor_noise_min"],
            sensor_noise_max=self.values["bounds.sensor_noise_max"],
            init_pose_scale_min=self.values["bounds.init_pose_scale_min"],
            init_pose_scale_max=self.values["bounds.init_pose_scale_max"],
            overlap_reduction_min=self.values["bounds.overlap_reduction_min"],
            overlap_reduction_max=self.values["bounds.overlap_reduction_max"],
        )

    def grid(self) -> PerturbationGrid:
        return PerturbationGrid(
            sensor_noise_values=self.values["grid.sensor_noise_values"],
            init_pose_scale_values=self.values["grid.init_pose_scale_values"],
            overlap_reduction_values=self.values["grid.overlap_reduction_values"],
        )

    def setting(self) -> PerturbationSetting:
        return PerturbationSetting(
            sensor_noise=self.values["setting.sensor_noise"],
            init_pose_scale=self.values["setting.init_pose_scale"],
            overlap_reduction=self.values["setting.overlap_reduction"],
        )


def resolve_config(path=None, overrides: dict | None = None) -> ResolvedConfig:
    """Merge defaults, an optional config file, and explicit overrides."""
    values = dict(_DEFAULTS)
    if path is not None:
        values.update(parse_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in _PARSERS:
            raise ValueError(f"unknown configuration key {key!r}")
        if value is not None:
            values[key] = value
    if values["grid.mode"] not in GRID_MODES:
        raise ValueError(f"grid.mode must be one of {GRID_MODES}, got {values['grid.mode']!r}")
    return ResolvedConfig(values)


def write_resolved_config(config: ResolvedConfig, path) -> None:
    """Snapshot every resolved key; re-reading the file reproduces the run."""
    with open(path, "w", encoding="utf-8") as handle:
        for key in sorted(config.values):
            handle.write(f"{key} = {_format_value(config.values[key])}\n")
