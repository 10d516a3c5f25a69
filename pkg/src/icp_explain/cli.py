"""Command-line entry points: register, explain, experiment.

Exit codes: 0 success, 1 error, 2 registration did not converge (the result
is still written). Configuration comes from --config (or the
ICP_EXPLAIN_CONFIG environment variable), overridden by explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import experiments
from .cloud import load_cloud
from .config import resolve_config, write_resolved_config
from .errors import IcpExplainError
from .experiments import (
    CloudPair,
    PairSession,
    load_manifest,
    load_pose_file,
    save_pose_file,
    sort_records,
)
from .icp import run_icp
from .seeding import derive_seed, spawn_rng
from .uncertainty import save_distribution

logger = logging.getLogger(__name__)

ENV_CONFIG = "ICP_EXPLAIN_CONFIG"


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit 1, keeping 2 for non-convergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=os.environ.get(ENV_CONFIG), help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--workers", type=int, default=None, help="thread count for registration runs")
    parser.add_argument(
        "--kl-include-means",
        action="store_const",
        const=True,
        default=None,
        help="include the mean term in the KL divergence",
    )


def _add_setting_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sn", type=float, default=None, help="sensor noise std, m")
    parser.add_argument("--ip", type=float, default=None, help="initial-pose covariance scale")
    parser.add_argument("--po", type=float, default=None, help="overlap reduction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icp-explain", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    register = commands.add_parser("register", parents=[], help="run ICP on one cloud pair")
    register.add_argument("--source", required=True)
    register.add_argument("--reference", required=True)
    register.add_argument("--init", required=True, help="initial pose file (16 floats, row-major 4x4)")
    register.add_argument("--out", default=None, help="write the estimated pose here")
    _add_common(register)

    explain = commands.add_parser("explain", help="attribute registration uncertainty on one pair")
    explain.add_argument("--source", required=True)
    explain.add_argument("--reference", required=True)
    explain.add_argument("--source-pose", required=True)
    explain.add_argument("--reference-pose", required=True)
    explain.add_argument("--out", default=None, help="write the record JSON here instead of stdout")
    _add_setting_flags(explain)
    _add_common(explain)

    experiment = commands.add_parser("experiment", help="run a grid or sweep over a sequence manifest")
    experiment.add_argument("--manifest", required=True)
    experiment.add_argument("--mode", choices=("grid", "sweep"), default="grid")
    experiment.add_argument("--grid-mode", choices=experiments.GRID_MODES, default=None)
    experiment.add_argument("--out", required=True, help="output directory")
    _add_setting_flags(experiment)
    _add_common(experiment)

    return parser


def _overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "estimator.kl_include_means": getattr(args, "kl_include_means", None),
        "setting.sensor_noise": getattr(args, "sn", None),
        "setting.init_pose_scale": getattr(args, "ip", None),
        "setting.overlap_reduction": getattr(args, "po", None),
        "grid.mode": getattr(args, "grid_mode", None),
    }
    return {k: v for k, v in mapping.items() if v is not None}


def cmd_register(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    source = load_cloud(args.source)
    reference = load_cloud(args.reference)
    init = load_pose_file(args.init)
    rng = spawn_rng(derive_seed(cfg.seed, "register"))
    result = run_icp(source, reference, init, cfg.icp_config(), rng)
    print(f"converged: {str(result.converged).lower()}")
    print(f"iterations: {result.iterations}")
    print(f"final_cost: {result.final_cost!r}")
    print(f"correspondences: {result.correspondence_count}")
    for row in result.estimate.as_matrix():
        print(" ".join(repr(float(v)) for v in row))
    if args.out:
        save_pose_file(result.estimate, args.out)
    return 0 if result.converged else 2


def _pair_from_args(args: argparse.Namespace) -> CloudPair:
    stem = lambda p: os.path.splitext(os.path.basename(p))[0]
    return CloudPair(
        pair_id=f"{stem(args.source)}-{stem(args.reference)}",
        sequence="cli",
        source=load_cloud(args.source),
        reference=load_cloud(args.reference),
        source_pose=load_pose_file(args.source_pose),
        reference_pose=load_pose_file(args.reference_pose),
    )


def cmd_explain(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    setting = cfg.setting()
    cfg.bounds().check(setting)
    pair = _pair_from_args(args)
    session = PairSession(pair, cfg.estimator_config(), cfg.seed)
    record = session.record(setting)
    text = json.dumps(record.to_json_dict(), sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    manifest = load_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    write_resolved_config(cfg, os.path.join(args.out, "config.resolved.txt"))

    estimator = cfg.estimator_config()
    bounds = cfg.bounds()
    errors: list[dict] = []
    sessions: dict[str, PairSession] = {}
    records_path = os.path.join(args.out, "records.jsonl")

    with open(records_path, "w", encoding="utf-8") as stream:

        def on_record(record):
            stream.write(record.to_json_line() + "\n")
            stream.flush()

        if args.mode == "grid":
            records = []
            for pair in experiments.consecutive_pairs(manifest):
                records.extend(
                    experiments.run_grid_experiment(
                        pair,
                        estimator,
                        cfg.seed,
                        grid=cfg.grid(),
                        mode=cfg.grid_mode,
                        bounds=bounds,
                        error_log=errors,
                        on_record=on_record,
                        session_sink=sessions,
                    )
                )
        else:
            records = experiments.run_fixed_setting_sweep(
                manifest,
                cfg.setting(),
                estimator,
                cfg.seed,
                bounds=bounds,
                error_log=errors,
                on_record=on_record,
                session_sink=sessions,
            )

    # Rewrite in canonical order so reruns are byte-identical regardless of timing.
    records = sort_records(records)
    with open(records_path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.to_json_line() + "\n")

    with open(os.path.join(args.out, "errors.jsonl"), "w", encoding="utf-8") as handle:
        for entry in errors:
            handle.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")

    with open(os.path.join(args.out, "timings.csv"), "w", encoding="utf-8") as handle:
        handle.write("pair_id,sn,ip,po,elapsed_seconds\n")
        for record in records:
            sn, ip, po = record.setting.as_tuple()
            handle.write(f"{record.pair_id},{sn!r},{ip!r},{po!r},{record.elapsed_seconds!r}\n")

    if records:
        experiments.write_median_table(experiments.median_table(records), os.path.join(args.out, "medians.csv"))
        experiments.emit_plot_data(records, "summary", os.path.join(args.out, "summary.csv"))
        for feature, color in (("sn", "ip"), ("ip", "po"), ("po", "sn")):
            experiments.emit_plot_data(
                records,
                "dependence",
                os.path.join(args.out, f"dependence_{feature}_{color}.csv"),
                axes=(feature, color),
            )
        if len(records) == 1:
            experiments.emit_plot_data(records, "waterfall", os.path.join(args.out, "waterfall.csv"))

    cache_dir = os.path.join(args.out, "pseudo_true")
    os.makedirs(cache_dir, exist_ok=True)
    for pair_id, session in sorted(sessions.items()):
        distribution = session.cached_pseudo_true()
        if distribution is None:
            continue
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in pair_id)
        manifest_dict = {"master": cfg.seed, **dataclasses.asdict(session.pseudo_true_seeds())}
        save_distribution(distribution, os.path.join(cache_dir, f"{safe}.txt"), manifest_dict)

    logger.info("wrote %d records (%d errors) to %s", len(records), len(errors), args.out)
    return 0 if records else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"register": cmd_register, "explain": cmd_explain, "experiment": cmd_experiment}
    try:
        return handlers[args.command](args)
    except (IcpExplainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
