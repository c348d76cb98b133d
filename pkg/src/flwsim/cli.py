"""Command-line interface.

Subcommands: run a full experiment, validate a configuration, solve one
scheduling instance exactly, or brute-force it for cross-checking. Exit
codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import ExperimentConfig, build_context, parse_config, write_metrics
from .scheduling import (
    CandidateAssignment,
    Schedule,
    SchedulerConfig,
    brute_force_schedule,
    solve_schedule,
)
from .strategies import StrategyKind, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flwsim",
        description="Federated learning simulator with energy-aware uplink scheduling.",
    )
    parser.add_argument("--config", metavar="PATH", help="TOML configuration file")
    parser.add_argument("--seed", type=int, metavar="U64", help="override the master seed")
    parser.add_argument(
        "--strategy",
        action="append",
        metavar="NAME",
        choices=[kind.value for kind in StrategyKind],
        help="strategy to run (repeatable; default: all configured)",
    )
    parser.add_argument("--rounds", type=int, metavar="N", help="override the round count")
    parser.add_argument("--out", metavar="DIR", help="override the output directory")

    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the configured experiment and write CSV metrics")
    run.add_argument(
        "--emit-summary",
        action="store_true",
        help="print a per-strategy comparison table against the first strategy",
    )
    sub.add_parser("validate", help="parse and validate the configuration")
    schedule = sub.add_parser("schedule", help="solve one scheduling instance exactly")
    schedule.add_argument("instance", metavar="INSTANCE.json")
    oracle = sub.add_parser("oracle", help="brute-force one scheduling instance")
    oracle.add_argument("instance", metavar="INSTANCE.json")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.rounds is not None:
        cfg.rounds = args.rounds
    if args.strategy:
        cfg.strategies = [StrategyKind(name) for name in args.strategy]
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _load_instance(path: str) -> tuple[list[CandidateAssignment], SchedulerConfig]:
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    raw_cfg = data["config"]
    config = SchedulerConfig(
        participation_weight=float(raw_cfg["participation_weight"]),
        max_devices=int(raw_cfg["max_devices"]),
        bandwidth_budget=float(raw_cfg["bandwidth_budget_hz"]),
        time_budget=float(raw_cfg.get("time_budget_s", 600.0)),
        oracle_limit=int(raw_cfg.get("oracle_limit", 5_000_000)),
    )
    candidates = [
        CandidateAssignment(
            device_id=int(c["device_id"]),
            bandwidth_index=int(c["bandwidth_index"]),
            rb_index=int(c["rb_index"]),
            power_index=int(c["power_index"]),
            upload_energy=float(c["upload_energy_j"]),
            uplink_delay=float(c["uplink_delay_s"]),
            error_rate=float(c["error_rate"]),
            bandwidth=float(c["bandwidth_hz"]),
            power=float(c["power_w"]),
        )
        for c in data["candidates"]
    ]
    return candidates, config


def _print_schedule(schedule: Schedule) -> None:
    for a in schedule.assignments:
        print(
            f"device={a.device_id} bandwidth_index={a.bandwidth_index} "
            f"rb={a.rb_index} power_index={a.power_index} "
            f"bandwidth_hz={a.bandwidth:.9g} power_w={a.power:.9g} "
            f"upload_energy_j={a.upload_energy:.9g}"
        )
    print(
        f"selected={schedule.selected_count} "
        f"objective={schedule.objective_value:.9g} "
        f"total_bandwidth_hz={schedule.total_bandwidth:.9g}"
    )


def _summary_table(results: dict[StrategyKind, list]) -> str:
    rows = []
    for kind, tables in results.items():
        successes = sum(m.successful_transmissions for t in tables for m in t)
        energy = sum(m.total_energy for t in tables for m in t)
        wasted = sum(m.wasted_energy for t in tables for m in t)
        final_acc = sum(t[-1].accuracy for t in tables) / len(tables)
        rows.append((kind.value, successes, energy, wasted, final_acc))
    base_energy, base_acc = rows[0][2], rows[0][4]
    lines = [
        f"{'strategy':<14} {'successes':>9} {'energy_j':>12} {'wasted_j':>12} "
        f"{'final_acc':>9} {'energy_vs_base':>14} {'acc_delta_pp':>12}"
    ]
    for name, successes, energy, wasted, acc in rows:
        reduction = (1.0 - energy / base_energy) * 100.0 if base_energy else 0.0
        lines.append(
            f"{name:<14} {successes:>9d} {energy:>12.6g} {wasted:>12.6g} "
            f"{acc:>9.4f} {reduction:>13.2f}% {100.0 * (acc - base_acc):>12.2f}"
        )
    return "\n".join(lines)


def _run(cfg: ExperimentConfig, emit_summary: bool) -> int:
    results = {}
    for kind in cfg.strategies:
        tables = run_experiment(
            kind,
            cfg.rounds,
            cfg.repeats,
            cfg.master_seed,
            lambda seed, repeat: build_context(cfg, seed, repeat),
        )
        results[kind] = tables
        paths = write_metrics(tables, cfg.output_dir, kind)
        print(f"{kind.value}: wrote {len(paths)} files to {Path(cfg.output_dir)}")
    if emit_summary:
        print(_summary_table(results))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        if args.command == "validate":
            _load_config(args)
            print("configuration OK")
            return 0
        if args.command == "run":
            return _run(_load_config(args), args.emit_summary)
        candidates, sched_cfg = _load_instance(args.instance)
        if args.command == "schedule":
            _print_schedule(solve_schedule(candidates, sched_cfg))
        else:
            _print_schedule(brute_force_schedule(candidates, sched_cfg))
        return 0
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
