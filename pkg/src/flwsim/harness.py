"""Experiment front door: configuration, topology, contexts and CSV output.

The default configuration is the desk-scale profile: 20 devices, 5
participants per round, 50 rounds, 3 repeats, a synthetic 10-class task and
a small MLP. Channel and grid constants default to the simulation parameter
table: path loss exponent 2, noise -174 dBm/Hz, waterfall threshold 0.023,
bandwidth grid 1..2 MHz in 0.1 MHz steps, power grid 0.008..0.012 W in
2.5e-4 W steps, and a total uplink budget of 1.5 MHz per participant.

RB interference defaults to a two-tier profile: the first n_f RBs carry the
incremental 1e-9 W baseline while the remaining RBs (there are 3 x n_f in
total) are saturated, so channel-unaware strategies waste slots on RBs the
policy gate rejects. Override rb_count / rb_interference_w for a uniform
profile.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import streams
from .learning import (
    DevicePartition,
    TrainConfig,
    init_model,
    load_idx_dataset,
    make_synthetic_dataset,
    partition_dataset,
)
from .radio import ChannelParams, Device, LinkGrid, Policy, noise_psd_from_dbm_per_hz
from .scheduling import SchedulerConfig
from .strategies import RoundMetrics, SimulationContext, StrategyKind

BITS_PER_PARAMETER = 32

CSV_COLUMNS = [
    "round",
    "selected",
    "successes",
    "policy_blocked",
    "channel_errors",
    "total_energy_j",
    "wasted_energy_j",
    "rb_occupancy_s",
    "bandwidth_sum_hz",
    "power_sum_w",
    "accuracy",
    "global_loss",
]

_INT_COLUMNS = {"round", "selected", "successes", "policy_blocked", "channel_errors"}


@dataclass
class ComputeParams:
    """Per-device compute constants of the training energy model."""

    energy_coeff: float = 1e-27  # J per cycle per Hz^2
    cpu_cycles: float = 40.0
    clock_hz: float = 1e9

    def __post_init__(self) -> None:
        if self.energy_coeff <= 0 or self.cpu_cycles <= 0 or self.clock_hz <= 0:
            raise ValueError("compute constants must be > 0")


@dataclass
class GridSpec:
    """Uplink grid settings; None means derive the documented default."""

    bandwidths_hz: list[float] | None = None
    powers_w: list[float] | None = None
    rb_count: int | None = None  # default: 3 x max_participants
    rb_interference_w: list[float] | None = None
    total_bandwidth_budget_hz: float | None = None  # default: n_f x 1.5 MHz
    clean_interference_base_w: float = 1e-9
    clean_interference_step_w: float = 1e-9
    saturated_interference_w: float = 3e-5
    saturated_interference_step_w: float = 1e-6


@dataclass
class SolverSpec:
    """Scheduler objective weight and limits; weight defaults to 10 x gamma_E."""

    participation_weight: float | None = None
    time_budget_s: float = 600.0
    oracle_limit: int = 5_000_000


@dataclass
class ExperimentConfig:
    """Everything a full simulation run needs, with desk-scale defaults."""

    devices: int = 20
    rounds: int = 50
    repeats: int = 3
    master_seed: int = 2026
    max_participants: int = 5  # n_f
    strategies: list[StrategyKind] = field(
        default_factory=lambda: list(StrategyKind)
    )
    dataset: str = "synthetic"
    idx_images: str | None = None
    idx_labels: str | None = None
    synthetic_samples: int = 4800
    feature_count: int = 64
    class_count: int = 10
    hidden_layers: list[int] = field(default_factory=lambda: [32])
    distance_min_m: float = 100.0
    distance_max_m: float = 500.0
    placement: str = "uniform_distance"
    output_dir: str = "results"
    force_success: bool = False
    poc_cold_start_loss: float = math.inf
    packet_header_bits: int = 1024
    channel: ChannelParams = field(default_factory=ChannelParams)
    policy: Policy = field(default_factory=Policy)
    train: TrainConfig = field(default_factory=TrainConfig)
    compute: ComputeParams = field(default_factory=ComputeParams)
    grid: GridSpec = field(default_factory=GridSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)

    def __post_init__(self) -> None:
        if self.devices < 1:
            raise ValueError("experiment.devices must be >= 1")
        if self.rounds < 1 or self.repeats < 1:
            raise ValueError("experiment.rounds and experiment.repeats must be >= 1")
        if not 1 <= self.max_participants <= self.devices:
            raise ValueError("experiment.max_participants must be in [1, devices]")
        if self.dataset not in ("synthetic", "idx"):
            raise ValueError("experiment.dataset must be 'synthetic' or 'idx'")
        if self.dataset == "idx" and (self.idx_images is None or self.idx_labels is None):
            raise ValueError("experiment.idx_images and idx_labels are required for idx data")
        if not 0 < self.distance_min_m <= self.distance_max_m:
            raise ValueError("experiment distance range must satisfy 0 < min <= max")
        if self.placement not in ("uniform_distance", "uniform_area"):
            raise ValueError("experiment.placement must be uniform_distance or uniform_area")
        self.strategies = [StrategyKind(s) for s in self.strategies]

    @property
    def candidate_pool(self) -> int:
        """n_p, the candidate count for selection-based strategies."""
        return min(self.devices, math.ceil(1.5 * self.max_participants))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.feature_count, *self.hidden_layers, self.class_count)

    def build_grid(self) -> LinkGrid:
        spec = self.grid
        n_f = self.max_participants
        bandwidths = (
            np.asarray(spec.bandwidths_hz, dtype=float)
            if spec.bandwidths_hz is not None
            else 1e6 + 1e5 * np.arange(11)
        )
        powers = (
            np.asarray(spec.powers_w, dtype=float)
            if spec.powers_w is not None
            else np.linspace(0.008, 0.012, 17)
        )
        rb_count = spec.rb_count if spec.rb_count is not None else 3 * n_f
        if spec.rb_interference_w is not None:
            interference = np.asarray(spec.rb_interference_w, dtype=float)
            if interference.size != rb_count:
                raise ValueError("grid.rb_interference_w length must equal rb_count")
        else:
            clean = min(n_f, rb_count)
            interference = np.concatenate(
                [
                    spec.clean_interference_base_w
                    + spec.clean_interference_step_w * np.arange(clean),
                    spec.saturated_interference_w
                    + spec.saturated_interference_step_w * np.arange(rb_count - clean),
                ]
            )
        budget = (
            spec.total_bandwidth_budget_hz
            if spec.total_bandwidth_budget_hz is not None
            else n_f * 1.5e6
        )
        return LinkGrid(
            bandwidths=bandwidths,
            powers=powers,
            rb_interference=interference,
            total_bandwidth_budget=budget,
        )

    def build_scheduler_config(self) -> SchedulerConfig:
        weight = self.solver.participation_weight
        if weight is None:
            weight = 10.0 * self.policy.max_upload_energy
        return SchedulerConfig(
            participation_weight=weight,
            max_devices=self.max_participants,
            bandwidth_budget=self.build_grid().total_bandwidth_budget,
            time_budget=self.solver.time_budget_s,
            oracle_limit=self.solver.oracle_limit,
        )


@dataclass
class Topology:
    """Seeded device placement bound to its data partitions."""

    devices: list[Device]
    partitions: dict[int, DevicePartition]
    positions: list[tuple[float, float]]  # (x, y) in meters, BS at the origin


def _load_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.dataset == "idx":
        features, labels, image_shape = load_idx_dataset(cfg.idx_images, cfg.idx_labels)
        return features, labels, image_shape
    features, labels = make_synthetic_dataset(
        cfg.synthetic_samples, cfg.feature_count, cfg.class_count, seed=seed
    )
    return features, labels, None


def generate_topology(cfg: ExperimentConfig, master_seed: int, repeat: int) -> Topology:
    """Device placement, data partitions and compute loads for one repeat."""
    rng = streams.rng_stream(master_seed, streams.TOPOLOGY, repeat)
    if cfg.placement == "uniform_distance":
        distances = rng.uniform(cfg.distance_min_m, cfg.distance_max_m, cfg.devices)
    else:
        distances = np.sqrt(
            rng.uniform(cfg.distance_min_m**2, cfg.distance_max_m**2, cfg.devices)
        )
    angles = rng.uniform(0.0, 2.0 * np.pi, cfg.devices)

    features, labels, image_shape = _load_dataset(
        cfg, streams.stream_seed(master_seed, streams.PARTITION, repeat, 0)
    )
    partitions = partition_dataset(
        features,
        labels,
        cfg.devices,
        seed=streams.stream_seed(master_seed, streams.PARTITION, repeat, 1),
        image_shape=image_shape,
    )

    devices = []
    positions = []
    for i in range(cfg.devices):
        train_size = partitions[i].train.n
        devices.append(
            Device(
                id=i,
                distance=float(distances[i]),
                fading_seed=streams.stream_seed(master_seed, streams.FADING, repeat, i),
                data_size=train_size,
                energy_coeff=cfg.compute.energy_coeff,
                cpu_cycles=cfg.compute.cpu_cycles,
                clock_hz=cfg.compute.clock_hz,
                cycles_load=float(train_size * cfg.train.local_epochs),
            )
        )
        positions.append(
            (float(distances[i] * np.cos(angles[i])), float(distances[i] * np.sin(angles[i])))
        )
    return Topology(devices=devices, partitions=dict(enumerate(partitions)), positions=positions)


def build_context(cfg: ExperimentConfig, master_seed: int, repeat: int) -> SimulationContext:
    """Per-repeat simulation context: topology, model and packet sizes."""
    topology = generate_topology(cfg, master_seed, repeat)
    model = init_model(
        cfg.layer_sizes, streams.stream_seed(master_seed, streams.MODEL_INIT, repeat)
    )
    packet_bits = float(BITS_PER_PARAMETER * model.parameter_count + cfg.packet_header_bits)
    return SimulationContext(
        devices=topology.devices,
        partitions=topology.partitions,
        grid=cfg.build_grid(),
        channel=cfg.channel,
        policy=cfg.policy,
        train_cfg=cfg.train,
        sched_cfg=cfg.build_scheduler_config(),
        max_participants=cfg.max_participants,
        candidate_pool=cfg.candidate_pool,
        uplink_packet_bits=packet_bits,
        downlink_packet_bits=packet_bits,
        initial_model=model,
        master_seed=master_seed,
        repeat=repeat,
        force_success=cfg.force_success,
        poc_cold_start_loss=cfg.poc_cold_start_loss,
    )


# --- configuration file handling -------------------------------------------

_SECTION_FIELDS = {
    "experiment": {
        "devices",
        "rounds",
        "repeats",
        "master_seed",
        "max_participants",
        "strategies",
        "dataset",
        "idx_images",
        "idx_labels",
        "synthetic_samples",
        "feature_count",
        "class_count",
        "hidden_layers",
        "distance_min_m",
        "distance_max_m",
        "placement",
        "output_dir",
        "force_success",
        "poc_cold_start_loss",
        "packet_header_bits",
    },
    "channel": {
        "path_loss_exponent",
        "noise_psd_dbm_hz",
        "noise_psd_w_hz",
        "waterfall_threshold",
        "waterfall_in_db",
        "downlink_bandwidth_hz",
        "bs_power_w",
        "downlink_interference_w",
        "fading_samples",
        "expectation_mode",
    },
    "policy": {"max_uplink_delay_s", "max_upload_energy_j", "max_error_rate"},
    "training": {"local_epochs", "batch_size", "learning_rate", "seed"},
    "compute": {"energy_coeff", "cpu_cycles", "clock_hz"},
    "grid": {
        "bandwidths_hz",
        "powers_w",
        "rb_count",
        "rb_interference_w",
        "total_bandwidth_budget_hz",
        "clean_interference_base_w",
        "clean_interference_step_w",
        "saturated_interference_w",
        "saturated_interference_step_w",
    },
    "scheduler": {"participation_weight", "time_budget_s", "oracle_limit"},
}


def _check_keys(section: str, table: dict) -> None:
    unknown = set(table) - _SECTION_FIELDS[section]
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def parse_config(path: str | Path | None = None) -> ExperimentConfig:
    """Load and validate a TOML configuration; absent keys take defaults."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    unknown_sections = set(raw) - set(_SECTION_FIELDS)
    if unknown_sections:
        raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown_sections))}")
    for section, table in raw.items():
        if not isinstance(table, dict):
            raise ValueError(f"[{section}] must be a table")
        _check_keys(section, table)

    experiment = dict(raw.get("experiment", {}))
    channel = dict(raw.get("channel", {}))
    if "noise_psd_dbm_hz" in channel and "noise_psd_w_hz" in channel:
        raise ValueError("give channel noise as dBm/Hz or W/Hz, not both")
    if "noise_psd_dbm_hz" in channel:
        channel["noise_psd"] = noise_psd_from_dbm_per_hz(channel.pop("noise_psd_dbm_hz"))
    if "noise_psd_w_hz" in channel:
        channel["noise_psd"] = channel.pop("noise_psd_w_hz")
    rename = {
        "downlink_bandwidth_hz": "downlink_bandwidth",
        "bs_power_w": "bs_power",
        "downlink_interference_w": "downlink_interference",
    }
    for key, attr in rename.items():
        if key in channel:
            channel[attr] = channel.pop(key)
    policy = dict(raw.get("policy", {}))
    policy_rename = {
        "max_uplink_delay_s": "max_uplink_delay",
        "max_upload_energy_j": "max_upload_energy",
    }
    for key, attr in policy_rename.items():
        if key in policy:
            policy[attr] = policy.pop(key)

    try:
        return ExperimentConfig(
            **experiment,
            channel=ChannelParams(**channel),
            policy=Policy(**policy),
            train=TrainConfig(**raw.get("training", {})),
            compute=ComputeParams(**raw.get("compute", {})),
            grid=GridSpec(**raw.get("grid", {})),
            solver=SolverSpec(**raw.get("scheduler", {})),
        )
    except TypeError as exc:  # unexpected keyword -> unknown field
        raise ValueError(str(exc)) from exc


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render a configuration as TOML; parse(serialize(cfg)) equals cfg."""
    sections: dict[str, dict] = {
        "experiment": {
            "devices": cfg.devices,
            "rounds": cfg.rounds,
            "repeats": cfg.repeats,
            "master_seed": cfg.master_seed,
            "max_participants": cfg.max_participants,
            "strategies": [s.value for s in cfg.strategies],
            "dataset": cfg.dataset,
            "idx_images": cfg.idx_images,
            "idx_labels": cfg.idx_labels,
            "synthetic_samples": cfg.synthetic_samples,
            "feature_count": cfg.feature_count,
            "class_count": cfg.class_count,
            "hidden_layers": cfg.hidden_layers,
            "distance_min_m": cfg.distance_min_m,
            "distance_max_m": cfg.distance_max_m,
            "placement": cfg.placement,
            "output_dir": cfg.output_dir,
            "force_success": cfg.force_success,
            "poc_cold_start_loss": cfg.poc_cold_start_loss,
            "packet_header_bits": cfg.packet_header_bits,
        },
        "channel": {
            "path_loss_exponent": cfg.channel.path_loss_exponent,
            "noise_psd_w_hz": cfg.channel.noise_psd,
            "waterfall_threshold": cfg.channel.waterfall_threshold,
            "waterfall_in_db": cfg.channel.waterfall_in_db,
            "downlink_bandwidth_hz": cfg.channel.downlink_bandwidth,
            "bs_power_w": cfg.channel.bs_power,
            "downlink_interference_w": cfg.channel.downlink_interference,
            "fading_samples": cfg.channel.fading_samples,
            "expectation_mode": cfg.channel.expectation_mode,
        },
        "policy": {
            "max_uplink_delay_s": cfg.policy.max_uplink_delay,
            "max_upload_energy_j": cfg.policy.max_upload_energy,
            "max_error_rate": cfg.policy.max_error_rate,
        },
        "training": {
            "local_epochs": cfg.train.local_epochs,
            "batch_size": cfg.train.batch_size,
            "learning_rate": cfg.train.learning_rate,
            "seed": cfg.train.seed,
        },
        "compute": {
            "energy_coeff": cfg.compute.energy_coeff,
            "cpu_cycles": cfg.compute.cpu_cycles,
            "clock_hz": cfg.compute.clock_hz,
        },
        "grid": {
            "bandwidths_hz": cfg.grid.bandwidths_hz,
            "powers_w": cfg.grid.powers_w,
            "rb_count": cfg.grid.rb_count,
            "rb_interference_w": cfg.grid.rb_interference_w,
            "total_bandwidth_budget_hz": cfg.grid.total_bandwidth_budget_hz,
            "clean_interference_base_w": cfg.grid.clean_interference_base_w,
            "clean_interference_step_w": cfg.grid.clean_interference_step_w,
            "saturated_interference_w": cfg.grid.saturated_interference_w,
            "saturated_interference_step_w": cfg.grid.saturated_interference_step_w,
        },
        "scheduler": {
            "participation_weight": cfg.solver.participation_weight,
            "time_budget_s": cfg.solver.time_budget_s,
            "oracle_limit": cfg.solver.oracle_limit,
        },
    }
    lines: list[str] = []
    for section, table in sections.items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


# --- metrics output ---------------------------------------------------------


def _metric_row(metrics: RoundMetrics) -> dict[str, float | int]:
    return {
        "round": metrics.round_index,
        "selected": len(metrics.schedule.assignments),
        "successes": metrics.successful_transmissions,
        "policy_blocked": metrics.policy_blocked,
        "channel_errors": metrics.channel_errors,
        "total_energy_j": metrics.total_energy,
        "wasted_energy_j": metrics.wasted_energy,
        "rb_occupancy_s": metrics.rb_occupancy,
        "bandwidth_sum_hz": metrics.bandwidth_sum,
        "power_sum_w": metrics.power_sum,
        "accuracy": metrics.accuracy,
        "global_loss": metrics.global_loss,
    }


def _format(column: str, value: float | int) -> str:
    if column in _INT_COLUMNS:
        return str(int(value))
    return format(float(value), ".9g")


def write_metrics(
    tables: list[list[RoundMetrics]], out_dir: str | Path, strategy: StrategyKind
) -> list[Path]:
    """One CSV per repeat plus a mean/min/max aggregate; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    for repeat, rounds in enumerate(tables):
        path = out / f"{strategy.value}_rep{repeat}.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_COLUMNS)
            for metrics in rounds:
                row = _metric_row(metrics)
                writer.writerow(_format(c, row[c]) for c in CSV_COLUMNS)
        written.append(path)

    value_columns = [c for c in CSV_COLUMNS if c != "round"]
    header = ["round"]
    for column in value_columns:
        header += [f"{column}_mean", f"{column}_min", f"{column}_max"]
    path = out / f"{strategy.value}_aggregate.csv"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for round_index in range(len(tables[0])):
            rows = [_metric_row(t[round_index]) for t in tables]
            out_row = [str(round_index)]
            for column in value_columns:
                values = [row[column] for row in rows]
                out_row += [
                    format(float(np.mean(values)), ".9g"),
                    format(float(np.min(values)), ".9g"),
                    format(float(np.max(values)), ".9g"),
                ]
            writer.writerow(out_row)
    written.append(path)
    return written
