"""FL orchestration strategies over the simulated wireless network.

Five strategies share one round pipeline (draw a subset, select devices,
allocate uplink resources, broadcast, train locally, transmit, aggregate):

- fedavg / poc: channel-unaware; random distinct RBs at fixed bandwidth and
  power, transmissions gated only at simulation time.
- fedavg_wopt / poc_wopt: same selection, but RBs assigned by the exact
  scheduler restricted to the fixed bandwidth/power point.
- fl_e2ws: data-maximizing selection plus the full scheduler over the whole
  bandwidth/RB/power grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import streams
from .learning import (
    DevicePartition,
    ModelParams,
    TrainConfig,
    aggregate,
    evaluate,
    global_loss,
    local_train,
)
from .radio import (
    MEAN_FADING,
    ChannelParams,
    Device,
    LinkGrid,
    LinkMetrics,
    Policy,
    evaluate_link,
)
from .scheduling import (
    CandidateAssignment,
    Schedule,
    SchedulerConfig,
    SelectionProblem,
    enumerate_feasible,
    select_by_data,
    solve_schedule,
)

FIXED_BANDWIDTH = 1e6  # Hz, baseline allocation
FIXED_POWER = 0.01  # W, baseline allocation

OUTCOME_SUCCESS = "success"
OUTCOME_BLOCKED = "policy_blocked"
OUTCOME_ERROR = "channel_error"


class StrategyKind(str, Enum):
    FEDAVG = "fedavg"
    POC = "poc"
    FEDAVG_WOPT = "fedavg_wopt"
    POC_WOPT = "poc_wopt"
    FL_E2WS = "fl_e2ws"


#: strategies whose allocation consults the channel model
CHANNEL_AWARE = {StrategyKind.FEDAVG_WOPT, StrategyKind.POC_WOPT, StrategyKind.FL_E2WS}


@dataclass
class RoundState:
    """Mutable server-side state carried across communication rounds."""

    round_index: int
    model: ModelParams
    loss_sum: dict[int, float] = field(default_factory=dict)
    loss_count: dict[int, int] = field(default_factory=dict)
    success_count: dict[int, int] = field(default_factory=dict)

    def average_loss(self, device_id: int, cold_start: float) -> float:
        count = self.loss_count.get(device_id, 0)
        if count == 0:
            return cold_start
        return self.loss_sum[device_id] / count


@dataclass
class RoundMetrics:
    """Everything recorded about one communication round."""

    round_index: int
    selected_ids: list[int]
    schedule: Schedule
    outcomes: dict[int, str]
    successful_transmissions: int
    policy_blocked: int
    channel_errors: int
    total_energy: float  # J, training + upload of every scheduled device
    wasted_energy: float  # J, spent by devices whose model never arrived
    rb_occupancy: float  # s, sum of uplink delays over scheduled devices
    bandwidth_sum: float  # Hz
    power_sum: float  # W
    accuracy: float
    global_loss: float


@dataclass
class SimulationContext:
    """Immutable inputs shared by every round of one repeat."""

    devices: list[Device]
    partitions: dict[int, DevicePartition]
    grid: LinkGrid
    channel: ChannelParams
    policy: Policy
    train_cfg: TrainConfig
    sched_cfg: SchedulerConfig
    max_participants: int  # n_f
    candidate_pool: int  # n_p = ceil(1.5 * n_f)
    uplink_packet_bits: float
    downlink_packet_bits: float
    initial_model: ModelParams
    master_seed: int
    repeat: int
    force_success: bool = False
    poc_cold_start_loss: float = math.inf

    def device(self, device_id: int) -> Device:
        return self._device_map[device_id]

    def __post_init__(self) -> None:
        self._device_map = {d.id: d for d in self.devices}


def pick_subset(n_devices: int, count: int, rng: np.random.Generator) -> list[int]:
    """Uniform random device subset without replacement, ids ascending."""
    if not 1 <= count <= n_devices:
        raise ValueError("count must be in [1, n_devices]")
    return sorted(int(i) for i in rng.choice(n_devices, size=count, replace=False))


def select_devices(
    kind: StrategyKind,
    state: RoundState,
    subset: list[int],
    devices: dict[int, Device],
    n_p: int,
    n_f: int,
    cold_start_loss: float = math.inf,
) -> list[int]:
    """Device ids handed to the resource allocation stage, ascending.

    fedavg variants keep the drawn subset; poc variants keep the n_f devices
    with the highest accumulated average loss (ties to the lowest id);
    fl_e2ws keeps the n_p devices carrying the most data.
    """
    if kind in (StrategyKind.FEDAVG, StrategyKind.FEDAVG_WOPT):
        return list(subset)
    if kind in (StrategyKind.POC, StrategyKind.POC_WOPT):
        ranked = sorted(
            subset, key=lambda i: (-state.average_loss(i, cold_start_loss), i)
        )
        return sorted(ranked[:n_f])
    problem = SelectionProblem(
        candidate_ids=list(subset),
        data_sizes=[devices[i].data_size for i in subset],
        select_count=min(n_p, len(subset)),
    )
    return select_by_data(problem)


def fixed_point_indices(
    grid: LinkGrid, bandwidth: float = FIXED_BANDWIDTH, power: float = FIXED_POWER
) -> tuple[int, int]:
    """Grid indices of the fixed baseline (bandwidth, power) allocation."""
    j = int(np.argmin(np.abs(grid.bandwidths - bandwidth)))
    l = int(np.argmin(np.abs(grid.powers - power)))
    if not np.isclose(grid.bandwidths[j], bandwidth, rtol=1e-9):
        raise ValueError(f"bandwidth {bandwidth} Hz is not on the grid")
    if not np.isclose(grid.powers[l], power, rtol=1e-9):
        raise ValueError(f"power {power} W is not on the grid")
    return j, l


def _fixed_random_schedule(
    candidate_ids: list[int], ctx: SimulationContext, rng: np.random.Generator
) -> Schedule:
    """Channel-unaware allocation: random distinct RBs, fixed bandwidth/power."""
    j, l = fixed_point_indices(ctx.grid)
    params = replace(ctx.channel, expectation_mode=MEAN_FADING)
    rbs = rng.permutation(ctx.grid.rb_count)[: len(candidate_ids)]
    assignments = []
    for device_id, rb in zip(sorted(candidate_ids), rbs):
        metrics = evaluate_link(
            ctx.device(device_id),
            j,
            int(rb),
            l,
            ctx.grid,
            params,
            ctx.uplink_packet_bits,
            ctx.downlink_packet_bits,
            ctx.policy,
        )
        assignments.append(
            CandidateAssignment(
                device_id=device_id,
                bandwidth_index=j,
                rb_index=int(rb),
                power_index=l,
                upload_energy=metrics.upload_energy,
                uplink_delay=metrics.uplink_delay,
                error_rate=metrics.error_rate,
                bandwidth=float(ctx.grid.bandwidths[j]),
                power=float(ctx.grid.powers[l]),
            )
        )
    total_energy = sum(a.upload_energy for a in assignments)
    return Schedule(
        assignments=sorted(assignments, key=lambda a: a.device_id),
        objective_value=total_energy
        - ctx.sched_cfg.participation_weight * len(assignments),
        total_bandwidth=float(sum(a.bandwidth for a in assignments)),
        selected_count=len(assignments),
    )


def allocate_resources(
    kind: StrategyKind,
    candidate_ids: list[int],
    ctx: SimulationContext,
    rng: np.random.Generator,
) -> Schedule:
    """Uplink resource assignment for the round's candidate devices."""
    if kind in (StrategyKind.FEDAVG, StrategyKind.POC):
        return _fixed_random_schedule(candidate_ids, ctx, rng)
    devices = [ctx.device(i) for i in candidate_ids]
    if kind is StrategyKind.FL_E2WS:
        bandwidth_indices = power_indices = None
    else:
        j, l = fixed_point_indices(ctx.grid)
        bandwidth_indices, power_indices = [j], [l]
    candidates = enumerate_feasible(
        devices,
        ctx.grid,
        ctx.channel,
        ctx.policy,
        ctx.uplink_packet_bits,
        bandwidth_indices=bandwidth_indices,
        power_indices=power_indices,
    )
    return solve_schedule(candidates, ctx.sched_cfg)


def simulate_transmissions(
    schedule: Schedule,
    link_metrics: dict[int, LinkMetrics],
    rng: np.random.Generator,
) -> dict[int, str]:
    """Per-device transmission outcome: one Bernoulli draw per scheduled device.

    A zero gated success probability means the tuple violates the policy and
    the upload is discarded without a draw.
    """
    outcomes: dict[int, str] = {}
    for assignment in schedule.assignments:
        gated = link_metrics[assignment.device_id].gated_success
        if gated <= 0.0:
            outcomes[assignment.device_id] = OUTCOME_BLOCKED
        elif rng.random() < gated:
            outcomes[assignment.device_id] = OUTCOME_SUCCESS
        else:
            outcomes[assignment.device_id] = OUTCOME_ERROR
    return outcomes


def run_round(kind: StrategyKind, state: RoundState, ctx: SimulationContext) -> RoundMetrics:
    """One communication round; updates the state in place."""
    t = state.round_index
    if kind in (StrategyKind.FEDAVG, StrategyKind.FEDAVG_WOPT):
        subset_size = ctx.max_participants
    else:
        subset_size = ctx.candidate_pool
    subset = pick_subset(
        len(ctx.devices),
        min(subset_size, len(ctx.devices)),
        streams.rng_stream(ctx.master_seed, streams.SUBSET, ctx.repeat, t),
    )
    selected = select_devices(
        kind,
        state,
        subset,
        {d.id: d for d in ctx.devices},
        n_p=ctx.candidate_pool,
        n_f=ctx.max_participants,
        cold_start_loss=ctx.poc_cold_start_loss,
    )
    schedule = allocate_resources(
        kind,
        selected,
        ctx,
        streams.rng_stream(ctx.master_seed, streams.ALLOCATION, ctx.repeat, t),
    )

    # Broadcast and uplink metrics for every scheduled device; the downlink
    # is error-free and its delay never gates participation.
    link_metrics = {
        a.device_id: evaluate_link(
            ctx.device(a.device_id),
            a.bandwidth_index,
            a.rb_index,
            a.power_index,
            ctx.grid,
            ctx.channel,
            ctx.uplink_packet_bits,
            ctx.downlink_packet_bits,
            ctx.policy,
        )
        for a in schedule.assignments
    }

    local_models: dict[int, ModelParams] = {}
    local_losses: dict[int, float] = {}
    for assignment in schedule.assignments:
        device_id = assignment.device_id
        train_rng = streams.rng_stream(
            ctx.master_seed, streams.TRAINING, ctx.repeat, t, device_id
        )
        trained = local_train(
            state.model, ctx.partitions[device_id].train, ctx.train_cfg, rng=train_rng
        )
        local_models[device_id] = trained
        local_losses[device_id] = evaluate(trained, ctx.partitions[device_id].train)[0]

    if ctx.force_success:
        outcomes = {a.device_id: OUTCOME_SUCCESS for a in schedule.assignments}
    else:
        outcomes = simulate_transmissions(
            schedule,
            link_metrics,
            streams.rng_stream(ctx.master_seed, streams.TRANSMISSION, ctx.repeat, t),
        )

    received = sorted(i for i, o in outcomes.items() if o == OUTCOME_SUCCESS)
    merged = aggregate(
        [local_models[i] for i in received],
        [ctx.device(i).data_size for i in received],
    )
    if merged is not None:
        state.model = merged
    for device_id in received:
        state.loss_sum[device_id] = state.loss_sum.get(device_id, 0.0) + local_losses[device_id]
        state.loss_count[device_id] = state.loss_count.get(device_id, 0) + 1
        state.success_count[device_id] = state.success_count.get(device_id, 0) + 1

    total_energy = sum(
        link_metrics[a.device_id].round_energy for a in schedule.assignments
    )
    wasted_energy = sum(
        link_metrics[a.device_id].round_energy
        for a in schedule.assignments
        if outcomes[a.device_id] != OUTCOME_SUCCESS
    )

    train_sets = [ctx.partitions[d.id].train for d in ctx.devices]
    test_sets = [ctx.partitions[d.id].test for d in ctx.devices]
    test_total = sum(ds.n for ds in test_sets)
    accuracy = (
        sum(evaluate(state.model, ds)[1] * ds.n for ds in test_sets) / test_total
    )
    objective = global_loss(state.model, train_sets)

    state.round_index += 1
    return RoundMetrics(
        round_index=t,
        selected_ids=selected,
        schedule=schedule,
        outcomes=outcomes,
        successful_transmissions=len(received),
        policy_blocked=sum(1 for o in outcomes.values() if o == OUTCOME_BLOCKED),
        channel_errors=sum(1 for o in outcomes.values() if o == OUTCOME_ERROR),
        total_energy=total_energy,
        wasted_energy=wasted_energy,
        rb_occupancy=sum(a.uplink_delay for a in schedule.assignments),
        bandwidth_sum=float(sum(a.bandwidth for a in schedule.assignments)),
        power_sum=float(sum(a.power for a in schedule.assignments)),
        accuracy=float(accuracy),
        global_loss=float(objective),
    )


def run_repeat(kind: StrategyKind, ctx: SimulationContext, rounds: int) -> list[RoundMetrics]:
    """All rounds of one independently seeded repeat."""
    state = RoundState(round_index=0, model=ctx.initial_model.copy())
    return [run_round(kind, state, ctx) for _ in range(rounds)]


def run_experiment(
    kind: StrategyKind,
    rounds: int,
    repeats: int,
    master_seed: int,
    make_context: Callable[[int, int], SimulationContext],
) -> list[list[RoundMetrics]]:
    """Independent seeded repeats of one strategy.

    make_context(master_seed, repeat) builds the per-repeat world (topology,
    partitions, initial model); every repeat redraws all of it from its own
    streams.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return [
        run_repeat(kind, make_context(master_seed, repeat), rounds)
        for repeat in range(repeats)
    ]
