"""Device selection and communication resource scheduling.

Two subproblems run each round: pick the devices carrying the most data,
then assign each selected device a (bandwidth, RB, power) tuple minimizing
total upload energy minus a participation reward, subject to per-device and
per-RB exclusivity, the policy requirements, a total bandwidth budget and a
participant cap.

The solver is an exact branch-and-bound over per-device tuple choices with
an assignment-relaxation lower bound; a brute-force enumerator provides an
independent optimum for cross-checking. Energies are compared in integer
nanojoules so that optimality and tie-breaking are exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .radio import MEAN_FADING, ChannelParams, Device, LinkGrid, Policy, link_grid_table


class InfeasibleSelectionError(ValueError):
    """Asked to select more devices than are available."""


class _SolveTimeout(Exception):
    """Internal signal that the branch-and-bound hit its time budget."""


class OracleLimitError(RuntimeError):
    """Brute-force enumeration would exceed the configured size limit."""


class SolveBudgetError(RuntimeError):
    """Solve ran out of time; carries the best incumbent and the bound gap."""

    def __init__(self, incumbent: "Schedule", bound_gap: float):
        super().__init__(
            f"time budget exceeded; incumbent objective {incumbent.objective_value:.9g} "
            f"with bound gap {bound_gap:.9g}"
        )
        self.incumbent = incumbent
        self.bound_gap = bound_gap


@dataclass
class SelectionProblem:
    """Data-maximizing selection: pick select_count of the candidates."""

    candidate_ids: list[int]
    data_sizes: list[int]
    select_count: int

    def __post_init__(self) -> None:
        if len(self.candidate_ids) != len(self.data_sizes):
            raise ValueError("candidate_ids and data_sizes must align")
        if any(size < 1 for size in self.data_sizes):
            raise ValueError("data_sizes must be >= 1")
        if self.select_count > len(self.candidate_ids):
            raise InfeasibleSelectionError(
                f"cannot select {self.select_count} of {len(self.candidate_ids)} candidates"
            )


def select_by_data(problem: SelectionProblem) -> list[int]:
    """Ids of the devices with the largest data sizes, ties to the lowest id.

    Returns exactly select_count ids in ascending order; the selected total
    data size is maximal over all subsets of that size.
    """
    ranked = sorted(
        zip(problem.candidate_ids, problem.data_sizes), key=lambda pair: (-pair[1], pair[0])
    )
    return sorted(device_id for device_id, _ in ranked[: problem.select_count])


@dataclass
class CandidateAssignment:
    """A policy-feasible (device, bandwidth, RB, power) tuple with its metrics."""

    device_id: int
    bandwidth_index: int
    rb_index: int
    power_index: int
    upload_energy: float  # J
    uplink_delay: float  # s
    error_rate: float  # probability
    bandwidth: float  # Hz
    power: float  # W


@dataclass
class Schedule:
    """Resource assignment for one round: at most one tuple per device and RB."""

    assignments: list[CandidateAssignment]
    objective_value: float  # J-equivalent: sum of upload energy - weight * count
    total_bandwidth: float  # Hz
    selected_count: int


@dataclass
class SchedulerConfig:
    """Objective weight and resource limits for one scheduling solve."""

    participation_weight: float  # J credited per scheduled device
    max_devices: int
    bandwidth_budget: float  # Hz
    time_budget: float = 600.0  # s per solve
    oracle_limit: int = 5_000_000  # max brute-force enumeration size

    def __post_init__(self) -> None:
        if self.participation_weight < 0:
            raise ValueError("participation_weight must be >= 0")
        if self.max_devices < 1:
            raise ValueError("max_devices must be >= 1")


def enumerate_feasible(
    devices: list[Device],
    grid: LinkGrid,
    params: ChannelParams,
    policy: Policy,
    uplink_packet_bits: float,
    bandwidth_indices: list[int] | None = None,
    power_indices: list[int] | None = None,
) -> list[CandidateAssignment]:
    """All candidate tuples meeting the delay, energy and error requirements.

    Metrics are always evaluated in mean-fading mode so that the scheduler
    input is deterministic. Optional index filters restrict the bandwidth and
    power axes (used by the fixed-allocation baselines); grid powers already
    satisfy the device power bounds by construction.
    """
    params = replace(params, expectation_mode=MEAN_FADING)
    candidates: list[CandidateAssignment] = []
    for device in sorted(devices, key=lambda d: d.id):
        table = link_grid_table(device, grid, params, uplink_packet_bits)
        mask = (
            (table.delay <= policy.max_uplink_delay)
            & (table.upload_energy <= policy.max_upload_energy)
            & (table.error_rate <= policy.max_error_rate)
        )
        if bandwidth_indices is not None:
            keep = np.zeros(grid.bandwidths.size, dtype=bool)
            keep[list(bandwidth_indices)] = True
            mask &= keep[:, None, None]
        if power_indices is not None:
            keep = np.zeros(grid.powers.size, dtype=bool)
            keep[list(power_indices)] = True
            mask &= keep[None, None, :]
        for j, k, l in np.argwhere(mask):
            candidates.append(
                CandidateAssignment(
                    device_id=device.id,
                    bandwidth_index=int(j),
                    rb_index=int(k),
                    power_index=int(l),
                    upload_energy=float(table.upload_energy[j, k, l]),
                    uplink_delay=float(table.delay[j, k, l]),
                    error_rate=float(table.error_rate[j, k, l]),
                    bandwidth=float(grid.bandwidths[j]),
                    power=float(grid.powers[l]),
                )
            )
    return candidates


def _nanojoules(energy: float) -> int:
    return int(round(energy * 1e9))


def _assignment_key(assignments: list[CandidateAssignment]) -> tuple:
    return tuple(
        (a.device_id, a.bandwidth_index, a.rb_index, a.power_index) for a in assignments
    )


def _sorted_assignments(assignments: list[CandidateAssignment]) -> list[CandidateAssignment]:
    return sorted(
        assignments,
        key=lambda a: (a.device_id, a.bandwidth_index, a.rb_index, a.power_index),
    )


def _build_schedule(
    assignments: list[CandidateAssignment], energy_nj: int, weight_nj: int
) -> Schedule:
    assignments = _sorted_assignments(assignments)
    return Schedule(
        assignments=assignments,
        objective_value=(energy_nj - weight_nj * len(assignments)) / 1e9,
        total_bandwidth=float(sum(a.bandwidth for a in assignments)),
        selected_count=len(assignments),
    )


def _group_by_device(
    candidates: list[CandidateAssignment],
) -> list[tuple[int, list[CandidateAssignment]]]:
    groups: dict[int, list[CandidateAssignment]] = {}
    for cand in candidates:
        groups.setdefault(cand.device_id, []).append(cand)
    return [
        (device_id, _sorted_assignments(groups[device_id])) for device_id in sorted(groups)
    ]


# Pruning margin for the float-valued relaxation bound: objective values are
# integers, so a bound exceeding the incumbent by more than this can only be
# numerical noise away from a true strict improvement gap.
_PRUNE_MARGIN = 0.25


def solve_schedule(candidates: list[CandidateAssignment], config: SchedulerConfig) -> Schedule:
    """Exact minimizer of total upload energy minus weight * participant count.

    Branch-and-bound over per-device tuple choices. Within a device, tuples
    that share a (bandwidth, RB) pair are dominated by the cheapest of them,
    which every optimum and the lexicographic tie-break prefer, so only that
    one is branched on. Nodes are pruned with the larger of two admissible
    bounds: a participant-capped sum of per-device best contributions, and a
    device-to-RB assignment relaxation whose costs carry a Lagrangian penalty
    on the bandwidth budget (the multiplier is fitted once at the root).
    Ties in the objective resolve to the lexicographically smallest
    assignment list ordered by (device id, bandwidth, RB, power index).

    Raises SolveBudgetError with the incumbent and bound gap on timeout.
    """
    weight_nj = _nanojoules(config.participation_weight)
    budget_hz = int(round(config.bandwidth_budget))
    groups = _group_by_device(candidates)
    n_devices = len(groups)

    # Per device: dominated-tuple reduction, records sorted cheapest first.
    records: list[list[tuple[int, int, CandidateAssignment]]] = []
    for _, cands in groups:
        best: dict[tuple[int, int], tuple[int, CandidateAssignment]] = {}
        for cand in cands:
            e_nj = _nanojoules(cand.upload_energy)
            key = (cand.bandwidth_index, cand.rb_index)
            kept = best.get(key)
            if (
                kept is None
                or e_nj < kept[0]
                or (e_nj == kept[0] and cand.power_index < kept[1].power_index)
            ):
                best[key] = (e_nj, cand)
        device_records = sorted(
            ((e_nj, int(round(cand.bandwidth)), cand) for e_nj, cand in best.values()),
            key=lambda rec: (rec[0], rec[2].bandwidth_index, rec[2].rb_index),
        )
        records.append(device_records)

    rb_ids = sorted({cand.rb_index for cand in candidates})
    rb_pos = {rb: pos for pos, rb in enumerate(rb_ids)}
    n_rbs = len(rb_ids)

    # Energy and bandwidth of each reduced tuple, as (device, RB, option)
    # arrays padded with +inf, for the Lagrangian relaxation input.
    max_options = max((len(r) for r in records), default=0)
    tuple_e = np.full((n_devices, n_rbs, max_options), np.inf)
    tuple_bw = np.zeros((n_devices, n_rbs, max_options))
    fill = np.zeros((n_devices, n_rbs), dtype=int)
    for i, device_records in enumerate(records):
        for e_nj, bw, cand in device_records:
            pos = rb_pos[cand.rb_index]
            slot = fill[i, pos]
            tuple_e[i, pos, slot] = e_nj
            tuple_bw[i, pos, slot] = bw
            fill[i, pos] = slot + 1

    def penalized_costs(mu: float) -> np.ndarray:
        """min(0, min over tuples of e + mu * bandwidth - weight) per (i, RB)."""
        if max_options == 0:
            return np.zeros((n_devices, n_rbs))
        with np.errstate(invalid="ignore"):
            best_e = np.min(tuple_e + mu * tuple_bw, axis=2)
        return np.minimum(best_e - weight_nj, 0.0)

    def lap_value(costs: np.ndarray, row_start: int, free_cols: list[int]) -> float:
        n_rem = n_devices - row_start
        matrix = np.zeros((n_rem, len(free_cols) + n_rem))
        matrix[:, : len(free_cols)] = costs[row_start:, free_cols]
        rows, cols = linear_sum_assignment(matrix)
        return float(matrix[rows, cols].sum())

    # Fit the bandwidth multiplier at the root by golden-section search on the
    # concave dual; any mu >= 0 yields an admissible bound, mu only tunes it.
    all_cols = list(range(n_rbs))
    mu_costs = penalized_costs(0.0)
    best_mu = 0.0
    if n_devices and n_rbs:

        def dual(mu: float) -> float:
            return lap_value(penalized_costs(mu), 0, all_cols) - mu * budget_hz

        finite_e = tuple_e[np.isfinite(tuple_e)]
        scale = (finite_e.max() - finite_e.min() + 1.0) / max(budget_hz, 1)
        lo, hi = 0.0, max(scale * 8.0, 1e-12)
        best_mu, best_dual = 0.0, dual(0.0)
        ratio = (np.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        c, d = b - ratio * (b - a), a + ratio * (b - a)
        fc, fd = dual(c), dual(d)
        for _ in range(48):
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - ratio * (b - a)
                fc = dual(c)
            else:
                a, c, fc = c, d, fd
                d = a + ratio * (b - a)
                fd = dual(d)
        for mu, value in ((c, fc), (d, fd)):
            if value > best_dual:
                best_mu, best_dual = mu, value
        mu_costs = penalized_costs(best_mu)

    # Suffix prefix-sums of per-device best deltas for the cheap count bound.
    best_delta = [
        min((e_nj - weight_nj for e_nj, _, _ in device_records), default=0)
        for device_records in records
    ]
    suffix_prefix: list[list[int]] = [[0] for _ in range(n_devices + 1)]
    for i in range(n_devices - 1, -1, -1):
        sums = [0]
        for value in sorted(d for d in best_delta[i:] if d < 0):
            sums.append(sums[-1] + value)
        suffix_prefix[i] = sums

    def cheap_bound(depth: int, slots_left: int) -> int:
        sums = suffix_prefix[depth]
        return sums[min(slots_left, len(sums) - 1)]

    lap_cache: dict[tuple[int, int], float] = {}

    def lap_bound(depth: int, free_mask: int, budget_left: int) -> float:
        cached = lap_cache.get((depth, free_mask))
        if cached is None:
            free_cols = [pos for pos in range(n_rbs) if free_mask & (1 << pos)]
            cached = lap_value(mu_costs, depth, free_cols)
            lap_cache[(depth, free_mask)] = cached
        return cached - best_mu * budget_left

    best_cost: int | None = None
    best_key: tuple | None = None
    best_picks: list[CandidateAssignment] = []
    path: list[CandidateAssignment] = []
    started = time.perf_counter()
    nodes = 0

    def consider_leaf(cost: int) -> None:
        nonlocal best_cost, best_key, best_picks
        picks = _sorted_assignments(path)
        key = _assignment_key(picks)
        if best_cost is None or cost < best_cost or (cost == best_cost and key < best_key):
            best_cost = cost
            best_key = key
            best_picks = picks

    def search(depth: int, cost: int, used_mask: int, used_bw: int, slots_left: int) -> None:
        nonlocal nodes
        nodes += 1
        if (nodes == 1 or nodes % 256 == 0) and time.perf_counter() - started > config.time_budget:
            raise _SolveTimeout
        if depth == n_devices or slots_left == 0:
            consider_leaf(cost)
            return
        if best_cost is not None:
            if cost + cheap_bound(depth, slots_left) > best_cost:
                return
            free_mask = ((1 << n_rbs) - 1) & ~used_mask
            relax = cost + lap_bound(depth, free_mask, budget_hz - used_bw)
            if relax > best_cost + _PRUNE_MARGIN:
                return
        for e_nj, bw, cand in records[depth]:
            pos_bit = 1 << rb_pos[cand.rb_index]
            if used_mask & pos_bit or used_bw + bw > budget_hz:
                continue
            path.append(cand)
            search(depth + 1, cost + e_nj - weight_nj, used_mask | pos_bit, used_bw + bw, slots_left - 1)
            path.pop()
        search(depth + 1, cost, used_mask, used_bw, slots_left)

    try:
        search(0, 0, 0, 0, config.max_devices)
    except _SolveTimeout:
        incumbent_energy = sum(_nanojoules(a.upload_energy) for a in best_picks)
        incumbent = _build_schedule(best_picks, incumbent_energy, weight_nj)
        root_bound = max(
            cheap_bound(0, config.max_devices),
            lap_bound(0, (1 << n_rbs) - 1, budget_hz) if n_rbs else 0.0,
        )
        gap = ((best_cost if best_cost is not None else 0) - root_bound) / 1e9
        raise SolveBudgetError(incumbent, gap) from None

    total_energy_nj = sum(_nanojoules(a.upload_energy) for a in best_picks)
    return _build_schedule(best_picks, total_energy_nj, weight_nj)


def brute_force_schedule(
    candidates: list[CandidateAssignment], config: SchedulerConfig
) -> Schedule:
    """True optimum by exhaustive enumeration; oracle for solve_schedule.

    Walks every combination of per-device tuple choices (or skips) that
    respects RB exclusivity, the bandwidth budget and the participant cap,
    with the same integer-nanojoule objective and tie-breaking as the solver
    but no pruning by objective.
    """
    weight_nj = _nanojoules(config.participation_weight)
    budget_hz = int(round(config.bandwidth_budget))
    groups = _group_by_device(candidates)

    size = 1
    for _, cands in groups:
        size *= len(cands) + 1
        if size > config.oracle_limit:
            raise OracleLimitError(
                f"enumeration size exceeds oracle_limit={config.oracle_limit}"
            )

    best: dict[str, object] = {"cost": None, "key": None, "picks": []}
    path: list[CandidateAssignment] = []

    def walk(depth: int, cost: int, used_rbs: set[int], used_bw: int, count: int) -> None:
        if depth == len(groups):
            key = _assignment_key(path)
            if (
                best["cost"] is None
                or cost < best["cost"]
                or (cost == best["cost"] and key < best["key"])
            ):
                best["cost"] = cost
                best["key"] = key
                best["picks"] = list(path)
            return
        for cand in groups[depth][1]:
            bw = int(round(cand.bandwidth))
            if cand.rb_index in used_rbs or used_bw + bw > budget_hz or count >= config.max_devices:
                continue
            used_rbs.add(cand.rb_index)
            path.append(cand)
            walk(depth + 1, cost + _nanojoules(cand.upload_energy) - weight_nj, used_rbs, used_bw + bw, count + 1)
            path.pop()
            used_rbs.remove(cand.rb_index)
        walk(depth + 1, cost, used_rbs, used_bw, count)

    walk(0, 0, set(), 0, 0)
    picks = list(best["picks"])
    total_energy_nj = sum(_nanojoules(a.upload_energy) for a in picks)
    return _build_schedule(picks, total_energy_nj, weight_nj)


def validate_schedule(
    schedule: Schedule, grid: LinkGrid, config: SchedulerConfig, policy: Policy
) -> list[str]:
    """Names of every scheduling constraint the schedule violates.

    An empty list means the schedule satisfies device and RB exclusivity,
    the policy requirements, the power bounds, the bandwidth budget and the
    participant cap.
    """
    violations: list[str] = []
    assignments = schedule.assignments

    device_ids = [a.device_id for a in assignments]
    if len(device_ids) != len(set(device_ids)):
        violations.append("device_exclusivity")
    rb_ids = [a.rb_index for a in assignments]
    if len(rb_ids) != len(set(rb_ids)):
        violations.append("rb_exclusivity")
    if any(
        not (0 <= a.bandwidth_index < grid.bandwidths.size)
        or not (0 <= a.rb_index < grid.rb_count)
        or not (0 <= a.power_index < grid.powers.size)
        for a in assignments
    ):
        violations.append("grid_bounds")
    if any(a.uplink_delay > policy.max_uplink_delay for a in assignments):
        violations.append("delay_requirement")
    if any(a.upload_energy > policy.max_upload_energy for a in assignments):
        violations.append("energy_requirement")
    if any(a.error_rate > policy.max_error_rate for a in assignments):
        violations.append("error_rate_requirement")
    if any(
        a.power < grid.powers[0] or a.power > grid.powers[-1] for a in assignments
    ):
        violations.append("power_bounds")
    if sum(a.bandwidth for a in assignments) > config.bandwidth_budget:
        violations.append("bandwidth_budget")
    if len(assignments) > config.max_devices:
        violations.append("device_count")
    return violations
