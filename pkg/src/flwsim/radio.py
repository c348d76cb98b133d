"""Wireless link and energy models for the uplink/downlink between IoT
devices and the base station.

All quantities are SI: Hz, W, s, J, bits. Rates use the Shannon form with
an expectation over Rayleigh power fading, packet errors use the waterfall
exponential model, and per-round device energy is training plus upload.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MEAN_FADING = "mean_fading"
MONTE_CARLO = "monte_carlo"

# Draws averaged per chunk when estimating fading expectations over a grid,
# bounding peak memory for large sample counts.
_GRID_CHUNK = 1024


class InvalidGeometryError(ValueError):
    """Device placement violates the propagation model (distance <= 0)."""


class UnreachableDeviceError(ValueError):
    """A link has no usable rate, so delay is undefined."""


def noise_psd_from_dbm_per_hz(dbm_per_hz: float) -> float:
    """Convert a noise power spectral density from dBm/Hz to W/Hz."""
    return 10.0 ** (dbm_per_hz / 10.0) * 1e-3


@dataclass
class ChannelParams:
    """Propagation, noise and downlink constants shared by all devices."""

    path_loss_exponent: float = 2.0
    noise_psd: float = noise_psd_from_dbm_per_hz(-174.0)  # W/Hz
    waterfall_threshold: float = 0.023
    waterfall_in_db: bool = False  # interpret threshold as dB, convert before use
    downlink_bandwidth: float = 20e6  # Hz
    bs_power: float = 1.0  # W
    downlink_interference: float = 1e-9  # W
    fading_samples: int = 1000
    expectation_mode: str = MEAN_FADING

    def __post_init__(self) -> None:
        if self.path_loss_exponent <= 0:
            raise ValueError("path_loss_exponent must be > 0")
        if self.noise_psd <= 0:
            raise ValueError("noise_psd must be > 0")
        if self.downlink_bandwidth <= 0:
            raise ValueError("downlink_bandwidth must be > 0")
        if self.bs_power <= 0:
            raise ValueError("bs_power must be > 0")
        if self.downlink_interference < 0:
            raise ValueError("downlink_interference must be >= 0")
        if self.fading_samples < 1:
            raise ValueError("fading_samples must be >= 1")
        if self.expectation_mode not in (MEAN_FADING, MONTE_CARLO):
            raise ValueError(f"unknown expectation_mode: {self.expectation_mode!r}")

    @property
    def waterfall(self) -> float:
        """Waterfall threshold as used in the error model (linear scale)."""
        if self.waterfall_in_db:
            return 10.0 ** (self.waterfall_threshold / 10.0)
        return self.waterfall_threshold


@dataclass
class Device:
    """One IoT device: geometry, fading stream, local data and compute."""

    id: int
    distance: float  # m, from the base station
    fading_seed: int  # seeds this device's fading sample stream
    data_size: int  # local training samples
    energy_coeff: float = 1e-27  # J per cycle per Hz^2
    cpu_cycles: float = 40.0  # cycles per unit of work
    clock_hz: float = 1e9
    cycles_load: float = 1.0  # units of work per round (samples x epochs)

    def __post_init__(self) -> None:
        if self.distance <= 0:
            raise InvalidGeometryError(f"device {self.id}: distance must be > 0")
        if self.data_size < 1:
            raise ValueError(f"device {self.id}: data_size must be >= 1")
        if self.energy_coeff <= 0 or self.cpu_cycles <= 0 or self.clock_hz <= 0:
            raise ValueError(f"device {self.id}: compute constants must be > 0")


@dataclass
class LinkGrid:
    """Discretized uplink resource axes: bandwidths, powers and RBs."""

    bandwidths: np.ndarray  # Hz, strictly increasing
    powers: np.ndarray  # W, strictly increasing
    rb_interference: np.ndarray  # W, one entry per RB
    total_bandwidth_budget: float  # Hz

    def __post_init__(self) -> None:
        self.bandwidths = np.asarray(self.bandwidths, dtype=float)
        self.powers = np.asarray(self.powers, dtype=float)
        self.rb_interference = np.asarray(self.rb_interference, dtype=float)
        if self.bandwidths.size == 0 or np.any(np.diff(self.bandwidths) <= 0):
            raise ValueError("bandwidths must be non-empty and strictly increasing")
        if self.powers.size == 0 or np.any(np.diff(self.powers) <= 0):
            raise ValueError("powers must be non-empty and strictly increasing")
        if self.rb_interference.size == 0 or np.any(self.rb_interference < 0):
            raise ValueError("rb_interference must be non-empty and non-negative")
        if self.total_bandwidth_budget <= 0:
            raise ValueError("total_bandwidth_budget must be > 0")

    @property
    def rb_count(self) -> int:
        return int(self.rb_interference.size)


def default_grid(
    max_participants: int,
    rb_count: int | None = None,
    interference_base: float = 1e-9,
    interference_step: float = 1e-9,
    rb_interference: np.ndarray | None = None,
) -> LinkGrid:
    """Build the default uplink grid: bandwidth 1..2 MHz in 0.1 MHz steps,
    power 0.008..0.012 W in 2.5e-4 W steps, budget 1.5 MHz per participant,
    and one RB per participant with incrementally rising interference."""
    if rb_count is None:
        rb_count = max_participants
    if rb_interference is None:
        rb_interference = interference_base + interference_step * np.arange(rb_count)
    return LinkGrid(
        bandwidths=1e6 + 1e5 * np.arange(11),
        powers=np.linspace(0.008, 0.012, 17),
        rb_interference=np.asarray(rb_interference, dtype=float),
        total_bandwidth_budget=max_participants * 1.5e6,
    )


@dataclass
class Policy:
    """Per-transmission requirements that gate the success probability."""

    max_uplink_delay: float = 0.2  # s
    max_upload_energy: float = 0.0025  # J
    max_error_rate: float = 0.3  # probability

    def __post_init__(self) -> None:
        if self.max_uplink_delay <= 0 or self.max_upload_energy <= 0:
            raise ValueError("delay and energy requirements must be > 0")
        if not 0 < self.max_error_rate < 1:
            raise ValueError("max_error_rate must be in (0, 1)")


@dataclass
class LinkMetrics:
    """Everything a candidate (device, bandwidth, RB, power) tuple yields."""

    uplink_rate: float  # bit/s
    downlink_rate: float  # bit/s
    uplink_delay: float  # s
    downlink_delay: float  # s
    round_delay: float  # s
    error_rate: float  # uplink packet error probability
    success_prob: float  # 1 - error_rate
    gated_success: float = field(default=0.0)  # success_prob or 0 per policy
    train_energy: float = field(default=0.0)  # J
    upload_energy: float = field(default=0.0)  # J
    round_energy: float = field(default=0.0)  # J
    policy_ok: bool = field(default=False)


def channel_gain(distance: float, fading: float, path_loss_exponent: float) -> float:
    """Channel gain: fading draw times the distance power law."""
    if distance <= 0:
        raise InvalidGeometryError("distance must be > 0")
    if fading < 0:
        raise ValueError("fading must be >= 0")
    return fading * distance ** (-path_loss_exponent)


def fading_draws(device: Device, params: ChannelParams) -> np.ndarray:
    """Fading samples for expectation estimation.

    Mean-fading mode evaluates at the unit mean of the exponential fading
    power; Monte Carlo draws from the device's own seeded stream, so results
    do not depend on evaluation order across devices.
    """
    if params.expectation_mode == MEAN_FADING:
        return np.ones(1)
    rng = np.random.default_rng(device.fading_seed)
    return rng.exponential(1.0, size=params.fading_samples)


def _expected_rate(
    bandwidth: float, power: float, device: Device, interference: float, params: ChannelParams
) -> float:
    draws = fading_draws(device, params)
    gain = draws * device.distance ** (-params.path_loss_exponent)
    snr = power * gain / (interference + bandwidth * params.noise_psd)
    return float(bandwidth * np.mean(np.log2(1.0 + snr)))


def uplink_rate(
    bandwidth: float,
    power: float,
    device: Device,
    interference: float,
    params: ChannelParams,
) -> float:
    """Expected uplink rate of a device on one RB, in bit/s."""
    if bandwidth <= 0 or power < 0:
        raise ValueError("bandwidth must be > 0 and power >= 0")
    if interference < 0:
        raise ValueError("interference must be >= 0")
    return _expected_rate(bandwidth, power, device, interference, params)


def downlink_rate(device: Device, params: ChannelParams) -> float:
    """Expected downlink rate from the base station to a device, in bit/s."""
    return _expected_rate(
        params.downlink_bandwidth,
        params.bs_power,
        device,
        params.downlink_interference,
        params,
    )


def transmission_delay(packet_bits: float, rate: float) -> float:
    """Single-packet transmission delay in seconds."""
    if packet_bits <= 0:
        raise ValueError("packet_bits must be > 0")
    if rate <= 0:
        raise UnreachableDeviceError("rate must be > 0 to transmit a packet")
    return packet_bits / rate


def packet_error_rate(
    bandwidth: float,
    power: float,
    device: Device,
    interference: float,
    params: ChannelParams,
) -> float:
    """Expected uplink packet error probability under the waterfall model."""
    if bandwidth <= 0 or power < 0:
        raise ValueError("bandwidth must be > 0 and power >= 0")
    if interference < 0:
        raise ValueError("interference must be >= 0")
    draws = fading_draws(device, params)
    gain = draws * device.distance ** (-params.path_loss_exponent)
    received = power * gain
    noise = params.waterfall * (interference + bandwidth * params.noise_psd)
    with np.errstate(divide="ignore"):
        per = np.where(received > 0, 1.0 - np.exp(-noise / np.where(received > 0, received, 1.0)), 1.0)
    return float(min(1.0, max(0.0, float(np.mean(per)))))


def gated_success(metrics: LinkMetrics, policy: Policy) -> float:
    """Success probability after the policy gate.

    Returns the raw success probability when the uplink delay, upload energy
    and error rate all satisfy the policy, otherwise 0. Updates the metrics
    in place with the gate outcome.
    """
    ok = (
        metrics.uplink_delay <= policy.max_uplink_delay
        and metrics.upload_energy <= policy.max_upload_energy
        and metrics.error_rate <= policy.max_error_rate
    )
    metrics.policy_ok = ok
    metrics.gated_success = metrics.success_prob if ok else 0.0
    return metrics.gated_success


def training_energy(device: Device) -> float:
    """Energy to train the local model for one round, in joules."""
    return device.energy_coeff * device.cpu_cycles * device.clock_hz**2 * device.cycles_load


def upload_energy(power: float, uplink_delay: float) -> float:
    """Energy to transmit the local model, in joules."""
    if power < 0 or uplink_delay < 0:
        raise ValueError("power and delay must be >= 0")
    return power * uplink_delay


def evaluate_link(
    device: Device,
    bandwidth_index: int,
    rb_index: int,
    power_index: int,
    grid: LinkGrid,
    params: ChannelParams,
    uplink_packet_bits: float,
    downlink_packet_bits: float,
    policy: Policy,
) -> LinkMetrics:
    """Full link metrics for one candidate (device, bandwidth, RB, power)."""
    if not 0 <= bandwidth_index < grid.bandwidths.size:
        raise IndexError(f"bandwidth_index {bandwidth_index} out of range")
    if not 0 <= rb_index < grid.rb_count:
        raise IndexError(f"rb_index {rb_index} out of range")
    if not 0 <= power_index < grid.powers.size:
        raise IndexError(f"power_index {power_index} out of range")

    bandwidth = float(grid.bandwidths[bandwidth_index])
    power = float(grid.powers[power_index])
    interference = float(grid.rb_interference[rb_index])

    up_rate = uplink_rate(bandwidth, power, device, interference, params)
    down_rate = downlink_rate(device, params)
    up_delay = transmission_delay(uplink_packet_bits, up_rate)
    down_delay = transmission_delay(downlink_packet_bits, down_rate)
    per = packet_error_rate(bandwidth, power, device, interference, params)

    metrics = LinkMetrics(
        uplink_rate=up_rate,
        downlink_rate=down_rate,
        uplink_delay=up_delay,
        downlink_delay=down_delay,
        round_delay=up_delay + down_delay,
        error_rate=per,
        success_prob=1.0 - per,
        train_energy=training_energy(device),
        upload_energy=upload_energy(power, up_delay),
    )
    metrics.round_energy = metrics.train_energy + metrics.upload_energy
    gated_success(metrics, policy)
    return metrics


@dataclass
class LinkTable:
    """Uplink metrics for a device over the whole grid, shaped (|B|, R, |P|)."""

    rate: np.ndarray  # bit/s
    delay: np.ndarray  # s
    upload_energy: np.ndarray  # J
    error_rate: np.ndarray  # probability


def link_grid_table(
    device: Device,
    grid: LinkGrid,
    params: ChannelParams,
    uplink_packet_bits: float,
) -> LinkTable:
    """Vectorized uplink metrics over every (bandwidth, RB, power) tuple.

    Matches the scalar operations tuple for tuple; exists so that feasibility
    enumeration over large grids stays cheap.
    """
    bw = grid.bandwidths[:, None, None]
    pw = grid.powers[None, None, :]
    itf = grid.rb_interference[None, :, None]
    denom = itf + bw * params.noise_psd
    base = device.distance ** (-params.path_loss_exponent)

    draws = fading_draws(device, params)
    rate_sum = np.zeros((grid.bandwidths.size, grid.rb_count, grid.powers.size))
    per_sum = np.zeros_like(rate_sum)
    for start in range(0, draws.size, _GRID_CHUNK):
        chunk = draws[start : start + _GRID_CHUNK]
        gain = chunk[:, None, None, None] * base
        snr = pw * gain / denom
        rate_sum += np.log2(1.0 + snr).sum(axis=0)
        received = pw * gain
        with np.errstate(divide="ignore"):
            per_sum += np.where(
                received > 0,
                1.0 - np.exp(-params.waterfall * denom / np.where(received > 0, received, 1.0)),
                1.0,
            ).sum(axis=0)
    rate = np.broadcast_to(bw, rate_sum.shape) * rate_sum / draws.size
    per = np.clip(per_sum / draws.size, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        delay = np.where(rate > 0, uplink_packet_bits / np.where(rate > 0, rate, 1.0), np.inf)
    energy = np.broadcast_to(pw, delay.shape) * delay
    return LinkTable(rate=rate, delay=delay, upload_energy=energy, error_rate=per)
