"""Shared test helpers: random scheduling instances sized for the oracle."""

import numpy as np

from flwsim.scheduling import CandidateAssignment, SchedulerConfig


def make_random_instance(seed):
    """A small random scheduling instance with randomized feasibility.

    Up to 5 devices and 5 RBs, 3 bandwidths, 3 powers; each tuple survives
    with a per-instance keep probability so instances stay within brute-force
    range.
    """
    rng = np.random.default_rng(seed)
    n_devices = int(rng.integers(1, 6))
    n_rbs = int(rng.integers(1, 6))
    bandwidths = np.sort(rng.uniform(0.5e6, 2.5e6, 3))
    powers = np.sort(rng.uniform(0.005, 0.02, 3))
    keep = rng.uniform(0.08, 0.3)

    candidates = []
    for i in range(n_devices):
        for j in range(3):
            for k in range(n_rbs):
                for l in range(3):
                    if rng.random() < keep:
                        energy = float(rng.uniform(1e-5, 3e-4))
                        candidates.append(
                            CandidateAssignment(
                                device_id=i,
                                bandwidth_index=j,
                                rb_index=k,
                                power_index=l,
                                upload_energy=energy,
                                uplink_delay=energy / float(powers[l]),
                                error_rate=float(rng.uniform(0.0, 0.3)),
                                bandwidth=float(bandwidths[j]),
                                power=float(powers[l]),
                            )
                        )
    config = SchedulerConfig(
        participation_weight=float(rng.choice([0.0, 1e-4, 2.5e-3, 0.025])),
        max_devices=int(rng.integers(1, 6)),
        bandwidth_budget=float(rng.uniform(1.0, n_devices + 0.5) * 1.5e6),
        time_budget=60.0,
        oracle_limit=2_000_000,
    )
    return candidates, config
