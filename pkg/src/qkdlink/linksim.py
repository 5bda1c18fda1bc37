"""Seeded generation of physically plausible detection-tag streams.

Two generation paths produce the same statistics:

* the literal path (`generate_pairs` + `propagate_and_detect`) creates
  every source pair and thins it photon by photon — transparent, used by
  the statistical oracles and small studies;
* `LinkSimulator.step` samples the thinned processes directly (coincident
  pairs, one-sided singles, dark counts are independent Poisson streams),
  which scales with *detected* rather than generated events and is what
  the pipeline runs on.

All timestamps are integer picoseconds.  Random draws inside a chunk are
made relative to the chunk start so that float rounding never eats into
picosecond resolution, no matter how long the run is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CHANNEL_X_MINUS,
    CHANNEL_X_PLUS,
    CHANNEL_Z_LONG,
    CHANNEL_Z_SHORT,
    NUM_CHANNELS,
    PS_PER_SECOND,
    Station,
    TagBatch,
)
from .scenario import ClockModel, LinkScenario

_MAX_CHUNK_S = 10.0


def generate_pairs(rate_hz: float, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """Pair-creation times of a homogeneous Poisson process.

    Returns sorted int64 picosecond times in [0, duration).
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if rate_hz <= 0:
        raise ValueError("pair rate must be positive")
    n = rng.poisson(rate_hz * duration_s)
    times = rng.random(n) * (duration_s * PS_PER_SECOND)
    times.sort()
    return times.astype(np.int64)


def accidental_rate(singles_a_hz: float, singles_b_hz: float, window_ps: float) -> float:
    """Uncorrelated-coincidence rate S_A * S_B * window."""
    if singles_a_hz < 0 or singles_b_hz < 0 or window_ps < 0:
        raise ValueError("rates and window must be non-negative")
    return singles_a_hz * singles_b_hz * (window_ps / PS_PER_SECOND)


def franson_outcome(
    phase_a_rad, phase_b_rad, visibility: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Joint X-basis outcomes for central-peak pairs.

    P(outcomes equal) = (1 + V cos(phase_a + phase_b)) / 2, with uniform
    marginals on each side.  Accepts scalars or arrays of phases.
    """
    phase = np.atleast_1d(np.asarray(phase_a_rad, float) + np.asarray(phase_b_rad, float))
    p_equal = 0.5 * (1.0 + visibility * np.cos(phase))
    o_a = rng.integers(0, 2, size=phase.shape, dtype=np.uint8)
    differ = rng.random(phase.shape) >= p_equal
    o_b = o_a ^ differ.astype(np.uint8)
    return o_a, o_b


def clock_offset_ps(clock: ClockModel, t_ps) -> np.ndarray:
    """Deterministic part of the clock offset at absolute time t."""
    t_s = np.asarray(t_ps, dtype=float) / PS_PER_SECOND
    off = clock.initial_offset_ps + clock.frequency_error_ps_per_s * t_s
    for pt, p_off, p_freq in clock.perturbations_s_pps_iter():
        after = t_s >= pt
        off = off + after * (p_off + p_freq * (t_s - pt))
    return off


def dead_time_filter(t: np.ndarray, dead_ps: float) -> np.ndarray:
    """Boolean keep-mask so no two kept times are closer than dead_ps.

    Greedy from the front: a tag is dropped when it falls inside the dead
    window of the previous *kept* tag.  Violations are rare at realistic
    rates, so the fixed-point loop converges in one or two rounds.
    """
    keep = np.ones(t.size, dtype=bool)
    if dead_ps <= 0 or t.size < 2:
        return keep
    while True:
        idx = np.flatnonzero(keep)
        gaps = np.diff(t[idx])
        viol = np.flatnonzero(gaps < dead_ps) + 1
        if viol.size == 0:
            return keep
        # Drop only the first of each consecutive violation run; removing
        # it may already clear the following ones.
        first_of_run = np.insert(np.diff(viol) > 1, 0, True)
        keep[idx[viol[first_of_run]]] = False


@dataclass
class DetectionTruth:
    """Ground-truth labels for generated detections (tests only)."""

    pair_id_a: np.ndarray
    pair_id_b: np.ndarray


def propagate_and_detect(
    pair_times_ps: np.ndarray,
    scenario: LinkScenario,
    rng: np.random.Generator,
    duration_s: float,
    with_truth: bool = False,
):
    """Literal per-photon propagation of a pair stream to two tag streams.

    Each photon independently survives channel transmission, detector
    efficiency; survivors pick a basis 50/50 and a short/long path 50/50.
    X-basis outcomes of matched-arm surviving pairs carry the nonlocal
    interference correlation; everything else is uniform.  Gaussian
    jitter, dark counts, dead-time filtering and Bob's clock offset are
    applied.  Stateless: polarization drift and clock random walk are the
    simulator's job.
    """
    scenario.validate()
    t = np.asarray(pair_times_ps, dtype=np.int64)
    n = t.size
    tau = scenario.z_delay_ps

    p_a = scenario.channel_transmission_a() * scenario.detector_a.efficiency
    p_b = scenario.channel_transmission_b() * scenario.detector_b.efficiency
    alive_a = rng.random(n) < p_a
    alive_b = rng.random(n) < p_b

    basis_a = rng.integers(0, 2, n, dtype=np.uint8)
    basis_b = rng.integers(0, 2, n, dtype=np.uint8)
    path_a = rng.integers(0, 2, n, dtype=np.uint8)
    path_b = rng.integers(0, 2, n, dtype=np.uint8)

    out_a = rng.integers(0, 2, n, dtype=np.uint8)
    out_b = rng.integers(0, 2, n, dtype=np.uint8)
    central_xx = alive_a & alive_b & (basis_a == 1) & (basis_b == 1) & (path_a == path_b)
    if central_xx.any():
        t_s = t[central_xx].astype(float) / PS_PER_SECOND
        phase = (
            scenario.phase_a.initial_phase_rad
            + scenario.phase_a.drift_rad_per_s * t_s
            + scenario.phase_b.initial_phase_rad
            + scenario.phase_b.drift_rad_per_s * t_s
        )
        oa, ob = franson_outcome(phase, 0.0, scenario.joint_visibility(), rng)
        out_a[central_xx] = oa
        out_b[central_xx] = ob

    batches = []
    truths = []
    for station, alive, basis, path, out, det, clock in (
        (Station.ALICE, alive_a, basis_a, path_a, out_a, scenario.detector_a, None),
        (Station.BOB, alive_b, basis_b, path_b, out_b, scenario.detector_b, scenario.clock_b),
    ):
        idx = np.flatnonzero(alive)
        times = t[idx].astype(float) + path[idx] * float(tau)
        if det.jitter_sigma_ps > 0:
            times = times + rng.normal(0.0, det.jitter_sigma_ps, idx.size)
        channel = np.where(
            basis[idx] == 0,
            np.where(path[idx] == 0, CHANNEL_Z_SHORT, CHANNEL_Z_LONG),
            np.where(out[idx] == 0, CHANNEL_X_PLUS, CHANNEL_X_MINUS),
        ).astype(np.uint16)
        pair_id = idx.astype(np.int64)

        n_dark = rng.poisson(NUM_CHANNELS * det.dark_rate_hz * duration_s)
        dark_t = np.sort(rng.random(n_dark)) * (duration_s * PS_PER_SECOND)
        dark_ch = rng.integers(0, NUM_CHANNELS, n_dark, dtype=np.uint16)

        times = np.concatenate([times, dark_t])
        channel = np.concatenate([channel, dark_ch])
        pair_id = np.concatenate([pair_id, np.full(n_dark, -1, np.int64)])

        if clock is not None:
            times = times + clock_offset_ps(clock, times)

        times_i = np.rint(times).astype(np.int64)
        order = np.argsort(times_i, kind="stable")
        times_i, channel, pair_id = times_i[order], channel[order], pair_id[order]

        keep = np.ones(times_i.size, dtype=bool)
        for ch in range(NUM_CHANNELS):
            sel = channel == ch
            keep[sel] = dead_time_filter(times_i[sel], det.dead_time_ps)
        batches.append(TagBatch(station, times_i[keep], channel[keep]))
        truths.append(pair_id[keep])

    if with_truth:
        return batches[0], batches[1], DetectionTruth(truths[0], truths[1])
    return batches[0], batches[1]


class LinkSimulator:
    """Stateful tag-stream generator driven by the experiment orchestrator.

    Actuator setters are the only inputs the control loops may reach; the
    ground-truth drift states stay private to the simulator.
    """

    def __init__(self, scenario: LinkScenario):
        scenario.validate()
        self.scenario = scenario
        self._seed = scenario.seed
        self._chunk_counter = 0
        self._now_ps = 0
        # actuators (written by the orchestrator on behalf of controllers)
        self.pump_attenuation_db = 0.0
        self.phase_actuator_rad = 0.0
        self.pol_actuator_a_rad = 0.0
        self.pol_actuator_b_rad = 0.0
        # hidden stochastic states
        self._rw_offset_ps = 0.0
        self._phase_kick_rad = 0.0
        self._pol_drift_a = scenario.polarization_a.initial_mismatch_rad
        self._pol_drift_b = scenario.polarization_b.initial_mismatch_rad
        self._forced_evaporations_s: list[float] = []

    # -- actuator surface (quantum-telemetry-driven controllers only) ----

    def set_pump_attenuation_db(self, value: float) -> None:
        self.pump_attenuation_db = max(0.0, float(value))

    def set_phase_actuator_rad(self, value: float) -> None:
        self.phase_actuator_rad = float(value)

    def set_pol_actuator_rad(self, station: Station, value: float) -> None:
        if station == Station.ALICE:
            self.pol_actuator_a_rad = float(value)
        else:
            self.pol_actuator_b_rad = float(value)

    def apply_restart_phase_kick(self) -> None:
        """Model the uncontrolled piezo position after a pipeline restart."""
        if not self.scenario.phase_a.restart_kick:
            return
        rng = self._chunk_rng("kick")
        self._phase_kick_rad = float(rng.uniform(0.0, 2.0 * math.pi))

    def force_evaporation(self, start_s: float) -> None:
        """Schedule an out-of-cycle evaporation (cryostat failure)."""
        self._forced_evaporations_s.append(float(start_s))

    # -- hardware-style telemetry ----------------------------------------

    @property
    def now_s(self) -> float:
        return self._now_ps / PS_PER_SECOND

    def detectors_cold(self, t_s: float) -> bool:
        """True when SNSPD temperature is under the operating threshold."""
        return not self._in_blackout(t_s)

    def evaporation_cycles(self, horizon_s: float) -> list[tuple[float, float]]:
        """Blackout windows (start_s, end_s) up to the horizon."""
        det = self.scenario.detector_a
        period = det.evaporation_period_h * 3600.0
        blackout = det.evaporation_duration_h * 3600.0 * det.evaporation_blackout_fraction
        windows = []
        if period > 0:
            k = 1
            while k * period < horizon_s:
                windows.append((k * period, k * period + blackout))
                k += 1
        for start in self._forced_evaporations_s:
            if start < horizon_s:
                windows.append((start, start + blackout))
        windows.sort()
        return windows

    def _in_blackout(self, t_s: float) -> bool:
        for start, end in self.evaporation_cycles(t_s + 1.0):
            if start <= t_s < end:
                return True
        return False

    # -- generation -------------------------------------------------------

    def step(self, duration_s: float) -> tuple[TagBatch, TagBatch]:
        """Generate both stations' detections for the next `duration_s`."""
        chunks_a, chunks_b = [], []
        remaining = float(duration_s)
        while remaining > 1e-12:
            d = min(remaining, _MAX_CHUNK_S)
            a, b = self._step_chunk(d)
            chunks_a.append(a)
            chunks_b.append(b)
            remaining -= d
        return TagBatch.concat(chunks_a), TagBatch.concat(chunks_b)

    def skip(self, duration_s: float) -> None:
        """Advance simulated time without emitting detections.

        The hidden drift states (clock random walk, polarization) advance
        exactly as they would during generation, so accelerated runs stay
        statistically consistent.
        """
        remaining = float(duration_s)
        while remaining > 1e-12:
            d = min(remaining, _MAX_CHUNK_S * 50)
            self._advance_states(d, self._chunk_rng("state"))
            self._now_ps += int(round(d * PS_PER_SECOND))
            self._chunk_counter += 1
            remaining -= d

    def _chunk_rng(self, domain: str) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self._seed,
            spawn_key=(hash(domain) & 0xFFFFFFFF, self._chunk_counter),
        )
        return np.random.Generator(np.random.PCG64(seq))

    def _pol_multiplier(self, station: Station) -> float:
        sc = self.scenario
        model = sc.polarization_a if station == Station.ALICE else sc.polarization_b
        if not model.enabled:
            return 1.0
        drift = self._pol_drift_a if station == Station.ALICE else self._pol_drift_b
        act = (
            self.pol_actuator_a_rad
            if station == Station.ALICE
            else self.pol_actuator_b_rad
        )
        det = sc.detector_a if station == Station.ALICE else sc.detector_b
        mismatch = drift - act
        return 10.0 ** (-(det.polarization_penalty_db / 10.0) * math.sin(mismatch) ** 2)

    def _advance_states(self, d_s: float, rng: np.random.Generator) -> None:
        sc = self.scenario
        rw = sc.clock_b.random_walk_ps_per_rts
        if rw > 0:
            self._rw_offset_ps += rng.normal(0.0, rw * math.sqrt(d_s))
        for name, model in (("a", sc.polarization_a), ("b", sc.polarization_b)):
            if not model.enabled:
                continue
            sigma = (math.pi / 2.0) * math.sqrt(d_s / (model.characteristic_time_h * 3600.0))
            stepv = rng.normal(0.0, sigma)
            if name == "a":
                self._pol_drift_a += stepv
            else:
                self._pol_drift_b += stepv

    def _phase_sum(self, t_abs_s: np.ndarray) -> np.ndarray:
        sc = self.scenario
        return (
            sc.phase_a.initial_phase_rad
            + sc.phase_a.drift_rad_per_s * t_abs_s
            + sc.phase_b.initial_phase_rad
            + sc.phase_b.drift_rad_per_s * t_abs_s
            + self.phase_actuator_rad
            + self._phase_kick_rad
        )

    def _step_chunk(self, d_s: float) -> tuple[TagBatch, TagBatch]:
        sc = self.scenario
        rng = self._chunk_rng("events")
        t0_ps = self._now_ps
        d_ps = d_s * PS_PER_SECOND

        rate = sc.pair_rate_hz * 10.0 ** (-self.pump_attenuation_db / 10.0)
        p_a = (
            sc.channel_transmission_a()
            * sc.detector_a.efficiency
            * self._pol_multiplier(Station.ALICE)
        )
        p_b = (
            sc.channel_transmission_b()
            * sc.detector_b.efficiency
            * self._pol_multiplier(Station.BOB)
        )

        n_cc = rng.poisson(rate * p_a * p_b * d_s)
        n_ao = rng.poisson(rate * p_a * (1.0 - p_b) * d_s)
        n_bo = rng.poisson(rate * p_b * (1.0 - p_a) * d_s)

        # Components are generated time-sorted so the final per-station
        # ordering is a cheap stable merge of nearly-sorted runs.  The six
        # independent fair coin flips a pair needs are sliced out of one
        # byte draw.
        t_cc = np.sort(rng.random(n_cc)) * d_ps
        coin = rng.integers(0, 64, n_cc, dtype=np.uint8)
        basis_a = coin & 1
        basis_b = (coin >> 1) & 1
        path_a = (coin >> 2) & 1
        path_b = (coin >> 3) & 1
        out_a = (coin >> 4) & 1
        out_b = (coin >> 5) & 1
        central_xx = (basis_a == 1) & (basis_b == 1) & (path_a == path_b)
        if central_xx.any():
            t_abs_s = (t0_ps + t_cc[central_xx]) / PS_PER_SECOND
            oa, ob = franson_outcome(
                self._phase_sum(t_abs_s), 0.0, sc.joint_visibility(), rng
            )
            out_a[central_xx] = oa
            out_b[central_xx] = ob

        batches = []
        for station, n_single, det, pol_unused in (
            (Station.ALICE, n_ao, sc.detector_a, None),
            (Station.BOB, n_bo, sc.detector_b, None),
        ):
            if station == Station.ALICE:
                basis, path, out = basis_a, path_a, out_a
            else:
                basis, path, out = basis_b, path_b, out_b

            t_s1 = np.sort(rng.random(n_single)) * d_ps
            coin_s = rng.integers(0, 8, n_single, dtype=np.uint8)
            basis_s = coin_s & 1
            path_s = (coin_s >> 1) & 1
            out_s = (coin_s >> 2) & 1

            n_dark = rng.poisson(NUM_CHANNELS * det.dark_rate_hz * d_s)
            dark_t = np.sort(rng.random(n_dark)) * d_ps
            dark_ch = rng.integers(0, NUM_CHANNELS, n_dark, dtype=np.uint16)

            times = np.concatenate(
                [
                    t_cc + path * float(sc.z_delay_ps),
                    t_s1 + path_s * float(sc.z_delay_ps),
                    dark_t,
                ]
            )
            ch_photon = np.where(
                np.concatenate([basis, basis_s]) == 0,
                np.where(np.concatenate([path, path_s]) == 0, CHANNEL_Z_SHORT, CHANNEL_Z_LONG),
                np.where(np.concatenate([out, out_s]) == 0, CHANNEL_X_PLUS, CHANNEL_X_MINUS),
            ).astype(np.uint16)
            channel = np.concatenate([ch_photon, dark_ch])

            if det.jitter_sigma_ps > 0:
                jit = rng.normal(0.0, det.jitter_sigma_ps, times.size)
                jit[times.size - n_dark :] = 0.0  # darks have no optical jitter
                times = times + jit

            # temperature blackout: detectors yield nothing while warm
            mask = self._blackout_mask(t0_ps, times)
            times, channel = times[mask], channel[mask]

            if station == Station.BOB:
                abs_t = t0_ps + times
                times = times + clock_offset_ps(sc.clock_b, abs_t) + self._rw_offset_ps

            times_i = t0_ps + np.rint(times).astype(np.int64)
            order = np.argsort(times_i, kind="stable")  # nearly-sorted runs
            times_i, channel = times_i[order], channel[order]
            keep = np.ones(times_i.size, dtype=bool)
            if det.dead_time_ps > 0:
                for chn in range(NUM_CHANNELS):
                    sel = channel == chn
                    keep[sel] = dead_time_filter(times_i[sel], det.dead_time_ps)
            batches.append(TagBatch(station, times_i[keep], channel[keep]))

        self._advance_states(d_s, self._chunk_rng("state"))
        self._now_ps += int(round(d_ps))
        self._chunk_counter += 1
        return batches[0], batches[1]

    def _blackout_mask(self, t0_ps: int, rel_times_ps: np.ndarray) -> np.ndarray:
        if rel_times_ps.size == 0:
            return np.ones(0, dtype=bool)
        horizon = (t0_ps + float(rel_times_ps.max())) / PS_PER_SECOND + 1.0
        windows = self.evaporation_cycles(horizon)
        if not windows:
            return np.ones(rel_times_ps.size, dtype=bool)
        abs_s = (t0_ps + rel_times_ps) / PS_PER_SECOND
        mask = np.ones(rel_times_ps.size, dtype=bool)
        for start, end in windows:
            mask &= ~((abs_s >= start) & (abs_s < end))
        return mask
