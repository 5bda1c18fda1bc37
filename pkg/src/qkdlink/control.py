"""Stabilization loops and the autonomous watchdog.

Three loops keep the link at its operating point using nothing but
quantum-signal telemetry: pump attenuation holds the Z error rate on its
set-point, a phase dither keeps the X error rate at the interference
minimum, and a polarization hill-climb keeps the singles rate at the
detector optimum.  Controller steps are pure functions of (state,
telemetry): replaying a telemetry log reproduces the actuator trace bit
for bit.

The watchdog closes the autonomy loop: it detects detector blackouts,
books downtime with a cause, and issues the restart directive sequence
(re-acquire sync, re-lock phase, resume sifting) without an operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum


class LoopMode(str, Enum):
    SEARCHING = "searching"
    LOCKED = "locked"
    HELD = "held"


# ---------------------------------------------------------------------------
# Pump attenuation -> QBERz
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PumpControllerState:
    attenuation_db: float
    setpoint: float = 0.043
    gain_db: float = 40.0  # dB per unit error-rate deviation
    max_step_db: float = 1.0
    max_ci_width: float = 0.02
    lock_band: float = 0.004
    mode: LoopMode = LoopMode.SEARCHING


def pump_controller_step(
    state: PumpControllerState,
    qber_z: float,
    ci: tuple[float, float],
    interval_s: float,
) -> PumpControllerState:
    """Integral step on the pump attenuation.

    Too many double pairs -> error rate above set-point -> attenuate
    harder; below set-point -> open up.  A too-wide confidence interval
    holds the actuator instead of acting on noise.
    """
    if ci[1] - ci[0] > state.max_ci_width:
        return replace(state, mode=LoopMode.HELD)
    error = qber_z - state.setpoint
    step = max(-state.max_step_db, min(state.max_step_db, state.gain_db * error))
    new_att = max(0.0, state.attenuation_db + step)
    mode = LoopMode.LOCKED if abs(error) <= state.lock_band else LoopMode.SEARCHING
    return replace(state, attenuation_db=new_att, mode=mode)


# ---------------------------------------------------------------------------
# Interferometer phase -> QBERx
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseControllerState:
    actuator_rad: float
    dither_rad: float = 0.12
    gain: float = 0.8
    max_step_rad: float = 0.45
    abort_threshold: float = 0.11
    abort_timeout_s: float = 300.0
    # dither bookkeeping: we alternate +d / -d probes around the mean
    probe_sign: int = +1
    mean_rad: float = 0.0
    probe_qber: float | None = None
    mode: LoopMode = LoopMode.SEARCHING
    time_above_abort_s: float = 0.0

    @property
    def commanded_rad(self) -> float:
        # actuator value wrapped to the piezo's [0, 2 pi) range
        return (self.mean_rad + self.probe_sign * self.dither_rad) % (2.0 * math.pi)


def phase_controller_step(
    state: PhaseControllerState,
    qber_x: float,
    interval_s: float,
) -> PhaseControllerState:
    """Dither-and-descend on the nonlocal interference error rate.

    Every pair of probes (+d, -d) yields a gradient estimate and one
    downhill move.  The probe cadence follows the telemetry cadence, so
    the integration window scales with loss automatically: the estimate
    arrives whenever enough X events have accumulated.
    """
    above = qber_x > state.abort_threshold
    time_above = state.time_above_abort_s + interval_s if above else 0.0

    if state.probe_qber is None:
        # first probe of the pair measured at +d; flip the dither
        return replace(
            state,
            probe_qber=qber_x,
            probe_sign=-state.probe_sign,
            time_above_abort_s=time_above,
        )
    # second probe completes the gradient estimate
    q_second_sign = state.probe_sign
    grad = (state.probe_qber - qber_x) / (2.0 * state.dither_rad)
    # probe_qber was measured at the *opposite* sign of the current one
    grad *= -q_second_sign
    step = max(-state.max_step_rad, min(state.max_step_rad, -state.gain * grad))
    mean = state.mean_rad + step
    mode = LoopMode.LOCKED if max(state.probe_qber, qber_x) < 0.08 else LoopMode.SEARCHING
    return replace(
        state,
        mean_rad=mean % (2.0 * math.pi),
        probe_qber=None,
        probe_sign=+1,
        mode=mode,
        time_above_abort_s=time_above,
    )


def phase_needs_relock(state: PhaseControllerState) -> bool:
    return state.time_above_abort_s > state.abort_timeout_s


# ---------------------------------------------------------------------------
# Polarization -> detector singles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolarizationControllerState:
    angle_rad: float
    # dither plus climb step keep the total efficiency modulation inside
    # the ~3 % band around the optimum
    dither_rad: float = 0.10
    step_rad: float = 0.02
    probe_sign: int = +1
    mean_rad: float = 0.0
    probe_singles: float | None = None
    mode: LoopMode = LoopMode.SEARCHING

    @property
    def commanded_rad(self) -> float:
        return self.mean_rad + self.probe_sign * self.dither_rad


def polarization_controller_step(
    state: PolarizationControllerState,
    singles_hz: float,
    interval_s: float = 1.0,
    dark: bool = False,
) -> PolarizationControllerState:
    """One-second hill climb on the detected singles rate."""
    if dark or singles_hz <= 0:
        return replace(state, mode=LoopMode.HELD, probe_singles=None,
                       probe_sign=+1)
    if state.probe_singles is None:
        return replace(state, probe_singles=singles_hz,
                       probe_sign=-state.probe_sign, mode=state.mode)
    # move toward the side of the dither that detected more photons;
    # probe_singles was taken at the opposite sign of the current one
    first_sign = -state.probe_sign
    if state.probe_singles >= singles_hz:
        direction = first_sign
    else:
        direction = -first_sign
    mean = state.mean_rad + direction * state.step_rad
    return replace(state, mean_rad=mean, probe_singles=None,
                   probe_sign=+1, mode=LoopMode.LOCKED)


# ---------------------------------------------------------------------------
# Watchdog
# ---------------------------------------------------------------------------


class PipelineStatus(str, Enum):
    RUNNING = "running"
    DOWN = "down"
    HALTED = "halted"


@dataclass
class DowntimeEntry:
    start_s: float
    end_s: float | None
    cause: str  # evaporation | software | cryostat | sync-loss


@dataclass
class WatchdogConfig:
    singles_floor_fraction: float = 0.01
    blackout_confirm_s: float = 5.0
    warmup_s: float = 60.0
    max_restarts: int = 5
    max_restarts_window_s: float = 600.0


@dataclass
class WatchdogState:
    status: PipelineStatus = PipelineStatus.RUNNING
    restart_count: int = 1  # pipeline start procedures, initial start included
    downtime: list = field(default_factory=list)
    median_window: list = field(default_factory=list)
    low_since_s: float | None = None
    recovered_at_s: float | None = None
    recent_restarts: list = field(default_factory=list)

    def total_downtime_s(self) -> float:
        return sum(
            (e.end_s - e.start_s) for e in self.downtime if e.end_s is not None
        )


def watchdog_step(
    state: WatchdogState,
    singles_hz: float,
    detector_cold: bool,
    now_s: float,
    cfg: WatchdogConfig | None = None,
    cause_hint: str = "evaporation",
    sync_locked: bool = True,
) -> tuple[WatchdogState, list[str]]:
    """Advance the watchdog; returns (state, directives).

    Directives: "stop" when a blackout is confirmed, "restart" when the
    detectors are cold again (the orchestrator then re-acquires sync,
    re-locks the phase and resumes sifting), "halt" when restarts churn.
    """
    cfg = cfg or WatchdogConfig()
    directives: list[str] = []
    if state.status == PipelineStatus.HALTED:
        return state, []

    if state.status == PipelineStatus.RUNNING:
        state.median_window.append(singles_hz)
        if len(state.median_window) > 64:
            state.median_window.pop(0)
        med = sorted(state.median_window)[len(state.median_window) // 2]
        low = singles_hz < cfg.singles_floor_fraction * max(med, 1.0)
        blackout = (low and med > 0) or not detector_cold or not sync_locked
        if blackout:
            if state.low_since_s is None:
                state.low_since_s = now_s
            confirmed = (now_s - state.low_since_s) >= cfg.blackout_confirm_s
            if not detector_cold:
                confirmed = True  # temperature excursions are unambiguous
            if confirmed:
                cause = cause_hint
                if not sync_locked and detector_cold and not low:
                    cause = "sync-loss"
                state.status = PipelineStatus.DOWN
                state.downtime.append(DowntimeEntry(state.low_since_s, None, cause))
                state.low_since_s = None
                state.median_window.clear()
                directives.append("stop")
        else:
            state.low_since_s = None
        return state, directives

    # status DOWN: wait for the detectors to be cold and counting again
    if detector_cold and singles_hz > 0:
        if state.recovered_at_s is None:
            state.recovered_at_s = now_s
        if now_s - state.recovered_at_s >= cfg.warmup_s:
            state.downtime[-1].end_s = now_s
            state.status = PipelineStatus.RUNNING
            state.restart_count += 1
            state.recovered_at_s = None
            state.recent_restarts.append(now_s)
            state.recent_restarts = [
                t for t in state.recent_restarts
                if now_s - t <= cfg.max_restarts_window_s
            ]
            if len(state.recent_restarts) > cfg.max_restarts:
                state.status = PipelineStatus.HALTED
                directives.append("halt")
            else:
                directives.append("restart")
    else:
        state.recovered_at_s = None
    return state, directives
