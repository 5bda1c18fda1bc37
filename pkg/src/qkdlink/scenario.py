"""Link scenario configuration: physical models and their serialization.

Field names carry explicit units (`_db`, `_ps`, `_hz`, `_h`, ...) so that
scenario files remain self-describing.  A scenario plus a seed fully
determines a simulation run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .core import ConfigError, loss_to_transmission


@dataclass
class DetectorModel:
    """SNSPD-style detector: efficiency, jitter, darks, dead time, cycles."""

    efficiency: float = 0.85
    jitter_sigma_ps: float = 30.0
    dark_rate_hz: float = 100.0
    dead_time_ps: float = 25_000.0
    polarization_penalty_db: float = 6.0
    evaporation_period_h: float = 48.0
    evaporation_duration_h: float = 1.0
    # Fraction of the nominal thermal cycle during which the detector is
    # actually dark; detection resumes as soon as the temperature is back
    # under the operating threshold, before the full cycle elapses.
    evaporation_blackout_fraction: float = 0.55

    def validate(self) -> None:
        if not 0.0 < self.efficiency <= 1.0:
            raise ConfigError(f"detector efficiency {self.efficiency} not in (0, 1]")
        if self.jitter_sigma_ps < 0 or self.dark_rate_hz < 0 or self.dead_time_ps < 0:
            raise ConfigError("detector jitter/dark/dead-time must be non-negative")
        if not 0.0 < self.evaporation_blackout_fraction <= 1.0:
            raise ConfigError("evaporation blackout fraction must be in (0, 1]")


@dataclass
class ClockModel:
    """Local clock error model: offset, linear drift, random walk, steps."""

    initial_offset_ps: float = 0.0
    frequency_error_ps_per_s: float = 7.0
    random_walk_ps_per_rts: float = 1.0  # ps per sqrt(second)
    # (time_s, offset_step_ps, frequency_step_ps_per_s) perturbations
    perturbations_s_ps_pps: list = field(default_factory=list)

    def validate(self) -> None:
        for p in self.perturbations_s_pps_iter():
            if p[0] < 0:
                raise ConfigError("perturbation times must be non-negative")

    def perturbations_s_pps_iter(self):
        for p in self.perturbations_s_ps_pps:
            t, off, freq = (tuple(p) + (0.0, 0.0))[:3]
            yield float(t), float(off), float(freq)


@dataclass
class PhaseModel:
    """Unbalanced-interferometer phase: slow drift plus restart transients."""

    initial_phase_rad: float = 0.0
    drift_rad_per_s: float = 6.5e-7
    visibility: float = 0.997
    fsr_ghz: float = 2.5131
    # A restart leaves the piezo at an uncontrolled point; the loop has to
    # re-find the interference minimum afterwards.
    restart_kick: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.visibility <= 1.0:
            raise ConfigError(f"visibility {self.visibility} not in [0, 1]")


@dataclass
class PolarizationModel:
    """Slow fiber polarization rotation degrading detector efficiency."""

    characteristic_time_h: float = 10.0
    enabled: bool = False
    initial_mismatch_rad: float = 0.0

    def validate(self) -> None:
        if self.characteristic_time_h <= 0:
            raise ConfigError("polarization characteristic time must be positive")


@dataclass
class LinkScenario:
    """Full physical configuration of one entangled link."""

    pair_rate_hz: float = 1.0e5
    spectrum_fwhm_nm: float = 80.0
    fiber_loss_db_a: float = 0.0
    fiber_loss_db_b: float = 0.0
    extra_loss_db_a: float = 0.0
    extra_loss_db_b: float = 0.0
    coincidence_window_ps: float = 120.0
    z_delay_ps: float = 400.0
    seed: int = 1
    detector_a: DetectorModel = field(default_factory=DetectorModel)
    detector_b: DetectorModel = field(default_factory=DetectorModel)
    clock_a: ClockModel = field(default_factory=lambda: ClockModel(frequency_error_ps_per_s=0.0))
    clock_b: ClockModel = field(default_factory=ClockModel)
    phase_a: PhaseModel = field(default_factory=PhaseModel)
    phase_b: PhaseModel = field(default_factory=lambda: PhaseModel(drift_rad_per_s=4.7e-7))
    polarization_a: PolarizationModel = field(default_factory=PolarizationModel)
    polarization_b: PolarizationModel = field(default_factory=PolarizationModel)

    def validate(self) -> None:
        if self.pair_rate_hz <= 0:
            raise ConfigError("pair_rate_hz must be positive")
        if self.coincidence_window_ps <= 0:
            raise ConfigError("coincidence_window_ps must be positive")
        if self.z_delay_ps <= self.coincidence_window_ps:
            raise ConfigError(
                "z_delay_ps must exceed the coincidence window so that "
                "cross-term peaks fall outside it"
            )
        for loss in (
            self.fiber_loss_db_a,
            self.fiber_loss_db_b,
            self.extra_loss_db_a,
            self.extra_loss_db_b,
        ):
            if loss < 0:
                raise ConfigError("losses must be non-negative")
        self.detector_a.validate()
        self.detector_b.validate()
        self.phase_a.validate()
        self.phase_b.validate()
        self.polarization_a.validate()
        self.polarization_b.validate()

    # Channel transmission excludes detector efficiency and polarization,
    # which are applied per event at detection time.
    def channel_transmission_a(self) -> float:
        return loss_to_transmission(self.fiber_loss_db_a + self.extra_loss_db_a)

    def channel_transmission_b(self) -> float:
        return loss_to_transmission(self.fiber_loss_db_b + self.extra_loss_db_b)

    def joint_visibility(self) -> float:
        return self.phase_a.visibility * self.phase_b.visibility

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(asdict(self), indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinkScenario":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid scenario JSON: {exc}") from exc
        return cls.from_dict(payload)

    @classmethod
    def from_dict(cls, payload: dict) -> "LinkScenario":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in payload.items():
            if key not in known:
                raise ConfigError(f"unknown scenario field: {key}")
            kwargs[key] = value
        for name, sub in (
            ("detector_a", DetectorModel),
            ("detector_b", DetectorModel),
            ("clock_a", ClockModel),
            ("clock_b", ClockModel),
            ("phase_a", PhaseModel),
            ("phase_b", PhaseModel),
            ("polarization_a", PolarizationModel),
            ("polarization_b", PolarizationModel),
        ):
            if name in kwargs and isinstance(kwargs[name], dict):
                kwargs[name] = _sub_from_dict(sub, kwargs[name], name)
        scenario = cls(**kwargs)
        scenario.validate()
        return scenario


def _sub_from_dict(cls, payload: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(unknown)}")
    return cls(**payload)


def load_scenario(path) -> LinkScenario:
    with open(path, "r", encoding="utf-8") as fh:
        return LinkScenario.from_json(fh.read())


def save_scenario(path, scenario: LinkScenario) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scenario.to_json() + "\n")
