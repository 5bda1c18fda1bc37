"""Coincidence-histogram clock synchronization.

The Alice-Bob clock offset is tracked from nothing but the entangled
coincidence peak: a cross-correlation histogram of detection times is
built every integration period, the peak position is refined to a few
picoseconds, and an affine discipline (offset plus frequency correction)
is steered from the peak displacement.  No detector-channel or outcome
information ever enters this module: the functions accept bare timestamp
arrays, so key material is untouchable by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .core import PS_PER_SECOND, SyncLossError


@dataclass
class SyncConfig:
    bin_width_ps: float = 4.0
    half_span_ps: float = 2_000.0
    integration_time_s: float = 0.5
    threshold_sigma: float = 5.0
    freq_alpha: float = 0.1
    max_failures: int = 4
    acquisition_growth: float = 4.0
    max_half_span_ps: float = 1_000_000.0
    # Centroid window, in bins, for refining the peak position.  It should
    # cover roughly two combined-jitter sigmas on each side; much narrower
    # and the estimate degenerates to the argmax-bin quantisation.
    centroid_halfwidth_bins: int = 20
    # Longest histogram integration the clock pair can afford: accumulated
    # drift over one integration must stay well inside the coincidence
    # window, so this is bounded by window / frequency-stability.
    max_integration_s: float = 17.0


@dataclass
class CoincidenceHistogram:
    bin_width_ps: float
    half_span_ps: float
    counts: np.ndarray
    integration_time_s: float
    n_a: int
    n_b: int

    @property
    def bin_centers_ps(self) -> np.ndarray:
        n = self.counts.size
        return (np.arange(n) + 0.5) * self.bin_width_ps - self.half_span_ps

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class PeakEstimate:
    position_ps: float
    significance: float
    valid: bool
    counts_in_peak: float = 0.0
    half_span_ps: float = 0.0


def _pair_deltas(t_a: np.ndarray, t_b: np.ndarray, half_span_ps: float) -> np.ndarray:
    """All t_b - t_a differences within +/- half_span, via a sorted sweep."""
    lo = np.searchsorted(t_b, t_a - half_span_ps, side="left")
    hi = np.searchsorted(t_b, t_a + half_span_ps, side="right")
    reps = hi - lo
    total = int(reps.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    a_idx = np.repeat(np.arange(t_a.size), reps)
    starts = np.repeat(np.cumsum(reps) - reps, reps)
    b_idx = np.repeat(lo, reps) + (np.arange(total) - starts)
    return t_b[b_idx] - t_a[a_idx]


def build_histogram(
    tags_a: np.ndarray,
    tags_b: np.ndarray,
    cfg: SyncConfig | None = None,
    half_span_ps: float | None = None,
    integration_time_s: float | None = None,
) -> CoincidenceHistogram:
    """Histogram of timestamp differences t_b - t_a.

    Both inputs must be time-sorted int64 picosecond arrays covering the
    same wall-time interval.
    """
    cfg = cfg or SyncConfig()
    half_span = float(half_span_ps if half_span_ps is not None else cfg.half_span_ps)
    bin_width = float(cfg.bin_width_ps)
    n_bins = int(round(2.0 * half_span / bin_width))
    if n_bins <= 0 or abs(n_bins * bin_width - 2.0 * half_span) > 1e-9:
        raise ValueError("span must be a positive integer multiple of bin width")
    t_a = np.asarray(tags_a, dtype=np.int64)
    t_b = np.asarray(tags_b, dtype=np.int64)
    for name, t in (("tags_a", t_a), ("tags_b", t_b)):
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ValueError(f"{name} must be time-sorted")
    deltas = _pair_deltas(t_a, t_b, half_span)
    idx = np.floor((deltas + half_span) / bin_width).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n_bins)]
    counts = np.bincount(idx, minlength=n_bins)
    if integration_time_s is None:
        integration_time_s = cfg.integration_time_s
    return CoincidenceHistogram(
        bin_width_ps=bin_width,
        half_span_ps=half_span,
        counts=counts,
        integration_time_s=float(integration_time_s),
        n_a=t_a.size,
        n_b=t_b.size,
    )


def find_peak(
    h: CoincidenceHistogram,
    threshold_sigma: float = 5.0,
    centroid_halfwidth_bins: int = 20,
) -> PeakEstimate:
    """Locate and refine the coincidence peak.

    The maximum bin is refined by a floor-subtracted centroid over
    +/- `centroid_halfwidth_bins` bins; significance is the excess of the
    peak bin over the accidental floor in units of the floor scatter.
    Floor statistics use median/MAD so the cross-term side peaks at
    +/- the analyzer delay cannot inflate the noise estimate.  An
    all-noise histogram comes back with valid=False rather than raising.
    """
    counts = h.counts.astype(float)
    if counts.size == 0 or counts.sum() == 0:
        return PeakEstimate(0.0, 0.0, False, 0.0, h.half_span_ps)
    k = int(np.argmax(counts))
    guard = max(centroid_halfwidth_bins * 2 + 2, 8)
    floor_mask = np.ones(counts.size, dtype=bool)
    floor_mask[max(0, k - guard) : k + guard + 1] = False
    floor = counts[floor_mask]
    if floor.size >= 8:
        floor_level = float(np.median(floor))
        mad = float(np.median(np.abs(floor - floor_level)))
    else:
        floor_level, mad = 0.0, 0.0

    # Iterated centroid: re-centering the window on the running estimate
    # removes the argmax-bin quantisation jitter (the window would
    # otherwise drag the truncated mean around with it).
    centers = h.bin_centers_ps
    excess = np.clip(counts - floor_level, 0.0, None)
    halfwidth_ps = centroid_halfwidth_bins * h.bin_width_ps
    center = float(centers[k])
    weight = 0.0
    n_win = 1
    for _ in range(4):
        sel = np.abs(centers - center) <= halfwidth_ps
        weight = excess[sel].sum()
        n_win = int(sel.sum())
        if weight <= 0:
            return PeakEstimate(0.0, 0.0, False, 0.0, h.half_span_ps)
        new_center = float(np.dot(excess[sel], centers[sel]) / weight)
        if abs(new_center - center) < 1e-3:
            center = new_center
            break
        center = new_center

    # Matched-window significance: integrated excess over the floor
    # fluctuation expected in a window this size.
    sel = np.abs(centers - center) <= halfwidth_ps
    window_total = counts[sel].sum()
    excess_total = window_total - floor_level * n_win
    noise = np.sqrt(max(floor_level * n_win, 1.0))
    significance = excess_total / noise
    valid = significance >= threshold_sigma
    return PeakEstimate(center, float(significance), bool(valid), float(weight), h.half_span_ps)


@dataclass
class ClockDiscipline:
    """Affine correction applied to Bob's raw timestamps.

    corrected(t) = t - offset_ps - freq_ps_per_s * (t - ref_ps) / 1 s

    Compositions of such maps are again affine, so repeated updates keep a
    single canonical state.
    """

    offset_ps: float = 0.0
    freq_ps_per_s: float = 0.0
    ref_ps: int = 0
    locked: bool = False
    consecutive_failures: int = 0
    updates: int = 0
    residual_history_ps: list = field(default_factory=list)

    def apply(self, t_b: np.ndarray) -> np.ndarray:
        t = np.asarray(t_b, dtype=np.int64)
        correction = self.offset_ps + self.freq_ps_per_s * (
            (t - self.ref_ps) / PS_PER_SECOND
        )
        return t - np.rint(correction).astype(np.int64)

    def checkpoint(self) -> dict:
        state = asdict(self)
        state["residual_history_ps"] = state["residual_history_ps"][-64:]
        return state

    @classmethod
    def from_checkpoint(cls, state: dict) -> "ClockDiscipline":
        return cls(**state)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.checkpoint(), fh)

    @classmethod
    def load(cls, path) -> "ClockDiscipline":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_checkpoint(json.load(fh))


def update_discipline(
    d: ClockDiscipline,
    previous: PeakEstimate | None,
    current: PeakEstimate,
    dt_s: float,
    cfg: SyncConfig | None = None,
    now_ps: int | None = None,
) -> ClockDiscipline:
    """Steer the discipline from the latest peak measurement.

    The peak position of a histogram built on *corrected* timestamps is
    the residual drift accumulated since the previous update: the offset
    correction absorbs it immediately, and an exponentially weighted
    estimate of residual/dt trims the frequency correction so the
    steady-state residual shrinks toward the measurement noise.

    Before the frequency term changes, the affine map is re-anchored at
    `now_ps` (the end of the current integration window): the frequency
    correction accumulated so far is folded into the offset so that a
    frequency tweak never retroactively shifts the present-epoch
    correction.
    """
    cfg = cfg or SyncConfig()
    if dt_s <= 0:
        raise ValueError("dt must be positive")
    if not current.valid or (previous is not None and not previous.valid):
        d.consecutive_failures += 1
        if d.consecutive_failures >= cfg.max_failures:
            d.locked = False
        return d
    d.consecutive_failures = 0
    if now_ps is not None and now_ps != d.ref_ps:
        d.offset_ps += d.freq_ps_per_s * (now_ps - d.ref_ps) / PS_PER_SECOND
        d.ref_ps = int(now_ps)
    residual = current.position_ps
    d.offset_ps += residual
    if d.updates > 0:
        # the very first locked residual is the leftover acquisition
        # offset, not accumulated drift: it must not kick the frequency
        d.freq_ps_per_s += cfg.freq_alpha * residual / dt_s
    d.locked = True
    d.updates += 1
    d.residual_history_ps.append(float(residual))
    return d


def acquisition_search(
    tags_a: np.ndarray,
    tags_b: np.ndarray,
    cfg: SyncConfig | None = None,
) -> tuple[PeakEstimate, float]:
    """Find the coincidence peak with a geometrically widened search span.

    Starts at the configured span and multiplies it by the growth factor
    until a valid peak shows up or the maximum span is exhausted, in which
    case a SyncLossError escalates to the watchdog.
    """
    cfg = cfg or SyncConfig()
    half_span = cfg.half_span_ps
    attempts = 0
    while half_span <= cfg.max_half_span_ps:
        h = build_histogram(tags_a, tags_b, cfg, half_span_ps=half_span)
        est = find_peak(h, cfg.threshold_sigma)
        if est.valid:
            return est, half_span
        half_span *= cfg.acquisition_growth
        attempts += 1
    raise SyncLossError(
        f"no coincidence peak up to +/-{cfg.max_half_span_ps} ps after {attempts} attempts"
    )


def drift_budget_ok(frequency_error_ps_per_s: float, integration_time_s: float,
                    window_ps: float) -> bool:
    """Whether accumulated drift per integration stays inside the window."""
    return abs(frequency_error_ps_per_s) * integration_time_s < window_ps
