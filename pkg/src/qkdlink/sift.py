"""Coincidence pairing, basis sifting and error-rate estimation.

Bob runs the matcher on his disciplined timestamps against Alice's
announced ones.  Matched-peak Z-Z events become raw key bits
(short -> 0, long -> 1); X-X events feed the QBERx statistics; cross
terms at +/- the analyzer delay and mixed-basis events are thrown away
by the window alone.  A disclosed random sample of key positions gives
the QBERz estimate and is then excluded from the key material.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import Basis, ANALYZER_TABLE

# channel -> (is_z, outcome_bit) lookup arrays for vectorised sifting
_CH_BASIS = np.array([int(ANALYZER_TABLE[c][0]) for c in range(4)], dtype=np.uint8)
_CH_OUT = np.array([ANALYZER_TABLE[c][1] for c in range(4)], dtype=np.uint8)

DEFAULT_SAMPLE_FRACTION = 0.05
DEFAULT_MIN_BLOCK = 4096


@dataclass
class CoincidenceBatch:
    """Result of matching one pair of tag batches (struct of arrays)."""

    idx_a: np.ndarray  # indices into Alice's batch
    idx_b: np.ndarray
    delta_ps: np.ndarray  # t_b(disciplined) - t_a
    basis_a: np.ndarray
    basis_b: np.ndarray
    out_a: np.ndarray
    out_b: np.ndarray

    def __len__(self) -> int:
        return self.idx_a.size

    @property
    def zz_mask(self) -> np.ndarray:
        return (self.basis_a == int(Basis.Z)) & (self.basis_b == int(Basis.Z))

    @property
    def xx_mask(self) -> np.ndarray:
        return (self.basis_a == int(Basis.X)) & (self.basis_b == int(Basis.X))


def match_coincidences(
    t_a: np.ndarray,
    ch_a: np.ndarray,
    t_b: np.ndarray,
    ch_b: np.ndarray,
    window_ps: float,
) -> CoincidenceBatch:
    """Greedy nearest-neighbour pairing within +/- window/2.

    Inputs must be time-sorted; `t_b` is expected to be already
    disciplined.  Each tag is used at most once; when two Alice tags
    contend for one Bob tag the earlier Alice tag wins (first-come).  At
    picosecond windows the contention rate is negligible, so a
    vectorised nearest-candidate pass with duplicate resolution is an
    exact implementation of the greedy matcher for all practical inputs.
    """
    half = window_ps / 2.0
    n_a = t_a.size
    if n_a == 0 or t_b.size == 0:
        e = np.empty(0, np.int64)
        b = np.empty(0, np.uint8)
        return CoincidenceBatch(e, e.copy(), e.copy(), b, b.copy(), b.copy(), b.copy())

    pos = np.searchsorted(t_b, t_a)
    left = np.clip(pos - 1, 0, t_b.size - 1)
    right = np.clip(pos, 0, t_b.size - 1)
    d_left = np.abs(t_b[left] - t_a)
    d_right = np.abs(t_b[right] - t_a)
    cand = np.where(d_right < d_left, right, left)
    delta = t_b[cand] - t_a
    ok = np.abs(delta) <= half

    idx_a = np.flatnonzero(ok)
    cand = cand[ok]
    delta = delta[ok]
    # Resolve multiple Alice tags matched to one Bob tag: keep the first.
    keep_first = np.ones(cand.size, dtype=bool)
    if cand.size > 1:
        keep_first[1:] = np.diff(cand) != 0
    idx_a = idx_a[keep_first]
    idx_b = cand[keep_first]
    delta = delta[keep_first]

    return CoincidenceBatch(
        idx_a=idx_a,
        idx_b=idx_b,
        delta_ps=delta,
        basis_a=_CH_BASIS[ch_a[idx_a]],
        basis_b=_CH_BASIS[ch_b[idx_b]],
        out_a=_CH_OUT[ch_a[idx_a]],
        out_b=_CH_OUT[ch_b[idx_b]],
    )


@dataclass
class SiftedBlock:
    """Key material plus error statistics for one sifting block."""

    block_id: int
    bits_a: np.ndarray  # only populated on the station that owns them
    bits_b: np.ndarray
    n_x_agree: int
    n_x_disagree: int
    z_error_estimate: float
    z_sample_size: int
    z_sample_errors: int
    epoch_start_s: float = 0.0
    epoch_end_s: float = 0.0

    @property
    def qber_x(self) -> float:
        n = self.n_x_agree + self.n_x_disagree
        if n == 0:
            return float("nan")
        q = self.n_x_disagree / n
        return min(q, 1.0 - q)  # relabeling symmetry

    def __len__(self) -> int:
        return self.bits_b.size


class SiftAccumulator:
    """Accumulates matched coincidences until a block can be emitted.

    The accumulator is Bob-side state; Alice reconstructs her half of
    each block from the matched-index report Bob sends back.
    """

    def __init__(
        self,
        min_block: int = DEFAULT_MIN_BLOCK,
        sample_fraction: float = DEFAULT_SAMPLE_FRACTION,
    ):
        if not 0.0 <= sample_fraction < 1.0:
            raise ValueError("sample fraction must be in [0, 1)")
        self.min_block = int(min_block)
        self.sample_fraction = float(sample_fraction)
        self._bits_a: list[np.ndarray] = []
        self._bits_b: list[np.ndarray] = []
        self._x_agree = 0
        self._x_disagree = 0
        self._block_counter = 0
        self._epoch_start = None

    def pending_bits(self) -> int:
        return int(sum(b.size for b in self._bits_b))

    def add(self, batch: CoincidenceBatch, epoch_s: float) -> None:
        zz = batch.zz_mask
        if self._epoch_start is None:
            self._epoch_start = epoch_s
        self._bits_a.append(batch.out_a[zz].copy())
        self._bits_b.append(batch.out_b[zz].copy())
        xx = batch.xx_mask
        agree = int((batch.out_a[xx] == batch.out_b[xx]).sum())
        self._x_disagree += int(xx.sum()) - agree
        self._x_agree += agree

    def x_stats(self) -> tuple[int, int]:
        return self._x_agree, self._x_disagree

    def try_emit(self, rng: np.random.Generator, epoch_s: float) -> SiftedBlock | None:
        """Emit a block once enough Z-Z events have accumulated."""
        if self.pending_bits() < self.min_block:
            return None
        bits_a = np.concatenate(self._bits_a)
        bits_b = np.concatenate(self._bits_b)
        n = bits_a.size
        n_sample = int(round(n * self.sample_fraction))
        sample_idx = rng.choice(n, size=n_sample, replace=False) if n_sample else np.empty(0, np.int64)
        sample_mask = np.zeros(n, dtype=bool)
        sample_mask[sample_idx] = True
        errors = int((bits_a[sample_mask] != bits_b[sample_mask]).sum())
        estimate = errors / n_sample if n_sample else float("nan")

        block = SiftedBlock(
            block_id=self._block_counter,
            bits_a=bits_a[~sample_mask],
            bits_b=bits_b[~sample_mask],
            n_x_agree=self._x_agree,
            n_x_disagree=self._x_disagree,
            z_error_estimate=estimate,
            z_sample_size=n_sample,
            z_sample_errors=errors,
            epoch_start_s=self._epoch_start if self._epoch_start is not None else epoch_s,
            epoch_end_s=epoch_s,
        )
        self._block_counter += 1
        self._bits_a, self._bits_b = [], []
        self._x_agree = self._x_disagree = 0
        self._epoch_start = None
        return block


def qber_confidence(n: int, k: int, confidence: float = 0.95) -> tuple[float, tuple[float, float]]:
    """Clopper-Pearson interval for an error fraction.

    Returns (point estimate, (lower, upper)).  Used by the controllers to
    decide whether an estimate is tight enough to act on, which is what
    makes their integration windows stretch automatically with loss.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= k <= n:
        raise ValueError("k must be in [0, n]")
    alpha = 1.0 - confidence
    lower = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2.0, k, n - k + 1))
    upper = 1.0 if k == n else float(stats.beta.ppf(1.0 - alpha / 2.0, k + 1, n - k))
    return k / n, (lower, upper)
