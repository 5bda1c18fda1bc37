"""Privacy amplification and finite-key secret-length accounting.

The secret length for a block of n_z key bits with n_x test events at
measured X error rate e_x is

    l = floor( n_z (1 - h2(e_x + nu)) - leak_ec
               - 2 log2(1/(2 eps_pa)) - log2(2/eps_cor) )

with the finite-size deviation

    nu = sqrt( (n_z + n_x)(n_x + 1) / (n_z n_x^2) * ln(2/eps') )

where the secrecy budget eps_sec is split evenly into eps' (parameter
estimation) and eps_pa (hashing).  If e_x + nu reaches 1/2 the block
aborts and yields no key.  Compression itself is Toeplitz hashing over
GF(2), 2-universal, evaluated by block-strided matrix products against a
seed both stations share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import PS_PER_SECOND, loss_to_transmission


def h2(p):
    """Binary entropy, elementwise, 0 at the endpoints."""
    p = np.asarray(p, dtype=float)
    inside = (p > 0) & (p < 1)
    out = np.zeros_like(p)
    q = p[inside]
    out[inside] = -q * np.log2(q) - (1 - q) * np.log2(1 - q)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class FiniteKeyParams:
    n_z: int
    n_x: int
    e_x: float
    leak_ec: float
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15
    f_ec: float = 1.2  # reconciliation efficiency, prediction mode only

    def validate(self) -> None:
        if self.n_z <= 0 or self.n_x <= 0:
            raise ValueError("n_z and n_x must be positive")
        if not 0.0 <= self.e_x <= 0.5:
            raise ValueError("e_x must be in [0, 0.5]")
        if self.leak_ec < 0:
            raise ValueError("leak_ec must be non-negative")
        for eps in (self.eps_sec, self.eps_cor):
            if not 0.0 < eps < 1.0:
                raise ValueError("epsilons must be in (0, 1)")


def finite_size_deviation(n_z: int, n_x: int, eps_prime: float) -> float:
    return math.sqrt(
        (n_z + n_x) * (n_x + 1) / (n_z * n_x**2) * math.log(2.0 / eps_prime)
    )


def secret_length(p: FiniteKeyParams) -> int:
    """Extractable secret bits for one block; 0 means abort."""
    p.validate()
    eps_prime = p.eps_sec / 2.0
    eps_pa = p.eps_sec / 2.0
    nu = finite_size_deviation(p.n_z, p.n_x, eps_prime)
    e_bound = p.e_x + nu
    if e_bound >= 0.5:
        return 0
    raw = (
        p.n_z * (1.0 - h2(e_bound))
        - p.leak_ec
        - 2.0 * math.log2(1.0 / (2.0 * eps_pa))
        - math.log2(2.0 / p.eps_cor)
    )
    return max(0, int(math.floor(raw)))


@dataclass
class SecretKey:
    bits: np.ndarray
    epoch_s: float
    block_ids: tuple
    telemetry_digest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.bits.size


def generate_toeplitz_seed(key_len: int, out_len: int, rng: np.random.Generator) -> np.ndarray:
    if out_len > key_len:
        raise ValueError("out_len must not exceed key length")
    return rng.integers(0, 2, key_len + out_len - 1, dtype=np.uint8)


def toeplitz_hash(key: np.ndarray, out_len: int, seed: np.ndarray) -> np.ndarray:
    """Toeplitz(seed) x key over GF(2).

    T[i, j] = seed[n - 1 + i - j]; seed length must be n + m - 1.  The
    product is evaluated in row blocks against a sliding view of the
    seed, O(n m) bit operations without materialising the matrix.
    """
    key = np.asarray(key, dtype=np.uint8)
    seed = np.asarray(seed, dtype=np.uint8)
    n = key.size
    m = int(out_len)
    if m > n:
        raise ValueError(f"out_len {m} exceeds key length {n}")
    if m == 0:
        return np.zeros(0, dtype=np.uint8)
    if seed.size != n + m - 1:
        raise ValueError(f"seed must have length n + m - 1 = {n + m - 1}, got {seed.size}")
    # row i uses seed[i : i + n] against the reversed key
    key_rev = key[::-1].astype(np.int64)
    windows = np.lib.stride_tricks.sliding_window_view(seed, n)  # (m + ... , n)
    out = np.empty(m, dtype=np.uint8)
    block = 512
    for i0 in range(0, m, block):
        i1 = min(i0 + block, m)
        out[i0:i1] = (windows[i0:i1] @ key_rev) & 1
    return out


def toeplitz_matrix(key_len: int, out_len: int, seed: np.ndarray) -> np.ndarray:
    """Dense Toeplitz matrix (oracle/debug use only)."""
    seed = np.asarray(seed, dtype=np.uint8)
    t = np.empty((out_len, key_len), dtype=np.uint8)
    for i in range(out_len):
        for j in range(key_len):
            t[i, j] = seed[key_len - 1 + i - j]
    return t


# ---------------------------------------------------------------------------
# Analytic secret-key-rate model
# ---------------------------------------------------------------------------


@dataclass
class SkrModelParams:
    """Scenario summary feeding the closed-form SKR prediction."""

    pair_rate_hz: float
    channel_loss_db: float  # quantum-channel loss, both arms combined
    extra_loss_db_per_arm: float = 3.0
    detector_efficiency: float = 0.85
    dark_rate_hz_per_det: float = 100.0
    coincidence_window_ps: float = 120.0
    jitter_sigma_ps: float = 30.0
    visibility: float = 0.997**2
    f_ec: float = 1.2
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15
    # Blocks accumulate to a target size; at high loss the accumulation
    # time is capped by what one unattended session can hold.
    n_z_target: float = 5e4
    block_seconds_cap: float = 4 * 3600.0
    sample_fraction: float = 0.05
    duty_cycle: float = 0.99
    clock_drift_ps_per_s: float = 7.0
    # Cold-start acquisition integrates until the clock drift smears the
    # peak by its own jitter width; the detection threshold carries a
    # look-elsewhere correction for the wide acquisition span.
    sync_acquisition_threshold_sigma: float = 7.0
    cascade_throughput_bps: float | None = None
    loss_split: float = 0.5
    slot_transmission_a: float = 1.0  # wavelength-plan multiplier, arm A
    slot_transmission_b: float = 1.0


@dataclass
class LinkRates:
    singles_a_hz: float
    singles_b_hz: float
    true_central_hz: float  # matched-path coincidences, all basis combos
    sifted_hz: float  # Z-Z events inside the window (key material)
    x_rate_hz: float
    qber_z: float
    qber_x: float
    window_efficiency: float


def link_budget(p: SkrModelParams) -> LinkRates:
    eta_a = (
        loss_to_transmission(p.channel_loss_db * p.loss_split + p.extra_loss_db_per_arm)
        * p.detector_efficiency
        * p.slot_transmission_a
    )
    eta_b = (
        loss_to_transmission(p.channel_loss_db * (1 - p.loss_split) + p.extra_loss_db_per_arm)
        * p.detector_efficiency
        * p.slot_transmission_b
    )
    r = p.pair_rate_hz
    w_s = p.coincidence_window_ps / PS_PER_SECOND
    sigma_delta = math.sqrt(2.0) * p.jitter_sigma_ps
    eta_w = math.erf((p.coincidence_window_ps / 2.0) / (math.sqrt(2.0) * sigma_delta))
    dark = p.dark_rate_hz_per_det

    singles_a = r * eta_a + 4 * dark
    singles_b = r * eta_b + 4 * dark
    s_az = r * eta_a / 2 + 2 * dark
    s_bz = r * eta_b / 2 + 2 * dark

    true_central = r * eta_a * eta_b / 2 * eta_w
    true_zz = true_central / 4
    true_xx = true_central / 4
    acc_zz = s_az * s_bz * w_s
    acc_xx = acc_zz  # same structure in the X arm

    qber_z = 0.5 * acc_zz / (true_zz + acc_zz) if true_zz + acc_zz > 0 else 0.5
    qx_num = (1 - p.visibility) / 2 * true_xx + 0.5 * acc_xx
    qber_x = qx_num / (true_xx + acc_xx) if true_xx + acc_xx > 0 else 0.5

    return LinkRates(
        singles_a_hz=singles_a,
        singles_b_hz=singles_b,
        true_central_hz=true_central,
        sifted_hz=true_zz + acc_zz,
        x_rate_hz=true_xx + acc_xx,
        qber_z=qber_z,
        qber_x=qber_x,
        window_efficiency=eta_w,
    )


def acquisition_integration_s(p: SkrModelParams) -> float:
    """Longest useful cold-acquisition integration: beyond this the
    uncorrected clock drift smears the peak past its own jitter width."""
    sigma_delta = math.sqrt(2.0) * p.jitter_sigma_ps
    if p.clock_drift_ps_per_s <= 0:
        return 60.0
    return sigma_delta / p.clock_drift_ps_per_s


def sync_significance(p: SkrModelParams, rates: LinkRates) -> float:
    """Expected acquisition significance of the coincidence peak.

    Cold acquisition must find the peak with no frequency correction, so
    the integration is smear-limited; detection is matched over roughly
    +/- 2 combined-jitter sigmas against the accidental floor.  The
    threshold crossing of this quantity is the loss ceiling of the
    synchronization protocol; it rises with integration time and with
    clock stability.
    """
    t_int = acquisition_integration_s(p)
    peak = rates.true_central_hz * t_int * 0.94  # fraction inside the window
    sigma_delta = math.sqrt(2.0) * p.jitter_sigma_ps
    w_s = 4.0 * sigma_delta / PS_PER_SECOND
    floor = rates.singles_a_hz * rates.singles_b_hz * w_s * t_int
    return peak / math.sqrt(max(floor + peak, 1.0))


@dataclass
class SkrPrediction:
    skr_bps: float
    qber_z: float
    qber_x: float
    sifted_hz: float
    secret_fraction: float
    sync_significance: float
    sync_locked: bool
    cascade_limited: bool
    rates: LinkRates


def skr_model(p: SkrModelParams) -> SkrPrediction:
    """Closed-form secret key rate for one operating point.

    Combines the coincidence budget, double-pair QBERz, visibility QBERx,
    finite-key extraction per block, the synchronization feasibility
    ceiling and the reconciliation throughput cap.
    """
    rates = link_budget(p)
    sig = sync_significance(p, rates)
    locked = sig >= p.sync_acquisition_threshold_sigma
    if not locked or rates.sifted_hz <= 0:
        return SkrPrediction(0.0, rates.qber_z, rates.qber_x, rates.sifted_hz,
                             0.0, sig, locked, False, rates)

    sifted = rates.sifted_hz
    cascade_limited = False
    if p.cascade_throughput_bps is not None and sifted > p.cascade_throughput_bps:
        sifted = p.cascade_throughput_bps
        cascade_limited = True

    key_rate = sifted * (1.0 - p.sample_fraction)
    block_s = min(p.block_seconds_cap, p.n_z_target / key_rate) if key_rate > 0 else 0.0
    n_z = key_rate * block_s
    n_x = rates.x_rate_hz * block_s
    if n_z < 1 or n_x < 1:
        return SkrPrediction(0.0, rates.qber_z, rates.qber_x, rates.sifted_hz,
                             0.0, sig, locked, cascade_limited, rates)
    leak = p.f_ec * h2(rates.qber_z) * n_z
    length = secret_length(
        FiniteKeyParams(
            n_z=int(n_z),
            n_x=int(n_x),
            e_x=min(rates.qber_x, 0.5),
            leak_ec=leak,
            eps_sec=p.eps_sec,
            eps_cor=p.eps_cor,
        )
    )
    skr = length / block_s * p.duty_cycle
    fraction = length / n_z if n_z else 0.0
    return SkrPrediction(skr, rates.qber_z, rates.qber_x, rates.sifted_hz,
                         fraction, sig, locked, cascade_limited, rates)


def pair_rate_for_qberz(
    p: SkrModelParams,
    setpoint: float = 0.043,
    rate_bounds_hz: tuple[float, float] = (1e4, 1e11),
) -> float:
    """Source rate at which the double-pair error rate sits on the
    controller set-point.  This is the operating point the pump loop
    holds in the deployed system, independent of channel loss."""
    from dataclasses import replace
    from scipy.optimize import brentq

    def err(log_r):
        rates = link_budget(replace(p, pair_rate_hz=10.0**log_r))
        return rates.qber_z - setpoint

    lo, hi = math.log10(rate_bounds_hz[0]), math.log10(rate_bounds_hz[1])
    if err(hi) < 0:
        raise ValueError("set-point unreachable within rate bounds")
    if err(lo) > 0:
        # dark counts keep the error rate above the set-point at any
        # pump level (deep-loss regime); hold the error-minimising rate
        grid = np.logspace(lo, hi, 200)
        qs = [link_budget(replace(p, pair_rate_hz=float(r))).qber_z for r in grid]
        return float(grid[int(np.argmin(qs))])
    return 10.0 ** brentq(err, lo, hi, xtol=1e-10)


def optimal_pair_rate(
    p: SkrModelParams,
    rate_bounds_hz: tuple[float, float] = (1e6, 1e10),
    grid: int = 60,
) -> tuple[float, SkrPrediction]:
    """Sweet-spot source rate for one loss point (golden-ratio refined)."""
    from dataclasses import replace

    lo, hi = (math.log10(rate_bounds_hz[0]), math.log10(rate_bounds_hz[1]))
    grid_rates = np.logspace(lo, hi, grid)
    best_rate, best = None, None
    for r in grid_rates:
        pred = skr_model(replace(p, pair_rate_hz=float(r)))
        if best is None or pred.skr_bps > best.skr_bps:
            best, best_rate = pred, float(r)
    # local refinement around the best grid point
    span = (hi - lo) / (grid - 1)
    fine = np.logspace(math.log10(best_rate) - span, math.log10(best_rate) + span, 25)
    for r in fine:
        pred = skr_model(replace(p, pair_rate_hz=float(r)))
        if pred.skr_bps > best.skr_bps:
            best, best_rate = pred, float(r)
    return best_rate, best
