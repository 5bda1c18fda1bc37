"""Domain types shared by every stage of the QKD link pipeline.

Time is kept as integer picoseconds throughout (64-bit), which is finer
than the 4 ps histogram resolution used downstream and avoids fractional
timestamp arithmetic.  Detection events are held in struct-of-arrays
batches (`TagBatch`) so that the simulator and the post-processing stages
can stay vectorised.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

PS_PER_SECOND = 1_000_000_000_000
SPEED_OF_LIGHT_NM_GHZ = 299_792_458.0  # c expressed in nm * GHz

TAG_FILE_MAGIC = b"QKDLTAG1"
TAG_FILE_VERSION = 1
TAG_RECORD_SIZE = 16
TAG_HEADER_SIZE = 32

# On-disk record layout: u64 timestamp_ps, u16 channel, u8 station,
# u8 flags, 4 bytes reserved (little endian, 16 bytes total).
TAG_DTYPE = np.dtype(
    [
        ("t", "<u8"),
        ("channel", "<u2"),
        ("station", "u1"),
        ("flags", "u1"),
        ("reserved", "<u4"),
    ]
)


class QkdLinkError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(QkdLinkError):
    """A scenario or experiment configuration is invalid."""


class SyncLossError(QkdLinkError):
    """Clock synchronization could not be acquired or was lost."""


class ChannelClosedError(QkdLinkError):
    """The classical channel closed and could not be resumed."""


class Station(IntEnum):
    ALICE = 0
    BOB = 1


class Basis(IntEnum):
    Z = 0  # time basis, generates key bits
    X = 1  # energy basis, generates only error statistics


# Per-station analyzer table: detector channel id -> (basis, outcome).
# Z outcomes: 0 = short path (key bit 0), 1 = long path (key bit 1).
# X outcomes: 0 = "+" port, 1 = "-" port.
CHANNEL_Z_SHORT = 0
CHANNEL_Z_LONG = 1
CHANNEL_X_PLUS = 2
CHANNEL_X_MINUS = 3
NUM_CHANNELS = 4

ANALYZER_TABLE: dict[int, tuple[Basis, int]] = {
    CHANNEL_Z_SHORT: (Basis.Z, 0),
    CHANNEL_Z_LONG: (Basis.Z, 1),
    CHANNEL_X_PLUS: (Basis.X, 0),
    CHANNEL_X_MINUS: (Basis.X, 1),
}


@dataclass(frozen=True)
class TimeTag:
    """A single detection: picosecond timestamp, detector channel, station."""

    t: int
    channel: int
    station: Station

    def basis_outcome(self) -> tuple[Basis, int]:
        return ANALYZER_TABLE[self.channel]


class TagBatch:
    """A time-sorted batch of detections for one station.

    `t` is int64 picoseconds, `channel` uint16.  Batches are immutable
    after construction and safe to hand between pipeline stages.
    """

    __slots__ = ("station", "t", "channel")

    def __init__(self, station: Station, t: np.ndarray, channel: np.ndarray):
        t = np.asarray(t, dtype=np.int64)
        channel = np.asarray(channel, dtype=np.uint16)
        if t.shape != channel.shape or t.ndim != 1:
            raise ValueError("t and channel must be 1-d arrays of equal length")
        if t.size and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t = t[order]
            channel = channel[order]
        self.station = Station(station)
        self.t = t
        self.channel = channel
        self.t.setflags(write=False)
        self.channel.setflags(write=False)

    def __len__(self) -> int:
        return self.t.size

    @classmethod
    def empty(cls, station: Station) -> "TagBatch":
        return cls(station, np.empty(0, np.int64), np.empty(0, np.uint16))

    @classmethod
    def concat(cls, batches: list["TagBatch"]) -> "TagBatch":
        if not batches:
            raise ValueError("need at least one batch")
        station = batches[0].station
        t = np.concatenate([b.t for b in batches])
        ch = np.concatenate([b.channel for b in batches])
        return cls(station, t, ch)

    def to_records(self) -> np.ndarray:
        rec = np.zeros(len(self), dtype=TAG_DTYPE)
        rec["t"] = self.t.astype(np.uint64)
        rec["channel"] = self.channel
        rec["station"] = int(self.station)
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray, station: Station | None = None) -> "TagBatch":
        if station is None:
            if rec.size == 0:
                raise ValueError("cannot infer station from empty record array")
            station = Station(int(rec["station"][0]))
        return cls(station, rec["t"].astype(np.int64), rec["channel"])


def _tag_header(station: Station) -> bytes:
    head = struct.pack(
        "<8sHBB", TAG_FILE_MAGIC, TAG_FILE_VERSION, int(station), 0
    )
    return head + b"\x00" * (TAG_HEADER_SIZE - len(head))


def write_tag_file(path, batch: TagBatch, append: bool = False) -> None:
    """Write (or append to) a binary time-tag file.

    Files carry a 32-byte magic+version header followed by an append-only
    sequence of 16-byte records.
    """
    mode = "ab" if append else "wb"
    with open(path, mode) as fh:
        if fh.tell() == 0:
            fh.write(_tag_header(batch.station))
        fh.write(batch.to_records().tobytes())


def read_tag_file(path) -> TagBatch:
    with open(path, "rb") as fh:
        head = fh.read(TAG_HEADER_SIZE)
        if len(head) < TAG_HEADER_SIZE or head[:8] != TAG_FILE_MAGIC:
            raise ConfigError(f"{path}: not a qkdlink tag file")
        version, station_code, _flags = struct.unpack("<HBB", head[8:12])
        if version != TAG_FILE_VERSION:
            raise ConfigError(f"{path}: unsupported tag file version {version}")
        body = fh.read()
    if len(body) % TAG_RECORD_SIZE:
        raise ConfigError(f"{path}: truncated tag record")
    rec = np.frombuffer(body, dtype=TAG_DTYPE)
    return TagBatch.from_records(rec, Station(station_code))


def loss_to_transmission(loss_db: float) -> float:
    """Convert a non-negative channel loss in dB to a transmission fraction."""
    if loss_db < 0:
        raise ValueError(f"loss must be non-negative, got {loss_db} dB")
    return 10.0 ** (-loss_db / 10.0)


def transmission_to_loss(transmission: float) -> float:
    if not 0.0 < transmission <= 1.0:
        raise ValueError(f"transmission must be in (0, 1], got {transmission}")
    return -10.0 * np.log10(transmission)


# ---------------------------------------------------------------------------
# Wavelength channel plan
# ---------------------------------------------------------------------------

NUM_PAIR_SLOTS = 40
DWDM_SPACING_GHZ = 100.0
# 10-90 % logistic transition width calibrated so that 4 of the 40 pair
# slots fall below 1 % of the passband maximum (the usable-slot count of
# the deployed coarse demultiplexers).
DEFAULT_CWDM_EDGE_STEEPNESS_NM = 0.135


@dataclass(frozen=True)
class CwdmBand:
    """One coarse demultiplexer passband with logistic edge roll-off."""

    center_nm: float
    width_nm: float = 18.0
    edge_steepness_nm: float = DEFAULT_CWDM_EDGE_STEEPNESS_NM

    def transmission(self, wavelength_nm) -> np.ndarray:
        lam = np.asarray(wavelength_nm, dtype=float)
        lo = self.center_nm - self.width_nm / 2.0
        hi = self.center_nm + self.width_nm / 2.0
        k = self.edge_steepness_nm
        if k <= 0:  # ideal rectangular band
            return ((lam >= lo) & (lam <= hi)).astype(float)
        with np.errstate(over="ignore"):
            t = 1.0 / (1.0 + np.exp(-(lam - lo) / k))
            t /= 1.0 + np.exp(-(hi - lam) / k)
        return t


@dataclass(frozen=True)
class ChannelPlan:
    """40-slot DWDM pair plan on the 100 GHz ITU grid.

    Pair slot k puts Bob `(k - 1/2) * 100 GHz` above the pair-emission
    center frequency and Alice symmetrically below it, so that paired
    wavelengths satisfy energy conservation about the emission center.
    Per-slot transmission is the product of the station's CWDM coverage
    and the flat DWDM passband insertion loss.
    """

    center_wavelength_nm: float = 1560.20
    alice_bands: tuple[CwdmBand, ...] = (CwdmBand(1571.0), CwdmBand(1591.0))
    bob_bands: tuple[CwdmBand, ...] = (CwdmBand(1531.0), CwdmBand(1551.0))
    dwdm_insertion_db: float = 2.0

    @property
    def center_frequency_ghz(self) -> float:
        return SPEED_OF_LIGHT_NM_GHZ / self.center_wavelength_nm

    def slot_frequencies_ghz(self, slot: int) -> tuple[float, float]:
        self._check_slot(slot)
        offset = (slot - 0.5) * DWDM_SPACING_GHZ
        nu_c = self.center_frequency_ghz
        return nu_c - offset, nu_c + offset

    def slot_wavelengths_nm(self, slot: int) -> tuple[float, float]:
        nu_a, nu_b = self.slot_frequencies_ghz(slot)
        return SPEED_OF_LIGHT_NM_GHZ / nu_a, SPEED_OF_LIGHT_NM_GHZ / nu_b

    def pairing(self, channel_id: int) -> int:
        """Map a global channel id to its entangled partner.

        Ids 0..39 are Alice slots 1..40; ids 40..79 the Bob sides.
        """
        if not 0 <= channel_id < 2 * NUM_PAIR_SLOTS:
            raise IndexError(f"channel id {channel_id} out of range")
        return (channel_id + NUM_PAIR_SLOTS) % (2 * NUM_PAIR_SLOTS)

    def _check_slot(self, slot: int) -> None:
        if not 1 <= slot <= NUM_PAIR_SLOTS:
            raise IndexError(f"pair slot must be in 1..{NUM_PAIR_SLOTS}, got {slot}")

    def _station_coverage(self, bands: tuple[CwdmBand, ...], lam_nm: float) -> float:
        return float(sum(b.transmission(lam_nm) for b in bands))


def channel_pair_transmission(plan: ChannelPlan, slot: int) -> tuple[float, float]:
    """Spectral transmission of both arms of one DWDM pair slot.

    Slots whose wavelength falls into a gap between adjacent CWDM
    passbands come out near zero; those are the spectrum holes where the
    link cannot produce key.
    """
    lam_a, lam_b = plan.slot_wavelengths_nm(slot)
    passband = loss_to_transmission(plan.dwdm_insertion_db)
    t_a = plan._station_coverage(plan.alice_bands, lam_a) * passband
    t_b = plan._station_coverage(plan.bob_bands, lam_b) * passband
    return t_a, t_b


def usable_slots(plan: ChannelPlan, floor_fraction: float = 0.01) -> list[int]:
    """Pair slots whose two-arm transmission product clears the hole floor."""
    products = []
    for slot in range(1, NUM_PAIR_SLOTS + 1):
        t_a, t_b = channel_pair_transmission(plan, slot)
        products.append(t_a * t_b)
    peak = max(products)
    return [s for s, p in zip(range(1, NUM_PAIR_SLOTS + 1), products) if p >= floor_fraction * peak]


# ---------------------------------------------------------------------------
# Telemetry
# ---------------------------------------------------------------------------

TELEMETRY_SCHEMA_VERSION = 1

TELEMETRY_COLUMNS = (
    "sim_time_s",
    "qber_z",
    "qber_x",
    "singles_a_hz",
    "singles_b_hz",
    "coincidences_hz",
    "clock_residual_ps",
    "skr_bps",
    "pump_attenuation_db",
    "phase_actuator_rad",
    "pol_actuator_a_rad",
    "pol_actuator_b_rad",
    "sync_locked",
    "pipeline_state",
)


@dataclass
class TelemetryRecord:
    """One monitoring sample of the running link."""

    sim_time_s: float
    qber_z: float = float("nan")
    qber_x: float = float("nan")
    singles_a_hz: float = 0.0
    singles_b_hz: float = 0.0
    coincidences_hz: float = 0.0
    clock_residual_ps: float = float("nan")
    skr_bps: float = 0.0
    pump_attenuation_db: float = 0.0
    phase_actuator_rad: float = 0.0
    pol_actuator_a_rad: float = 0.0
    pol_actuator_b_rad: float = 0.0
    sync_locked: bool = False
    pipeline_state: str = "running"

    def validate(self) -> None:
        for name in ("qber_z", "qber_x"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 0.5:
                raise ValueError(f"{name}={v} outside [0, 0.5]")
        for name in ("singles_a_hz", "singles_b_hz", "coincidences_hz", "skr_bps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_csv_row(self) -> str:
        vals = []
        for col in TELEMETRY_COLUMNS:
            v = getattr(self, col)
            if isinstance(v, bool):
                vals.append("1" if v else "0")
            elif isinstance(v, float):
                vals.append(f"{v:.10g}")
            else:
                vals.append(str(v))
        return ",".join(vals)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(TELEMETRY_COLUMNS)


class TelemetryWriter:
    """Appends telemetry rows to a CSV file with a stable column order."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(f"# qkdlink telemetry v{TELEMETRY_SCHEMA_VERSION}\n")
        self._fh.write(TelemetryRecord.csv_header() + "\n")

    def write(self, record: TelemetryRecord) -> None:
        record.validate()
        self._fh.write(record.to_csv_row() + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
