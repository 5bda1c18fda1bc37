"""Classical channel between the two station engines.

Length-prefixed binary frames over a reliable byte stream.  The same
`Channel` session layer runs over an in-process loopback transport (for
single-process runs and tests) or a TCP socket (for two-process runs).
A disconnect is survivable: both ends keep a replay buffer and resume
from the peer's last received sequence number.

Authentication is a stub: frames carry a constant tag in the reserved
field and no MAC.  Message integrity is assumed per the threat model of
the surrounding system.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

from .core import ChannelClosedError, QkdLinkError

FRAME_MAGIC = 0x514B4431  # "QKD1"
FRAME_VERSION = 1
AUTH_STUB_TAG = 0x5A
HEADER_FMT = "<IBBHQQI"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 28 bytes
MAX_PAYLOAD = 64 * 1024 * 1024


class MessageType(IntEnum):
    BASIS_ANNOUNCE = 1
    SAMPLE_DISCLOSE = 2
    SHUFFLE_SEED = 3
    PARITY_REQ = 4
    PARITY_RESP = 5
    VERIFY = 6
    PA_SEED = 7
    PA_ACK = 8
    TELEMETRY = 9
    CONTROL = 10


@dataclass
class Frame:
    type: MessageType
    payload: bytes = b""
    session: int = 0
    sequence: int = 0

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise QkdLinkError(f"payload too large: {len(self.payload)}")
        head = struct.pack(
            HEADER_FMT,
            FRAME_MAGIC,
            FRAME_VERSION,
            int(self.type),
            AUTH_STUB_TAG,
            self.session,
            self.sequence,
            len(self.payload),
        )
        return head + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        if len(data) < HEADER_SIZE:
            raise QkdLinkError("short frame")
        magic, version, ftype, _tag, session, sequence, length = struct.unpack(
            HEADER_FMT, data[:HEADER_SIZE]
        )
        if magic != FRAME_MAGIC:
            raise QkdLinkError(f"bad frame magic 0x{magic:08x}")
        if version != FRAME_VERSION:
            raise QkdLinkError(f"unsupported frame version {version}")
        try:
            mtype = MessageType(ftype)
        except ValueError as exc:
            raise QkdLinkError(f"unknown message type code {ftype}") from exc
        payload = data[HEADER_SIZE : HEADER_SIZE + length]
        if len(payload) != length:
            raise QkdLinkError("truncated frame payload")
        return cls(mtype, payload, session, sequence)


class Timeout(Exception):
    """recv() deadline passed without a frame (a result, not a failure)."""


# ---------------------------------------------------------------------------
# Transports: move opaque frame bytes, may fail, know nothing of sessions
# ---------------------------------------------------------------------------


class LoopbackTransport:
    """A pair of in-process FIFO queues."""

    def __init__(self, tx: queue.Queue, rx: queue.Queue):
        self._tx = tx
        self._rx = rx
        self.closed = False

    @classmethod
    def pair(cls) -> tuple["LoopbackTransport", "LoopbackTransport"]:
        q_ab: queue.Queue = queue.Queue()
        q_ba: queue.Queue = queue.Queue()
        return cls(q_ab, q_ba), cls(q_ba, q_ab)

    def send_bytes(self, data: bytes) -> None:
        if self.closed:
            raise ChannelClosedError("loopback transport closed")
        self._tx.put(data)

    def recv_bytes(self, timeout: float | None) -> bytes:
        if self.closed:
            raise ChannelClosedError("loopback transport closed")
        try:
            data = self._rx.get(timeout=timeout)
        except queue.Empty:
            raise Timeout()
        if data is None:
            self.closed = True
            raise ChannelClosedError("peer closed")
        return data

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._tx.put(None)


class LatencyTransport:
    """Wraps a transport, delaying every delivery by a fixed latency."""

    def __init__(self, inner, latency_s: float):
        self._inner = inner
        self.latency_s = latency_s

    def send_bytes(self, data: bytes) -> None:
        self._inner.send_bytes(data)

    def recv_bytes(self, timeout: float | None) -> bytes:
        data = self._inner.recv_bytes(timeout)
        time.sleep(self.latency_s)
        return data

    def close(self) -> None:
        self._inner.close()


class FlakyTransport:
    """Drops the link after a programmed number of sends (tests)."""

    def __init__(self, inner, fail_after_sends: int):
        self._inner = inner
        self._remaining = fail_after_sends
        self.tripped = False

    def send_bytes(self, data: bytes) -> None:
        if self._remaining == 0 and not self.tripped:
            self.tripped = True
            raise ChannelClosedError("injected disconnect")
        self._remaining -= 1
        self._inner.send_bytes(data)

    def recv_bytes(self, timeout: float | None) -> bytes:
        return self._inner.recv_bytes(timeout)

    def close(self) -> None:
        self._inner.close()


class SocketTransport:
    """Length-delimited frames over a TCP stream."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._recv_buf = b""
        self.closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SocketTransport":
        deadline = time.monotonic() + timeout
        last_err = None
        while time.monotonic() < deadline:
            try:
                return cls(socket.create_connection((host, port), timeout=timeout))
            except OSError as exc:
                last_err = exc
                time.sleep(0.05)
        raise ChannelClosedError(f"cannot connect to {host}:{port}: {last_err}")

    @classmethod
    def listen_one(cls, host: str, port: int, timeout: float = 30.0):
        """Accept a single peer; returns (transport, bound_port)."""
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(timeout)
        bound = srv.getsockname()[1]
        return srv, bound

    @classmethod
    def accept(cls, srv: socket.socket) -> "SocketTransport":
        conn, _addr = srv.accept()
        return cls(conn)

    def send_bytes(self, data: bytes) -> None:
        if self.closed:
            raise ChannelClosedError("socket closed")
        try:
            self._sock.sendall(struct.pack("<I", len(data)) + data)
        except OSError as exc:
            self.closed = True
            raise ChannelClosedError(str(exc)) from exc

    def _recv_exact(self, n: int, timeout: float | None) -> bytes:
        self._sock.settimeout(timeout)
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except socket.timeout:
                raise Timeout()
            except OSError as exc:
                self.closed = True
                raise ChannelClosedError(str(exc)) from exc
            if not chunk:
                self.closed = True
                raise ChannelClosedError("peer closed socket")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv_bytes(self, timeout: float | None) -> bytes:
        (length,) = struct.unpack("<I", self._recv_exact(4, timeout))
        return self._recv_exact(length, timeout)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


# ---------------------------------------------------------------------------
# Session layer: ordering, resume, accounting
# ---------------------------------------------------------------------------


@dataclass
class ChannelStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_by_type: dict = field(default_factory=dict)
    parity_bits: int = 0

    def record(self, frame: Frame, raw_len: int, outgoing: bool) -> None:
        if outgoing:
            self.bytes_sent += raw_len
        else:
            self.bytes_received += raw_len
        key = frame.type.name
        self.frames_by_type[key] = self.frames_by_type.get(key, 0) + 1
        if frame.type == MessageType.PARITY_RESP and not outgoing:
            # every parity response payload is a packed bit vector
            # prefixed with its bit count
            (nbits,) = struct.unpack("<I", frame.payload[:4])
            self.parity_bits += nbits


class Channel:
    """Reliable, in-order framed channel with sequence-number resume.

    send() stamps monotonically increasing sequence numbers and keeps a
    replay window; on a transport failure, `reconnect(new_transport)`
    exchanges RESUME control frames so the peers replay whatever the
    other side missed.  recv(timeout) raises Timeout (a typed result for
    the caller) rather than crashing.
    """

    RESUME_PREFIX = b"RESUME:"

    def __init__(self, transport, session: int = 1, tap: ChannelStats | None = None):
        self._transport = transport
        self.session = session
        self.stats = tap if tap is not None else ChannelStats()
        self._next_seq = 1
        self._expected_seq = 1
        self._replay: dict[int, bytes] = {}
        self._lock = threading.Lock()

    def send(self, frame: Frame) -> int:
        with self._lock:
            frame.session = self.session
            frame.sequence = self._next_seq
            data = frame.encode()
            self._replay[frame.sequence] = data
            if len(self._replay) > 4096:
                oldest = min(self._replay)
                del self._replay[oldest]
            self._next_seq += 1
            self.stats.record(frame, len(data), outgoing=True)
        self._transport.send_bytes(data)
        return frame.sequence

    def recv(self, timeout: float | None = None) -> Frame:
        while True:
            data = self._transport.recv_bytes(timeout)
            frame = Frame.decode(data)
            if frame.type == MessageType.CONTROL and frame.payload.startswith(
                self.RESUME_PREFIX
            ):
                self._handle_resume(frame)
                continue
            if frame.sequence < self._expected_seq:
                continue  # duplicate from a replay
            self._expected_seq = frame.sequence + 1
            self.stats.record(frame, len(data), outgoing=False)
            return frame

    def reconnect(self, transport) -> None:
        """Resume the session over a fresh transport."""
        self._transport = transport
        resume = Frame(
            MessageType.CONTROL,
            self.RESUME_PREFIX + struct.pack("<Q", self._expected_seq),
            session=self.session,
            sequence=0,
        )
        self._transport.send_bytes(resume.encode())

    def _handle_resume(self, frame: Frame) -> None:
        (peer_expected,) = struct.unpack("<Q", frame.payload[len(self.RESUME_PREFIX):])
        with self._lock:
            missing = sorted(s for s in self._replay if s >= peer_expected)
            for seq in missing:
                self._transport.send_bytes(self._replay[seq])

    def close(self) -> None:
        self._transport.close()


def loopback_channel_pair(
    latency_s: float = 0.0, session: int = 1
) -> tuple[Channel, Channel]:
    t_a, t_b = LoopbackTransport.pair()
    if latency_s > 0:
        t_a = LatencyTransport(t_a, latency_s)
        t_b = LatencyTransport(t_b, latency_s)
    return Channel(t_a, session), Channel(t_b, session)
