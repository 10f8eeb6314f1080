"""Binary wire protocol and publish/subscribe sample streaming.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic        u32 0x524B5031
    4       2     version      u16 = 1
    6       2     msg_type     u16  1=HELLO 2=SAMPLE 3=PRIOR_UPDATE 4=STATS
    8       8     payload_len  u64
    16      n     payload

Endpoints are ``inproc://name`` (threads of one process) or
``tcp://host:port``. The subscriber binds, publishers connect; a
subscriber only sees messages published after it attached. Every queue is
bounded and blocks instead of dropping, so a slow consumer throttles its
producers.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .controller import PriorUpdate
from .scenegen import SceneSample

MAGIC = 0x524B5031
VERSION = 1
HELLO, SAMPLE, PRIOR_UPDATE, STATS = 1, 2, 3, 4
MESSAGE_TYPES = {HELLO: "HELLO", SAMPLE: "SAMPLE", PRIOR_UPDATE: "PRIOR_UPDATE", STATS: "STATS"}
DEFAULT_QUEUE_SIZE = 64

_HEADER = struct.Struct("<IHHQ")
HEADER_SIZE = _HEADER.size
_HELLO = struct.Struct("<HBQ")
_SAMPLE_HEAD = struct.Struct("<HQHHBB")
_PRIOR_HEAD = struct.Struct("<HBB")
_STATS = struct.Struct("<HBQQQ")


# -------------------------------------------------------------------- errors


class ProtocolError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(ProtocolError):
    pass


class UnsupportedVersionError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class SessionError(ConnectionError):
    """The connection backing a publisher or subscriber went away."""


class EndOfData(Exception):
    """Every stream feeding an interleaver is closed."""


class EndOfStream(Exception):
    pass


# ------------------------------------------------------------------ messages

ROLE_SIMULATOR, ROLE_TRAINER, ROLE_CONTROLLER = 0, 1, 2


@dataclass(frozen=True)
class Hello:
    sim_id: int
    role: int = ROLE_SIMULATOR
    seed: int = 0


@dataclass(frozen=True)
class Stats:
    source_id: int
    role: int = ROLE_SIMULATOR
    published: int = 0
    consumed: int = 0
    stall_skips: int = 0


@dataclass(eq=False)
class SampleMessage:
    """One training tuple ``(x, b*, h)`` in wire form."""

    sim_id: int
    sample_id: int
    bin_count: int
    image: np.ndarray = field(repr=False)  # (3, H, W) float32
    beliefs: np.ndarray = field(repr=False)  # (J, H, W) float32
    angles: np.ndarray = field(repr=False)  # (J,) float64
    bins: np.ndarray = field(repr=False)  # (J,) uint16
    camera: tuple[float, float, float] = (0.0, 0.0, 0.0)
    augmentation_seed: int = 0

    @property
    def joints(self) -> int:
        return len(self.angles)

    @property
    def size(self) -> tuple[int, int]:
        """``(W, H)``"""
        return self.image.shape[2], self.image.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SampleMessage):
            return NotImplemented
        return (
            (self.sim_id, self.sample_id, self.bin_count, self.augmentation_seed)
            == (other.sim_id, other.sample_id, other.bin_count, other.augmentation_seed)
            and tuple(self.camera) == tuple(other.camera)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.image, other.image),
                    (self.beliefs, other.beliefs),
                    (self.angles, other.angles),
                    (self.bins, other.bins),
                )
            )
        )

    @classmethod
    def from_scene(cls, scene: SceneSample, image: np.ndarray, beliefs: np.ndarray) -> "SampleMessage":
        return cls(
            sim_id=scene.sim_id,
            sample_id=scene.sample_id,
            bin_count=scene.bin_count,
            image=np.asarray(image, dtype=np.float32),
            beliefs=np.asarray(beliefs, dtype=np.float32),
            angles=np.asarray(scene.angles, dtype=np.float64),
            bins=np.asarray(scene.bins, dtype=np.uint16),
            camera=(scene.camera_azimuth, scene.camera_elevation, scene.camera_distance),
            augmentation_seed=int(scene.augmentation_seed),
        )

    def scene(self) -> SceneSample:
        """Hidden variables; the per-scene bin probabilities are not transmitted."""
        return SceneSample(
            bins=self.bins.astype(np.int64),
            angles=self.angles.copy(),
            bin_probs=None,
            camera_azimuth=self.camera[0],
            camera_elevation=self.camera[1],
            camera_distance=self.camera[2],
            augmentation_seed=self.augmentation_seed,
            sample_id=self.sample_id,
            sim_id=self.sim_id,
            bin_count=self.bin_count,
        )


def message_type(message) -> int:
    if isinstance(message, Hello):
        return HELLO
    if isinstance(message, SampleMessage):
        return SAMPLE
    if isinstance(message, PriorUpdate):
        return PRIOR_UPDATE
    if isinstance(message, Stats):
        return STATS
    raise TypeError(f"not a wire message: {type(message).__name__}")


# --------------------------------------------------------------------- codec


def _encode_payload(message) -> bytes:
    if isinstance(message, Hello):
        return _HELLO.pack(message.sim_id, message.role, message.seed)
    if isinstance(message, Stats):
        return _STATS.pack(message.source_id, message.role, message.published, message.consumed, message.stall_skips)
    if isinstance(message, PriorUpdate):
        theta = np.asarray(message.theta, dtype="<f8")
        if theta.ndim != 1 or not 1 <= theta.size <= 255:
            raise ValueError("theta must hold 1..255 values")
        if np.any(theta <= 0):
            raise ValueError("theta values must be positive")
        return _PRIOR_HEAD.pack(message.target_sim_id, message.joint_index, theta.size) + theta.tobytes()
    if isinstance(message, SampleMessage):
        _, h, w = message.image.shape
        J = message.joints
        if message.beliefs.shape != (J, h, w) or message.bins.shape != (J,):
            raise ValueError("inconsistent sample shapes")
        if np.any(message.bins >= message.bin_count):
            raise ValueError("bin index out of range")
        return b"".join(
            (
                _SAMPLE_HEAD.pack(message.sim_id, message.sample_id, w, h, J, message.bin_count),
                np.asarray(message.image, dtype="<f4").tobytes(),
                np.asarray(message.beliefs, dtype="<f4").tobytes(),
                np.asarray(message.angles, dtype="<f8").tobytes(),
                np.asarray(message.bins, dtype="<u2").tobytes(),
                np.asarray(message.camera, dtype="<f8").tobytes(),
                struct.pack("<Q", message.augmentation_seed),
            )
        )
    raise TypeError(f"not a wire message: {type(message).__name__}")


def encode(message) -> bytes:
    payload = _encode_payload(message)
    return _HEADER.pack(MAGIC, VERSION, message_type(message), len(payload)) + payload


def _expect(payload: bytes, size: int, base: int) -> None:
    if len(payload) != size:
        raise LengthMismatchError(f"payload is {len(payload)} bytes, layout needs {size}", base + min(size, len(payload)))


def _decode_payload(msg_type: int, payload: bytes, base: int):
    if msg_type == HELLO:
        _expect(payload, _HELLO.size, base)
        return Hello(*_HELLO.unpack(payload))
    if msg_type == STATS:
        _expect(payload, _STATS.size, base)
        return Stats(*_STATS.unpack(payload))
    if msg_type == PRIOR_UPDATE:
        if len(payload) < _PRIOR_HEAD.size:
            raise LengthMismatchError("prior update shorter than its header", base + len(payload))
        sim, joint, k = _PRIOR_HEAD.unpack_from(payload)
        _expect(payload, _PRIOR_HEAD.size + 8 * k, base)
        theta = np.frombuffer(payload, dtype="<f8", count=k, offset=_PRIOR_HEAD.size).astype(np.float64)
        return PriorUpdate(sim, joint, theta)
    # SAMPLE
    if len(payload) < _SAMPLE_HEAD.size:
        raise LengthMismatchError("sample shorter than its header", base + len(payload))
    sim, sid, w, h, J, K = _SAMPLE_HEAD.unpack_from(payload)
    sizes = (12 * h * w, 4 * J * h * w, 8 * J, 2 * J, 24, 8)
    _expect(payload, _SAMPLE_HEAD.size + sum(sizes), base)
    pos = _SAMPLE_HEAD.size
    image = np.frombuffer(payload, "<f4", 3 * h * w, pos).reshape(3, h, w).astype(np.float32)
    pos += sizes[0]
    beliefs = np.frombuffer(payload, "<f4", J * h * w, pos).reshape(J, h, w).astype(np.float32)
    pos += sizes[1]
    angles = np.frombuffer(payload, "<f8", J, pos).astype(np.float64)
    pos += sizes[2]
    bins = np.frombuffer(payload, "<u2", J, pos).astype(np.uint16)
    if np.any(bins >= K):
        raise ProtocolError("bin index out of range", base + pos)
    pos += sizes[3]
    camera = tuple(float(c) for c in np.frombuffer(payload, "<f8", 3, pos))
    pos += sizes[4]
    (aug,) = struct.unpack_from("<Q", payload, pos)
    return SampleMessage(sim, sid, K, image, beliefs, angles, bins, camera, aug)


def parse_header(buf: bytes) -> tuple[int, int]:
    """Validate a frame header; returns ``(msg_type, payload_len)``."""
    if len(buf) < HEADER_SIZE:
        raise TruncatedError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}", len(buf))
    magic, version, msg_type, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:08x}", 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    if msg_type not in MESSAGE_TYPES:
        raise UnknownMessageTypeError(f"unknown message type {msg_type}", 6)
    return msg_type, length


def decode(buf: bytes):
    """Decode exactly one frame."""
    buf = bytes(buf)
    msg_type, length = parse_header(buf)
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise TruncatedError(f"declared payload of {length} bytes, only {len(buf) - HEADER_SIZE} present", len(buf))
    if len(buf) > end:
        raise LengthMismatchError(f"{len(buf) - end} bytes after the declared payload", end)
    return _decode_payload(msg_type, buf[HEADER_SIZE:], HEADER_SIZE)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise EOFError
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    """Read one whole frame from a stream socket (raises EOFError on close)."""
    header = _recv_exact(sock, HEADER_SIZE)
    _, length = parse_header(header)
    return header + _recv_exact(sock, length)


# ----------------------------------------------------------------- endpoints


def parse_endpoint(endpoint: str) -> tuple[str, object]:
    if endpoint.startswith("inproc://"):
        name = endpoint[len("inproc://") :]
        if not name:
            raise ValueError("inproc endpoint needs a name")
        return "inproc", name
    if endpoint.startswith("tcp://"):
        host, sep, port = endpoint[len("tcp://") :].rpartition(":")
        if not sep or not port.isdigit():
            raise ValueError(f"bad tcp endpoint {endpoint!r}")
        return "tcp", (host or "127.0.0.1", int(port))
    raise ValueError(f"unsupported endpoint {endpoint!r}")


class _Hub:
    def __init__(self):
        self.lock = threading.Lock()
        self.subscribers: list["Subscriber"] = []


_HUBS: dict[str, _Hub] = {}
_HUBS_LOCK = threading.Lock()


def _hub(name: str) -> _Hub:
    with _HUBS_LOCK:
        return _HUBS.setdefault(name, _Hub())


class Subscriber:
    """Receives messages of the requested types from any number of publishers."""

    def __init__(self, endpoint: str, types: Iterable[int] | None = None, queue_size: int = DEFAULT_QUEUE_SIZE):
        self.types = frozenset(types) if types is not None else frozenset(MESSAGE_TYPES)
        self._queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self._closed = threading.Event()
        self.kind, addr = parse_endpoint(endpoint)
        self._threads: list[threading.Thread] = []
        if self.kind == "inproc":
            self._hub = _hub(addr)
            with self._hub.lock:
                self._hub.subscribers.append(self)
            self.endpoint = endpoint
        else:
            self._server = socket.create_server(addr, reuse_port=False)
            self._server.settimeout(0.2)
            host, port = self._server.getsockname()[:2]
            self.endpoint = f"tcp://{host}:{port}"
            self._conns: list[socket.socket] = []
            t = threading.Thread(target=self._accept_loop, daemon=True)
            t.start()
            self._threads.append(t)

    # delivery path shared by both transports
    def _deliver(self, msg_type: int, frame: bytes) -> bool:
        if msg_type not in self.types:
            return True
        while not self._closed.is_set():
            try:
                self._queue.put(frame, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            self._conns.append(conn)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _read_loop(self, conn: socket.socket):
        try:
            while not self._closed.is_set():
                frame = read_frame(conn)
                msg_type, _ = parse_header(frame)
                if not self._deliver(msg_type, frame):
                    return
        except (EOFError, OSError, ProtocolError):
            pass
        finally:
            conn.close()

    def next(self, timeout: float | None = None):
        """Next message; raises ``TimeoutError`` if none arrives in time."""
        try:
            frame = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        return decode(frame)

    def pending(self) -> int:
        return self._queue.qsize()

    def close(self):
        self._closed.set()
        if self.kind == "inproc":
            with self._hub.lock:
                if self in self._hub.subscribers:
                    self._hub.subscribers.remove(self)
        else:
            # shutdown stops the listener at once; close alone waits for a
            # pending accept() in the other thread to return
            try:
                self._server.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._server.close()
            for c in self._conns:
                try:
                    c.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_STOP = object()


class Publisher:
    """Sends messages to the subscriber(s) bound at ``endpoint``.

    ``publish`` encodes immediately (messages are passed by value) and blocks
    while the bounded send queue is full.
    """

    def __init__(
        self,
        endpoint: str,
        hello: Hello | None = None,
        queue_size: int = DEFAULT_QUEUE_SIZE,
        connect_timeout: float = 10.0,
    ):
        self.endpoint = endpoint
        self.hello = hello
        self.queue_size = queue_size
        self.connect_timeout = connect_timeout
        self.kind, self._addr = parse_endpoint(endpoint)
        self.published = 0
        self._error: BaseException | None = None
        if self.kind == "inproc":
            self._hub = _hub(self._addr)
            if hello is not None:
                self._fanout(HELLO, encode(hello))
        else:
            self._start_session()

    def _fanout(self, msg_type: int, frame: bytes) -> None:
        with self._hub.lock:
            subs = list(self._hub.subscribers)
        for sub in subs:
            sub._deliver(msg_type, frame)

    def _start_session(self):
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                self._sock = socket.create_connection(self._addr, timeout=1.0)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise SessionError(f"cannot connect to {self.endpoint}: {exc}") from exc
                time.sleep(0.05)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._error = None
        self._queue: queue.Queue = queue.Queue(maxsize=self.queue_size)
        self._sender = threading.Thread(target=self._send_loop, daemon=True)
        self._sender.start()
        if self.hello is not None:
            self._queue.put(encode(self.hello))

    def _send_loop(self):
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            try:
                self._sock.sendall(item)
            except OSError as exc:
                self._error = exc
                return

    def publish(self, message) -> None:
        frame = encode(message)
        if self.kind == "inproc":
            self._fanout(message_type(message), frame)
        else:
            while True:
                if self._error is not None:
                    raise SessionError(f"connection to {self.endpoint} lost: {self._error}")
                try:
                    self._queue.put(frame, timeout=0.1)
                    break
                except queue.Full:
                    continue
        self.published += 1

    def reconnect(self) -> None:
        """Open a fresh session (TCP) and greet with HELLO again."""
        if self.kind == "inproc":
            if self.hello is not None:
                self._fanout(HELLO, encode(self.hello))
            return
        self._close_socket(drain=False)
        self._start_session()

    def _close_socket(self, drain: bool):
        if drain and self._error is None:
            self._queue.put(_STOP)
            self._sender.join()
        else:
            try:
                self._queue.put_nowait(_STOP)
            except queue.Full:
                pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def close(self, drain: bool = True) -> None:
        if self.kind == "tcp":
            self._close_socket(drain)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -------------------------------------------------------------- interleaving


class Stream:
    """A source of samples polled by the interleaver.

    ``poll(timeout)`` returns an item, ``None`` when nothing arrived in time,
    or raises :class:`EndOfStream` once the source is exhausted.
    """

    def poll(self, timeout: float):  # pragma: no cover - interface
        raise NotImplementedError


class CallableStream(Stream):
    def __init__(self, produce: Callable[[], object], stream_id: int = 0):
        self.produce = produce
        self.stream_id = stream_id

    def poll(self, timeout: float):
        return self.produce()


class SubscriberDemux:
    """Splits one subscriber's SAMPLE traffic into per-simulator streams."""

    def __init__(self, subscriber: Subscriber, sim_ids: Sequence[int]):
        self.subscriber = subscriber
        self.buffers = {s: deque() for s in sim_ids}
        self.other: deque = deque()
        self.lock = threading.Lock()

    def _pump(self, timeout: float) -> None:
        msg = self.subscriber.next(timeout)
        if isinstance(msg, SampleMessage) and msg.sim_id in self.buffers:
            self.buffers[msg.sim_id].append(msg)
        else:
            self.other.append(msg)

    def stream(self, sim_id: int) -> Stream:
        demux = self

        class _S(Stream):
            stream_id = sim_id

            def poll(self, timeout: float):
                deadline = time.monotonic() + timeout
                buf = demux.buffers[sim_id]
                while not buf:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    try:
                        demux._pump(remaining)
                    except TimeoutError:
                        return None
                return buf.popleft()

        return _S()


class Interleaver:
    """Round-robin batch composition across live streams.

    The cursor persists across batches, so when the batch size is not a
    multiple of the stream count the shortfall rotates between streams. A
    stream with nothing to offer within ``poll_timeout`` is skipped and the
    skip is counted.
    """

    def __init__(self, streams: Sequence[Stream], batch_size: int, poll_timeout: float = 0.1):
        if not streams:
            raise ValueError("need at least one stream")
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        self.streams = list(streams)
        self.live = list(range(len(self.streams)))
        self.batch_size = batch_size
        self.poll_timeout = poll_timeout
        self.cursor = 0
        self.skips = [0] * len(self.streams)
        self.consumed = [0] * len(self.streams)
        self.idle_seconds = 0.0

    def next_batch(self) -> list:
        batch: list = []
        while len(batch) < self.batch_size:
            if not self.live:
                if batch:
                    return batch
                raise EndOfData("all streams are closed")
            pos = self.cursor % len(self.live)
            idx = self.live[pos]
            t0 = time.perf_counter()
            try:
                item = self.streams[idx].poll(self.poll_timeout)
            except EndOfStream:
                self.live.pop(pos)
                continue
            if item is None:
                self.idle_seconds += time.perf_counter() - t0
                self.skips[idx] += 1
                self.cursor = pos + 1
                continue
            batch.append(item)
            self.consumed[idx] += 1
            self.cursor = pos + 1
        self.cursor %= max(len(self.live), 1)
        return batch


def interleave_batches(streams: Sequence[Stream], batch_size: int, poll_timeout: float = 0.1) -> list:
    """Single batch from a fresh :class:`Interleaver`."""
    return Interleaver(streams, batch_size, poll_timeout).next_batch()
