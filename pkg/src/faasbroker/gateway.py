"""Device registry and per-subscriber push channels.

Frames are encoded once, at ``deliver`` time, into the exact bytes a
subscriber stream carries: one compact JSON object per line with the keys
``subscriberId``, ``data``, ``matchInfo`` and ``timestamp``. Delivery is
at-most-once and only to connected subscribers; nothing is stored for
subscribers that are offline.
"""

from __future__ import annotations

import collections
import enum
import json
import queue
import threading
from dataclasses import dataclass
from typing import Iterator, Optional

from faasbroker.clock import SystemClock, epoch_millis
from faasbroker.errors import AlreadyRegistered, BrokerError, UnknownSubscriber
from faasbroker.model import DeliveryFrame

WIRE_FIELDS = ("subscriberId", "data", "matchInfo", "timestamp")


class ConnectionState(str, enum.Enum):
    CONNECTED = "connected"
    DISCONNECTED = "disconnected"


class DropReason(str, enum.Enum):
    UNKNOWN = "unknown"
    DISCONNECTED = "disconnected"


class AlreadyConnected(BrokerError):
    code = "already_connected"


@dataclass
class DeviceRegistration:
    subscriber: str
    registered_at: int
    connection_state: ConnectionState = ConnectionState.DISCONNECTED


@dataclass(frozen=True)
class DeliveryResult:
    ok: bool
    reason: Optional[DropReason] = None


DELIVERED = DeliveryResult(True)


def encode_frame(frame: DeliveryFrame) -> bytes:
    return (json.dumps(frame.to_wire(), ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def decode_frame(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    obj = json.loads(line)
    if tuple(obj) != WIRE_FIELDS:
        raise ValueError(f"frame fields {tuple(obj)} differ from {WIRE_FIELDS}")
    return obj


class Connection:
    """One live subscriber stream.

    Lines land either in the connection's own queue (read with ``read`` or
    by iterating) or, when a shared ``sink`` queue was supplied, in that
    queue as ``(subscriber, line)`` pairs so one consumer can serve many
    subscribers.
    """

    def __init__(self, subscriber: str, sink: Optional[queue.Queue] = None):
        self.subscriber = subscriber
        self._queue: queue.Queue = queue.Queue()
        self._sink = sink
        self.closed = False

    def _push(self, line: bytes) -> None:
        if self._sink is not None:
            self._sink.put((self.subscriber, line))
        else:
            self._queue.put(line)

    def read(self, timeout: Optional[float] = None) -> Optional[bytes]:
        """Next frame line, or None on timeout or once the stream is closed."""
        if self.closed and self._queue.empty():
            return None
        try:
            line = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        return line

    def __iter__(self) -> Iterator[bytes]:
        while True:
            line = self.read()
            if line is None:
                return
            yield line

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._queue.put(None)


@dataclass
class GatewayStats:
    delivered: int = 0
    dropped: collections.Counter = None

    def __post_init__(self):
        self.dropped = collections.Counter()

    @property
    def dropped_total(self) -> int:
        return sum(self.dropped.values())


class DeliveryGateway:
    """Registry of subscriber devices plus their outbound channels.

    ``on_duplicate`` decides what a second ``connect`` for the same id does:
    ``"displace"`` closes the older stream, ``"refuse"`` raises
    AlreadyConnected. Either way at most one stream is live per id.
    """

    def __init__(self, clock=None, on_duplicate: str = "displace"):
        if on_duplicate not in ("displace", "refuse"):
            raise ValueError("on_duplicate must be 'displace' or 'refuse'")
        self.clock = clock or SystemClock()
        self.on_duplicate = on_duplicate
        self.stats = GatewayStats()
        self._devices: dict[str, DeviceRegistration] = {}
        self._connections: dict[str, Connection] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()

    def register_device(self, subscriber: str) -> DeviceRegistration:
        if not subscriber:
            raise ValueError("subscriber id must be non-empty")
        with self._lock:
            if subscriber in self._devices:
                raise AlreadyRegistered(subscriber)
            reg = DeviceRegistration(subscriber, epoch_millis(self.clock))
            self._devices[subscriber] = reg
            self._locks[subscriber] = threading.Lock()
            return reg

    def device(self, subscriber: str) -> DeviceRegistration:
        with self._lock:
            if subscriber not in self._devices:
                raise UnknownSubscriber(subscriber)
            return self._devices[subscriber]

    def is_registered(self, subscriber: str) -> bool:
        with self._lock:
            return subscriber in self._devices

    def connect(self, subscriber: str, sink: Optional[queue.Queue] = None) -> Connection:
        with self._lock:
            if subscriber not in self._devices:
                raise UnknownSubscriber(subscriber)
            old = self._connections.get(subscriber)
            if old is not None and not old.closed:
                if self.on_duplicate == "refuse":
                    raise AlreadyConnected(subscriber)
                old.close()
            conn = Connection(subscriber, sink)
            self._connections[subscriber] = conn
            self._devices[subscriber].connection_state = ConnectionState.CONNECTED
            return conn

    def disconnect(self, conn: Connection) -> None:
        with self._lock:
            if self._connections.get(conn.subscriber) is conn:
                del self._connections[conn.subscriber]
                self._devices[conn.subscriber].connection_state = ConnectionState.DISCONNECTED
        conn.close()

    def deliver(self, frame: DeliveryFrame) -> DeliveryResult:
        line = encode_frame(frame)
        with self._lock:
            sub_lock = self._locks.get(frame.subscriber)
            conn = self._connections.get(frame.subscriber)
        if sub_lock is None:
            return self._drop(DropReason.UNKNOWN)
        with sub_lock:
            if conn is None or conn.closed:
                return self._drop(DropReason.DISCONNECTED)
            conn._push(line)
        with self._lock:
            self.stats.delivered += 1
        return DELIVERED

    def _drop(self, reason: DropReason) -> DeliveryResult:
        with self._lock:
            self.stats.dropped[reason] += 1
        return DeliveryResult(False, reason)
