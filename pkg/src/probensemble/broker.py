"""Topic-based publish/subscribe broker with per-direction byte accounting.

The in-process broker is the reference transport: every publish serializes
the message (crediting the byte ledger with the exact wire size), decodes it
back, and fans the decoded copy out to all active subscriptions. Subscribers
therefore always observe wire-precision (float32-quantized) values, just as
they would over a real socket. Delivery is at-most-once: no retry, no
persistence, and messages published before a subscription exists are lost.

The optional TCP mode frames the same byte format with a u32 little-endian
length prefix, one stream per client; the server side routes incoming frames
into an ordinary in-process broker, so accounting and fan-out semantics are
identical in both modes.

Topic scheme: ``contrib/<round>`` client to server, ``ensemble/<round>``
server to clients, ``params/<round>`` for the parameter-exchange baseline.
"""

from __future__ import annotations

import collections
import logging
import socket
import struct
import threading

from .errors import BrokerUnavailableError, TruncatedError
from .wire import (
    KIND_BROADCAST,
    KIND_CONTRIBUTION,
    KIND_PARAMETERS,
    SERVER_ID,
    Message,
    deserialize,
    serialize,
)

log = logging.getLogger(__name__)

UP = "up"       # client -> server
DOWN = "down"   # server -> clients

KIND_NAMES = {
    KIND_CONTRIBUTION: "contribution",
    KIND_BROADCAST: "broadcast",
    KIND_PARAMETERS: "parameters",
}


def contrib_topic(round_: int) -> str:
    return f"contrib/{round_}"


def ensemble_topic(round_: int) -> str:
    return f"ensemble/{round_}"


def params_topic(round_: int) -> str:
    return f"params/{round_}"


def topic_for(msg: Message) -> str:
    if msg.kind == KIND_CONTRIBUTION:
        return contrib_topic(msg.round)
    if msg.kind == KIND_BROADCAST:
        return ensemble_topic(msg.round)
    return params_topic(msg.round)


class ByteLedger:
    """Cumulative message and byte counts keyed by (client_id, direction, kind)."""

    def __init__(self):
        self._counts: dict[tuple[int, str, int], int] = collections.defaultdict(int)
        self._bytes: dict[tuple[int, str, int], int] = collections.defaultdict(int)
        self._lock = threading.Lock()

    def record(self, client_id: int, direction: str, kind: int, nbytes: int) -> None:
        with self._lock:
            self._counts[(client_id, direction, kind)] += 1
            self._bytes[(client_id, direction, kind)] += nbytes

    def entries(self) -> list[tuple[int, str, int, int, int]]:
        """Sorted (client_id, direction, kind, message_count, total_bytes) rows."""
        with self._lock:
            keys = sorted(self._counts)
            return [(c, d, k, self._counts[(c, d, k)], self._bytes[(c, d, k)]) for c, d, k in keys]

    def total_bytes(self, kind: int | None = None, direction: str | None = None) -> int:
        with self._lock:
            return sum(n for (c, d, k), n in self._bytes.items()
                       if (kind is None or k == kind) and (direction is None or d == direction))

    def snapshot(self) -> dict[tuple[str, str], int]:
        """Byte totals keyed by (kind name, direction), for round reports."""
        out: dict[tuple[str, str], int] = {}
        with self._lock:
            for (c, d, k), n in self._bytes.items():
                key = (KIND_NAMES[k], d)
                out[key] = out.get(key, 0) + n
        return out


class Subscription:
    """FIFO queue of decoded messages for one subscriber on one topic."""

    def __init__(self, topic: str):
        self.topic = topic
        self._queue: collections.deque[Message] = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def _push(self, msg: Message) -> None:
        with self._cond:
            self._queue.append(msg)
            self._cond.notify()

    def poll(self, timeout: float = 0.0) -> Message | None:
        """Next queued message in FIFO order, or None once timeout expires."""
        with self._cond:
            if not self._queue and timeout > 0:
                self._cond.wait_for(lambda: bool(self._queue) or self._closed, timeout)
            if self._queue:
                return self._queue.popleft()
            return None

    def _close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class Broker:
    """In-process fan-out queue with exact byte accounting."""

    def __init__(self, ledger: ByteLedger | None = None):
        self.ledger = ledger if ledger is not None else ByteLedger()
        self._subs: dict[str, list[Subscription]] = collections.defaultdict(list)
        self._lock = threading.Lock()
        self._running = True

    def subscribe(self, topic: str) -> Subscription:
        if not topic:
            raise ValueError("empty topic")
        with self._lock:
            if not self._running:
                raise BrokerUnavailableError("broker is shut down")
            sub = Subscription(topic)
            self._subs[topic].append(sub)
            return sub

    def publish(self, topic: str, msg: Message) -> int:
        """Serialize, account, and deliver to every subscription of the topic.

        Returns the number of deliveries (0 when nobody is subscribed).
        Subscribers receive one shared decoded copy at wire precision;
        messages are treated as immutable after publication.
        """
        if not topic:
            raise ValueError("empty topic")
        payload = serialize(msg)
        with self._lock:
            if not self._running:
                raise BrokerUnavailableError("broker is shut down")
            subs = list(self._subs.get(topic, ()))
            direction = DOWN if msg.client_id == SERVER_ID else UP
            self.ledger.record(msg.client_id, direction, msg.kind, len(payload))
        decoded = deserialize(payload)
        for sub in subs:
            sub._push(decoded)
        return len(subs)

    def shutdown(self) -> None:
        with self._lock:
            self._running = False
            subs = [s for lst in self._subs.values() for s in lst]
        for sub in subs:
            sub._close()


# --- optional TCP framing ----------------------------------------------------

_LEN = struct.Struct("<I")


def _send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _recv_frame(sock: socket.socket) -> bytes | None:
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    payload = _recv_exact(sock, length)
    if payload is None:
        raise TruncatedError("connection closed mid-frame")
    return payload


class TcpBrokerServer:
    """Length-prefixed TCP front end over an in-process broker.

    Incoming frames are deserialized and published on the topic derived from
    their kind and round; outgoing publishes with a server sender are also
    framed down every connected client stream.
    """

    def __init__(self, broker: Broker | None = None, host: str = "127.0.0.1", port: int = 0):
        self.broker = broker if broker is not None else Broker()
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self._conns.append(conn)
            threading.Thread(target=self._reader_loop, args=(conn,), daemon=True).start()

    def _reader_loop(self, conn: socket.socket) -> None:
        while True:
            try:
                payload = _recv_frame(conn)
            except (OSError, TruncatedError):
                payload = None
            if payload is None:
                with self._lock:
                    if conn in self._conns:
                        self._conns.remove(conn)
                return
            try:
                msg = deserialize(payload)
                self.broker.publish(topic_for(msg), msg)
            except Exception:
                log.warning("dropping malformed frame from client stream", exc_info=True)

    def subscribe(self, topic: str) -> Subscription:
        return self.broker.subscribe(topic)

    def publish(self, topic: str, msg: Message) -> int:
        delivered = self.broker.publish(topic, msg)
        payload = serialize(msg)
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                _send_frame(conn, payload)
            except OSError:
                with self._lock:
                    if conn in self._conns:
                        self._conns.remove(conn)
        return delivered

    def shutdown(self) -> None:
        self._running = False
        try:
            self._listener.close()
        finally:
            with self._lock:
                conns = list(self._conns)
                self._conns.clear()
            for conn in conns:
                try:
                    conn.close()
                except OSError:
                    pass
            self.broker.shutdown()


class TcpClient:
    """Client endpoint for TCP mode with the same subscribe/publish surface.

    Frames received from the server are routed into local per-topic queues;
    frames for topics without a live local subscription are dropped
    (at-most-once semantics).
    """

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._subs: dict[str, list[Subscription]] = collections.defaultdict(list)
        self._lock = threading.Lock()
        self._running = True
        self._reader = threading.Thread(target=self._reader_loop, daemon=True)
        self._reader.start()

    def _reader_loop(self) -> None:
        while self._running:
            try:
                payload = _recv_frame(self._sock)
            except (OSError, TruncatedError):
                payload = None
            if payload is None:
                return
            try:
                msg = deserialize(payload)
            except Exception:
                log.warning("dropping malformed frame from server", exc_info=True)
                continue
            topic = topic_for(msg)
            with self._lock:
                subs = list(self._subs.get(topic, ()))
            for sub in subs:
                sub._push(msg)

    def subscribe(self, topic: str) -> Subscription:
        if not self._running:
            raise BrokerUnavailableError("client connection is closed")
        sub = Subscription(topic)
        with self._lock:
            self._subs[topic].append(sub)
        return sub

    def publish(self, topic: str, msg: Message) -> int:
        if not self._running:
            raise BrokerUnavailableError("client connection is closed")
        if topic != topic_for(msg):
            raise ValueError(f"topic {topic!r} does not match message routing {topic_for(msg)!r}")
        try:
            _send_frame(self._sock, serialize(msg))
        except OSError as exc:
            raise BrokerUnavailableError("server connection lost") from exc
        return 1

    def close(self) -> None:
        self._running = False
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
