"""Message transports between the coordinator and the other processes.

Wire format (TCP), all integers little-endian, ``length`` counts the
bytes that follow it::

    request         u32 length | u8 version | u8 instruction (0,1,2) | u32 origin_rank | f64 timestamp_s | u64 iterations
    response        u32 length | u8 version | u8 kind=129 | u64 new_assignment | u8 coord_finished
    report request  u32 length | u8 version | u8 kind=130
"""
from __future__ import annotations

import collections
import logging
import queue
import socket
import struct
import threading
import time
from typing import Callable

from .clock import Clock, MonotonicClock
from .coordinator import Instruction, Message, ReportRequest, Response
from .errors import ProtocolError

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
KIND_RESPONSE = 129
KIND_REPORT_REQUEST = 130

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BB")
_REQUEST = struct.Struct("<BBIdQ")
_RESPONSE = struct.Struct("<BBQB")


def encode_message(msg: Message) -> bytes:
    body = _REQUEST.pack(
        PROTOCOL_VERSION, int(msg.instruction), msg.origin_rank, msg.timestamp, msg.predicted_done
    )
    return _LEN.pack(len(body)) + body


def encode_response(resp: Response) -> bytes:
    body = _RESPONSE.pack(PROTOCOL_VERSION, KIND_RESPONSE, resp.new_assignment, int(resp.coord_finished))
    return _LEN.pack(len(body)) + body


def encode_report_request() -> bytes:
    body = _HEAD.pack(PROTOCOL_VERSION, KIND_REPORT_REQUEST)
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Message | Response | ReportRequest:
    """Decode one frame body (everything after the length prefix)."""
    if len(body) < _HEAD.size:
        raise ProtocolError(f"frame too short ({len(body)} bytes)")
    version, kind = _HEAD.unpack_from(body)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: got {version}, expected {PROTOCOL_VERSION}")
    if kind in (0, 1, 2):
        if len(body) != _REQUEST.size:
            raise ProtocolError(f"request frame has {len(body)} bytes, expected {_REQUEST.size}")
        _, instruction, origin, ts, iterations = _REQUEST.unpack(body)
        return Message(Instruction(instruction), origin, ts, iterations)
    if kind == KIND_RESPONSE:
        if len(body) != _RESPONSE.size:
            raise ProtocolError(f"response frame has {len(body)} bytes, expected {_RESPONSE.size}")
        _, _, assignment, finished = _RESPONSE.unpack(body)
        if finished not in (0, 1):
            raise ProtocolError(f"bad coord_finished byte {finished}")
        return Response(assignment, bool(finished))
    if kind == KIND_REPORT_REQUEST:
        if len(body) != _HEAD.size:
            raise ProtocolError("report request carries a payload")
        return ReportRequest()
    raise ProtocolError(f"unknown frame kind {kind}")


def decode_frame(frame: bytes) -> Message | Response | ReportRequest:
    if len(frame) < _LEN.size:
        raise ProtocolError("truncated length prefix")
    (length,) = _LEN.unpack_from(frame)
    if len(frame) - _LEN.size != length:
        raise ProtocolError(f"length prefix says {length}, frame has {len(frame) - _LEN.size}")
    return decode_body(frame[_LEN.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise EOFError
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Message | Response | ReportRequest:
    """Read one frame; raises ``EOFError`` on a clean close between frames."""
    header = _recv_exact(sock, _LEN.size)
    (length,) = _LEN.unpack(header)
    if length > 64:
        raise ProtocolError(f"implausible frame length {length}")
    try:
        body = _recv_exact(sock, length)
    except EOFError:
        raise ProtocolError("connection closed mid-frame") from None
    return decode_body(body)


# -- in-memory transport (simulator) -------------------------------------------


class InMemoryHub:
    """Ordered in-memory links between the coordinator and every rank.

    Not thread-safe; meant for the single-threaded simulator.  Time comes
    from ``clock`` (usually a :class:`~ruperlb.clock.VirtualClock`), and
    ``on_deliver(target)`` is invoked whenever something is enqueued, with
    ``target`` being ``"coordinator"`` or a rank index, so the driving
    event loop can schedule the recipient.  Rank 0 is served through a
    loopback bridge attached with :meth:`attach_loopback`.
    """

    def __init__(self, clock: Clock, process_count: int, on_deliver: Callable[[object], None] | None = None) -> None:
        self.clock = clock
        self.process_count = process_count
        self.on_deliver = on_deliver
        self.coordinator = _InMemoryCoordinator(self)
        self._inboxes = [collections.deque() for _ in range(process_count)]
        self._workers = [_InMemoryWorker(self, r) for r in range(process_count)]
        self.loopback = None

    def worker(self, rank: int) -> _InMemoryWorker:
        return self._workers[rank]

    def attach_loopback(self, bridge) -> None:
        self.loopback = bridge

    def _notify(self, target) -> None:
        if self.on_deliver is not None:
            self.on_deliver(target)

    def _to_rank(self, rank: int, event) -> None:
        if not 0 <= rank < self.process_count:
            raise ProtocolError(f"no such rank {rank}")
        if rank == 0 and self.loopback is not None:
            self.loopback.deliver(event)
            return
        self._inboxes[rank].append(event)
        self._notify(rank)

    def pending(self, rank: int) -> int:
        return len(self._inboxes[rank])


class _InMemoryCoordinator:
    def __init__(self, hub: InMemoryHub) -> None:
        self.hub = hub
        self.inbox: collections.deque[Message] = collections.deque()
        self._last = hub.clock.now()

    def post(self, msg: Message) -> None:
        self.inbox.append(msg)
        self.hub._notify("coordinator")

    def receive_any(self, timeout: float) -> tuple[Message | None, float]:
        now = self.hub.clock.now()
        elapsed = now - self._last
        self._last = now
        return (self.inbox.popleft() if self.inbox else None), elapsed

    def send_to(self, rank: int, response: Response) -> None:
        self.hub._to_rank(rank, response)

    def request_report(self, rank: int) -> None:
        self.hub._to_rank(rank, ReportRequest())


class _InMemoryWorker:
    def __init__(self, hub: InMemoryHub, rank: int) -> None:
        self.hub = hub
        self.rank = rank

    def send(self, message: Message) -> None:
        self.hub.coordinator.post(message)

    def wait_any(self, timeout: float):
        inbox = self.hub._inboxes[self.rank]
        return inbox.popleft() if inbox else None


# -- threaded transports ------------------------------------------------------


class QueueCoordinatorTransport:
    """Coordinator side fed by a thread-safe queue.

    Remote messages are pushed by reader threads; rank 0 posts through the
    loopback bridge.  Subclasses provide ``_send_bytes(rank, data)``.
    """

    def __init__(self, clock: Clock | None = None) -> None:
        self.clock = clock if clock is not None else MonotonicClock()
        self.inbox: queue.Queue = queue.Queue()
        self.loopback = None
        self._last = self.clock.now()

    def attach_loopback(self, bridge) -> None:
        self.loopback = bridge

    def post(self, msg: Message) -> None:
        self.inbox.put(msg)

    def receive_any(self, timeout: float) -> tuple[Message | None, float]:
        try:
            item = self.inbox.get(timeout=min(timeout, threading.TIMEOUT_MAX))
        except queue.Empty:
            item = None
        now = self.clock.now()
        elapsed = now - self._last
        self._last = now
        if isinstance(item, BaseException):
            raise ProtocolError(f"transport failure: {item}") from item
        return item, elapsed

    def send_to(self, rank: int, response: Response) -> None:
        if rank == 0 and self.loopback is not None:
            self.loopback.deliver(response)
        else:
            self._send_bytes(rank, encode_response(response))

    def request_report(self, rank: int) -> None:
        if rank == 0 and self.loopback is not None:
            self.loopback.deliver(ReportRequest())
        else:
            self._send_bytes(rank, encode_report_request())

    def _send_bytes(self, rank: int, data: bytes) -> None:
        raise NotImplementedError


class TcpCoordinatorTransport(QueueCoordinatorTransport):
    """Rank-0 TCP endpoint.

    :meth:`accept` blocks until ``process_count - 1`` peers have connected,
    playing the role of the start-up barrier.  Each peer is identified by
    the origin rank of its first (Start) message.
    """

    def __init__(self, host: str, port: int, process_count: int, clock: Clock | None = None) -> None:
        super().__init__(clock)
        self.process_count = process_count
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()[:2]
        self._peers: dict[int, socket.socket] = {}
        self._peers_lock = threading.Lock()
        self._conns: list[socket.socket] = []
        self._closed = False

    def accept(self, timeout: float | None = 60.0) -> None:
        self._server.settimeout(timeout)
        while len(self._conns) < self.process_count - 1:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                raise ProtocolError("timed out waiting for peers to connect") from None
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket) -> None:
        try:
            while True:
                frame = read_frame(conn)
                if not isinstance(frame, Message):
                    raise ProtocolError(f"coordinator received {type(frame).__name__}")
                if frame.instruction is Instruction.START:
                    with self._peers_lock:
                        self._peers[frame.origin_rank] = conn
                self.inbox.put(frame)
        except EOFError:
            return
        except OSError as exc:
            if not self._closed:
                self.inbox.put(exc)
        except ProtocolError as exc:
            self.inbox.put(exc)

    def _send_bytes(self, rank: int, data: bytes) -> None:
        with self._peers_lock:
            conn = self._peers.get(rank)
        if conn is None:
            raise ProtocolError(f"rank {rank} has not connected")
        conn.sendall(data)

    def close(self) -> None:
        self._closed = True
        for conn in self._conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._server.close()


_WAKE = object()


class TcpWorkerTransport:
    """Worker-side TCP endpoint for ranks greater than zero."""

    def __init__(self, host: str, port: int, connect_timeout: float = 30.0) -> None:
        deadline = time.monotonic() + connect_timeout
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=5.0)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._events: queue.Queue = queue.Queue()
        self._closed = False
        threading.Thread(target=self._reader, daemon=True).start()

    def _reader(self) -> None:
        try:
            while True:
                frame = read_frame(self._sock)
                if isinstance(frame, Message):
                    raise ProtocolError("worker received a request frame")
                self._events.put(frame)
        except EOFError:
            return
        except (OSError, ProtocolError) as exc:
            if not self._closed:
                self._events.put(exc)

    def send(self, message: Message) -> None:
        self._sock.sendall(encode_message(message))

    def wake(self) -> None:
        """Interrupt a pending :meth:`wait_any` (finish flag raised)."""
        self._events.put(_WAKE)

    def wait_any(self, timeout: float):
        try:
            item = self._events.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _WAKE:
            return None
        if isinstance(item, BaseException):
            raise ProtocolError(f"transport failure: {item}") from item
        return item

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
