"""Framed messages over in-process queues or TCP.

Frame layout (little-endian)::

    u16 version | u8 kind | u32 round | u32 sender | u32 length | payload | u32 crc32

The CRC covers everything before it.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass
from enum import IntEnum

from .errors import (
    ChannelClosed,
    ChecksumMismatch,
    ContractViolation,
    DeliveryError,
    ParseError,
    RecvTimeout,
    TruncatedFrame,
    UnknownKind,
)

VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
HEADER = struct.Struct("<HBIII")
CRC = struct.Struct("<I")
EMPTY_FRAME_SIZE = HEADER.size + CRC.size


class Kind(IntEnum):
    JOIN = 1
    GLOBAL_MODEL = 2
    ENCRYPTED_UPDATE = 3
    PLAIN_UPDATE = 4
    DECRYPT_REQUEST = 5
    ROUND_REPORT = 6
    SHUTDOWN = 7


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    round: int
    sender: int
    payload: bytes = b""
    version: int = VERSION


def _frame_raw(version, kind, round_, sender, payload) -> bytes:
    head = HEADER.pack(version, kind, round_, sender, len(payload))
    body = head + payload
    return body + CRC.pack(zlib.crc32(body))


def frame(env: Envelope) -> bytes:
    if len(env.payload) > MAX_PAYLOAD:
        raise ContractViolation(f"payload of {len(env.payload)} bytes exceeds {MAX_PAYLOAD}")
    return _frame_raw(env.version, int(env.kind), env.round, env.sender, bytes(env.payload))


def parse(buf: bytes) -> Envelope:
    buf = bytes(buf)
    if len(buf) < EMPTY_FRAME_SIZE:
        raise TruncatedFrame(f"frame of {len(buf)} bytes is shorter than the header")
    version, kind, round_, sender, length = HEADER.unpack_from(buf)
    if length > MAX_PAYLOAD:
        raise ParseError(f"declared payload length {length} exceeds the limit")
    total = EMPTY_FRAME_SIZE + length
    if len(buf) < total:
        raise TruncatedFrame(f"frame has {len(buf)} of {total} bytes")
    if len(buf) > total:
        raise ParseError("trailing bytes after frame")
    (crc,) = CRC.unpack_from(buf, total - CRC.size)
    if zlib.crc32(buf[: total - CRC.size]) != crc:
        raise ChecksumMismatch("frame CRC32 mismatch")
    if version != VERSION:
        raise ParseError(f"unsupported protocol version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    return Envelope(kind, round_, sender, buf[HEADER.size : total - CRC.size], version)


class Endpoint:
    """One side of a reliable, ordered connection."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.bytes_sent = 0
        self.bytes_received = 0
        self._lock = threading.Lock()

    def send(self, env: Envelope) -> int:
        data = frame(env)
        with self._lock:
            self._send_bytes(data)
            self.bytes_sent += len(data)
        return len(data)

    def recv(self, timeout: float | None = None) -> Envelope:
        data = self._recv_bytes(self.timeout if timeout is None else timeout)
        self.bytes_received += len(data)
        return parse(data)

    def _send_bytes(self, data: bytes):
        raise NotImplementedError

    def _recv_bytes(self, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class InprocEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout=DEFAULT_TIMEOUT):
        super().__init__(timeout)
        self._inbox, self._outbox = inbox, outbox
        self.closed = False
        self.peer: InprocEndpoint | None = None

    def _send_bytes(self, data):
        if self.closed:
            raise DeliveryError("endpoint is closed")
        if self.peer is not None and self.peer.closed:
            raise DeliveryError("peer has closed the channel")
        self._outbox.put(data)

    def _recv_bytes(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise RecvTimeout(f"no message within {timeout} s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self):
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSED)


def channel_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[InprocEndpoint, InprocEndpoint]:
    a2b, b2a = queue.Queue(), queue.Queue()
    a = InprocEndpoint(b2a, a2b, timeout)
    b = InprocEndpoint(a2b, b2a, timeout)
    a.peer, b.peer = b, a
    return a, b


class TcpEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, timeout=DEFAULT_TIMEOUT):
        super().__init__(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.closed = False

    def _send_bytes(self, data):
        if self.closed:
            raise DeliveryError("endpoint is closed")
        try:
            self.sock.settimeout(self.timeout)
            self.sock.sendall(data)
        except OSError as exc:
            raise DeliveryError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int, partial_ok: bool) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                b = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise RecvTimeout(f"no message within {self.sock.gettimeout()} s") from None
            except OSError as exc:
                raise ChannelClosed(f"receive failed: {exc}") from exc
            if not b:
                if got == 0 and partial_ok:
                    raise ChannelClosed("peer closed the connection")
                raise TruncatedFrame(f"connection closed after {got} of {n} bytes")
            chunks.append(b)
            got += len(b)
        return b"".join(chunks)

    def _recv_bytes(self, timeout):
        if self.closed:
            raise ChannelClosed("endpoint is closed")
        self.sock.settimeout(timeout)
        head = self._read_exact(HEADER.size, partial_ok=True)
        length = HEADER.unpack(head)[4]
        if length > MAX_PAYLOAD:
            raise ParseError(f"declared payload length {length} exceeds the limit")
        return head + self._read_exact(length + CRC.size, partial_ok=False)

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


class TcpListener:
    def __init__(self, host="127.0.0.1", port=0, backlog=64, timeout=DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.sock.bind((host, port))
        except OSError as exc:
            self.sock.close()
            raise DeliveryError(f"cannot bind {host}:{port}: {exc}") from exc
        self.sock.listen(backlog)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpEndpoint:
        self.sock.settimeout(self.timeout if timeout is None else timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise RecvTimeout("no client connected in time") from None
        return TcpEndpoint(conn, self.timeout)

    def close(self):
        self.sock.close()


def tcp_listen(addr=("127.0.0.1", 0), timeout: float = DEFAULT_TIMEOUT) -> TcpListener:
    return TcpListener(addr[0], addr[1], timeout=timeout)


def tcp_dial(addr, timeout: float = DEFAULT_TIMEOUT) -> TcpEndpoint:
    try:
        sock = socket.create_connection(tuple(addr), timeout=timeout)
    except OSError as exc:
        raise DeliveryError(f"cannot connect to {addr}: {exc}") from exc
    return TcpEndpoint(sock, timeout)
