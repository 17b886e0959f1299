"""Framed messaging between agents, the computing server, and the detector.

Wire format: every connection opens with a protocol version byte (0x01),
then carries frames of

    length  u32 big-endian, counting the type byte plus payload
    type    u8
    payload bytes

Message payloads:

    0x01 TupleMsg    29-byte masked tuple block
    0x02 MaskMsg     29-byte mask vector block
    0x03 TopologyMsg serialized tree topology + labels (knn format)
    0x04 PrelimMsg   serial 33b | time 33b | n_train 32b | n*5 x 33b, padded
    0x05 AlarmMsg    serial 33b | time 33b | margin 16b, padded
    0x06 Ack         empty

Channel security is a property of the channel, not the message: SECURE mode
wraps the socket in a caller-supplied TLS context, PLAIN mode is for tests
and refused unless explicitly allowed.
"""

from __future__ import annotations

import socket
import ssl
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterator, Union

from .bitpack import BitReader, BitWriter
from .features import ATTR_BITS, TUPLE_BLOCK_BYTES
from .masking import (
    FEATURE_ATTRS,
    MaskVector,
    MaskedTuple,
    decode_mask_vector,
    decode_masked_tuple,
    encode_mask_vector,
    encode_masked_tuple,
)

PROTOCOL_VERSION = 0x01
MAX_PAYLOAD = 64 * 1024 * 1024
_HEADER_LEN = 4


class ProtocolError(Exception):
    pass


class UnknownType(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class OversizeFrame(ProtocolError):
    pass


class ConnectFailed(ProtocolError):
    pass


class HandshakeFailed(ProtocolError):
    pass


class ChannelClosed(ProtocolError):
    pass


@dataclass(frozen=True)
class TupleMsg:
    tuple: MaskedTuple


@dataclass(frozen=True)
class MaskMsg:
    mask: MaskVector


@dataclass(frozen=True)
class TopologyMsg:
    blob: bytes


@dataclass(frozen=True)
class PrelimMsg:
    serial_number: int
    time: int
    diffs: tuple[tuple[int, ...], ...]  # n_train rows of 5 masked differences


@dataclass(frozen=True)
class AlarmMsg:
    serial_number: int
    time: int
    margin: int


@dataclass(frozen=True)
class Ack:
    pass


Message = Union[TupleMsg, MaskMsg, TopologyMsg, PrelimMsg, AlarmMsg, Ack]

_TYPE_TUPLE = 0x01
_TYPE_MASK = 0x02
_TYPE_TOPOLOGY = 0x03
_TYPE_PRELIM = 0x04
_TYPE_ALARM = 0x05
_TYPE_ACK = 0x06


def _encode_prelim(msg: PrelimMsg) -> bytes:
    writer = BitWriter()
    writer.put(msg.serial_number, ATTR_BITS)
    writer.put(msg.time, ATTR_BITS)
    writer.put(len(msg.diffs), 32)
    for row in msg.diffs:
        if len(row) != FEATURE_ATTRS:
            raise ValueError("each diff row must have 5 values")
        for value in row:
            writer.put(value, ATTR_BITS)
    return writer.getvalue()


def _decode_prelim(payload: bytes) -> PrelimMsg:
    reader = BitReader(payload)
    serial = reader.take(ATTR_BITS)
    time = reader.take(ATTR_BITS)
    n = reader.take(32)
    need = n * FEATURE_ATTRS * ATTR_BITS
    if reader.remaining_bits() < need:
        raise TruncatedFrame("prelim payload shorter than its count")
    diffs = tuple(
        tuple(reader.take(ATTR_BITS) for _ in range(FEATURE_ATTRS))
        for _ in range(n)
    )
    return PrelimMsg(serial, time, diffs)


def _encode_alarm(msg: AlarmMsg) -> bytes:
    writer = BitWriter()
    writer.put(msg.serial_number, ATTR_BITS)
    writer.put(msg.time, ATTR_BITS)
    writer.put(msg.margin, 16)
    return writer.getvalue()


def _decode_alarm(payload: bytes) -> AlarmMsg:
    reader = BitReader(payload)
    return AlarmMsg(reader.take(ATTR_BITS), reader.take(ATTR_BITS), reader.take(16))


def encode_frame(msg: Message) -> bytes:
    if isinstance(msg, TupleMsg):
        code, payload = _TYPE_TUPLE, encode_masked_tuple(msg.tuple)
    elif isinstance(msg, MaskMsg):
        code, payload = _TYPE_MASK, encode_mask_vector(msg.mask)
    elif isinstance(msg, TopologyMsg):
        code, payload = _TYPE_TOPOLOGY, msg.blob
    elif isinstance(msg, PrelimMsg):
        code, payload = _TYPE_PRELIM, _encode_prelim(msg)
    elif isinstance(msg, AlarmMsg):
        code, payload = _TYPE_ALARM, _encode_alarm(msg)
    elif isinstance(msg, Ack):
        code, payload = _TYPE_ACK, b""
    else:
        raise UnknownType(f"cannot encode {type(msg).__name__}")
    if len(payload) > MAX_PAYLOAD:
        raise OversizeFrame(f"payload of {len(payload)} bytes exceeds limit")
    return (1 + len(payload)).to_bytes(4, "big") + bytes([code]) + payload


def _decode_payload(code: int, payload: bytes) -> Message:
    if code == _TYPE_TUPLE:
        if len(payload) != TUPLE_BLOCK_BYTES:
            raise TruncatedFrame("tuple payload must be 29 bytes")
        return TupleMsg(decode_masked_tuple(payload))
    if code == _TYPE_MASK:
        if len(payload) != TUPLE_BLOCK_BYTES:
            raise TruncatedFrame("mask payload must be 29 bytes")
        return MaskMsg(decode_mask_vector(payload))
    if code == _TYPE_TOPOLOGY:
        return TopologyMsg(payload)
    if code == _TYPE_PRELIM:
        return _decode_prelim(payload)
    if code == _TYPE_ALARM:
        return _decode_alarm(payload)
    if code == _TYPE_ACK:
        if payload:
            raise ProtocolError("ack carries no payload")
        return Ack()
    raise UnknownType(f"unknown message type 0x{code:02x}")


def decode_frame(data: bytes) -> Message:
    """Decode one complete frame; the bytes must contain exactly one."""
    if len(data) < _HEADER_LEN + 1:
        raise TruncatedFrame("frame shorter than header")
    length = int.from_bytes(data[:_HEADER_LEN], "big")
    if length > MAX_PAYLOAD + 1:
        raise OversizeFrame(f"declared length {length} exceeds limit")
    if len(data) != _HEADER_LEN + length:
        raise TruncatedFrame(
            f"frame declares {length} bytes, got {len(data) - _HEADER_LEN}"
        )
    return _decode_payload(data[_HEADER_LEN], data[_HEADER_LEN + 1:])


class FrameDecoder:
    """Incremental decoder tolerant of arbitrary stream chunking."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[Message]:
        self._buf.extend(data)
        while True:
            if len(self._buf) < _HEADER_LEN:
                return
            length = int.from_bytes(self._buf[:_HEADER_LEN], "big")
            if length < 1:
                raise ProtocolError("frame length must cover the type byte")
            if length > MAX_PAYLOAD + 1:
                raise OversizeFrame(f"declared length {length} exceeds limit")
            if len(self._buf) < _HEADER_LEN + length:
                return
            frame = bytes(self._buf[: _HEADER_LEN + length])
            del self._buf[: _HEADER_LEN + length]
            yield decode_frame(frame)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


class InMemoryChannel:
    """One endpoint of an in-process channel pair.

    recv() never blocks: when the inbox is empty it pumps the owning network
    (delivering queued messages to registered services) and raises
    ChannelClosed if that produces nothing.
    """

    def __init__(self, network: "InMemoryNetwork", name: str) -> None:
        self._network = network
        self.name = name
        self.inbox: deque[Message] = deque()
        self.peer: "InMemoryChannel | None" = None
        self.closed = False
        self.sent_log: list[Message] = []  # tap for tests

    def send(self, msg: Message) -> None:
        if self.closed or self.peer is None or self.peer.closed:
            raise ChannelClosed(f"{self.name}: peer gone")
        # Round-trip through the wire codec so in-memory runs exercise it.
        self.sent_log.append(msg)
        self.peer.inbox.append(decode_frame(encode_frame(msg)))

    def recv(self) -> Message:
        if self.inbox:
            return self.inbox.popleft()
        if self.closed:
            raise ChannelClosed(f"{self.name}: closed")
        self._network.pump()
        if self.inbox:
            return self.inbox.popleft()
        raise ChannelClosed(f"{self.name}: no pending messages after pump")

    def try_recv(self) -> Message | None:
        if not self.inbox:
            self._network.pump()
        return self.inbox.popleft() if self.inbox else None

    def close(self) -> None:
        self.closed = True


class InMemoryNetwork:
    """Deterministic single-threaded message fabric for tests and the
    in-process harness: services run whenever someone pumps."""

    def __init__(self) -> None:
        self._services: list[tuple[InMemoryChannel, Callable[[Message], None]]] = []
        self._pumping = False

    def pair(self, a_name: str, b_name: str) -> tuple[InMemoryChannel, InMemoryChannel]:
        a = InMemoryChannel(self, a_name)
        b = InMemoryChannel(self, b_name)
        a.peer, b.peer = b, a
        return a, b

    def register(
        self, endpoint: InMemoryChannel, handler: Callable[[Message], None]
    ) -> None:
        self._services.append((endpoint, handler))

    def pump(self) -> None:
        if self._pumping:
            return
        self._pumping = True
        try:
            progress = True
            while progress:
                progress = False
                for endpoint, handler in self._services:
                    while endpoint.inbox:
                        handler(endpoint.inbox.popleft())
                        progress = True
        finally:
            self._pumping = False


class SocketChannel:
    """Framed messages over a connected socket (optionally TLS-wrapped)."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._decoder = FrameDecoder()
        self._ready: deque[Message] = deque()
        self._send_lock = threading.Lock()
        self.closed = False

    def send(self, msg: Message) -> None:
        data = encode_frame(msg)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            self.closed = True
            raise ChannelClosed(str(exc)) from exc

    def recv(self) -> Message:
        while not self._ready:
            try:
                chunk = self._sock.recv(65536)
            except OSError as exc:
                self.closed = True
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                self.closed = True
                raise ChannelClosed("connection closed by peer")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.popleft()

    def close(self) -> None:
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


def open_channel(
    endpoint: str,
    security: str = "SECURE",
    allow_insecure: bool = False,
    ssl_context: ssl.SSLContext | None = None,
    timeout: float | None = 10.0,
) -> SocketChannel:
    """Connect to a peer and perform the version handshake.

    SECURE wraps the connection in the supplied TLS context.  PLAIN is for
    loopback tests only and raises unless allow_insecure is set.
    """
    if security == "PLAIN":
        if not allow_insecure:
            raise HandshakeFailed(
                "PLAIN channels are refused unless allow_insecure is set"
            )
    elif security == "SECURE":
        if ssl_context is None:
            raise HandshakeFailed("SECURE mode needs an ssl_context")
    else:
        raise ValueError(f"unknown security mode {security!r}")

    host, port = _parse_endpoint(endpoint)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(f"cannot reach {endpoint}: {exc}") from exc
    try:
        if security == "SECURE":
            assert ssl_context is not None
            try:
                sock = ssl_context.wrap_socket(sock, server_hostname=host)
            except ssl.SSLError as exc:
                sock.close()
                raise HandshakeFailed(f"TLS handshake failed: {exc}") from exc
        sock.sendall(bytes([PROTOCOL_VERSION]))
        version = _recv_exactly(sock, 1)
        if version[0] != PROTOCOL_VERSION:
            raise HandshakeFailed(f"peer speaks version {version[0]}")
    except ProtocolError:
        sock.close()
        raise
    except OSError as exc:
        sock.close()
        raise ConnectFailed(str(exc)) from exc
    return SocketChannel(sock)


def accept_channel(
    sock: socket.socket, ssl_context: ssl.SSLContext | None = None
) -> SocketChannel:
    """Server-side counterpart of open_channel for an accepted socket."""
    try:
        if ssl_context is not None:
            sock = ssl_context.wrap_socket(sock, server_side=True)
        version = _recv_exactly(sock, 1)
        if version[0] != PROTOCOL_VERSION:
            raise HandshakeFailed(f"peer speaks version {version[0]}")
        sock.sendall(bytes([PROTOCOL_VERSION]))
    except ssl.SSLError as exc:
        sock.close()
        raise HandshakeFailed(f"TLS handshake failed: {exc}") from exc
    except OSError as exc:
        sock.close()
        raise ConnectFailed(str(exc)) from exc
    return SocketChannel(sock)


def _recv_exactly(sock: socket.socket, count: int) -> bytes:
    got = bytearray()
    while len(got) < count:
        chunk = sock.recv(count - len(got))
        if not chunk:
            raise ChannelClosed("connection closed during handshake")
        got.extend(chunk)
    return bytes(got)
