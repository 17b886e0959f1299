"""Channel-facing wrappers that run the two servers as message handlers.

The same handlers drive the deterministic in-memory network used by tests
and the threaded socket servers used when the pipeline runs over real
connections.
"""

from __future__ import annotations

import logging
import socket
import ssl
import threading

import numpy as np

from .computing import ComputingServer, PreliminaryResult
from .detection import DetectionServer, Verdict
from .flows import Label
from .transport import (
    Ack,
    AlarmMsg,
    ChannelClosed,
    MaskMsg,
    Message,
    PrelimMsg,
    SocketChannel,
    TopologyMsg,
    TupleMsg,
    accept_channel,
)

log = logging.getLogger(__name__)


def prelim_to_msg(prelim: PreliminaryResult) -> PrelimMsg:
    return PrelimMsg(prelim.serial_number, prelim.time, prelim.rows())


def msg_to_prelim(msg: PrelimMsg) -> PreliminaryResult:
    return PreliminaryResult(
        msg.serial_number, msg.time, np.array(msg.diffs, dtype=np.uint64)
    )


class CsService:
    """Computing-server endpoint: acks each masked tuple after forwarding
    its preliminary result to the detection server."""

    def __init__(self, core: ComputingServer, ds_channel) -> None:
        self.core = core
        self.ds_channel = ds_channel
        self._lock = threading.Lock()

    def announce_topology(self) -> None:
        self.ds_channel.send(TopologyMsg(self.core.topology_blob()))

    def handle(self, msg: Message, reply_channel) -> None:
        if isinstance(msg, TupleMsg):
            with self._lock:
                prelim = self.core.preliminary_compute(msg.tuple)
                self.ds_channel.send(prelim_to_msg(prelim))
            reply_channel.send(Ack())
        else:
            raise ChannelClosed(f"computing server got {type(msg).__name__}")


class DsService:
    """Detection-server endpoint.

    The ack for a mask goes out only after that window's verdict settles,
    preceded by an AlarmMsg when the verdict is ATTACK, so an agent that has
    collected all its acks has also seen all its alarms.
    """

    def __init__(self, core: DetectionServer) -> None:
        self.core = core
        self._agent_channels: dict[int, object] = {}
        self._lock = threading.Lock()

    def handle(self, msg: Message, origin_channel) -> None:
        with self._lock:
            if isinstance(msg, TopologyMsg):
                self.core.set_topology_blob(msg.blob)
            elif isinstance(msg, PrelimMsg):
                verdict = self.core.submit_prelim(msg_to_prelim(msg))
                if verdict is not None:
                    self._settle(verdict)
            elif isinstance(msg, MaskMsg):
                self._agent_channels[msg.mask.serial_number] = origin_channel
                verdict = self.core.submit_mask(msg.mask)
                if verdict is not None:
                    self._settle(verdict)
            else:
                raise ChannelClosed(f"detection server got {type(msg).__name__}")

    def _settle(self, verdict: Verdict) -> None:
        channel = self._agent_channels.get(verdict.serial_number)
        if channel is None:
            return
        if verdict.label is Label.ATTACK:
            channel.send(
                AlarmMsg(verdict.serial_number, verdict.time, verdict.margin)
            )
        channel.send(Ack())


class SocketServer:
    """Minimal threaded accept loop: one reader thread per connection."""

    def __init__(
        self,
        handler,
        host: str = "127.0.0.1",
        port: int = 0,
        ssl_context: ssl.SSLContext | None = None,
    ) -> None:
        self._handler = handler
        self._ssl_context = ssl_context
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(32)
        self.endpoint = "%s:%d" % self._sock.getsockname()
        self._threads: list[threading.Thread] = []
        self._running = False

    def start(self) -> None:
        self._running = True
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            try:
                channel = accept_channel(conn, self._ssl_context)
            except Exception:
                continue
            reader = threading.Thread(
                target=self._read_loop, args=(channel,), daemon=True
            )
            reader.start()
            self._threads.append(reader)

    def _read_loop(self, channel: SocketChannel) -> None:
        while True:
            try:
                msg = channel.recv()
            except ChannelClosed:
                return
            try:
                self._handler(msg, channel)
            except ChannelClosed:
                return
            except Exception:
                # a bad message (duplicate key, stale topology) must not
                # take down the connection for everything else in flight
                log.warning("dropped message after handler error", exc_info=True)

    def stop(self) -> None:
        self._running = False
        try:
            self._sock.close()
        except OSError:
            pass
