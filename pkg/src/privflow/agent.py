"""Per-domain agent: window the flow stream, extract and mask features,
send masked tuples to the computing server and masks to the detection
server, and surface any alarms that come back.

The agent is the only party that ever holds plaintext features; neither
outbound channel carries them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import features as feat
from . import masking
from .detection import Alarm
from .flows import FlowRecord, FlowWindow, window_flows
from .masking import MaskVector, MaskedTuple
from .transport import Ack, AlarmMsg, ChannelClosed, MaskMsg, TupleMsg

DEFAULT_MAX_INFLIGHT = 16


@dataclass(frozen=True)
class AgentConfig:
    domain_id: int
    window_length_ms: int = 3000
    scale: int = 1000
    cs_endpoint: str = ""
    ds_endpoint: str = ""
    seed: int | None = None
    max_inflight: int = DEFAULT_MAX_INFLIGHT
    privacy: bool = True  # False: all-zero masks (perturbation disabled)

    def __post_init__(self) -> None:
        if self.window_length_ms < 1000:
            # (serial, time) keys have one-second granularity; shorter
            # windows would collide in the detection-server join.
            raise ValueError("window_length_ms below 1000 breaks key uniqueness")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def codec(self) -> feat.FixedPointCodec:
        return feat.FixedPointCodec(self.scale)


@dataclass
class AgentRunResult:
    sent_keys: list[tuple[int, int]] = field(default_factory=list)
    alarms: list[Alarm] = field(default_factory=list)


class DomainAgent:
    """Owns one domain's mask stream; do not share across domains."""

    def __init__(self, cfg: AgentConfig) -> None:
        self.cfg = cfg
        self._codec = cfg.codec()
        self._rng = random.Random(cfg.seed) if cfg.seed is not None else None

    def pretreat(self, window: FlowWindow) -> tuple[MaskedTuple, MaskVector]:
        """Feature-extract and mask one window; both outputs share a key."""
        if window.domain_id != self.cfg.domain_id:
            raise ValueError(
                f"window belongs to domain {window.domain_id}, "
                f"agent is domain {self.cfg.domain_id}"
            )
        t = feat.extract_features(window, self._codec)
        if self.cfg.privacy:
            m = masking.gen_masks(t.serial_number, t.time, self._rng)
        else:
            m = masking.MaskVector(t.serial_number, t.time, (0, 0, 0, 0, 0))
        return masking.apply_mask(t, m), m

    def run(self, flows: list[FlowRecord], cs_channel, ds_channel) -> AgentRunResult:
        """Window the flow stream and push it through the two channels."""
        windows = window_flows(flows, self.cfg.domain_id, self.cfg.window_length_ms)
        return self.run_windows(windows, cs_channel, ds_channel)

    def run_windows(
        self, windows: list[FlowWindow], cs_channel, ds_channel
    ) -> AgentRunResult:
        """Stream pre-cut windows through the two channels.

        Sends one TupleMsg and one MaskMsg per window, throttled so no more
        than max_inflight windows await a computing-server ack.  The
        detection server acks each mask once the window's verdict is
        settled, with any AlarmMsg delivered first, so by the time the last
        ack arrives every alarm has been surfaced.
        """
        result = AgentRunResult()
        cs_unacked = 0
        ds_unacked = 0

        def drain_cs(limit: int) -> None:
            nonlocal cs_unacked
            while cs_unacked > limit:
                msg = cs_channel.recv()
                if not isinstance(msg, Ack):
                    raise ChannelClosed(
                        f"unexpected {type(msg).__name__} from computing server"
                    )
                cs_unacked -= 1

        def drain_ds(limit: int) -> None:
            nonlocal ds_unacked
            while ds_unacked > limit:
                msg = ds_channel.recv()
                if isinstance(msg, Ack):
                    ds_unacked -= 1
                elif isinstance(msg, AlarmMsg):
                    result.alarms.append(
                        Alarm(msg.serial_number, msg.time, msg.margin)
                    )
                else:
                    raise ChannelClosed(
                        f"unexpected {type(msg).__name__} from detection server"
                    )

        try:
            for window in windows:
                masked, mask = self.pretreat(window)
                cs_channel.send(TupleMsg(masked))
                ds_channel.send(MaskMsg(mask))
                result.sent_keys.append((masked.serial_number, masked.time))
                cs_unacked += 1
                ds_unacked += 1
                drain_cs(self.cfg.max_inflight - 1)
                drain_ds(self.cfg.max_inflight - 1)

            drain_cs(0)
            drain_ds(0)
        except ChannelClosed as exc:
            # salvage alarms for windows that did complete, then surface
            self._drain_best_effort(ds_channel, result)
            exc.partial = result
            raise
        return result

    @staticmethod
    def _drain_best_effort(ds_channel, result: AgentRunResult) -> None:
        try:
            while True:
                msg = ds_channel.try_recv() if hasattr(ds_channel, "try_recv") else None
                if msg is None:
                    return
                if isinstance(msg, AlarmMsg):
                    result.alarms.append(
                        Alarm(msg.serial_number, msg.time, msg.margin)
                    )
        except ChannelClosed:
            return


def pretreat(window: FlowWindow, cfg: AgentConfig,
             rng: random.Random | None = None) -> tuple[MaskedTuple, MaskVector]:
    """One-shot pretreatment without agent state (rng optional)."""
    codec = cfg.codec()
    if window.domain_id != cfg.domain_id:
        raise ValueError("window domain does not match config")
    t = feat.extract_features(window, codec)
    m = masking.gen_masks(t.serial_number, t.time, rng)
    return masking.apply_mask(t, m), m
