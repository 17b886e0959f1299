"""Flow records: loading, labeling, windowing, and synthetic generation.

A flow is a unidirectional group of packets sharing the usual 5-tuple
(src ip, dst ip, src port, dst port, protocol), summarized by byte and packet
counts.  The CSV loader expects flows already aggregated that way.
"""

from __future__ import annotations

import csv
import enum
import ipaddress
import random
from dataclasses import dataclass
from typing import Iterable, Sequence


class Protocol(enum.Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"
    OTHER = "OTHER"


class Label(enum.Enum):
    NORMAL = "NORMAL"
    ATTACK = "ATTACK"
    UNLABELED = "UNLABELED"


class Stage(enum.Enum):
    NONE = "NONE"
    SCANNING = "SCANNING"
    INTRUSION = "INTRUSION"
    ATTACKING = "ATTACKING"


class FlowCsvError(ValueError):
    pass


class MissingColumn(FlowCsvError):
    def __init__(self, column: str):
        super().__init__(f"missing column: {column}")
        self.column = column


class BadValue(FlowCsvError):
    def __init__(self, row: int, column: str, detail: str = ""):
        msg = f"bad value at row {row}, column {column}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.row = row
        self.column = column


class EmptyFile(FlowCsvError):
    pass


# Exact header the loader requires, in order of the documented schema.
CSV_COLUMNS = (
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "protocol",
    "bytes",
    "packets",
    "timestamp_ms",
    "label",
    "stage",
)

_U32 = 1 << 32


@dataclass(frozen=True)
class FlowRecord:
    """One flow-table entry.  Addresses are 32-bit integers (IPv4)."""

    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: Protocol
    bytes: int
    packets: int
    timestamp_ms: int
    label: Label = Label.UNLABELED
    stage: Stage = Stage.NONE

    def __post_init__(self) -> None:
        if not 0 <= self.src_ip < _U32 or not 0 <= self.dst_ip < _U32:
            raise ValueError("addresses must be 32-bit")
        if not 0 <= self.src_port < 65536 or not 0 <= self.dst_port < 65536:
            raise ValueError("ports must be 16-bit")
        if self.packets < 1:
            raise ValueError("packets must be >= 1")
        if self.bytes < 0:
            raise ValueError("bytes must be >= 0")
        if self.stage is not Stage.NONE and self.label is not Label.ATTACK:
            raise ValueError("stage implies ATTACK label")


@dataclass(frozen=True)
class FlowWindow:
    """A fixed-length slice of one domain's flow stream."""

    domain_id: int
    window_start: int
    window_length: int
    flows: tuple[FlowRecord, ...]

    def __post_init__(self) -> None:
        lo, hi = self.window_start, self.window_start + self.window_length
        for f in self.flows:
            if not lo <= f.timestamp_ms < hi:
                raise ValueError(
                    f"flow at t={f.timestamp_ms} outside window [{lo}, {hi})"
                )


def ip_to_str(ip: int) -> str:
    return str(ipaddress.IPv4Address(ip))


def str_to_ip(text: str) -> int:
    return int(ipaddress.IPv4Address(text))


def _parse_row(row_num: int, row: dict[str, str]) -> FlowRecord:
    def bad(column: str, detail: str) -> BadValue:
        return BadValue(row_num, column, detail)

    def parse_ip(column: str) -> int:
        try:
            return str_to_ip(row[column])
        except (ipaddress.AddressValueError, ValueError) as exc:
            raise bad(column, str(exc)) from exc

    def parse_int(column: str) -> int:
        try:
            return int(row[column])
        except ValueError as exc:
            raise bad(column, "not an integer") from exc

    def parse_enum(column: str, cls):
        try:
            return cls(row[column])
        except ValueError as exc:
            raise bad(column, f"expected one of {[m.value for m in cls]}") from exc

    kwargs = dict(
        src_ip=parse_ip("src_ip"),
        dst_ip=parse_ip("dst_ip"),
        src_port=parse_int("src_port"),
        dst_port=parse_int("dst_port"),
        protocol=parse_enum("protocol", Protocol),
        bytes=parse_int("bytes"),
        packets=parse_int("packets"),
        timestamp_ms=parse_int("timestamp_ms"),
        label=parse_enum("label", Label),
        stage=parse_enum("stage", Stage),
    )
    try:
        return FlowRecord(**kwargs)
    except ValueError as exc:
        # Field-level invariant failure (e.g. packets=0); report the row.
        raise BadValue(row_num, "record", str(exc)) from exc


def load_flows(path: str, format: str = "CSV") -> list[FlowRecord]:
    """Load flow records from a CSV file with the documented header.

    Rows that fail to parse raise BadValue rather than being skipped; a file
    with no data rows raises EmptyFile.
    """
    if format != "CSV":
        raise ValueError(f"unsupported format: {format}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(path) from None
        for column in CSV_COLUMNS:
            if column not in header:
                raise MissingColumn(column)
        flows = []
        for row_num, values in enumerate(reader, start=2):
            if not values:
                continue
            if len(values) != len(header):
                raise BadValue(row_num, "row", "wrong number of fields")
            flows.append(_parse_row(row_num, dict(zip(header, values))))
    if not flows:
        raise EmptyFile(path)
    return flows


def write_flows(path: str, flows: Iterable[FlowRecord]) -> None:
    """Write records in the same CSV schema load_flows reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for f in flows:
            writer.writerow(
                [
                    ip_to_str(f.src_ip),
                    ip_to_str(f.dst_ip),
                    f.src_port,
                    f.dst_port,
                    f.protocol.value,
                    f.bytes,
                    f.packets,
                    f.timestamp_ms,
                    f.label.value,
                    f.stage.value,
                ]
            )


def window_flows(
    flows: Sequence[FlowRecord], domain_id: int, window_length_ms: int = 3000
) -> list[FlowWindow]:
    """Tile [min timestamp, max timestamp] into fixed-stride windows.

    Empty windows are emitted so downstream streams stay aligned; each flow
    lands in exactly one window (half-open interval).
    """
    if window_length_ms <= 0:
        raise ValueError("window_length_ms must be positive")
    if not flows:
        return []
    base = min(f.timestamp_ms for f in flows)
    last = max(f.timestamp_ms for f in flows)
    count = (last - base) // window_length_ms + 1
    buckets: list[list[FlowRecord]] = [[] for _ in range(count)]
    for f in flows:
        buckets[(f.timestamp_ms - base) // window_length_ms].append(f)
    return [
        FlowWindow(domain_id, base + i * window_length_ms, window_length_ms, tuple(b))
        for i, b in enumerate(buckets)
    ]


# Synthetic SYN-flood generator defaults.  Attack flows mimic spoofed-source
# floods: tiny packet counts, SYN-sized bytes, randomized src/dst ports.
# Normal flows are request/response pairs between a small host pool, so
# per-window distinct ports and source addresses stay low.
_VICTIM_IP = str_to_ip("192.0.2.10")
_SERVER_PORTS = (80, 443, 53, 22, 25)
_NORMAL_CLIENTS = 8
_NORMAL_SERVERS = 4
_CLIENT_PORTS_PER_HOST = 4


def synth_syn_flood(
    seed: int,
    normal_flows: int,
    attack_flows: int,
    attacker_count: int = 5,
    duration_ms: int = 60000,
) -> list[FlowRecord]:
    """Generate a labeled flow stream: a normal phase, then a SYN-flood phase.

    Deterministic for a given argument tuple.  Normal flows are emitted as
    bidirectional pairs (an odd count is rounded up to the next even number).
    The two phases split duration_ms proportionally to their flow counts.
    """
    if normal_flows < 0 or attack_flows < 0:
        raise ValueError("flow counts must be non-negative")
    if attack_flows > 0 and attacker_count < 1:
        raise ValueError("attacker_count must be >= 1 when attack_flows > 0")
    rng = random.Random(seed)

    normal_flows += normal_flows % 2
    total = normal_flows + attack_flows
    if total == 0:
        return []
    split_ms = duration_ms * normal_flows // total

    clients = [str_to_ip(f"10.0.1.{10 + i}") for i in range(_NORMAL_CLIENTS)]
    servers = [str_to_ip(f"10.0.2.{10 + i}") for i in range(_NORMAL_SERVERS)]
    client_ports = {
        c: [49152 + 16 * i + j for j in range(_CLIENT_PORTS_PER_HOST)]
        for i, c in enumerate(clients)
    }

    out: list[FlowRecord] = []
    for _ in range(normal_flows // 2):
        client = rng.choice(clients)
        server = rng.choice(servers)
        proto = Protocol.TCP if rng.random() < 0.8 else Protocol.UDP
        sport = rng.choice(client_ports[client])
        dport = rng.choice(_SERVER_PORTS)
        ts = rng.randrange(split_ms) if split_ms else 0
        fwd_packets = rng.randint(6, 60)
        rev_packets = rng.randint(6, 60)
        out.append(
            FlowRecord(
                client, server, sport, dport, proto,
                bytes=fwd_packets * rng.randint(300, 1200),
                packets=fwd_packets,
                timestamp_ms=ts,
                label=Label.NORMAL,
            )
        )
        out.append(
            FlowRecord(
                server, client, dport, sport, proto,
                bytes=rev_packets * rng.randint(300, 1200),
                packets=rev_packets,
                timestamp_ms=min(ts + rng.randint(0, 40), duration_ms - 1),
                label=Label.NORMAL,
            )
        )

    # Each attacker spoofs sources out of its own /16, rotating per flow.
    spoof_blocks = [rng.randrange(1 << 16) for _ in range(max(attacker_count, 1))]
    attack_span = max(duration_ms - split_ms, 1)
    for i in range(attack_flows):
        block = spoof_blocks[i % len(spoof_blocks)]
        src = (block << 16) | rng.randrange(1 << 16)
        packets = rng.randint(1, 3)
        out.append(
            FlowRecord(
                src,
                _VICTIM_IP,
                rng.randint(1024, 65535),
                rng.randint(1, 65535),
                Protocol.TCP,
                bytes=packets * rng.randint(40, 60),
                packets=packets,
                timestamp_ms=split_ms + rng.randrange(attack_span),
                label=Label.ATTACK,
                stage=Stage.ATTACKING,
            )
        )

    out.sort(key=lambda f: f.timestamp_ms)
    return out
