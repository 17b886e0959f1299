"""Detection server: joins mask vectors with preliminary results by
(serial_number, time), removes the masks to get signed train-test
differences, runs the budgeted tree search, votes, and raises alarms.

The server only ever decodes differences, never absolute feature values;
the training set itself stays with the computing server.
"""

from __future__ import annotations

import json
import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import knn
from .computing import PreliminaryResult
from .flows import Label
from .knn import KdTreeModel, NeighborSet
from .masking import KeyMismatch, MaskVector, WORD_MOD

log = logging.getLogger(__name__)

_SIGN_BOUND = 1 << 32
_WORD_MASK = WORD_MOD - 1

DEFAULT_JOIN_TTL_MS = 30000


class TopologyMissing(RuntimeError):
    pass


class DuplicateSubmission(ValueError):
    pass


@dataclass(frozen=True)
class Alarm:
    serial_number: int
    time: int
    margin: int  # attack votes out of k


@dataclass(frozen=True)
class Verdict:
    serial_number: int
    time: int
    label: Label
    margin: int
    neighbors: NeighborSet


@dataclass
class _PendingEntry:
    mask: MaskVector | None = None
    prelim: PreliminaryResult | None = None
    deadline_ms: int = 0


@dataclass
class PendingJoin:
    """Keyed store pairing the two halves of each detection.

    An entry fires exactly when both halves are present; singletons older
    than the TTL are dropped with a logged timeout.
    """

    ttl_ms: int = DEFAULT_JOIN_TTL_MS
    entries: dict[tuple[int, int], _PendingEntry] = field(default_factory=dict)
    timeouts: list[tuple[int, int]] = field(default_factory=list)

    def put_mask(self, mask: MaskVector, now_ms: int) -> PreliminaryResult | None:
        entry = self._entry((mask.serial_number, mask.time), now_ms)
        if entry.mask is not None:
            raise DuplicateSubmission(
                f"mask for ({mask.serial_number}, {mask.time}) already seen"
            )
        entry.mask = mask
        done = self._maybe_complete((mask.serial_number, mask.time))
        return done.prelim if done else None

    def put_prelim(self, prelim: PreliminaryResult, now_ms: int) -> MaskVector | None:
        key = (prelim.serial_number, prelim.time)
        entry = self._entry(key, now_ms)
        if entry.prelim is not None:
            raise DuplicateSubmission(f"prelim for {key} already seen")
        entry.prelim = prelim
        done = self._maybe_complete(key)
        return done.mask if done else None

    def sweep(self, now_ms: int) -> list[tuple[int, int]]:
        """Drop expired singleton entries, returning their keys."""
        expired = [
            key for key, entry in self.entries.items() if entry.deadline_ms <= now_ms
        ]
        for key in expired:
            del self.entries[key]
            self.timeouts.append(key)
            log.warning("join timeout for key %s", key)
        return expired

    def _entry(self, key: tuple[int, int], now_ms: int) -> _PendingEntry:
        entry = self.entries.get(key)
        if entry is None:
            entry = _PendingEntry(deadline_ms=now_ms + self.ttl_ms)
            self.entries[key] = entry
        return entry

    def _maybe_complete(self, key: tuple[int, int]) -> _PendingEntry | None:
        entry = self.entries[key]
        if entry.mask is not None and entry.prelim is not None:
            del self.entries[key]
            return entry
        return None


def unmask_differences(prelim: PreliminaryResult, mask: MaskVector) -> np.ndarray:
    """Signed train-test differences, one row per tree node, dtype int64.

    Computed as ((masked + mask + 2^32) mod 2^33) - 2^32, which is the
    33-bit two's-complement decode without a branch.
    """
    masks = np.array(mask.masks, dtype=np.uint64)
    shifted = (prelim.diffs + masks + np.uint64(_SIGN_BOUND)) & np.uint64(_WORD_MASK)
    return shifted.astype(np.int64) - _SIGN_BOUND


class DetectionServer:
    def __init__(
        self,
        k: int = knn.DEFAULT_K,
        node_budget: int | None = knn.DEFAULT_NODE_BUDGET,
        join_ttl_ms: int = DEFAULT_JOIN_TTL_MS,
        alarm_log_path: str | None = None,
        clock_ms=None,
    ) -> None:
        self.k = k
        self.node_budget = node_budget
        self._tree: KdTreeModel | None = None
        self._node_order: np.ndarray | None = None
        self._join = PendingJoin(ttl_ms=join_ttl_ms)
        self._settled: set[tuple[int, int]] = set()
        self._alarm_log_path = alarm_log_path
        self._clock_ms = clock_ms or (lambda: int(_time.time() * 1000))
        self.verdicts: list[Verdict] = []
        self.alarms: list[Alarm] = []

    def set_topology(self, tree: KdTreeModel) -> None:
        self._tree = tree
        self._node_order = np.array(
            tree.instance_ids_in_node_order(), dtype=np.intp
        )

    def set_topology_blob(self, blob: bytes) -> None:
        self.set_topology(
            knn.parse_topology(blob, k=self.k, node_budget=self.node_budget)
        )

    @property
    def join_timeouts(self) -> list[tuple[int, int]]:
        return self._join.timeouts

    def detect(self, prelim: PreliminaryResult, mask: MaskVector) -> Verdict:
        """Unmask, search, vote; returns the verdict and records any alarm."""
        if self._tree is None:
            raise TopologyMissing("no tree topology installed")
        if (prelim.serial_number, prelim.time) != (mask.serial_number, mask.time):
            raise KeyMismatch(
                f"prelim key ({prelim.serial_number}, {prelim.time}) != "
                f"mask key ({mask.serial_number}, {mask.time})"
            )
        tree = self._tree
        node_diffs = unmask_differences(prelim, mask)
        if len(node_diffs) != tree.size:
            raise ValueError("preliminary result size does not match tree")
        # Rows arrive in tree-node order; the search wants instance order.
        diffs = np.empty_like(node_diffs)
        diffs[self._node_order] = node_diffs
        neighbors = knn.bbf_search(tree, diffs, k=self.k, node_budget=self.node_budget)
        margin = sum(1 for n in neighbors if n.label is Label.ATTACK)
        label = knn.vote(neighbors)
        verdict = Verdict(prelim.serial_number, prelim.time, label, margin, neighbors)
        self.verdicts.append(verdict)
        if label is Label.ATTACK:
            alarm = Alarm(prelim.serial_number, prelim.time, margin)
            self.alarms.append(alarm)
            self._log_alarm(alarm)
        return verdict

    def submit_mask(self, mask: MaskVector) -> Verdict | None:
        now = self._clock_ms()
        self._join.sweep(now)
        key = (mask.serial_number, mask.time)
        if key in self._settled:
            raise DuplicateSubmission(f"key {key} already produced a verdict")
        prelim = self._join.put_mask(mask, now)
        if prelim is not None:
            self._settled.add(key)
            return self.detect(prelim, mask)
        return None

    def submit_prelim(self, prelim: PreliminaryResult) -> Verdict | None:
        now = self._clock_ms()
        self._join.sweep(now)
        key = (prelim.serial_number, prelim.time)
        if key in self._settled:
            raise DuplicateSubmission(f"key {key} already produced a verdict")
        mask = self._join.put_prelim(prelim, now)
        if mask is not None:
            self._settled.add(key)
            return self.detect(prelim, mask)
        return None

    def sweep(self) -> list[tuple[int, int]]:
        return self._join.sweep(self._clock_ms())

    def _log_alarm(self, alarm: Alarm) -> None:
        if self._alarm_log_path is None:
            return
        line = json.dumps(
            {"serial": alarm.serial_number, "time": alarm.time, "margin": alarm.margin}
        )
        with open(self._alarm_log_path, "a") as fh:
            fh.write(line + "\n")
