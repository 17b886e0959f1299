"""Computing server: holds the labeled training set and, for every masked
test tuple, emits the per-dimension differences (training minus masked test)
mod 2^33 for the whole training set, ordered by tree node index.

The server never sees a mask or an unmasked feature tuple; the differences
it produces look uniform to anyone without the masks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import knn
from .features import FixedPointCodec, VALUE_MAX, WORD_MOD
from .flows import Label
from .knn import KdTreeModel, TrainingInstance
from .masking import MaskedTuple

TRAINING_CSV_COLUMNS = ("instance_id", "mpf", "mbf", "pcf", "gop", "gsi", "label")

_WORD_MASK = WORD_MOD - 1


class NotLoaded(RuntimeError):
    pass


@dataclass(frozen=True)
class PreliminaryResult:
    """Masked per-dimension differences for one test tuple.

    Row i corresponds to tree node i (preorder, root first); values are
    (train_word - masked_test_word) mod 2^33 as uint64.
    """

    serial_number: int
    time: int
    diffs: np.ndarray  # shape (n_train, 5), dtype uint64

    def rows(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(int(v) for v in row) for row in self.diffs)


class ComputingServer:
    def __init__(self, k: int = knn.DEFAULT_K,
                 node_budget: int | None = knn.DEFAULT_NODE_BUDGET) -> None:
        self._k = k
        self._node_budget = node_budget
        self._tree: KdTreeModel | None = None
        self._train_words: np.ndarray | None = None  # node order, (n, 5) uint64

    @property
    def tree(self) -> KdTreeModel:
        if self._tree is None:
            raise NotLoaded("no training set loaded")
        return self._tree

    def load_training(self, train: list[TrainingInstance]) -> KdTreeModel:
        """Build (or rebuild) the tree; replaces any previous training set."""
        _check_value_range(train)
        tree = knn.build_kdtree(train, k=self._k, node_budget=self._node_budget)
        by_id = {inst.instance_id: inst for inst in train}
        words = np.array(
            [by_id[node.instance_id].features for node in tree.nodes],
            dtype=np.uint64,
        )
        self._tree = tree
        self._train_words = words
        return tree

    def topology_blob(self) -> bytes:
        """Tree structure and labels for the detection server; no features."""
        return knn.serialize_topology(self.tree)

    def preliminary_compute(self, masked: MaskedTuple) -> PreliminaryResult:
        """diffs[i][j] = (train[node i][j] - masked_features[j]) mod 2^33."""
        if self._train_words is None:
            raise NotLoaded("no training set loaded")
        test = np.array(masked.masked_features, dtype=np.uint64)
        diffs = (self._train_words - test) & np.uint64(_WORD_MASK)
        return PreliminaryResult(masked.serial_number, masked.time, diffs)


def load_training_csv(path: str, codec: FixedPointCodec) -> list[TrainingInstance]:
    """Read training instances from CSV; feature columns are in decoded
    (pre-fixed-point) units and get encoded with the supplied codec."""
    instances = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty training file")
        for column in TRAINING_CSV_COLUMNS:
            if column not in reader.fieldnames:
                raise ValueError(f"{path}: missing column {column}")
        for row in reader:
            features = []
            for name in ("mpf", "mbf", "pcf", "gop", "gsi"):
                stored, _ = codec.encode_saturating(float(row[name]))
                features.append(stored)
            instances.append(
                TrainingInstance(
                    features=tuple(features),
                    label=Label(row["label"]),
                    instance_id=int(row["instance_id"]),
                )
            )
    if not instances:
        raise ValueError(f"{path}: no training rows")
    return instances


def write_training_csv(
    path: str, instances: list[TrainingInstance], codec: FixedPointCodec
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_CSV_COLUMNS)
        for inst in instances:
            writer.writerow(
                [inst.instance_id]
                + [codec.decode(v) for v in inst.features]
                + [inst.label.value]
            )


def _check_value_range(instances: list[TrainingInstance]) -> None:
    for inst in instances:
        for v in inst.features:
            if not 0 <= v <= VALUE_MAX:
                raise ValueError("training features must fit 32-bit values")
