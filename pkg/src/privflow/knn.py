"""kNN classifier: KD-tree, budgeted best-first search, linear-scan oracle.

The tree holds only topology and labels; feature values stay with whoever
built it.  Searches run on per-instance signed difference vectors (training
minus test), which is all the detection side ever sees.  All distances are
exact integer squared Euclidean, and every tie breaks toward the lower
instance_id, so two runs over the same inputs agree bit for bit.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .flows import Label

DIMS = 5
DEFAULT_K = 23
DEFAULT_NODE_BUDGET = 512

_NO_CHILD = 0xFFFFFFFF
_NODE_STRUCT = struct.Struct("<IBIIB")
_LABEL_CODES = {Label.NORMAL: 0, Label.ATTACK: 1}
_CODE_LABELS = {code: label for label, code in _LABEL_CODES.items()}

# np.int64 squared distances are exact as long as 5 * max_diff^2 < 2^63.
_INT64_SAFE_DIFF = int(math.isqrt((2**63 - 1) // DIMS)) - 1


class TrainingSetError(ValueError):
    pass


class EmptyTrainingSet(TrainingSetError):
    pass


class DuplicateInstanceId(TrainingSetError):
    pass


class BudgetZero(ValueError):
    pass


class EmptyNeighborSet(ValueError):
    pass


@dataclass(frozen=True)
class TrainingInstance:
    """One labeled training point in fixed-point feature units."""

    features: tuple[int, int, int, int, int]
    label: Label
    instance_id: int

    def __post_init__(self) -> None:
        if len(self.features) != DIMS:
            raise ValueError(f"need {DIMS} features")
        if self.label not in _LABEL_CODES:
            raise ValueError("training labels must be NORMAL or ATTACK")


@dataclass(frozen=True)
class KdNode:
    instance_id: int
    split_dim: int
    left: int | None
    right: int | None


@dataclass(frozen=True)
class KdTreeModel:
    """Topology plus labels; nodes are stored in preorder with root at 0."""

    nodes: tuple[KdNode, ...]
    root: int
    labels: tuple[Label, ...]  # indexed by instance_id
    k: int = DEFAULT_K
    node_budget: int | None = DEFAULT_NODE_BUDGET

    @property
    def size(self) -> int:
        return len(self.nodes)

    def instance_ids_in_node_order(self) -> list[int]:
        return [node.instance_id for node in self.nodes]


class Neighbor(NamedTuple):
    dist_sq: int
    instance_id: int
    label: Label

    @property
    def distance(self) -> float:
        return math.sqrt(self.dist_sq)


@dataclass(frozen=True)
class NeighborSet:
    entries: tuple[Neighbor, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def distance_sum(self) -> float:
        return sum(n.distance for n in self.entries)


def build_kdtree(
    train: Sequence[TrainingInstance],
    k: int = DEFAULT_K,
    node_budget: int | None = DEFAULT_NODE_BUDGET,
) -> KdTreeModel:
    """Median-split KD-tree over the training set.

    At each level the split dimension is the one with the largest spread;
    instances sort by (value, instance_id) and the lower median becomes the
    node, which keeps the build deterministic and the tree balanced even
    with duplicate feature values.
    """
    if not train:
        raise EmptyTrainingSet("cannot build a tree from no instances")
    seen: set[int] = set()
    for inst in train:
        if inst.instance_id in seen:
            raise DuplicateInstanceId(f"instance_id {inst.instance_id} repeated")
        seen.add(inst.instance_id)
    if seen != set(range(len(train))):
        raise TrainingSetError("instance_ids must be dense 0..n-1")

    labels: list[Label] = [Label.NORMAL] * len(train)
    for inst in train:
        labels[inst.instance_id] = inst.label

    nodes: list[KdNode | None] = []

    def split(instances: list[TrainingInstance]) -> int | None:
        if not instances:
            return None
        spreads = [
            max(inst.features[d] for inst in instances)
            - min(inst.features[d] for inst in instances)
            for d in range(DIMS)
        ]
        dim = max(range(DIMS), key=lambda d: spreads[d])
        instances.sort(key=lambda inst: (inst.features[dim], inst.instance_id))
        mid = (len(instances) - 1) // 2
        index = len(nodes)
        nodes.append(None)  # reserve the preorder slot
        left = split(instances[:mid])
        right = split(instances[mid + 1:])
        nodes[index] = KdNode(instances[mid].instance_id, dim, left, right)
        return index

    split(list(train))
    return KdTreeModel(
        nodes=tuple(nodes),  # type: ignore[arg-type]
        root=0,
        labels=tuple(labels),
        k=k,
        node_budget=node_budget,
    )


def _exact_dist_sq(diffs: Sequence[Sequence[int]]) -> list[int]:
    """Squared distances for every instance, exact regardless of magnitude."""
    if isinstance(diffs, np.ndarray):
        if abs(diffs).max(initial=0) <= _INT64_SAFE_DIFF:
            d = diffs.astype(np.int64, copy=False)
            return (d * d).sum(axis=1).tolist()
        diffs = diffs.tolist()
    return [sum(int(v) * int(v) for v in row) for row in diffs]


def _dist_accessors(diffs):
    """Per-instance accessors for dist_sq and single diffs, exact Python ints.

    np.int64 squares overflow silently past 2^63, so the vectorized path only
    applies when the largest diff is provably safe; otherwise fall back to
    plain-int rows.  Values are fetched lazily: the search typically touches
    a small fraction of the instances.
    """
    if isinstance(diffs, np.ndarray):
        if abs(diffs).max(initial=0) <= _INT64_SAFE_DIFF:
            d = diffs.astype(np.int64, copy=False)
            dist_sq = (d * d).sum(axis=1)
            return dist_sq.item, d.item
        diffs = diffs.tolist()
    rows = [[int(v) for v in row] for row in diffs]

    def dist_at(inst: int) -> int:
        return sum(v * v for v in rows[inst])

    def diff_at(flat_index: int) -> int:
        return rows[flat_index // DIMS][flat_index % DIMS]

    return dist_at, diff_at


def _neighbor_set(
    kept: list[tuple[int, int]], labels: Sequence[Label]
) -> NeighborSet:
    kept.sort()
    return NeighborSet(
        tuple(Neighbor(d, i, labels[i]) for d, i in kept)
    )


def linear_scan(
    train: Sequence[TrainingInstance],
    diffs: Sequence[Sequence[int]],
    k: int,
) -> NeighborSet:
    """Exact k nearest by full scan; the oracle the tree search must match.

    diffs row i pairs with train[i]; ties order by instance_id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dist_sq = _exact_dist_sq(diffs)
    order = sorted((d, inst.instance_id) for d, inst in zip(dist_sq, train))
    labels = {inst.instance_id: inst.label for inst in train}
    return NeighborSet(
        tuple(Neighbor(d, i, labels[i]) for d, i in order[:k])
    )


def bbf_search(
    tree: KdTreeModel,
    diffs: Sequence[Sequence[int]],
    k: int | None = None,
    node_budget: int | None | str = "default",
) -> NeighborSet:
    """Best-first search over the tree, examining at most node_budget nodes.

    diffs must be indexed by instance_id (one row per training instance).
    node_budget falls back to the tree's configured budget; None means
    unbounded.  Descent follows the sign of the split-dimension difference
    (non-positive means the training value does not exceed the test value,
    so the test point lies on the right side); the skipped subtree enters a
    frontier keyed by its split-plane bound.  With no budget the result
    equals linear_scan exactly, ties and all.
    """
    k = tree.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    budget = tree.node_budget if node_budget == "default" else node_budget
    if budget is not None and budget <= 0:
        raise BudgetZero("node_budget must be positive (or None for unbounded)")

    if len(diffs) != tree.size:
        raise ValueError("need one diff vector per training instance")
    dist_at, diff_at = _dist_accessors(diffs)

    nodes = tree.nodes
    heappush = heapq.heappush
    heappop = heapq.heappop
    examined = 0
    seq = 0
    # Frontier of (lower-bound dist_sq, insertion seq, node index).
    frontier: list[tuple[int, int, int]] = [(0, 0, tree.root)]
    # Bounded worst-first set: heap of (-dist_sq, -instance_id).
    kept: list[tuple[int, int]] = []

    while frontier:
        bound_sq, _, index = heappop(frontier)
        if len(kept) == k and bound_sq > -kept[0][0]:
            break  # nothing left can beat the current worst neighbor
        if budget is not None and examined >= budget:
            break
        examined += 1

        node = nodes[index]
        inst = node.instance_id
        d_sq = dist_at(inst)
        if len(kept) < k:
            heappush(kept, (-d_sq, -inst))
        else:
            worst_d, worst_i = kept[0]
            if (d_sq, inst) < (-worst_d, -worst_i):
                heapq.heapreplace(kept, (-d_sq, -inst))

        d_split = diff_at(inst * DIMS + node.split_dim)
        if d_split <= 0:
            near, far = node.right, node.left
        else:
            near, far = node.left, node.right
        if near is not None:
            seq += 1
            heappush(frontier, (bound_sq, seq, near))
        if far is not None:
            seq += 1
            far_bound = d_split * d_split
            if far_bound < bound_sq:
                far_bound = bound_sq
            heappush(frontier, (far_bound, seq, far))

    return _neighbor_set([(-d, -i) for d, i in kept], tree.labels)


def vote(neighbors: NeighborSet) -> Label:
    """Majority label; an exact tie resolves to ATTACK (fail safe)."""
    if len(neighbors) == 0:
        raise EmptyNeighborSet("cannot vote over no neighbors")
    attack = sum(1 for n in neighbors if n.label is Label.ATTACK)
    return Label.ATTACK if 2 * attack >= len(neighbors) else Label.NORMAL


def serialize_topology(tree: KdTreeModel) -> bytes:
    """Node count then per-node records, little-endian, features excluded.

    Per node: instance_id u32, split_dim u8, left u32 (0xFFFFFFFF when
    absent), right u32, label u8.  Node order is preorder with root first.
    """
    out = [struct.pack("<I", tree.size)]
    for node in tree.nodes:
        out.append(
            _NODE_STRUCT.pack(
                node.instance_id,
                node.split_dim,
                _NO_CHILD if node.left is None else node.left,
                _NO_CHILD if node.right is None else node.right,
                _LABEL_CODES[tree.labels[node.instance_id]],
            )
        )
    return b"".join(out)


def parse_topology(
    data: bytes,
    k: int = DEFAULT_K,
    node_budget: int | None = DEFAULT_NODE_BUDGET,
) -> KdTreeModel:
    if len(data) < 4:
        raise ValueError("topology blob too short")
    (count,) = struct.unpack_from("<I", data)
    expected = 4 + count * _NODE_STRUCT.size
    if len(data) != expected:
        raise ValueError(f"topology blob should be {expected} bytes")
    nodes = []
    labels: list[Label] = [Label.NORMAL] * count
    for i in range(count):
        inst, dim, left, right, code = _NODE_STRUCT.unpack_from(
            data, 4 + i * _NODE_STRUCT.size
        )
        if code not in _CODE_LABELS:
            raise ValueError(f"unknown label code {code}")
        if inst >= count:
            raise ValueError("instance_id out of range")
        for child in (left, right):
            if child != _NO_CHILD and child >= count:
                raise ValueError("child index out of range")
        nodes.append(
            KdNode(
                inst,
                dim,
                None if left == _NO_CHILD else left,
                None if right == _NO_CHILD else right,
            )
        )
        labels[inst] = _CODE_LABELS[code]
    return KdTreeModel(tuple(nodes), 0, tuple(labels), k, node_budget)
