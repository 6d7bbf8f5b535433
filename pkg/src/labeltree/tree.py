"""Label trees and their construction by hierarchical balanced 2-means.

The tree is rooted, leaves biject with labels, and internal structure is
produced by recursively splitting the label set into two equal halves
(sizes differ by at most one) until a set fits under one pre-leaf node,
whose children are that set's leaves. Splits cluster L2-normalized label
feature profiles by cosine similarity.
"""

from __future__ import annotations

import os
from collections import deque
from typing import IO, Iterable

import numpy as np
import scipy.sparse as sp

from .data import Dataset, SparseVector, feature_matrix, label_matrix
from .errors import FormatError

DEFAULT_MAX_LEAF_CLUSTER = 100

_SPLIT_TOL = 1e-4
_SPLIT_MAX_ITER = 50


class LabelTree:
    """Rooted tree whose leaves biject with labels [0, m).

    Nodes are dense ids 0..num_nodes-1; ``parent`` is -1 for the root and
    ``label`` is -1 for internal nodes. Immutable after construction.
    """

    __slots__ = (
        "parent",
        "label",
        "children",
        "m",
        "root",
        "leaf_of_label",
        "depth",
        "topo_order",
    )

    def __init__(self, parent, label, m: int):
        parent = np.asarray(parent, dtype=np.int64).reshape(-1)
        label = np.asarray(label, dtype=np.int64).reshape(-1)
        n = parent.size
        if label.size != n:
            raise ValueError("parent and label arrays must have equal length")
        if n == 0:
            raise ValueError("tree must have at least one node")

        roots = np.flatnonzero(parent == -1)
        if roots.size != 1:
            raise ValueError(f"tree must have exactly one root, found {roots.size}")
        root = int(roots[0])
        if np.any((parent < -1) | (parent >= n)):
            raise ValueError("parent id out of range")
        if np.any(parent == np.arange(n)):
            raise ValueError("node cannot be its own parent")

        children: list[list[int]] = [[] for _ in range(n)]
        for v in range(n):
            if v != root:
                children[parent[v]].append(v)

        depth = np.full(n, -1, dtype=np.int64)
        order = np.empty(n, dtype=np.int64)
        queue = deque([root])
        depth[root] = 0
        pos = 0
        while queue:
            v = queue.popleft()
            order[pos] = v
            pos += 1
            for c in children[v]:
                depth[c] = depth[v] + 1
                queue.append(c)
        if pos != n:
            raise ValueError("tree contains unreachable nodes or a cycle")

        seen = np.zeros(m, dtype=bool)
        leaf_of_label = np.full(m, -1, dtype=np.int64)
        for v in range(n):
            if children[v]:
                if label[v] != -1:
                    raise ValueError(f"internal node {v} carries a label")
            else:
                j = int(label[v])
                if not 0 <= j < m:
                    raise ValueError(f"leaf {v} label {j} out of range (m={m})")
                if seen[j]:
                    raise ValueError(f"label {j} appears on more than one leaf")
                seen[j] = True
                leaf_of_label[j] = v
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise ValueError(f"label {missing} has no leaf")

        parent.setflags(write=False)
        label.setflags(write=False)
        depth.setflags(write=False)
        order.setflags(write=False)
        leaf_of_label.setflags(write=False)
        self.parent = parent
        self.label = label
        self.children = tuple(tuple(c) for c in children)
        self.m = int(m)
        self.root = root
        self.leaf_of_label = leaf_of_label
        self.depth = depth
        self.topo_order = order

    @property
    def num_nodes(self) -> int:
        return int(self.parent.size)

    def is_leaf(self, v: int) -> bool:
        return not self.children[v]

    def path_to_root(self, v: int) -> list[int]:
        """Ordered node list from v up to the root, inclusive."""
        path = []
        while v != -1:
            path.append(int(v))
            v = self.parent[v]
        return path

    def subtree_labels(self, v: int) -> list[int]:
        """Labels of all leaves under v (v included if it is a leaf)."""
        out = []
        stack = [v]
        while stack:
            u = stack.pop()
            if self.children[u]:
                stack.extend(self.children[u])
            else:
                out.append(int(self.label[u]))
        return sorted(out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelTree):
            return NotImplemented
        return (
            self.m == other.m
            and np.array_equal(self.parent, other.parent)
            and np.array_equal(self.label, other.label)
        )

    def __hash__(self):
        return hash((self.m, self.parent.tobytes(), self.label.tobytes()))


def tree_paths(tree: LabelTree) -> list[list[int]]:
    """Per-label path lists, each ordered leaf -> root inclusive."""
    return [tree.path_to_root(int(tree.leaf_of_label[j])) for j in range(tree.m)]


def save_tree(tree: LabelTree, sink: IO[str] | str | os.PathLike) -> None:
    """Write ``num_nodes m`` then one ``node_id parent_id label`` line per node."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            save_tree(tree, fh)
            return
    sink.write(f"{tree.num_nodes} {tree.m}\n")
    for v in range(tree.num_nodes):
        sink.write(f"{v} {int(tree.parent[v])} {int(tree.label[v])}\n")


def load_tree(source: IO[str] | Iterable[str] | str | os.PathLike) -> LabelTree:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_tree(fh)

    lines = iter(source)
    header = next(lines, None)
    if header is None:
        raise FormatError("empty tree file", 1)
    parts = header.split()
    if len(parts) != 2:
        raise FormatError("tree header must be 'num_nodes m'", 1)
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise FormatError("tree header must be 'num_nodes m'", 1) from None

    parent = np.empty(n, dtype=np.int64)
    label = np.empty(n, dtype=np.int64)
    count = 0
    for lineno, raw in enumerate(lines, start=2):
        toks = raw.split()
        if not toks:
            continue
        if len(toks) != 3:
            raise FormatError("expected 'node_id parent_id label'", lineno)
        try:
            v, p, lab = (int(t) for t in toks)
        except ValueError:
            raise FormatError("expected 'node_id parent_id label'", lineno) from None
        if count >= n:
            raise FormatError(f"expected {n} node lines, found more", lineno)
        if v != count:
            raise FormatError(f"expected node id {count}, found {v}", lineno)
        parent[count] = p
        label[count] = lab
        count += 1
    if count != n:
        raise FormatError(f"expected {n} node lines, found {count}", count + 2)
    return LabelTree(parent, label, m)


class LabelRepresentation:
    """Per-label feature profiles used as clustering input.

    Row j is the L2-normalized sum of the L2-normalized feature vectors of
    the examples annotated with label j; labels with no positive examples
    keep the zero vector.
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix: sp.csr_matrix):
        self.matrix = matrix.tocsr()

    @property
    def num_labels(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.matrix.shape[1])

    def vector(self, j: int) -> SparseVector:
        row = self.matrix.getrow(j).tocoo()
        order = np.argsort(row.col)
        return SparseVector(row.col[order], row.data[order])


def _normalize_rows(matrix: sp.csr_matrix) -> sp.csr_matrix:
    matrix = matrix.tocsr().copy()
    norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    matrix.data *= np.repeat(scale, np.diff(matrix.indptr))
    return matrix


def build_label_representations(dataset: Dataset) -> LabelRepresentation:
    """Aggregate normalized example vectors into per-label unit profiles."""
    if dataset.num_examples == 0:
        raise ValueError("dataset is empty")
    x = _normalize_rows(feature_matrix(dataset))
    y = label_matrix(dataset)
    profiles = (y.T @ x).tocsr()
    return LabelRepresentation(_normalize_rows(profiles))


def _normalized_mean(rows: sp.csr_matrix) -> np.ndarray:
    mean = np.asarray(rows.mean(axis=0)).ravel()
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else mean


def _balanced_split(
    matrix: sp.csr_matrix, members: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``members`` into halves of sizes ceil(n/2) and floor(n/2).

    Two centroids start at two distinct random member profiles; each
    round sorts members by the difference of cosine similarities to the
    centroids, gives the top half to the first centroid, and recomputes
    centroids as normalized means, until movement < 1e-4 or 50 rounds.
    Zero-profile members sort last; all ties break by ascending label id.
    """
    sub = matrix[members]
    n = members.size
    seeds = rng.choice(n, size=2, replace=False)
    c0 = np.asarray(sub[seeds[0]].todense()).ravel()
    c1 = np.asarray(sub[seeds[1]].todense()).ravel()
    is_zero = np.diff(sub.indptr) == 0
    n_top = (n + 1) // 2
    for _ in range(_SPLIT_MAX_ITER):
        diff = sub @ c0 - sub @ c1
        order = np.lexsort((members, -diff, is_zero))
        top = np.sort(order[:n_top])
        bottom = np.sort(order[n_top:])
        new_c0 = _normalized_mean(sub[top])
        new_c1 = _normalized_mean(sub[bottom])
        movement = max(
            np.linalg.norm(new_c0 - c0), np.linalg.norm(new_c1 - c1)
        )
        c0, c1 = new_c0, new_c1
        if movement < _SPLIT_TOL:
            break
    return members[top], members[bottom]


def build_tree(
    representation: LabelRepresentation,
    max_leaf_cluster: int = DEFAULT_MAX_LEAF_CLUSTER,
    seed: int = 0,
) -> LabelTree:
    """Recursively bisect the label set until groups fit under pre-leaves.

    Deterministic for a given seed: subtree seeds are spawned from a
    numpy SeedSequence, so sibling splits never share random state.
    """
    if max_leaf_cluster < 1:
        raise ValueError("max_leaf_cluster must be >= 1")
    m = representation.num_labels
    if m == 0:
        raise ValueError("cannot build a tree over zero labels")

    matrix = representation.matrix
    parent: list[int] = []
    label: list[int] = []

    def add_node(parent_id: int, lab: int) -> int:
        parent.append(parent_id)
        label.append(lab)
        return len(parent) - 1

    def grow(members: np.ndarray, parent_id: int, seq: np.random.SeedSequence):
        v = add_node(parent_id, -1)
        if members.size <= max_leaf_cluster:
            for j in members:
                add_node(v, int(j))
            return
        rng = np.random.default_rng(seq)
        top, bottom = _balanced_split(matrix, members, rng)
        seq_top, seq_bottom = seq.spawn(2)
        grow(top, v, seq_top)
        grow(bottom, v, seq_bottom)

    grow(np.arange(m, dtype=np.int64), -1, np.random.SeedSequence(seed))
    return LabelTree(parent, label, m)
