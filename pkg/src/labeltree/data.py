"""Sparse vectors, label sets, and the XMLC-repository text format.

The interchange format is the one used by the extreme-classification
benchmark repositories: a header line ``N d m`` (number of examples,
feature dimension, label count) followed by one line per example of the
form ``l1,l2,... idx:val idx:val ...``. The label field may be empty, in
which case the line starts with a space (or consists only of features).
All indices are 0-based; values are stored as 64-bit floats.
"""

from __future__ import annotations

import math
import os
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import FormatError


class SparseVector:
    """Immutable sparse vector held as parallel (index, value) arrays.

    Indices are strictly increasing, values are finite and nonzero.
    Zero-valued entries passed to the constructor are dropped.
    """

    __slots__ = ("indices", "values")

    def __init__(self, indices=(), values=()):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        val = np.asarray(values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise ValueError("indices and values must have equal length")
        if idx.size:
            if idx[0] < 0:
                raise ValueError("negative feature index")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("feature indices must be strictly increasing")
            if not np.all(np.isfinite(val)):
                raise ValueError("non-finite value in sparse vector")
            keep = val != 0.0
            if not keep.all():
                idx, val = idx[keep], val[keep]
        idx.setflags(write=False)
        val.setflags(write=False)
        self.indices = idx
        self.values = val

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "SparseVector":
        """Build from (index, value) pairs given in any order."""
        pairs = sorted(pairs)
        return cls([i for i, _ in pairs], [v for _, v in pairs])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]

    def dot(self, other: "SparseVector") -> float:
        return dot(self, other)

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"SparseVector({self.entries})"


def dot(a: SparseVector, b: SparseVector) -> float:
    """Dot product over shared indices (merge-join semantics)."""
    if not a.indices.size or not b.indices.size:
        return 0.0
    _, ia, ib = np.intersect1d(
        a.indices, b.indices, assume_unique=True, return_indices=True
    )
    if not ia.size:
        return 0.0
    return float(np.dot(a.values[ia], b.values[ib]))


class LabelSet:
    """Immutable sorted set of label indices."""

    __slots__ = ("labels",)

    def __init__(self, labels: Iterable[int] = ()):
        seq = sorted({int(j) for j in labels})
        if seq and seq[0] < 0:
            raise ValueError("negative label index")
        self.labels = tuple(seq)

    def __contains__(self, j: int) -> bool:
        return int(j) in self.labels

    def __iter__(self) -> Iterator[int]:
        return iter(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __bool__(self) -> bool:
        return bool(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelSet):
            return NotImplemented
        return self.labels == other.labels

    def __hash__(self):
        return hash(self.labels)

    def __repr__(self) -> str:
        return f"LabelSet({list(self.labels)})"


class Dataset:
    """Examples with sparse feature vectors and observed label sets.

    Immutable after construction; every feature index is < num_features
    and every label index is < num_labels.
    """

    __slots__ = ("num_features", "num_labels", "examples")

    def __init__(
        self,
        num_features: int,
        num_labels: int,
        examples: Sequence[tuple[SparseVector, LabelSet]],
    ):
        if num_features < 0 or num_labels < 0:
            raise ValueError("dimensions must be non-negative")
        examples = tuple(examples)
        for i, (x, y) in enumerate(examples):
            if x.indices.size and x.indices[-1] >= num_features:
                raise ValueError(
                    f"example {i}: feature index {int(x.indices[-1])} out of "
                    f"range (d={num_features})"
                )
            if y.labels and y.labels[-1] >= num_labels:
                raise ValueError(
                    f"example {i}: label index {y.labels[-1]} out of range "
                    f"(m={num_labels})"
                )
        self.num_features = int(num_features)
        self.num_labels = int(num_labels)
        self.examples = examples

    @property
    def num_examples(self) -> int:
        return len(self.examples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_features == other.num_features
            and self.num_labels == other.num_labels
            and self.examples == other.examples
        )

    def __hash__(self):
        return hash((self.num_features, self.num_labels, self.examples))

    def __repr__(self) -> str:
        return (
            f"Dataset(N={self.num_examples}, d={self.num_features}, "
            f"m={self.num_labels})"
        )


def _parse_example(line: str, lineno: int, d: int, m: int):
    line = line.rstrip("\r\n")
    example = lineno - 2
    if line:
        first, _, rest = line.partition(" ")
        if ":" in first:
            # No label field at all; whole line is features.
            label_field, rest = "", line
        else:
            label_field = first
    else:
        label_field, rest = "", ""

    labels = []
    if label_field:
        for tok in label_field.split(","):
            if not tok:
                raise FormatError(f"example {example}: empty label token", lineno)
            try:
                j = int(tok)
            except ValueError:
                raise FormatError(
                    f"example {example}: bad label {tok!r}", lineno
                ) from None
            if not 0 <= j < m:
                raise FormatError(
                    f"example {example}: label index {j} out of range (m={m})",
                    lineno,
                )
            labels.append(j)

    pairs = []
    for tok in rest.split():
        idx_s, sep, val_s = tok.partition(":")
        if not sep:
            raise FormatError(
                f"example {example}: bad feature token {tok!r}", lineno
            )
        try:
            idx = int(idx_s)
            val = float(val_s)
        except ValueError:
            raise FormatError(
                f"example {example}: bad feature token {tok!r}", lineno
            ) from None
        if not 0 <= idx < d:
            raise FormatError(
                f"example {example}: feature index {idx} out of range (d={d})",
                lineno,
            )
        if not math.isfinite(val):
            raise FormatError(
                f"example {example}: non-finite value {val_s!r}", lineno
            )
        pairs.append((idx, val))
    pairs.sort()
    for (i1, _), (i2, _) in zip(pairs, pairs[1:]):
        if i1 == i2:
            raise FormatError(
                f"example {example}: duplicate feature index {i1}", lineno
            )
    vec = SparseVector([i for i, _ in pairs], [v for _, v in pairs])
    return vec, LabelSet(labels)


def parse_dataset(source: IO[str] | Iterable[str] | str | os.PathLike) -> Dataset:
    """Parse the XMLC text format from a stream, lines, or a file path."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return parse_dataset(fh)

    lines = iter(source)
    header = next(lines, None)
    if header is None:
        raise FormatError("empty input, expected header 'N d m'", 1)
    parts = header.split()
    if len(parts) != 3:
        raise FormatError("header must be three integers 'N d m'", 1)
    try:
        n, d, m = (int(p) for p in parts)
    except ValueError:
        raise FormatError("header must be three integers 'N d m'", 1) from None
    if n < 0 or d < 0 or m < 0:
        raise FormatError("header dimensions must be non-negative", 1)

    examples = []
    lineno = 1
    for raw in lines:
        lineno += 1
        if len(examples) == n:
            if raw.strip():
                raise FormatError(f"expected {n} examples, found more", lineno)
            continue
        examples.append(_parse_example(raw, lineno, d, m))
    if len(examples) != n:
        raise FormatError(
            f"expected {n} examples, found {len(examples)}", lineno + 1
        )
    return Dataset(d, m, examples)


def write_dataset(dataset: Dataset, sink: IO[str] | str | os.PathLike) -> None:
    """Write the XMLC text format; the output re-parses to an equal Dataset."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            write_dataset(dataset, fh)
            return

    sink.write(
        f"{dataset.num_examples} {dataset.num_features} {dataset.num_labels}\n"
    )
    for x, y in dataset.examples:
        label_field = ",".join(str(j) for j in y.labels)
        feats = " ".join(f"{int(i)}:{float(v)!r}" for i, v in zip(x.indices, x.values))
        if feats:
            sink.write(f"{label_field} {feats}\n")
        else:
            sink.write(f"{label_field}\n")


def feature_matrix(dataset: Dataset) -> sp.csr_matrix:
    """Feature vectors stacked as an N x d CSR matrix."""
    indptr = np.zeros(dataset.num_examples + 1, dtype=np.int64)
    chunks_idx = []
    chunks_val = []
    for i, (x, _) in enumerate(dataset.examples):
        indptr[i + 1] = indptr[i] + x.indices.size
        chunks_idx.append(x.indices)
        chunks_val.append(x.values)
    indices = np.concatenate(chunks_idx) if chunks_idx else np.zeros(0, np.int64)
    values = np.concatenate(chunks_val) if chunks_val else np.zeros(0, np.float64)
    return sp.csr_matrix(
        (values, indices, indptr),
        shape=(dataset.num_examples, dataset.num_features),
    )


def label_matrix(dataset: Dataset) -> sp.csr_matrix:
    """Label indicators stacked as an N x m binary CSR matrix."""
    indptr = np.zeros(dataset.num_examples + 1, dtype=np.int64)
    cols = []
    for i, (_, y) in enumerate(dataset.examples):
        indptr[i + 1] = indptr[i] + len(y)
        cols.extend(y.labels)
    indices = np.asarray(cols, dtype=np.int64)
    values = np.ones(indices.size, dtype=np.float64)
    return sp.csr_matrix(
        (values, indices, indptr),
        shape=(dataset.num_examples, dataset.num_labels),
    )
