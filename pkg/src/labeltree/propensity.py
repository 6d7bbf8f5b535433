"""Per-label propensities and the missing-label observation process.

A label's propensity p_j is the probability that a truly positive label
is actually observed. Propensities are modeled from training-set label
frequencies with the sigmoid-in-log-frequency form

    p_j = 1 / (1 + C * exp(-A * log(N_j + B))),   C = (log N - 1) * (B + 1)^A

using natural logarithms. The inverse propensity q_j = 1/p_j upweights
rare labels during propensity-scored evaluation and inference.

Randomness in the simulator comes from numpy's default PCG64 generator,
seeded explicitly per call, so runs reproduce across platforms.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .data import Dataset, LabelSet
from .errors import FormatError


@dataclass(frozen=True)
class PropensityParams:
    """Parameters the frequency-based propensity model was computed with."""

    a: float
    b: float
    c: float
    n: int


class PropensityTable:
    """Per-label propensity p, inverse propensity q = 1/p, and max of q."""

    __slots__ = ("p", "q", "q_max", "params")

    def __init__(self, p, params: PropensityParams | None = None):
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise ValueError("propensity table must cover at least one label")
        if not np.all(np.isfinite(p)):
            raise ValueError("propensities must be finite")
        if np.any(p <= 0.0) or np.any(p > 1.0):
            raise ValueError("propensities must lie in (0, 1]")
        if params is not None:
            expected_c = (math.log(params.n) - 1.0) * (params.b + 1.0) ** params.a
            if not math.isclose(params.c, expected_c, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(
                    f"inconsistent params: C={params.c} but "
                    f"(log N - 1)(B + 1)^A = {expected_c}"
                )
        q = 1.0 / p
        p.setflags(write=False)
        q.setflags(write=False)
        self.p = p
        self.q = q
        self.q_max = float(q.max())
        self.params = params

    @property
    def num_labels(self) -> int:
        return int(self.p.size)

    @classmethod
    def uniform(cls, num_labels: int) -> "PropensityTable":
        """All-ones table: propensity-scored metrics reduce to plain ones."""
        return cls(np.ones(num_labels))


def label_counts(dataset: Dataset) -> np.ndarray:
    """Number of examples annotated with each label, N_j."""
    counts = np.zeros(dataset.num_labels, dtype=np.int64)
    for _, y in dataset.examples:
        for j in y.labels:
            counts[j] += 1
    return counts


def compute_propensities(
    label_counts, num_examples: int, a: float = 0.55, b: float = 1.5
) -> PropensityTable:
    """Frequency-based propensities for a training set of ``num_examples``.

    Requires num_examples >= 3 (so log N - 1 > 0), a > 0, b > -1, and
    N_j + b > 0 for every label.
    """
    counts = np.asarray(label_counts, dtype=np.float64).reshape(-1)
    if num_examples < 3:
        raise ValueError("num_examples must be >= 3 (log N - 1 must be positive)")
    if b <= -1.0:
        raise ValueError("B must be > -1")
    if a <= 0.0:
        raise ValueError("A must be > 0")
    if np.any(counts < 0):
        raise ValueError("label counts must be non-negative")
    if np.any(counts + b <= 0.0):
        raise ValueError("N_j + B must be positive for every label")
    c = (math.log(num_examples) - 1.0) * (b + 1.0) ** a
    p = 1.0 / (1.0 + c * np.exp(-a * np.log(counts + b)))
    return PropensityTable(p, PropensityParams(float(a), float(b), c, int(num_examples)))


def _retention_probs(propensities) -> np.ndarray:
    if isinstance(propensities, PropensityTable):
        return propensities.p
    p = np.asarray(propensities, dtype=np.float64).reshape(-1)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("retention probabilities must lie in [0, 1]")
    return p


def simulate_missing(true_labels: LabelSet, propensities, rng_seed) -> LabelSet:
    """Censor a label set: label j survives independently with probability p_j.

    Labels absent from ``true_labels`` are never emitted. ``propensities``
    may be a PropensityTable or a plain array of retention probabilities
    (the latter admits p_j = 0 for synthetic experiments).
    """
    p = _retention_probs(propensities)
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(true_labels))
    kept = [j for j, u in zip(true_labels, draws) if u < p[j]]
    return LabelSet(kept)


def censor_dataset(dataset: Dataset, propensities, rng_seed) -> Dataset:
    """Apply the missing-label process to every example, in order."""
    p = _retention_probs(propensities)
    if p.size != dataset.num_labels:
        raise ValueError("propensity table does not match dataset label count")
    rng = np.random.default_rng(rng_seed)
    censored = []
    for x, y in dataset.examples:
        draws = rng.random(len(y))
        kept = [j for j, u in zip(y, draws) if u < p[j]]
        censored.append((x, LabelSet(kept)))
    return Dataset(dataset.num_features, dataset.num_labels, censored)


def save_propensities(table: PropensityTable, sink: IO[str] | str | os.PathLike) -> None:
    """Write header ``A B C N`` then one ``j p_j`` line per label."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            save_propensities(table, fh)
            return
    pr = table.params
    if pr is not None:
        sink.write(f"{pr.a!r} {pr.b!r} {pr.c!r} {pr.n}\n")
    else:
        sink.write("nan nan nan 0\n")
    for j, pj in enumerate(table.p):
        sink.write(f"{j} {float(pj)!r}\n")


def load_propensities(source: IO[str] | Iterable[str] | str | os.PathLike) -> PropensityTable:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_propensities(fh)

    lines = iter(source)
    header = next(lines, None)
    if header is None:
        raise FormatError("empty propensity file", 1)
    parts = header.split()
    if len(parts) != 4:
        raise FormatError("header must be 'A B C N'", 1)
    try:
        a, b, c = (float(t) for t in parts[:3])
        n = int(parts[3])
    except ValueError:
        raise FormatError("header must be 'A B C N'", 1) from None
    params = None
    if not (math.isnan(a) and math.isnan(b) and math.isnan(c)):
        params = PropensityParams(a, b, c, n)

    p = []
    for lineno, raw in enumerate(lines, start=2):
        toks = raw.split()
        if not toks:
            continue
        if len(toks) != 2:
            raise FormatError("expected 'j p_j'", lineno)
        try:
            j = int(toks[0])
            pj = float(toks[1])
        except ValueError:
            raise FormatError("expected 'j p_j'", lineno) from None
        if j != len(p):
            raise FormatError(f"expected label {len(p)}, found {j}", lineno)
        p.append(pj)
    if not p:
        raise FormatError("propensity file has no label lines", 2)
    return PropensityTable(np.asarray(p), params)
