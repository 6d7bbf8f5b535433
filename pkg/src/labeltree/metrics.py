"""Precision@k and propensity-scored precision@k over a test set.

psp@k weights each hit by the label's inverse propensity q_j, so a
correctly predicted rare label counts for more than a frequent one;
with q identically 1 it reduces exactly to plain precision@k. Examples
with empty observed label sets contribute 0 to both metrics (they are
averaged, not skipped).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import Dataset, LabelSet
from .inference import DEFAULT_BEAM_WIDTH, ScoredLabel, predict_batch
from .propensity import PropensityTable
from .train import PLTModel


def precision_at_k(predictions: Sequence[int], observed: LabelSet, k: int) -> float:
    """Fraction of the k top-ranked predicted labels that are observed."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(predictions) < k:
        raise ValueError(f"need at least {k} predictions, got {len(predictions)}")
    hits = sum(1 for j in predictions[:k] if j in observed)
    return hits / k


def psp_at_k(
    predictions: Sequence[int],
    observed: LabelSet,
    table: PropensityTable,
    k: int,
) -> float:
    """Propensity-weighted precision: hits count q_j instead of 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(predictions) < k:
        raise ValueError(f"need at least {k} predictions, got {len(predictions)}")
    total = sum(float(table.q[j]) for j in predictions[:k] if j in observed)
    return total / k


@dataclass(frozen=True)
class EvalReport:
    """Mean metrics over a test set, reported as percentages."""

    ks: tuple[int, ...]
    precision: dict[int, float]
    psp: dict[int, float]
    num_examples: int

    def lines(self, machine: bool = False) -> list[str]:
        out = []
        for k in self.ks:
            out.append(f"p {k} {self.precision[k]:.2f}")
        for k in self.ks:
            out.append(f"psp {k} {self.psp[k]:.2f}")
        if machine:
            for k in self.ks:
                out.append(f"p@{k}={self.precision[k]!r}")
            for k in self.ks:
                out.append(f"psp@{k}={self.psp[k]!r}")
        return out


def evaluate(
    models: PLTModel | Sequence[PLTModel],
    test: Dataset,
    table: PropensityTable,
    ks: Sequence[int] = (1, 3, 5),
    strategy: str = "astar",
    beam_width: int = DEFAULT_BEAM_WIDTH,
    threads: int = 1,
) -> EvalReport:
    """Mean p@k and psp@k of a prediction strategy over a test dataset.

    The strategy is asked for max(ks) labels per example; each metric is
    computed on the top-k prefix. Aggregation is in full precision; the
    x100 scaling happens at report time.
    """
    if test.num_examples == 0:
        raise ValueError("test set is empty")
    ks = tuple(sorted(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    kmax = ks[-1]
    if strategy == "beam" and beam_width < kmax:
        raise ValueError("beam width must be >= max(ks)")

    batch = predict_batch(
        models, table, test, kmax, strategy, beam_width, threads
    )
    p_sums = {k: 0.0 for k in ks}
    psp_sums = {k: 0.0 for k in ks}
    for preds, (_, observed) in zip(batch, test.examples):
        labels = [p.label for p in preds]
        for k in ks:
            p_sums[k] += precision_at_k(labels, observed, k)
            psp_sums[k] += psp_at_k(labels, observed, table, k)
    n = test.num_examples
    return EvalReport(
        ks=ks,
        precision={k: 100.0 * p_sums[k] / n for k in ks},
        psp={k: 100.0 * psp_sums[k] / n for k in ks},
        num_examples=n,
    )
