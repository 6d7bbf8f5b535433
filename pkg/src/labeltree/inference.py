"""Top-k label prediction over a trained tree model.

All strategies rank labels by the same path-cost bookkeeping. With an
inverse-propensity table q, the cost of leaf l_j for example x is

    f(l_j, x) = log q_max - log q_j - sum over Path(l_j) of log p(x, v)

so that q_j * eta_j(x) = q_max * exp(-f(l_j, x)); minimizing f maximizes
the propensity-weighted label probability. Without a table, q is all
ones and the ranking reduces to plain top-k by eta_j(x).

Strategies:

* ``predict_brute``  - exhaustive evaluation of every leaf (the oracle).
* ``predict_astar``  - best-first search guided by f_hat = g + h, where
  h(v, x) = log q_max - log max(q over leaves under v). The heuristic
  never overestimates the remaining cost and is consistent, so the
  search pops leaves in exact cost order and matches the oracle.
* ``predict_ucs``    - the same search with h = 0 (plain top-k by eta).
* ``predict_beam``   - level-synchronous approximation keeping the b
  best frontier entries per level; leaves reached before the last level
  are carried forward unchanged and compete by their final cost.
* ``predict_ensemble`` - mean score across trees, with exact on-demand
  scores for candidates a tree did not report.

All per-node probabilities are clamped to [1e-12, 1 - 1e-12] before the
log, so costs stay finite; this clamp is part of the scoring contract.
"""

from __future__ import annotations

import heapq
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from math import exp, log
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, SparseVector
from .propensity import PropensityTable
from .train import PLTModel, PROB_CEIL, PROB_FLOOR
from .tree import LabelTree

STRATEGIES = ("brute", "ucs", "astar", "beam")

DEFAULT_BEAM_WIDTH = 10


@dataclass(frozen=True)
class ScoredLabel:
    """A predicted label, its score, and the path cost it came from.

    ``score`` is q_j * eta_j(x) in propensity-scored modes and eta_j(x)
    in plain modes; ``log_cost`` is f(l_j, x), so
    score == q_max * exp(-log_cost).
    """

    label: int
    score: float
    log_cost: float


class _NodeScorer:
    """Lazy, cached per-node log-probabilities for one example."""

    __slots__ = ("_models", "_dense", "_logp")

    def __init__(self, model: PLTModel, x: SparseVector):
        if x.indices.size and x.indices[-1] >= model.num_features:
            raise ValueError(
                f"feature index {int(x.indices[-1])} out of range for model "
                f"(d={model.num_features})"
            )
        self._models = model.node_models
        dense = np.zeros(model.num_features)
        dense[x.indices] = x.values
        self._dense = dense
        self._logp = {}

    def logp(self, v: int) -> float:
        cached = self._logp.get(v)
        if cached is not None:
            return cached
        nm = self._models[v]
        w = nm.weights
        margin = nm.bias
        if w.indices.size:
            margin += float(np.dot(w.values, self._dense[w.indices]))
        p = min(max(float(expit(margin)), PROB_FLOOR), PROB_CEIL)
        value = log(p)
        self._logp[v] = value
        return value


def precompute_subtree_qmax(tree: LabelTree, table: PropensityTable) -> np.ndarray:
    """Per-node max of q over the leaves of each subtree (root = q_max)."""
    if table.num_labels != tree.m:
        raise ValueError("propensity table does not match tree label count")
    out = np.zeros(tree.num_nodes)
    q = table.q
    for v in reversed(tree.topo_order):
        if tree.children[v]:
            out[v] = max(out[c] for c in tree.children[v])
        else:
            out[v] = q[tree.label[v]]
    return out


def _heuristic(
    model: PLTModel, table: PropensityTable | None, subtree_qmax: np.ndarray | None
) -> tuple[float, np.ndarray]:
    """(log q_max, per-node h) for the given table; zeros when no table."""
    if table is None:
        return 0.0, np.zeros(model.tree.num_nodes)
    if table.num_labels != model.num_labels:
        raise ValueError("propensity table does not match model label count")
    if subtree_qmax is None:
        subtree_qmax = precompute_subtree_qmax(model.tree, table)
    lqm = log(table.q_max)
    return lqm, lqm - np.log(subtree_qmax)


def _check_k(model: PLTModel, k: int) -> None:
    if not 1 <= k <= model.num_labels:
        raise ValueError(f"k must be in [1, {model.num_labels}], got {k}")


def predict_brute(
    model: PLTModel, table: PropensityTable | None, x: SparseVector, k: int
) -> list[ScoredLabel]:
    """Evaluate every leaf and return the top k; ties break by label id."""
    _check_k(model, k)
    tree = model.tree
    scorer = _NodeScorer(model, x)
    lqm, h = _heuristic(model, table, None)
    g = np.empty(tree.num_nodes)
    for v in tree.topo_order:
        p = tree.parent[v]
        if p == -1:
            g[v] = -scorer.logp(int(v))
        else:
            g[v] = g[p] - scorer.logp(int(v))
    leaves = tree.leaf_of_label
    f = g[leaves] + h[leaves]
    order = np.lexsort((np.arange(tree.m), f))[:k]
    return [ScoredLabel(int(j), exp(lqm - f[j]), float(f[j])) for j in order]


def _best_first(
    model: PLTModel,
    x: SparseVector,
    k: int,
    h: np.ndarray,
    lqm: float,
    pop_trace: list | None = None,
) -> list[ScoredLabel]:
    """Best-first search on f_hat = g + h; pops ascending (f_hat, node id)."""
    tree = model.tree
    scorer = _NodeScorer(model, x)
    g0 = -scorer.logp(tree.root)
    heap = [(g0 + float(h[tree.root]), tree.root, g0)]
    out = []
    while len(out) < k:
        f, v, g = heapq.heappop(heap)
        if pop_trace is not None:
            pop_trace.append(f)
        children = tree.children[v]
        if not children:
            out.append(ScoredLabel(int(tree.label[v]), exp(lqm - f), f))
            continue
        for c in children:
            gc = g - scorer.logp(c)
            heapq.heappush(heap, (gc + float(h[c]), c, gc))
    return out


def predict_astar(
    model: PLTModel,
    table: PropensityTable | None,
    x: SparseVector,
    k: int,
    subtree_qmax: np.ndarray | None = None,
    pop_trace: list | None = None,
) -> list[ScoredLabel]:
    """Exact propensity-scored top-k via heuristic best-first search.

    ``subtree_qmax`` may be passed to reuse a precomputed table across
    examples; ``pop_trace`` collects the popped f_hat sequence for
    diagnostics. A missing table behaves as all-ones q (h = 0).
    """
    _check_k(model, k)
    lqm, h = _heuristic(model, table, subtree_qmax)
    return _best_first(model, x, k, h, lqm, pop_trace)


def predict_ucs(
    model: PLTModel, x: SparseVector, k: int, pop_trace: list | None = None
) -> list[ScoredLabel]:
    """Plain top-k by eta_j(x): best-first search with a zero heuristic."""
    _check_k(model, k)
    return _best_first(
        model, x, k, np.zeros(model.tree.num_nodes), 0.0, pop_trace
    )


def predict_beam(
    model: PLTModel,
    table: PropensityTable | None,
    x: SparseVector,
    k: int,
    beam_width: int = DEFAULT_BEAM_WIDTH,
) -> list[ScoredLabel]:
    """Level-synchronous beam search; approximate for narrow beams.

    Each level keeps the ``beam_width`` entries with the lowest f_hat
    (ties by node id); leaves already reached stay in the beam
    unchanged. May return fewer than k labels when beam_width < k.
    """
    _check_k(model, k)
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    tree = model.tree
    scorer = _NodeScorer(model, x)
    lqm, h = _heuristic(model, table, None)
    g0 = -scorer.logp(tree.root)
    frontier = [(g0 + float(h[tree.root]), tree.root, g0)]
    while any(tree.children[v] for _, v, _ in frontier):
        frontier.sort()
        nxt = []
        for f, v, g in frontier[:beam_width]:
            children = tree.children[v]
            if not children:
                nxt.append((f, v, g))
                continue
            for c in children:
                gc = g - scorer.logp(c)
                nxt.append((gc + float(h[c]), c, gc))
        frontier = nxt
    frontier.sort()
    return [
        ScoredLabel(int(tree.label[v]), exp(lqm - f), f)
        for f, v, _ in frontier[:k]
    ]


def exact_beam_width(tree: LabelTree) -> int:
    """Smallest beam width that can never prune (leaves carried forward)."""
    widest = 1
    frontier = [tree.root]
    while any(tree.children[v] for v in frontier):
        widest = max(widest, len(frontier))
        nxt = []
        for v in frontier:
            if tree.children[v]:
                nxt.extend(tree.children[v])
            else:
                nxt.append(v)
        frontier = nxt
    return widest


def _single_model(
    model: PLTModel,
    table: PropensityTable | None,
    x: SparseVector,
    k: int,
    strategy: str,
    beam_width: int,
    subtree_qmax: np.ndarray | None = None,
) -> list[ScoredLabel]:
    if strategy == "brute":
        return predict_brute(model, table, x, k)
    if strategy == "ucs":
        return predict_ucs(model, x, k)
    if strategy == "astar":
        return predict_astar(model, table, x, k, subtree_qmax=subtree_qmax)
    if strategy == "beam":
        return predict_beam(model, table, x, k, beam_width)
    raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")


def predict_ensemble(
    models: Sequence[PLTModel],
    table: PropensityTable | None,
    x: SparseVector,
    k: int,
    strategy: str = "astar",
    beam_width: int = DEFAULT_BEAM_WIDTH,
    subtree_qmaxes: Sequence[np.ndarray] | None = None,
) -> list[ScoredLabel]:
    """Mean-score combination across trees.

    Each tree proposes k labels; the union of proposals is rescored in
    every tree (exact path score computed on demand for trees that did
    not report a candidate) and the k best mean scores win, ties by
    ascending label id.
    """
    models = list(models)
    if not models:
        raise ValueError("ensemble requires at least one model")
    d0, m0 = models[0].num_features, models[0].num_labels
    for mdl in models[1:]:
        if mdl.num_features != d0 or mdl.num_labels != m0:
            raise ValueError("ensemble models must share feature and label counts")
    if len(models) == 1:
        return _single_model(
            models[0],
            table,
            x,
            k,
            strategy,
            beam_width,
            subtree_qmaxes[0] if subtree_qmaxes else None,
        )

    per_model: list[dict[int, float]] = []
    contexts = []
    for i, mdl in enumerate(models):
        subq = subtree_qmaxes[i] if subtree_qmaxes else None
        preds = _single_model(mdl, table, x, k, strategy, beam_width, subq)
        per_model.append({p.label: p.score for p in preds})
        lqm, h = _heuristic(mdl, table, subq)
        contexts.append((mdl, lqm, h, None))

    candidates = sorted(set().union(*per_model))
    means = []
    for j in candidates:
        total = 0.0
        for i, scored in enumerate(per_model):
            value = scored.get(j)
            if value is None:
                mdl, lqm, h, scorer = contexts[i]
                if scorer is None:
                    scorer = _NodeScorer(mdl, x)
                    contexts[i] = (mdl, lqm, h, scorer)
                leaf = int(mdl.tree.leaf_of_label[j])
                g = 0.0
                for v in reversed(mdl.tree.path_to_root(leaf)):
                    g = g - scorer.logp(v)
                value = exp(lqm - (g + float(h[leaf])))
            total += value
        means.append(total / len(models))

    order = sorted(range(len(candidates)), key=lambda i: (-means[i], candidates[i]))
    lqm0 = log(table.q_max) if table is not None else 0.0
    return [
        ScoredLabel(candidates[i], means[i], lqm0 - log(means[i]))
        for i in order[:k]
    ]


# Context for forked prediction workers; populated before the pool starts.
_PREDICT_CTX: dict = {}


def _predict_chunk(bounds: tuple[int, int]) -> list[list[ScoredLabel]]:
    ctx = _PREDICT_CTX
    start, end = bounds
    out = []
    for i in range(start, end):
        x, _ = ctx["dataset"].examples[i]
        out.append(
            predict_ensemble(
                ctx["models"],
                ctx["table"],
                x,
                ctx["k"],
                ctx["strategy"],
                ctx["beam_width"],
                ctx["subtree_qmaxes"],
            )
        )
    return out


def predict_batch(
    models: PLTModel | Sequence[PLTModel],
    table: PropensityTable | None,
    dataset: Dataset,
    k: int,
    strategy: str = "astar",
    beam_width: int = DEFAULT_BEAM_WIDTH,
    threads: int = 1,
) -> list[list[ScoredLabel]]:
    """Predict every example; parallel over examples, order-preserving."""
    if isinstance(models, PLTModel):
        models = [models]
    models = list(models)
    if not models:
        raise ValueError("at least one model is required")
    for mdl in models:
        if dataset.num_features > mdl.num_features:
            raise ValueError(
                f"dataset has {dataset.num_features} features but model "
                f"expects at most {mdl.num_features}"
            )
        if dataset.num_labels != mdl.num_labels:
            raise ValueError(
                f"dataset declares {dataset.num_labels} labels but model "
                f"has {mdl.num_labels}"
            )
    subtree_qmaxes = None
    if table is not None:
        subtree_qmaxes = [
            precompute_subtree_qmax(mdl.tree, table) for mdl in models
        ]

    n = dataset.num_examples
    if threads <= 1 or n < 2:
        out = []
        for x, _ in dataset.examples:
            out.append(
                predict_ensemble(
                    models, table, x, k, strategy, beam_width, subtree_qmaxes
                )
            )
        return out

    bounds = []
    step = max(1, (n + threads * 4 - 1) // (threads * 4))
    for start in range(0, n, step):
        bounds.append((start, min(n, start + step)))
    _PREDICT_CTX.update(
        {
            "models": models,
            "table": table,
            "dataset": dataset,
            "k": k,
            "strategy": strategy,
            "beam_width": beam_width,
            "subtree_qmaxes": subtree_qmaxes,
        }
    )
    try:
        ctx = multiprocessing.get_context("fork")
        out = []
        with ProcessPoolExecutor(threads, mp_context=ctx) as pool:
            for chunk in pool.map(_predict_chunk, bounds):
                out.extend(chunk)
    finally:
        _PREDICT_CTX.clear()
    return out
