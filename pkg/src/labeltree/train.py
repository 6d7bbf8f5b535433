"""Per-node probabilistic classifiers and whole-tree training.

Each tree node v gets one L2-regularized linear model estimating the
probability that an example has at least one relevant label among the
leaves of v, conditioned on the parent node being relevant. An example
is a training point for v iff v is the root or the parent indicator is
positive; its binary target is the node's own indicator.

The node objective is the liblinear-style primal

    0.5 * ||w||^2 + C * sum_i loss(t_i * (w . x_i + b))

with logistic loss log(1 + exp(-z)) by default (squared hinge
max(0, 1 - z)^2 behind a config switch) and an unregularized bias.
Optimization uses full-batch L-BFGS, which is deterministic, so parallel
and sequential training produce identical models.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Sequence

import multiprocessing

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

from .data import Dataset, SparseVector, dot, feature_matrix
from .errors import FormatError
from .tree import LabelTree, load_tree, save_tree

PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12

TREE_FILE = "tree.txt"
MANIFEST_FILE = "hyperparams.txt"
WEIGHTS_FILE = "weights.txt"


@dataclass(frozen=True)
class TrainConfig:
    reg_c: float = 1.0
    tol: float = 1e-3
    max_iter: int = 500
    loss: str = "logistic"  # or "squared_hinge"
    prune_threshold: float = 1e-6
    threads: int = 1


class NodeModel:
    """One linear probabilistic classifier: sparse weights plus a bias."""

    __slots__ = ("weights", "bias")

    def __init__(self, weights: SparseVector, bias: float):
        if not np.all(np.isfinite(weights.values)) or not np.isfinite(bias):
            raise ValueError("node model parameters must be finite")
        self.weights = weights
        self.bias = float(bias)

    def predict_proba(self, x: SparseVector) -> float:
        """Sigmoid of the margin, clamped to [1e-12, 1 - 1e-12]."""
        margin = dot(self.weights, x) + self.bias
        return float(min(max(expit(margin), PROB_FLOOR), PROB_CEIL))

    def __eq__(self, other) -> bool:
        if not isinstance(other, NodeModel):
            return NotImplemented
        return self.bias == other.bias and self.weights == other.weights


class PLTModel:
    """A label tree plus one NodeModel per tree node."""

    __slots__ = ("tree", "node_models", "num_features", "num_labels", "config")

    def __init__(
        self,
        tree: LabelTree,
        node_models: Sequence[NodeModel],
        num_features: int,
        num_labels: int,
        config: TrainConfig | None = None,
    ):
        if len(node_models) != tree.num_nodes:
            raise ValueError("one node model per tree node is required")
        if num_labels != tree.m:
            raise ValueError("label count does not match the tree")
        self.tree = tree
        self.node_models = list(node_models)
        self.num_features = int(num_features)
        self.num_labels = int(num_labels)
        self.config = config or TrainConfig()


def assign_node_examples(
    tree: LabelTree, dataset: Dataset
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Positive/negative example ids per node under the chain-rule scheme.

    Example i reaches node v iff v is the root or i is positive at the
    parent; it is positive at v iff it has an observed label among v's
    leaves.
    """
    if tree.m != dataset.num_labels:
        raise ValueError("tree label count does not match dataset")
    n = tree.num_nodes
    pos: list[list[int]] = [[] for _ in range(n)]
    neg: list[list[int]] = [[] for _ in range(n)]
    parent = tree.parent
    leaf_of_label = tree.leaf_of_label
    for i, (_, labels) in enumerate(dataset.examples):
        if not labels:
            neg[tree.root].append(i)
            continue
        positive = set()
        for j in labels:
            v = int(leaf_of_label[j])
            while v != -1 and v not in positive:
                positive.add(v)
                v = int(parent[v])
        pos[tree.root].append(i)
        for v in positive:
            for c in tree.children[v]:
                if c in positive:
                    pos[c].append(i)
                else:
                    neg[c].append(i)
    to_array = lambda lst: np.asarray(lst, dtype=np.int64)
    return [to_array(a) for a in pos], [to_array(a) for a in neg]


def _fit_binary(
    x: sp.csr_matrix,
    targets: np.ndarray,
    reg_c: float,
    tol: float,
    max_iter: int,
    loss: str,
) -> tuple[np.ndarray, float]:
    """Minimize the primal objective; returns (dense weights, bias)."""
    n_features = x.shape[1]
    xt = x.T.tocsr()
    t = targets.astype(np.float64)

    if loss == "logistic":

        def fun(theta):
            w, b = theta[:n_features], theta[n_features]
            z = t * (x @ w + b)
            val = 0.5 * np.dot(w, w) + reg_c * np.logaddexp(0.0, -z).sum()
            coef = reg_c * t * -expit(-z)
            grad = np.empty(n_features + 1)
            grad[:n_features] = w + xt @ coef
            grad[n_features] = coef.sum()
            return val, grad

    elif loss == "squared_hinge":

        def fun(theta):
            w, b = theta[:n_features], theta[n_features]
            z = t * (x @ w + b)
            hinge = np.maximum(0.0, 1.0 - z)
            val = 0.5 * np.dot(w, w) + reg_c * np.dot(hinge, hinge)
            coef = reg_c * t * (-2.0 * hinge)
            grad = np.empty(n_features + 1)
            grad[:n_features] = w + xt @ coef
            grad[n_features] = coef.sum()
            return val, grad

    else:
        raise ValueError(f"unknown loss {loss!r}")

    result = minimize(
        fun,
        np.zeros(n_features + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-12},
    )
    return result.x[:n_features], float(result.x[n_features])


def _prune_weights(w: np.ndarray, indices: np.ndarray, threshold: float) -> SparseVector:
    keep = np.abs(w) >= threshold
    return SparseVector(indices[keep], w[keep])


def _fit_node(
    x: sp.csr_matrix, rows: np.ndarray, targets: np.ndarray, config: TrainConfig
) -> NodeModel:
    """Fit one node on a row subset, restricted to its active features."""
    if rows.size == 0:
        return NodeModel(SparseVector(), 0.0)
    xr = x[rows]
    active = np.unique(xr.indices)
    if active.size:
        compact = sp.csr_matrix(
            (xr.data, np.searchsorted(active, xr.indices), xr.indptr),
            shape=(xr.shape[0], active.size),
        )
    else:
        compact = sp.csr_matrix((xr.shape[0], 0))
    w, bias = _fit_binary(
        compact, targets, config.reg_c, config.tol, config.max_iter, config.loss
    )
    return NodeModel(_prune_weights(w, active, config.prune_threshold), bias)


def train_node(
    positive_examples: Sequence[SparseVector],
    negative_examples: Sequence[SparseVector],
    reg_c: float = 1.0,
    tol: float = 1e-3,
    max_iter: int = 500,
    loss: str = "logistic",
    prune_threshold: float = 1e-6,
) -> NodeModel:
    """Train a single binary node model; inputs may be single-class."""
    vectors = list(positive_examples) + list(negative_examples)
    if not vectors:
        raise ValueError("at least one training example is required")
    max_idx = max((int(v.indices[-1]) for v in vectors if v.indices.size), default=-1)
    x = sp.csr_matrix(
        (
            np.concatenate([v.values for v in vectors] or [np.zeros(0)]),
            np.concatenate([v.indices for v in vectors] or [np.zeros(0, np.int64)]),
            np.cumsum([0] + [v.indices.size for v in vectors]),
        ),
        shape=(len(vectors), max_idx + 1),
    )
    targets = np.concatenate(
        [np.ones(len(positive_examples)), -np.ones(len(negative_examples))]
    )
    config = TrainConfig(
        reg_c=reg_c,
        tol=tol,
        max_iter=max_iter,
        loss=loss,
        prune_threshold=prune_threshold,
    )
    return _fit_node(x, np.arange(len(vectors)), targets, config)


def _node_rows_targets(pos: np.ndarray, neg: np.ndarray):
    rows = np.concatenate([pos, neg])
    targets = np.concatenate([np.ones(pos.size), -np.ones(neg.size)])
    return rows, targets


# Context for forked training workers; populated before the pool starts.
_FIT_CTX: dict = {}


def _fit_task(v: int) -> tuple[int, NodeModel]:
    x = _FIT_CTX["x"]
    rows, targets = _node_rows_targets(_FIT_CTX["pos"][v], _FIT_CTX["neg"][v])
    return v, _fit_node(x, rows, targets, _FIT_CTX["config"])


def train_plt(
    tree: LabelTree, dataset: Dataset, config: TrainConfig | None = None
) -> PLTModel:
    """Train one node model per tree node.

    Node fits are independent, so they run across processes when
    ``config.threads > 1``; the result is identical to sequential
    training.
    """
    config = config or TrainConfig()
    if tree.m != dataset.num_labels:
        raise ValueError(
            f"tree has {tree.m} labels but dataset declares {dataset.num_labels}"
        )
    x = feature_matrix(dataset)
    pos, neg = assign_node_examples(tree, dataset)
    n = tree.num_nodes
    models: list[NodeModel | None] = [None] * n

    if config.threads > 1 and n > 1:
        _FIT_CTX.update({"x": x, "pos": pos, "neg": neg, "config": config})
        try:
            ctx = multiprocessing.get_context("fork")
            chunk = max(1, n // (config.threads * 8))
            with ProcessPoolExecutor(config.threads, mp_context=ctx) as pool:
                for v, model in pool.map(_fit_task, range(n), chunksize=chunk):
                    models[v] = model
        finally:
            _FIT_CTX.clear()
    else:
        for v in range(n):
            rows, targets = _node_rows_targets(pos[v], neg[v])
            models[v] = _fit_node(x, rows, targets, config)

    return PLTModel(tree, models, dataset.num_features, dataset.num_labels, config)


def save_model(
    model: PLTModel, directory: str | os.PathLike, extra: dict | None = None
) -> None:
    """Persist tree, hyperparameter manifest, and per-node weights.

    Weights are written with repr precision, so a reloaded model
    reproduces predictions bit-exactly. Pruned weights (dropped below
    the configured threshold at train time) are simply absent.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tree(model.tree, directory / TREE_FILE)
    cfg = model.config
    manifest = {
        "num_features": model.num_features,
        "num_labels": model.num_labels,
        "reg_c": repr(cfg.reg_c),
        "tol": repr(cfg.tol),
        "max_iter": cfg.max_iter,
        "loss": cfg.loss,
        "prune_threshold": repr(cfg.prune_threshold),
    }
    if extra:
        manifest.update(extra)
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        for key, value in manifest.items():
            fh.write(f"{key}={value}\n")
    with open(directory / WEIGHTS_FILE, "w", encoding="utf-8") as fh:
        for v, nm in enumerate(model.node_models):
            feats = " ".join(
                f"{int(i)}:{float(w)!r}"
                for i, w in zip(nm.weights.indices, nm.weights.values)
            )
            if feats:
                fh.write(f"{v} {nm.bias!r} {feats}\n")
            else:
                fh.write(f"{v} {nm.bias!r}\n")


def _parse_manifest(path: Path) -> dict[str, str]:
    manifest = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError("expected 'key=value'", lineno)
            manifest[key] = value
    return manifest


def load_model(directory: str | os.PathLike) -> PLTModel:
    directory = Path(directory)
    tree = load_tree(directory / TREE_FILE)
    manifest = _parse_manifest(directory / MANIFEST_FILE)
    try:
        num_features = int(manifest["num_features"])
        num_labels = int(manifest["num_labels"])
    except KeyError as exc:
        raise FormatError(f"manifest is missing {exc}") from None
    config = TrainConfig()
    if "reg_c" in manifest:
        config = replace(
            config,
            reg_c=float(manifest["reg_c"]),
            tol=float(manifest.get("tol", config.tol)),
            max_iter=int(manifest.get("max_iter", config.max_iter)),
            loss=manifest.get("loss", config.loss),
            prune_threshold=float(
                manifest.get("prune_threshold", config.prune_threshold)
            ),
        )

    models: list[NodeModel | None] = [None] * tree.num_nodes
    with open(directory / WEIGHTS_FILE, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            toks = raw.split()
            if not toks:
                continue
            if len(toks) < 2:
                raise FormatError("expected 'node_id bias idx:val ...'", lineno)
            try:
                v = int(toks[0])
                bias = float(toks[1])
                pairs = []
                for tok in toks[2:]:
                    idx_s, _, val_s = tok.partition(":")
                    pairs.append((int(idx_s), float(val_s)))
            except ValueError:
                raise FormatError(
                    "expected 'node_id bias idx:val ...'", lineno
                ) from None
            if not 0 <= v < tree.num_nodes or models[v] is not None:
                raise FormatError(f"bad or duplicate node id {v}", lineno)
            models[v] = NodeModel(SparseVector.from_pairs(pairs), bias)
    missing = [v for v, nm in enumerate(models) if nm is None]
    if missing:
        raise FormatError(f"weights file is missing node {missing[0]}")
    return PLTModel(tree, models, num_features, num_labels, config)
