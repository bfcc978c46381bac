"""List-wise re-ranking on top of a frozen session embedding.

Items are projected into the session-vector space by a small sigmoid MLP and
scored by dot product with the session vector.  Training minimises the
cross-entropy between the Plackett-Luce top-k group distributions induced by
the graded labels and by the scores.
"""
from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, clone

from . import nn
from .datamodel import Dataset, QueryBlock
from .sie import SessionEmbedder, SieModel, TrainLog, extract_representations
from .validation import check_blocks, check_fitted, check_positive

logger = logging.getLogger(__name__)

def n_groups(n: int, k: int) -> int:
    return math.perm(n, k)


def _check_group(group, n):
    group = [int(j) for j in group]
    if len(set(group)) != len(group):
        raise ValueError(f"duplicate indices in group {group}")
    if any(not 0 <= j < n for j in group):
        raise ValueError(f"group index out of range for n={n}: {group}")
    return group


def topk_group_probability(scores, group) -> float:
    """Plackett-Luce probability that ``group`` occupies ranks 1..k, in order."""
    z = np.asarray(scores, dtype=float)
    group = _check_group(group, len(z))
    remaining = np.ones(len(z), dtype=bool)
    logp = 0.0
    for j in group:
        rest = z[remaining]
        m = rest.max()
        logp += z[j] - (m + math.log(np.exp(rest - m).sum()))
        remaining[j] = False
    return math.exp(logp)


def _enumerate(n, k) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n), k)), dtype=np.intp).reshape(-1, k)


def _group_log_probs(z, groups):
    """log P(g) for every row of ``groups`` plus the per-step remaining-set softmaxes."""
    shifted = z - z.max()
    e = np.exp(shifted)
    mask = np.ones((len(groups), len(z)))
    rows = np.arange(len(groups))
    logp = np.zeros(len(groups))
    step_softmax = []
    for t in range(groups.shape[1]):
        w = mask * e
        denom = w.sum(axis=1)
        picked = groups[:, t]
        logp += shifted[picked] - np.log(denom)
        step_softmax.append(w / denom[:, None])
        mask[rows, picked] = 0.0
    return logp, step_softmax


def _target(labels, temperature):
    return np.asarray(labels, dtype=float) / temperature


def _use_exact(n, k, cap):
    return n_groups(n, k) <= cap


def _validate(scores, labels, k):
    z = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.shape != y.shape or z.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if len(z) == 0:
        raise ValueError("empty list")
    if not 1 <= k <= len(z):
        raise ValueError(f"k={k} must be in [1, n={len(z)}]")
    return z, y


def listnet_loss(scores, labels, k: int = 10, enumeration_cap: int = 5000,
                 label_temperature: float = 1.0) -> float:
    """Cross-entropy between label- and score-induced top-k group distributions.

    Exact enumeration over all n!/(n-k)! groups when that count is within
    ``enumeration_cap``; otherwise the top-1 (softmax) form.
    """
    return listnet_loss_and_grad(scores, labels, k, enumeration_cap, label_temperature)[0]


def listnet_backward(scores, labels, k: int = 10, enumeration_cap: int = 5000,
                     label_temperature: float = 1.0) -> np.ndarray:
    """Gradient of :func:`listnet_loss` with respect to the scores."""
    return listnet_loss_and_grad(scores, labels, k, enumeration_cap, label_temperature)[1]


def listnet_loss_and_grad(scores, labels, k=10, enumeration_cap=5000, label_temperature=1.0):
    z, y = _validate(scores, labels, k)
    y = _target(y, label_temperature)
    n = len(z)
    if n == 1:
        return 0.0, np.zeros(1)
    if not _use_exact(n, k, enumeration_cap):
        k = 1
    if k == 1:
        # log-probabilities come from log-sum-exp and stay finite, so no clamping
        p_y = nn.softmax(y)
        loss = float(-np.sum(p_y * nn.log_softmax(z)))
        return loss, nn.softmax(z) - p_y
    groups = _enumerate(n, k)
    log_py, _ = _group_log_probs(y, groups)
    log_pz, steps = _group_log_probs(z, groups)
    p_y = np.exp(log_py)
    loss = float(-np.sum(p_y * log_pz))
    grad = np.zeros(n)
    for t in range(k):
        np.add.at(grad, groups[:, t], -p_y)
        grad += p_y @ steps[t]
    return loss, grad


@dataclass
class RankModel:
    item_embeddings: nn.EmbeddingTable
    projection: list
    k: int = 10
    enumeration_cap: int = 5000
    label_temperature: float = 1.0

    @classmethod
    def from_sie(cls, sie_model: SieModel, proj_widths=(100, 100), seed=0, **options) -> "RankModel":
        if proj_widths[-1] != sie_model.representation_dim:
            raise ValueError(
                f"projection output {proj_widths[-1]} must equal the session vector "
                f"dim {sie_model.representation_dim}"
            )
        rng = np.random.default_rng([seed, 2])
        widths = [sie_model.dim, *proj_widths]
        layers = [nn.DenseLayer.create(i, o, "sigmoid", rng) for i, o in zip(widths, widths[1:])]
        return cls(copy.deepcopy(sie_model.item_embeddings), layers, **options)

    @property
    def output_dim(self) -> int:
        return self.projection[-1].out_dim

    def params(self) -> dict[str, np.ndarray]:
        p = {"item_embeddings": self.item_embeddings.vectors}
        for i, layer in enumerate(self.projection):
            p[f"proj{i}.weights"] = layer.weights
            p[f"proj{i}.bias"] = layer.bias
        return p

    def to_json(self) -> str:
        meta = {
            "kind": "rank",
            "item_index": sorted(self.item_embeddings.index, key=self.item_embeddings.index.get),
            "activations": [layer.activation for layer in self.projection],
            "k": self.k,
            "enumeration_cap": self.enumeration_cap,
            "label_temperature": self.label_temperature,
        }
        return nn.tables_to_json(self.params(), meta)

    @classmethod
    def from_json(cls, text: str) -> "RankModel":
        tables, meta = nn.tables_from_json(text)
        if meta.get("kind") != "rank":
            raise ValueError("not a serialized rank model")
        index = {key: i + 1 for i, key in enumerate(meta["item_index"])}
        layers = [
            nn.DenseLayer(tables[f"proj{i}.weights"], tables[f"proj{i}.bias"][0], act)
            for i, act in enumerate(meta["activations"])
        ]
        return cls(nn.EmbeddingTable(tables["item_embeddings"], index, 0), layers,
                   meta["k"], meta["enumeration_cap"], meta["label_temperature"])


def _project(model: RankModel, items, caches=None):
    h = model.item_embeddings.vectors[model.item_embeddings.rows(items)]
    for layer in model.projection:
        h, c = nn.dense_forward_cached(layer, h)
        if caches is not None:
            caches.append(c)
    return h


def project_item(model: RankModel, item) -> np.ndarray:
    return _project(model, [item])[0]


def project_items(model: RankModel, items) -> np.ndarray:
    return _project(model, list(items))


def score(s, model: RankModel, item) -> float:
    s = np.asarray(s, dtype=float)
    if s.shape != (model.output_dim,):
        raise ValueError(f"session vector dim {s.shape} != projection dim {model.output_dim}")
    return float(s @ project_item(model, item))


def score_items(s, model: RankModel, items) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape != (model.output_dim,):
        raise ValueError(f"session vector dim {s.shape} != projection dim {model.output_dim}")
    return project_items(model, items) @ s


def list_loss_and_grads(model: RankModel, s, items, labels) -> tuple[float, dict]:
    """ListNet loss of one shown list and its gradient wrt the rank model's parameters."""
    items = list(items)
    caches = []
    proj = _project(model, items, caches)
    z = proj @ s
    loss, dz = listnet_loss_and_grad(z, labels, min(model.k, len(items)),
                                     model.enumeration_cap, model.label_temperature)
    grads = nn.zero_grads(model.params())
    g = np.outer(dz, s)
    for i in range(len(model.projection) - 1, -1, -1):
        g, gw, gb = nn.dense_backward(model.projection[i], caches[i], g)
        grads[f"proj{i}.weights"] += gw
        grads[f"proj{i}.bias"] += gb
    np.add.at(grads["item_embeddings"], model.item_embeddings.rows(items), g)
    return loss, grads


def train_listrank(
    data,
    sie_model: SieModel,
    *,
    proj_widths=(100, 100),
    eta=0.001,
    epochs=10,
    k=10,
    seed=0,
    enumeration_cap=5000,
    label_temperature=1.0,
    shuffle=False,
    log: TrainLog | None = None,
) -> RankModel:
    """Per-list SGD on the ListNet loss with the S-IE model frozen.

    Each training block contributes one update; blocks with no clicked item
    carry no ranking signal and are skipped.
    """
    blocks = data.train if isinstance(data, Dataset) else list(data)
    model = RankModel.from_sie(sie_model, proj_widths, seed, k=k, enumeration_cap=enumeration_cap,
                               label_temperature=label_temperature)
    usable = [b for b in blocks if len(b.shown_items) > 1 and any(b.labels)]
    if epochs == 0:
        return model
    if not usable:
        raise ValueError("no training block has a clicked item")
    reps = extract_representations(usable, sie_model)
    params = model.params()
    rng = np.random.default_rng([seed, 3])
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(usable)) if shuffle else range(len(usable))
        total = 0.0
        for i in order:
            b = usable[i]
            loss, grads = list_loss_and_grads(model, reps[i], b.shown_items, b.labels)
            if not np.isfinite(loss):
                raise nn.NumericalError(
                    f"ListNet loss diverged in epoch {epoch}, session {b.session_id}"
                )
            total += loss
            nn.sgd_step(params, grads, eta)
        mean_loss = total / len(usable)
        logger.info("listrank epoch %d: loss=%.5f", epoch, mean_loss)
        if log is not None:
            log.add(epoch, mean_loss, float("nan"))
    return model


def block_scores(block: QueryBlock, sie_model: SieModel, rank_model: RankModel, s=None) -> np.ndarray:
    if s is None:
        s = extract_representations([block], sie_model)[0]
    return score_items(s, rank_model, block.shown_items)


def rank_items(block: QueryBlock, sie_model: SieModel, rank_model: RankModel) -> list:
    """Shown items by descending score; ties keep presentation order."""
    z = block_scores(block, sie_model, rank_model)
    return [block.shown_items[j] for j in np.argsort(-z, kind="stable")]


class ListNetRanker(BaseEstimator):
    """Estimator for the list-wise stage.

    ``embedder`` is a :class:`SessionEmbedder`; an unfitted one is cloned and
    fitted on the same blocks first, so the two stages compose into one ``fit``.
    """

    def __init__(self, embedder=None, proj_widths=(100, 100), k=10, eta=0.001, epochs=10,
                 seed=0, enumeration_cap=5000, label_temperature=1.0, shuffle=False):
        self.embedder = embedder
        self.proj_widths = proj_widths
        self.k = k
        self.eta = eta
        self.epochs = epochs
        self.seed = seed
        self.enumeration_cap = enumeration_cap
        self.label_temperature = label_temperature
        self.shuffle = shuffle

    def fit(self, X, y=None):
        check_positive("eta", self.eta)
        check_positive("k", self.k)
        check_positive("label_temperature", self.label_temperature)
        data = X if isinstance(X, Dataset) else check_blocks(X)
        embedder = self.embedder if self.embedder is not None else SessionEmbedder(seed=self.seed)
        if not hasattr(embedder, "model_"):
            embedder = clone(embedder).fit(data)
        self.embedder_ = embedder
        self.log_ = TrainLog()
        self.model_ = train_listrank(
            data, embedder.model_, proj_widths=self.proj_widths, eta=self.eta,
            epochs=self.epochs, k=self.k, seed=self.seed,
            enumeration_cap=self.enumeration_cap, label_temperature=self.label_temperature,
            shuffle=self.shuffle, log=self.log_,
        )
        return self

    @classmethod
    def from_models(cls, sie_model: SieModel, rank_model: RankModel, **params) -> "ListNetRanker":
        est = cls(**params)
        est.embedder_ = SessionEmbedder.from_model(sie_model)
        est.model_ = rank_model
        return est

    def decision_function(self, block: QueryBlock) -> np.ndarray:
        check_fitted(self, "model_")
        return block_scores(block, self.embedder_.model_, self.model_)

    def rank(self, block: QueryBlock) -> list:
        check_fitted(self, "model_")
        return rank_items(block, self.embedder_.model_, self.model_)

    def predict(self, X) -> list:
        return [self.rank(b) for b in check_blocks(X)]

    def score(self, X, y=None) -> float:
        from .evaluation import evaluate
        return evaluate(self.rank, check_blocks(X), "listrank").ndcg_at_all
