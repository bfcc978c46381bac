"""Session information embedding: pooled behaviour features into a relu MLP.

The MLP is trained as a two-class (clicked/purchased vs. skipped) classifier
over (session history, candidate item) pairs.  Its last relu layer, evaluated
with the candidate segment blanked out, is the session vector consumed by the
list-wise ranker.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .datamodel import Dataset, QueryBlock
from .validation import check_blocks, check_choice, check_fitted, check_positive

logger = logging.getLogger(__name__)

FEATURE_SETS = ("both", "click_only", "view_only", "none")
REPR_ITEM_MODES = ("zero", "mean-of-shown")
POSITIVE = 1
NEGATIVE = 0


@dataclass(frozen=True)
class SieSample:
    block_index: int
    target_item: str
    clicks_before: tuple
    views_before: tuple
    user: str | None
    label: int
    purchases_before: tuple = ()


@dataclass
class SieModel:
    item_embeddings: nn.EmbeddingTable
    user_embeddings: nn.EmbeddingTable
    mlp: list
    head: nn.DenseLayer
    view_embeddings: nn.EmbeddingTable | None = None
    pooling: str = "average"
    features: str = "both"
    purchases_as_clicks: bool = False
    repr_item: str = "zero"

    @classmethod
    def create(
        cls,
        item_ids,
        user_ids=(),
        *,
        embedding_dim=200,
        mlp_widths=(800, 200, 100),
        seed=0,
        separate_view_table=False,
        **options,
    ) -> "SieModel":
        rng = np.random.default_rng(seed)
        items = nn.EmbeddingTable.create(item_ids, embedding_dim, rng)
        users = nn.EmbeddingTable.create(user_ids, embedding_dim, rng)
        views = nn.EmbeddingTable.create(item_ids, embedding_dim, rng) if separate_view_table else None
        widths = [4 * embedding_dim, *mlp_widths]
        mlp = [nn.DenseLayer.create(i, o, "relu", rng) for i, o in zip(widths, widths[1:])]
        head = nn.DenseLayer.create(widths[-1], 2, "identity", rng)
        return cls(items, users, mlp, head, views, **options)

    @property
    def dim(self) -> int:
        return self.item_embeddings.dim

    @property
    def representation_dim(self) -> int:
        return self.mlp[-1].out_dim

    @property
    def view_table(self) -> nn.EmbeddingTable:
        return self.view_embeddings if self.view_embeddings is not None else self.item_embeddings

    def params(self) -> dict[str, np.ndarray]:
        p = {"item_embeddings": self.item_embeddings.vectors,
             "user_embeddings": self.user_embeddings.vectors}
        if self.view_embeddings is not None:
            p["view_embeddings"] = self.view_embeddings.vectors
        for i, layer in enumerate(self.mlp):
            p[f"mlp{i}.weights"] = layer.weights
            p[f"mlp{i}.bias"] = layer.bias
        p["head.weights"] = self.head.weights
        p["head.bias"] = self.head.bias
        return p

    def history(self, clicks, views, purchases=()) -> tuple[tuple, tuple]:
        """Apply the feature-set mask and purchase folding to a raw history."""
        clicks = tuple(clicks) + (tuple(purchases) if self.purchases_as_clicks else ())
        views = tuple(views)
        if self.features in ("view_only", "none"):
            clicks = ()
        if self.features in ("click_only", "none"):
            views = ()
        return clicks, views

    def to_json(self) -> str:
        meta = {
            "kind": "sie",
            "item_index": _index_list(self.item_embeddings),
            "user_index": _index_list(self.user_embeddings),
            "activations": [layer.activation for layer in self.mlp] + [self.head.activation],
            "pooling": self.pooling,
            "features": self.features,
            "purchases_as_clicks": self.purchases_as_clicks,
            "repr_item": self.repr_item,
            "separate_view_table": self.view_embeddings is not None,
        }
        return nn.tables_to_json(self.params(), meta)

    @classmethod
    def from_json(cls, text: str) -> "SieModel":
        tables, meta = nn.tables_from_json(text)
        if meta.get("kind") != "sie":
            raise ValueError("not a serialized S-IE model")
        items = _table(tables["item_embeddings"], meta["item_index"])
        users = _table(tables["user_embeddings"], meta["user_index"])
        views = _table(tables["view_embeddings"], meta["item_index"]) if meta["separate_view_table"] else None
        n_layers = len(meta["activations"]) - 1
        mlp = [
            nn.DenseLayer(tables[f"mlp{i}.weights"], tables[f"mlp{i}.bias"][0], meta["activations"][i])
            for i in range(n_layers)
        ]
        head = nn.DenseLayer(tables["head.weights"], tables["head.bias"][0], meta["activations"][-1])
        return cls(items, users, mlp, head, views, meta["pooling"], meta["features"],
                   meta["purchases_as_clicks"], meta["repr_item"])


def _index_list(table: nn.EmbeddingTable) -> list:
    return sorted(table.index, key=table.index.get)


def _table(vectors, ids) -> nn.EmbeddingTable:
    return nn.EmbeddingTable(vectors, {k: i + 1 for i, k in enumerate(ids)}, 0)


def _pool_rows(table: nn.EmbeddingTable, ids, mode: str) -> np.ndarray:
    if not ids:
        return np.zeros(table.dim)
    return nn.pool(table.vectors[table.rows(ids)], mode, table.dim)


def build_session_feature(sample: SieSample, model: SieModel, mode: str | None = None) -> np.ndarray:
    """concat[pool(clicks), pool(views), user embedding, item embedding]."""
    mode = mode or model.pooling
    clicks, views = _sample_history(model, sample)
    return np.concatenate([
        _pool_rows(model.item_embeddings, clicks, mode),
        _pool_rows(model.view_table, views, mode),
        model.user_embeddings.lookup(sample.user),
        model.item_embeddings.lookup(sample.target_item),
    ])


def make_training_samples(blocks, neg_ratio: int = 5, purchase_copies: int = 3, seed=0) -> list[SieSample]:
    """Positive/negative (history, item) pairs from labelled query blocks.

    Clicked items are positives once; purchased items appear ``purchase_copies``
    times in total.  Negatives are drawn without replacement from the block's
    shown-but-unclicked items, ``neg_ratio`` per positive, capped by availability.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for bi, block in enumerate(blocks):
        if not block.shown_items:
            logger.warning("skipping block %s with no shown items", block.query_id)
            continue
        hist = dict(
            clicks_before=tuple(block.preceding_clicks),
            views_before=tuple(block.preceding_views),
            purchases_before=tuple(block.preceding_purchases),
            user=block.user,
        )
        positives, unclicked = [], []
        for item, y in zip(block.shown_items, block.labels):
            if y == 2:
                positives.extend([item] * purchase_copies)
            elif y == 1:
                positives.append(item)
            else:
                unclicked.append(item)
        n_neg = min(neg_ratio * len(positives), len(unclicked))
        negatives = []
        if n_neg:
            picks = rng.choice(len(unclicked), size=n_neg, replace=False)
            negatives = [unclicked[j] for j in sorted(picks)]
        for item, label in [(i, POSITIVE) for i in positives] + [(i, NEGATIVE) for i in negatives]:
            samples.append(SieSample(bi, item, label=label, **hist))
    return samples


def _sample_history(model: SieModel, sample: SieSample):
    return model.history(sample.clicks_before, sample.views_before, sample.purchases_before)


@dataclass
class _Rows:
    """Ids of a batch resolved to embedding-table rows."""

    click_rows: list
    view_rows: list
    user_rows: np.ndarray
    item_rows: np.ndarray | None

    def take(self, idx) -> "_Rows":
        return _Rows([self.click_rows[i] for i in idx], [self.view_rows[i] for i in idx],
                     self.user_rows[idx],
                     None if self.item_rows is None else self.item_rows[idx])


def _resolve(model: SieModel, histories, users, items) -> _Rows:
    """``items`` None leaves the candidate segment blank."""
    return _Rows(
        [model.item_embeddings.rows(c) for c, _ in histories],
        [model.view_table.rows(v) for _, v in histories],
        model.user_embeddings.rows(users),
        None if items is None else model.item_embeddings.rows(items),
    )


def _resolve_samples(model: SieModel, samples) -> _Rows:
    return _resolve(model, [_sample_history(model, s) for s in samples],
                    [s.user for s in samples], [s.target_item for s in samples])


def _pool_matrix(row_lists, vocab_size) -> np.ndarray:
    """(batch, vocab) weights so that ``A @ table`` is the per-row average pool."""
    A = np.zeros((len(row_lists), vocab_size))
    lengths = np.fromiter((len(r) for r in row_lists), dtype=np.intp, count=len(row_lists))
    if lengths.sum():
        batch_idx = np.repeat(np.arange(len(row_lists)), lengths)
        cols = np.concatenate(row_lists)
        np.add.at(A, (batch_idx, cols), 1.0 / lengths[batch_idx])
    return A


def _segment(table: nn.EmbeddingTable, row_lists, mode: str):
    """Pooled segment for a batch plus what its backward pass needs."""
    if mode == "average":
        A = _pool_matrix(row_lists, table.vocab_size)
        return A @ table.vectors, A
    out = np.zeros((len(row_lists), table.dim))
    for r, rows in enumerate(row_lists):
        if len(rows):
            out[r] = table.vectors[rows].max(axis=0)
    return out, None


def _segment_backward(table: nn.EmbeddingTable, row_lists, mode, A, g, grad_table):
    if mode == "average":
        grad_table += A.T @ g
        return
    for r, rows in enumerate(row_lists):
        if len(rows):
            np.add.at(grad_table, rows, nn.pool_backward(table.vectors[rows], "max", g[r]))


def _features(model: SieModel, rows: _Rows):
    d = model.dim
    X = np.zeros((len(rows.user_rows), 4 * d))
    X[:, :d], A_click = _segment(model.item_embeddings, rows.click_rows, model.pooling)
    X[:, d:2 * d], A_view = _segment(model.view_table, rows.view_rows, model.pooling)
    X[:, 2 * d:3 * d] = model.user_embeddings.vectors[rows.user_rows]
    if rows.item_rows is not None:
        X[:, 3 * d:] = model.item_embeddings.vectors[rows.item_rows]
    return X, (A_click, A_view)


def _mlp_forward(model: SieModel, X, caches: list | None = None):
    h = X
    for layer in model.mlp + [model.head]:
        out, c = nn.dense_forward_cached(layer, h)
        if caches is not None:
            caches.append(c)
        if layer is not model.head:
            h = out
    return h, nn.softmax(out)


def sie_forward(sample: SieSample, model: SieModel) -> tuple[np.ndarray, np.ndarray]:
    """(class probabilities [negative, positive], last relu activation)."""
    X, _ = _features(model, _resolve_samples(model, [sample]))
    rep, probs = _mlp_forward(model, X)
    return probs[0], rep[0]


def sie_loss_and_grads(model: SieModel, samples) -> tuple[float, dict]:
    """Mean two-class cross-entropy over ``samples`` and its gradient."""
    samples = list(samples)
    labels = np.fromiter((s.label for s in samples), dtype=np.intp, count=len(samples))
    loss, grads, _ = _loss_grads(model, _resolve_samples(model, samples), labels)
    return loss, grads


def _loss_grads(model: SieModel, rows: _Rows, labels):
    X, pools = _features(model, rows)
    caches = []
    _, probs = _mlp_forward(model, X, caches)
    n = len(labels)
    target = np.zeros_like(probs)
    target[np.arange(n), labels] = 1.0
    loss = nn.cross_entropy(target, probs) / n
    grads = nn.zero_grads(model.params())
    g = (probs - target) / n
    layers = model.mlp + [model.head]
    names = [f"mlp{i}" for i in range(len(model.mlp))] + ["head"]
    for layer, cache, name in zip(layers[::-1], caches[::-1], names[::-1]):
        g, gw, gb = nn.dense_backward(layer, cache, g)
        grads[f"{name}.weights"] += gw
        grads[f"{name}.bias"] += gb
    d = model.dim
    item_g = grads["item_embeddings"]
    view_g = grads.get("view_embeddings", item_g)
    _segment_backward(model.item_embeddings, rows.click_rows, model.pooling, pools[0],
                      g[:, :d], item_g)
    _segment_backward(model.view_table, rows.view_rows, model.pooling, pools[1],
                      g[:, d:2 * d], view_g)
    np.add.at(grads["user_embeddings"], rows.user_rows, g[:, 2 * d:3 * d])
    if rows.item_rows is not None:
        np.add.at(item_g, rows.item_rows, g[:, 3 * d:])
    return loss, grads, probs


def _block_rows(model: SieModel, block: QueryBlock, items) -> _Rows:
    hist = model.history(block.preceding_clicks, block.preceding_views, block.preceding_purchases)
    return _resolve(model, [hist] * len(items), [block.user] * len(items), items)


def positive_probabilities(block: QueryBlock, model: SieModel) -> np.ndarray:
    X, _ = _features(model, _block_rows(model, block, list(block.shown_items)))
    return _mlp_forward(model, X)[1][:, POSITIVE]


def sie_rank(block: QueryBlock, model: SieModel) -> list[tuple[str, float]]:
    """Shown items by descending positive-class probability; ties keep presentation order."""
    probs = positive_probabilities(block, model)
    order = np.argsort(-probs, kind="stable")
    return [(block.shown_items[j], float(probs[j])) for j in order]


def extract_representations(blocks, model: SieModel) -> np.ndarray:
    """One session vector per block: the last relu layer with the item segment blanked.

    With ``repr_item='mean-of-shown'`` the item segment is instead the mean
    embedding of the block's shown items.
    """
    blocks = list(blocks)
    if not blocks:
        return np.zeros((0, model.representation_dim))
    hists = [model.history(b.preceding_clicks, b.preceding_views, b.preceding_purchases)
             for b in blocks]
    X, _ = _features(model, _resolve(model, hists, [b.user for b in blocks], None))
    if model.repr_item == "mean-of-shown":
        d = model.dim
        table = model.item_embeddings
        for r, b in enumerate(blocks):
            X[r, 3 * d:] = table.vectors[table.rows(b.shown_items)].mean(axis=0)
    return _mlp_forward(model, X)[0]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, mean_loss, accuracy):
        self.rows.append({"epoch": epoch, "mean_loss": mean_loss, "accuracy": accuracy})

    def write_csv(self, fh):
        w = csv.DictWriter(fh, fieldnames=list(self.rows[0]) if self.rows else ["epoch"],
                           lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_sie(
    data,
    *,
    embedding_dim=200,
    mlp_widths=(800, 200, 100),
    pooling="average",
    features="both",
    eta=0.001,
    epochs=10,
    batch_size=1,
    neg_ratio=5,
    purchase_copies=3,
    seed=0,
    use_user_embedding=False,
    separate_view_table=False,
    purchases_as_clicks=False,
    repr_item="zero",
    log: TrainLog | None = None,
) -> SieModel:
    """Fit an S-IE model with minibatch SGD on the training blocks of ``data``.

    ``data`` is a :class:`Dataset` (vocabularies taken from it) or a list of
    training blocks.  The returned parameters are those of the epoch with the
    lowest mean training loss.
    """
    if isinstance(data, Dataset):
        blocks, item_ids, user_ids = data.train, data.item_vocab, data.user_vocab
    else:
        blocks = list(data)
        item_ids = sorted({i for b in blocks for i in
                           b.shown_items + b.preceding_clicks + b.preceding_views + b.preceding_purchases})
        user_ids = sorted({b.user for b in blocks if b.user is not None})
    if not use_user_embedding:
        user_ids = ()
    model = SieModel.create(
        item_ids, user_ids, embedding_dim=embedding_dim, mlp_widths=mlp_widths, seed=seed,
        separate_view_table=separate_view_table, pooling=pooling, features=features,
        purchases_as_clicks=purchases_as_clicks, repr_item=repr_item,
    )
    if epochs == 0:
        return model
    samples = make_training_samples(blocks, neg_ratio, purchase_copies, seed)
    if not samples:
        raise ValueError("no training samples (no clicked items in the training blocks)")
    rng = np.random.default_rng([seed, 1])
    rows = _resolve_samples(model, samples)
    labels = np.fromiter((s.label for s in samples), dtype=np.intp, count=len(samples))
    params = model.params()
    best, best_loss = None, np.inf
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, grads, probs = _loss_grads(model, rows.take(idx), labels[idx])
            if not np.isfinite(loss):
                raise nn.NumericalError(f"S-IE loss diverged in epoch {epoch}")
            total += loss * len(idx)
            # scored before the update: a running training accuracy
            correct += int(np.sum((probs[:, POSITIVE] > 0.5) == (labels[idx] == POSITIVE)))
            nn.sgd_step(params, grads, eta)
        mean_loss = total / len(samples)
        accuracy = correct / len(samples)
        logger.info("sie epoch %d: loss=%.5f acc=%.4f", epoch, mean_loss, accuracy)
        if log is not None:
            log.add(epoch, mean_loss, accuracy)
        if mean_loss < best_loss:
            best_loss, best = mean_loss, copy.deepcopy(model)
    return best


def training_accuracy(model: SieModel, samples) -> float:
    samples = list(samples)
    if not samples:
        return 0.0
    X, _ = _features(model, _resolve_samples(model, samples))
    pred = _mlp_forward(model, X)[1][:, POSITIVE] > 0.5
    return float(np.mean(pred == np.array([s.label == POSITIVE for s in samples])))


class SessionEmbedder(BaseEstimator):
    """Estimator wrapper around :func:`train_sie`.

    ``fit`` takes training query blocks (or a :class:`Dataset`), ``transform``
    maps blocks to session vectors and ``rank`` gives the coarse ranking from
    the classifier's positive-class probability.
    """

    def __init__(self, embedding_dim=200, mlp_widths=(800, 200, 100), pooling="average",
                 features="both", eta=0.001, epochs=10, batch_size=1, neg_ratio=5,
                 purchase_copies=3, seed=0, use_user_embedding=False,
                 separate_view_table=False, purchases_as_clicks=False, repr_item="zero"):
        self.embedding_dim = embedding_dim
        self.mlp_widths = mlp_widths
        self.pooling = pooling
        self.features = features
        self.eta = eta
        self.epochs = epochs
        self.batch_size = batch_size
        self.neg_ratio = neg_ratio
        self.purchase_copies = purchase_copies
        self.seed = seed
        self.use_user_embedding = use_user_embedding
        self.separate_view_table = separate_view_table
        self.purchases_as_clicks = purchases_as_clicks
        self.repr_item = repr_item

    def _validate_params(self):
        check_choice("pooling", self.pooling, ("average", "max"))
        check_choice("features", self.features, FEATURE_SETS)
        check_choice("repr_item", self.repr_item, REPR_ITEM_MODES)
        check_positive("eta", self.eta)
        check_positive("embedding_dim", self.embedding_dim)
        check_positive("batch_size", self.batch_size)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def fit(self, X, y=None):
        self._validate_params()
        data = X if isinstance(X, Dataset) else check_blocks(X)
        self.log_ = TrainLog()
        self.model_ = train_sie(data, log=self.log_, **self.get_params())
        return self

    @classmethod
    def from_model(cls, model: SieModel, **params) -> "SessionEmbedder":
        est = cls(**params)
        est.model_ = model
        return est

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "model_")
        return extract_representations(check_blocks(X), self.model_)

    def predict_proba(self, block: QueryBlock) -> np.ndarray:
        check_fitted(self, "model_")
        return positive_probabilities(block, self.model_)

    def rank(self, block: QueryBlock) -> list:
        check_fitted(self, "model_")
        return [item for item, _ in sie_rank(block, self.model_)]

    def predict(self, X) -> list:
        return [self.rank(b) for b in check_blocks(X)]

    def score(self, X, y=None) -> float:
        from .evaluation import evaluate
        return evaluate(self.rank, check_blocks(X), "sie").ndcg_at_all
