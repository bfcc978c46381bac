"""NDCG evaluation, the popularity baseline and the behaviour-ablation grid."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .datamodel import Dataset, QueryBlock
from .listnet import RankModel, rank_items, train_listrank
from .sie import FEATURE_SETS, SieModel, sie_rank, train_sie

logger = logging.getLogger(__name__)

GAINS = ("linear", "exponential")
ABLATION_COLUMNS = {
    "none": "no click & view",
    "click_only": "only click",
    "view_only": "only view",
    "both": "both",
}


def _gain(labels, gain):
    y = np.asarray(labels, dtype=float)
    if gain == "exponential":
        return 2.0 ** y - 1.0
    if gain != "linear":
        raise ValueError(f"unknown gain {gain!r}")
    return y


def dcg(ranked_labels, cutoff=None, gain="linear") -> float:
    g = _gain(ranked_labels, gain)[:cutoff]
    return float(np.sum(g / np.log2(np.arange(2, len(g) + 2))))


def ndcg(ranked_labels, cutoff=None, gain="linear") -> float | None:
    """NDCG of labels listed in ranked order; ``None`` when the query has no positives.

    ``cutoff=None`` scores the whole list.
    """
    ranked_labels = list(ranked_labels)
    if not ranked_labels:
        logger.warning("empty ranked list excluded from NDCG")
        return None
    ideal = dcg(sorted(ranked_labels, reverse=True), cutoff, gain)
    if ideal == 0:
        return None
    return dcg(ranked_labels, cutoff, gain) / ideal


@dataclass
class EvalReport:
    method: str
    ndcg_at_all: float
    ndcg_at_10: float
    per_query: list = field(default_factory=list)
    n_queries: int = 0
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "ndcg_at_all": self.ndcg_at_all,
            "ndcg_at_10": self.ndcg_at_10,
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "per_query": self.per_query,
        }

    def per_query_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "ndcg_at_all", "ndcg_at_10"])
        for row in self.per_query:
            w.writerow([row["query_id"], repr(row["ndcg_at_all"]), repr(row["ndcg_at_10"])])
        return buf.getvalue()


class PopularityRanker:
    """Ranks shown items by global training click count, ties by item id."""

    def __init__(self, counts: Counter):
        self.counts = counts

    def __call__(self, block: QueryBlock) -> list:
        return sorted(block.shown_items, key=lambda i: (-self.counts.get(i, 0), i))


def popularity_baseline(train_blocks) -> PopularityRanker:
    counts = Counter()
    for b in train_blocks:
        for item, y in zip(b.shown_items, b.labels):
            if y >= 1:
                counts[item] += 1
    return PopularityRanker(counts)


def oracle_ranker(block: QueryBlock) -> list:
    order = sorted(range(len(block.shown_items)), key=lambda j: -block.labels[j])
    return [block.shown_items[j] for j in order]


def make_ranker(method, *, train_blocks=None, sie_model: SieModel | None = None,
                rank_model: RankModel | None = None):
    if callable(method):
        return method
    if method == "popularity":
        if train_blocks is None:
            raise ValueError("popularity baseline needs the training blocks")
        return popularity_baseline(train_blocks)
    if method == "sie":
        if sie_model is None:
            raise ValueError("method 'sie' needs a trained S-IE model")
        return lambda b: [item for item, _ in sie_rank(b, sie_model)]
    if method == "listrank":
        if sie_model is None or rank_model is None:
            raise ValueError("method 'listrank' needs trained S-IE and rank models")
        return lambda b: rank_items(b, sie_model, rank_model)
    if method == "oracle":
        return oracle_ranker
    raise ValueError(f"unknown method {method!r}")


def evaluate(method, data, name: str | None = None, *, sie_model=None, rank_model=None,
             train_blocks=None, gain="linear", threads: int = 1) -> EvalReport:
    """Rank every test block with ``method`` and average per-query NDCG.

    ``data`` is a Dataset (its test split is ranked, its train split feeds the
    popularity baseline) or a list of blocks.  Queries without any positive
    label are excluded from the averages and counted in ``n_excluded``.
    """
    if isinstance(data, Dataset):
        blocks = data.test
        train_blocks = data.train if train_blocks is None else train_blocks
    else:
        blocks = list(data)
    ranker = make_ranker(method, train_blocks=train_blocks, sie_model=sie_model,
                         rank_model=rank_model)
    if name is None:
        name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rankings = list(pool.map(ranker, blocks))
    else:
        rankings = [ranker(b) for b in blocks]
    per_query, excluded = [], 0
    for b, ranking in zip(blocks, rankings):
        label_of = dict(zip(b.shown_items, b.labels))
        ranked = [label_of[i] for i in ranking]
        full = ndcg(ranked, None, gain)
        if full is None:
            excluded += 1
            continue
        per_query.append({"query_id": b.query_id, "ndcg_at_all": full,
                          "ndcg_at_10": ndcg(ranked, 10, gain)})
    if per_query:
        at_all = float(np.mean([q["ndcg_at_all"] for q in per_query]))
        at_10 = float(np.mean([q["ndcg_at_10"] for q in per_query]))
    else:
        at_all = at_10 = math.nan
    return EvalReport(name, at_all, at_10, per_query, len(per_query), excluded)


def sign_test(wins: int, losses: int) -> float:
    """One-sided p-value for ``wins`` out of ``wins + losses`` non-tied pairs."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def fit_pipeline(dataset: Dataset, sie_params: dict | None = None,
                 rank_params: dict | None = None) -> tuple[SieModel, RankModel]:
    sie_model = train_sie(dataset, **(sie_params or {}))
    rank_model = train_listrank(dataset, sie_model, **(rank_params or {}))
    return sie_model, rank_model


@dataclass
class AblationResult:
    reports: dict  # (method, cell) -> EvalReport

    def value(self, method, cell, metric="ndcg_at_all") -> float:
        return getattr(self.reports[(method, cell)], metric)

    def cells(self):
        return [c for c in FEATURE_SETS[::-1] if any(k[1] == c for k in self.reports)]

    def to_csv(self, metric="ndcg_at_all") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cells = self.cells()
        w.writerow(["method", *cells])
        for method, label in (("sie", "SIE"), ("listrank", "ListRank")):
            w.writerow([label, *(repr(self.value(method, c, metric)) for c in cells)])
        return buf.getvalue()

    def to_text(self, metric="ndcg_at_all") -> str:
        cells = self.cells()
        heads = [ABLATION_COLUMNS[c] for c in cells]
        widths = [max(len(h), 5) for h in heads]
        lines = ["         | " + " | ".join(h.center(w) for h, w in zip(heads, widths))]
        for method, label in (("sie", "SIE"), ("listrank", "ListRank")):
            vals = [f"{self.value(method, c, metric):.3f}".center(w) for c, w in zip(cells, widths)]
            lines.append(f"{label:<8} | " + " | ".join(vals))
        return "\n".join(lines)


def ablation(dataset: Dataset, grid=FEATURE_SETS, sie_params: dict | None = None,
             rank_params: dict | None = None, gain="linear") -> AblationResult:
    """Retrain both stages with each behaviour segment set and evaluate them."""
    reports = {}
    for cell in grid:
        if cell not in FEATURE_SETS:
            raise ValueError(f"unknown ablation cell {cell!r}")
        sie_model, rank_model = fit_pipeline(
            dataset, {**(sie_params or {}), "features": cell}, rank_params
        )
        reports[("sie", cell)] = evaluate("sie", dataset, f"sie/{cell}",
                                          sie_model=sie_model, gain=gain)
        reports[("listrank", cell)] = evaluate("listrank", dataset, f"listrank/{cell}",
                                               sie_model=sie_model, rank_model=rank_model,
                                               gain=gain)
    return AblationResult(reports)
