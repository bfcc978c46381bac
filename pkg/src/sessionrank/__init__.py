"""Session-aware product re-ranking: behaviour embeddings plus list-wise ListNet."""
from .datamodel import (
    Dataset,
    Event,
    QueryBlock,
    Session,
    SyntheticConfig,
    dataset_stats,
    generate_synthetic,
    parse_events,
    prepare_dataset,
    sessionize,
    simulate,
)
from .evaluation import EvalReport, ablation, evaluate, ndcg, popularity_baseline
from .listnet import ListNetRanker, RankModel, listnet_loss, train_listrank
from .sie import SessionEmbedder, SieModel, train_sie

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Event", "QueryBlock", "Session", "SyntheticConfig", "dataset_stats",
    "generate_synthetic", "parse_events", "prepare_dataset", "sessionize", "simulate",
    "EvalReport", "ablation", "evaluate", "ndcg", "popularity_baseline",
    "ListNetRanker", "RankModel", "listnet_loss", "train_listrank",
    "SessionEmbedder", "SieModel", "train_sie",
]
