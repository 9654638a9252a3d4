"""hotelrank: learning-to-rank toolkit for hotel search impressions."""

from .base import RankModel, SchemaMismatchError
from .metrics import ScoreList, dcg_at_k, evaluate, ndcg_at_k
from .schema import (
    Dataset,
    QueryGroup,
    SearchImpression,
    SynthConfig,
    balance,
    generate_synthetic,
    load_csv,
    relevance,
    sample_fraction,
    split_by_country,
    split_validation,
    write_csv,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "QueryGroup",
    "RankModel",
    "SchemaMismatchError",
    "ScoreList",
    "SearchImpression",
    "SynthConfig",
    "balance",
    "dcg_at_k",
    "evaluate",
    "generate_synthetic",
    "load_csv",
    "ndcg_at_k",
    "relevance",
    "sample_fraction",
    "split_by_country",
    "split_validation",
    "write_csv",
]
