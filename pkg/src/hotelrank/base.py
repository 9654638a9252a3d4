"""Shared numeric helpers and the fit/predict contract all rankers follow."""

from __future__ import annotations

import hashlib

import numpy as np

# kind string -> RankModel subclass, populated via __init_subclass__
MODEL_REGISTRY: dict[str, type] = {}


class SchemaMismatchError(ValueError):
    """A model was asked to score features it was not trained on."""

    def __init__(self, expected_hash: str, got_hash: str):
        super().__init__(
            f"feature schema mismatch: model expects {expected_hash}, data has {got_hash}"
        )
        self.expected_hash = expected_hash
        self.got_hash = got_hash


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


def sigmoid(z):
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def group_offsets(srch_ids) -> np.ndarray:
    """Boundaries of consecutive srch_id runs: offsets[i]:offsets[i+1] is one query."""
    ids = np.asarray(srch_ids)
    if ids.size == 0:
        return np.zeros(1, dtype=np.int64)
    change = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    return np.concatenate(([0], change, [ids.size])).astype(np.int64)


def standardize_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and stds for train-set standardization. Zero std becomes 1."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def columns_hash(columns) -> str:
    """Stable fingerprint of an ordered feature-column list."""
    joined = "\n".join(columns).encode("utf-8")
    return hashlib.sha256(joined).hexdigest()[:16]


class RankModel:
    """Uniform contract: fit on a FeatureMatrix plus grades, score new rows.

    Subclasses set ``kind``, implement ``fit``/``score_rows`` and the
    ``state``/``from_state`` pair used by the model-file envelope.
    """

    kind: str | None = None

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.kind:
            MODEL_REGISTRY[cls.kind] = cls

    # populated by fit()
    feature_columns: list[str]
    train_srch_ids: np.ndarray

    def fit(self, features, grades, countries=None):
        raise NotImplementedError

    def score_rows(self, features, countries=None) -> np.ndarray:
        raise NotImplementedError

    def predict(self, features, countries=None):
        """Score every row and return a ScoreList aligned with the input."""
        from .metrics import ScoreList

        scores = np.asarray(self.score_rows(features, countries), dtype=float)
        return ScoreList(features.srch_ids.copy(), features.prop_ids.copy(), scores)

    def check_schema(self, features):
        expected = columns_hash(self.feature_columns)
        got = columns_hash(features.columns)
        if expected != got:
            raise SchemaMismatchError(expected, got)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]):
        raise NotImplementedError

    def _common_state_meta(self) -> dict:
        return {"feature_columns": list(self.feature_columns)}

    def _restore_common(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.feature_columns = list(meta["feature_columns"])
        self.train_srch_ids = arrays.get("train_srch_ids", np.zeros(0, dtype=np.int64))
