"""DCG/NDCG@k and per-dataset ranking evaluation.

Default gain is exponential (2^grade - 1) with discount 1/log2(rank + 1),
truncated at k = 38. A linear-gain mode is available for sensitivity checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base import group_offsets


def _gains(grades: np.ndarray, gain: str) -> np.ndarray:
    if gain == "exp":
        return np.power(2.0, grades) - 1.0
    if gain == "linear":
        return grades.astype(float)
    raise ValueError(f"unknown gain mode: {gain}")


def dcg_at_k(grades_in_rank_order, k: int, gain: str = "exp") -> float:
    """Discounted cumulative gain of the first k ranked grades."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = np.asarray(grades_in_rank_order, dtype=float)[:k]
    if g.size == 0:
        return 0.0
    discounts = 1.0 / np.log2(np.arange(2, g.size + 2))
    return float(np.dot(_gains(g, gain), discounts))


def ndcg_at_k(grades_in_rank_order, k: int, gain: str = "exp") -> float:
    """DCG normalized by the grade-sorted ideal; 0.0 when no gain exists."""
    g = np.asarray(grades_in_rank_order, dtype=float)
    ideal = dcg_at_k(np.sort(g)[::-1], k, gain)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(g, k, gain) / ideal


@dataclass
class ScoreList:
    """(srch_id, prop_id, score) triples, the interchange unit between models."""

    srch_ids: np.ndarray
    prop_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.srch_ids = np.asarray(self.srch_ids, dtype=np.int64)
        self.prop_ids = np.asarray(self.prop_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=float)
        if not (self.srch_ids.shape == self.prop_ids.shape == self.scores.shape):
            raise ValueError("srch_ids, prop_ids, scores must be the same length")
        if self.scores.size and not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        pairs = np.stack([self.srch_ids, self.prop_ids], axis=1)
        if len(np.unique(pairs, axis=0)) != len(pairs):
            raise ValueError("(srch_id, prop_id) pairs must be unique")

    def __len__(self):
        return len(self.scores)

    def to_lookup(self) -> dict[tuple[int, int], float]:
        return {
            (int(s), int(p)): float(v)
            for s, p, v in zip(self.srch_ids, self.prop_ids, self.scores)
        }

    def write_tsv(self, path):
        """TSV sorted by srch_id, then score descending (prop_id breaks ties)."""
        order = np.lexsort((self.prop_ids, -self.scores, self.srch_ids))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("srch_id\tprop_id\tscore\n")
            for i in order:
                fh.write(
                    f"{self.srch_ids[i]}\t{self.prop_ids[i]}\t{float(self.scores[i])!r}\n"
                )

    @classmethod
    def read_tsv(cls, path) -> "ScoreList":
        srch, prop, score = [], [], []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if header != ["srch_id", "prop_id", "score"]:
                raise ValueError(f"{path}: unexpected score-file header {header}")
            for line_no, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}: line {line_no}: expected 3 fields")
                srch.append(int(parts[0]))
                prop.append(int(parts[1]))
                score.append(float(parts[2]))
        return cls(np.array(srch), np.array(prop), np.array(score))


@dataclass
class EvalReport:
    mean_ndcg: float
    per_query: dict[int, float]
    k: int
    zero_gain: str
    n_zero_gain: int
    gain: str = "exp"

    def format_lines(self) -> list[str]:
        lines = [
            f"queries={len(self.per_query) + (self.n_zero_gain if self.zero_gain == 'exclude' else 0)}",
            f"scored_queries={len(self.per_query)}",
            f"zero_gain_queries={self.n_zero_gain}",
            f"zero_gain_mode={self.zero_gain}",
            f"gain={self.gain}",
            f"ndcg@{self.k}={self.mean_ndcg:.6f}",
        ]
        return lines


def evaluate(
    scores: ScoreList,
    ds,
    k: int = 38,
    zero_gain: str = "exclude",
    gain: str = "exp",
) -> EvalReport:
    """Mean NDCG@k of a score list over a labeled dataset.

    Rows are ranked per query by score descending, ties broken by ascending
    prop_id so runs reproduce bit for bit. Queries whose ideal DCG is zero
    are excluded from the mean by default ("as_zero" counts them as 0).
    """
    if zero_gain not in ("exclude", "as_zero"):
        raise ValueError(f"unknown zero_gain mode: {zero_gain}")
    lookup = scores.to_lookup()
    missing = [
        (g.srch_id, imp.prop_id)
        for g in ds.groups
        for imp in g.impressions
        if (g.srch_id, imp.prop_id) not in lookup
    ]
    if missing:
        shown = ", ".join(f"({s},{p})" for s, p in missing[:20])
        more = "" if len(missing) <= 20 else f" and {len(missing) - 20} more"
        raise ValueError(f"scores missing for impressions: {shown}{more}")

    per_query: dict[int, float] = {}
    n_zero = 0
    values = []
    for g in ds.groups:
        ranked = sorted(
            ((lookup[(g.srch_id, imp.prop_id)], imp.prop_id, relevance_of(imp))
             for imp in g.impressions),
            key=lambda t: (-t[0], t[1]),
        )
        grades = np.array([t[2] for t in ranked], dtype=float)
        if dcg_at_k(np.sort(grades)[::-1], k, gain) == 0.0:
            n_zero += 1
            if zero_gain == "as_zero":
                per_query[g.srch_id] = 0.0
                values.append(0.0)
            continue
        v = ndcg_at_k(grades, k, gain)
        per_query[g.srch_id] = v
        values.append(v)
    mean = float(np.mean(values)) if values else 0.0
    return EvalReport(
        mean_ndcg=mean,
        per_query=per_query,
        k=k,
        zero_gain=zero_gain,
        n_zero_gain=n_zero,
        gain=gain,
    )


def relevance_of(imp) -> int:
    # local alias avoiding a circular import at module load
    from .schema import relevance

    return relevance(imp)
