"""Regression trees and the tree ensembles built on them: gradient boosting,
bootstrap random forests, extremely randomized trees, and LambdaMART.

Trees split greedily on weighted variance reduction (or on uniformly random
thresholds in ERT mode) and are stored as flat node arrays so prediction is
a vectorized level-by-level walk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base import RankModel, group_offsets, sigmoid, softplus
from .metrics import dcg_at_k, ndcg_at_k
from .schema import balance_mask


@dataclass
class TreeParams:
    max_depth: int = 6
    min_samples_leaf: int = 10
    feature_subsample: float = 1.0
    split_mode: str = "best"  # or "random_threshold"

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must be in (0, 1]")
        if self.split_mode not in ("best", "random_threshold"):
            raise ValueError(f"unknown split_mode: {self.split_mode}")


@dataclass
class BoostParams:
    n_trees: int = 100
    shrinkage: float = 0.1
    loss: str = "squared"  # squared | logistic | lambdarank
    subsample: float = 1.0
    seed: int = 0
    k: int = 38  # NDCG truncation used by lambdarank
    sigma: float = 1.0  # pairwise logistic scale for lambdarank

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must be in (0, 1]")
        if self.loss not in ("squared", "logistic", "lambdarank"):
            raise ValueError(f"unknown loss: {self.loss}")


@dataclass
class RegressionTree:
    """Flat node arrays; feature[i] == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X) -> np.ndarray:
        """Leaf node index for every row."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            active = np.flatnonzero(self.feature[node] >= 0)
            if active.size == 0:
                break
            cur = node[active]
            fa = self.feature[cur]
            go_left = X[active, fa] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == -1))

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)


def _weighted_sse(w, t):
    ws = w.sum()
    if ws <= 0:
        return 0.0
    m = (w * t).sum() / ws
    return float((w * (t - m) ** 2).sum())


def _best_split(X, rows, t, w, sse_parent, params: TreeParams, rng):
    """Best (feature, threshold) by variance reduction; None if no valid split.

    Gain ties break towards the lowest feature index, then lowest threshold,
    so fits are deterministic. Zero-gain splits on impure nodes are allowed
    (an XOR pattern needs them).
    """
    nrows = rows.size
    d = X.shape[1]
    k = max(1, int(round(params.feature_subsample * d)))
    feats = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)
    min_leaf = params.min_samples_leaf
    best = None  # (gain, feature, threshold)
    for f in feats:
        v = X[rows, f]
        if params.split_mode == "random_threshold":
            vmin, vmax = v.min(), v.max()
            if vmin == vmax:
                continue
            thr = float(rng.uniform(vmin, vmax))
            go_left = v <= thr
            nl = int(go_left.sum())
            if nl < min_leaf or nrows - nl < min_leaf:
                continue
            sse = _weighted_sse(w[go_left], t[go_left]) + _weighted_sse(w[~go_left], t[~go_left])
            gain = sse_parent - sse
            if best is None or gain > best[0]:
                best = (gain, int(f), thr)
        else:
            order = np.argsort(v, kind="stable")
            vs, ts, ws = v[order], t[order], w[order]
            csw = np.cumsum(ws)
            cswt = np.cumsum(ws * ts)
            cswt2 = np.cumsum(ws * ts * ts)
            pos = np.flatnonzero(vs[:-1] < vs[1:])
            pos = pos[(pos + 1 >= min_leaf) & (nrows - (pos + 1) >= min_leaf)]
            if pos.size == 0:
                continue
            lw, lt, lt2 = csw[pos], cswt[pos], cswt2[pos]
            rw, rt, rt2 = csw[-1] - lw, cswt[-1] - lt, cswt2[-1] - lt2
            with np.errstate(divide="ignore", invalid="ignore"):
                sse = np.where(lw > 0, lt2 - lt * lt / lw, 0.0) + np.where(
                    rw > 0, rt2 - rt * rt / rw, 0.0
                )
            gains = sse_parent - sse
            i = int(np.argmax(gains))  # first max: lowest threshold wins ties
            gain = float(gains[i])
            if best is None or gain > best[0]:
                thr = 0.5 * (vs[pos[i]] + vs[pos[i] + 1])
                best = (gain, int(f), float(thr))
    if best is None:
        return None
    return best[1], best[2]


def tree_fit(
    X,
    targets,
    weights=None,
    params: TreeParams | None = None,
    rng: np.random.Generator | None = None,
) -> RegressionTree:
    """Greedy regression tree; leaf values are (weighted) target means."""
    X = np.asarray(X, dtype=float)
    t_all = np.asarray(targets, dtype=float)
    w_all = np.ones(len(t_all)) if weights is None else np.asarray(weights, dtype=float)
    params = params or TreeParams()
    rng = rng or np.random.default_rng(0)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(rows, depth):
        node = new_node()
        t = t_all[rows]
        w = w_all[rows]
        ws = w.sum()
        mean = float((w * t).sum() / ws) if ws > 0 else 0.0
        value[node] = mean
        sse_parent = float((w * (t - mean) ** 2).sum())
        if (
            depth >= params.max_depth
            or rows.size < 2 * params.min_samples_leaf
            or sse_parent <= 1e-12
        ):
            return node
        split = _best_split(X, rows, t, w, sse_parent, params, rng)
        if split is None:
            return node
        f, thr = split
        go_left = X[rows, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(rows[go_left], depth + 1)
        right[node] = build(rows[~go_left], depth + 1)
        return node

    build(np.arange(len(t_all)), 0)
    return RegressionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=float),
    )


# ---------------------------------------------------------------------------
# Gradient boosting
# ---------------------------------------------------------------------------


@dataclass
class BoostedTrees:
    base_score: float
    shrinkage: float
    trees: list[RegressionTree] = field(default_factory=list)

    def predict(self, X, n_stages: int | None = None) -> np.ndarray:
        out = np.full(len(X), self.base_score, dtype=float)
        for tree in self.trees[:n_stages]:
            out += self.shrinkage * tree.predict(X)
        return out


def gbm_fit(
    X,
    targets,
    boost: BoostParams,
    tree_params: TreeParams | None = None,
) -> tuple[BoostedTrees, list[float]]:
    """Stage-wise boosting: each tree fits the negative gradient of the loss.

    squared: F0 = mean(y), residual targets (leaf means are an exact line
    search, so the staged loss never increases). logistic: F0 = log-odds of
    the base rate, targets y - sigmoid(F), binary y required.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    tree_params = tree_params or TreeParams()
    rng = np.random.default_rng(boost.seed)
    if boost.loss == "squared":
        base = float(y.mean())
    elif boost.loss == "logistic":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("logistic loss requires binary targets")
        p = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = float(np.log(p / (1 - p)))
    else:
        raise ValueError("use lambdamart_fit for the lambdarank loss")
    model = BoostedTrees(base_score=base, shrinkage=boost.shrinkage)
    F = np.full(n, base)
    losses = []
    for _ in range(boost.n_trees):
        if boost.loss == "squared":
            residual = y - F
        else:
            residual = y - sigmoid(F)
        if boost.subsample < 1.0:
            m = max(1, int(round(boost.subsample * n)))
            rows = np.sort(rng.choice(n, size=m, replace=False))
        else:
            rows = np.arange(n)
        tree = tree_fit(X[rows], residual[rows], None, tree_params, rng)
        model.trees.append(tree)
        F += boost.shrinkage * tree.predict(X)
        if boost.loss == "squared":
            losses.append(float(np.mean((y - F) ** 2)))
        else:
            losses.append(float(np.mean(y * softplus(-F) + (1 - y) * softplus(F))))
    return model, losses


# ---------------------------------------------------------------------------
# Forests
# ---------------------------------------------------------------------------


@dataclass
class Forest:
    trees: list[RegressionTree]

    def predict(self, X) -> np.ndarray:
        out = np.zeros(len(X))
        for tree in self.trees:
            out += tree.predict(X)
        return out / len(self.trees)


def forest_fit(
    X,
    targets,
    n_trees: int,
    tree_params: TreeParams,
    seed: int,
    mode: str = "bootstrap_rf",
    bootstrap: bool | None = None,
) -> Forest:
    """Tree ensemble, either bootstrap-RF (best splits on row resamples) or
    ERT (full sample per tree, uniformly random thresholds)."""
    if mode not in ("bootstrap_rf", "ert"):
        raise ValueError(f"unknown forest mode: {mode}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    if mode == "ert":
        tree_params = TreeParams(
            max_depth=tree_params.max_depth,
            min_samples_leaf=tree_params.min_samples_leaf,
            feature_subsample=tree_params.feature_subsample,
            split_mode="random_threshold",
        )
        bootstrap = False
    elif bootstrap is None:
        bootstrap = True
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng(seeds[i])
        if bootstrap:
            rows = rng.integers(0, n, size=n)
        else:
            rows = np.arange(n)
        if mode == "ert":
            # ERT never bootstraps: every tree sees the complete sample
            assert rows.size == n and rows[0] == 0 and rows[-1] == n - 1
        trees.append(tree_fit(X[rows], y[rows], None, tree_params, rng))
    return Forest(trees)


# ---------------------------------------------------------------------------
# LambdaMART
# ---------------------------------------------------------------------------


def lambda_gradients(
    scores, grades, k: int = 38, sigma: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Lambda gradients and hessians for one query's documents.

    For each (higher grade i, lower grade j) pair: rho = 1/(1+exp(sigma(s_i-s_j))),
    lambda_i += sigma*rho*|dNDCG@k of swapping i,j|, lambda_j gets the negative,
    and the hessian accumulates sigma^2*rho*(1-rho)*|dNDCG| on both sides.
    The sub-ulp float residue of the accumulation is folded into the last
    document so the sequential sum of lambdas is exactly zero.
    """
    scores = np.asarray(scores, dtype=float)
    grades = np.asarray(grades, dtype=float)
    n = scores.size
    lam = np.zeros(n)
    hess = np.zeros(n)
    if n < 2:
        return lam, hess
    higher = grades[:, None] > grades[None, :]
    if not higher.any():
        return lam, hess
    ideal = dcg_at_k(np.sort(grades)[::-1], k)
    if ideal == 0.0:
        return lam, hess
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(1, n + 1)
    disc = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    gains = np.power(2.0, grades) - 1.0
    delta = np.abs((gains[:, None] - gains[None, :]) * (disc[:, None] - disc[None, :])) / ideal
    rho = sigmoid(-sigma * (scores[:, None] - scores[None, :]))
    contrib = np.where(higher, sigma * rho * delta, 0.0)
    hcontrib = np.where(higher, sigma * sigma * rho * (1.0 - rho) * delta, 0.0)
    lam = contrib.sum(axis=1) - contrib.sum(axis=0)
    hess = hcontrib.sum(axis=1) + hcontrib.sum(axis=0)
    lam[-1] = -float(np.cumsum(lam[:-1])[-1])
    return lam, hess


def _mean_ndcg(scores, grades, offsets, k) -> float:
    """Mean NDCG@k over queries with positive ideal gain (stable-sort ties)."""
    vals = []
    for s, e in zip(offsets[:-1], offsets[1:]):
        g = grades[s:e]
        if not np.any(g > 0):
            continue
        ranked = g[np.argsort(-scores[s:e], kind="stable")]
        vals.append(ndcg_at_k(ranked, k))
    return float(np.mean(vals)) if vals else 0.0


def lambdamart_fit(
    X,
    grades,
    offsets,
    boost: BoostParams,
    tree_params: TreeParams | None = None,
    valid: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    early_stop_rounds: int = 0,
) -> tuple[BoostedTrees, list[float]]:
    """Boosting on lambda gradients with Newton leaf steps (sum lam / sum hess).

    valid, when given, is (X_valid, grades_valid, offsets_valid); validation
    NDCG@k is recorded per stage and can drive early stopping.
    """
    X = np.asarray(X, dtype=float)
    grades = np.asarray(grades, dtype=float)
    offsets = np.asarray(offsets, dtype=np.int64)
    tree_params = tree_params or TreeParams(max_depth=4)
    n = len(X)
    rng = np.random.default_rng(boost.seed)
    model = BoostedTrees(base_score=0.0, shrinkage=boost.shrinkage)
    F = np.zeros(n)
    n_queries = len(offsets) - 1
    valid_history: list[float] = []
    if valid is not None:
        Xv, gv, ov = valid
        Fv = np.zeros(len(Xv))
    best_stage, best_ndcg = -1, -np.inf
    for stage in range(boost.n_trees):
        lam = np.zeros(n)
        hess = np.zeros(n)
        for s, e in zip(offsets[:-1], offsets[1:]):
            l, h = lambda_gradients(F[s:e], grades[s:e], boost.k, boost.sigma)
            lam[s:e] = l
            hess[s:e] = h
        if boost.subsample < 1.0:
            m = max(1, int(round(boost.subsample * n_queries)))
            qs = np.sort(rng.choice(n_queries, size=m, replace=False))
            rows = np.concatenate([np.arange(offsets[q], offsets[q + 1]) for q in qs])
        else:
            rows = np.arange(n)
        tree = tree_fit(X[rows], lam[rows], None, tree_params, rng)
        leaf = tree.apply(X[rows])
        num = np.bincount(leaf, weights=lam[rows], minlength=len(tree.value))
        den = np.bincount(leaf, weights=hess[rows], minlength=len(tree.value))
        newton = np.where(den > 1e-12, num / np.maximum(den, 1e-300), 0.0)
        tree.value = np.where(tree.feature == -1, newton, tree.value)
        model.trees.append(tree)
        F += boost.shrinkage * tree.predict(X)
        if valid is not None:
            Fv += boost.shrinkage * tree.predict(Xv)
            v = _mean_ndcg(Fv, gv, ov, boost.k)
            valid_history.append(v)
            if v > best_ndcg:
                best_ndcg, best_stage = v, stage
            elif early_stop_rounds and stage - best_stage >= early_stop_rounds:
                model.trees = model.trees[: best_stage + 1]
                valid_history = valid_history[: best_stage + 1]
                break
    return model, valid_history


# ---------------------------------------------------------------------------
# RankModel wrappers
# ---------------------------------------------------------------------------


def _trees_to_arrays(trees: list[RegressionTree], prefix: str) -> dict[str, np.ndarray]:
    sizes = np.array([len(t.feature) for t in trees], dtype=np.int64)
    return {
        f"{prefix}offsets": np.concatenate(([0], np.cumsum(sizes))),
        f"{prefix}feature": np.concatenate([t.feature for t in trees]),
        f"{prefix}threshold": np.concatenate([t.threshold for t in trees]),
        f"{prefix}left": np.concatenate([t.left for t in trees]),
        f"{prefix}right": np.concatenate([t.right for t in trees]),
        f"{prefix}value": np.concatenate([t.value for t in trees]),
    }


def _trees_from_arrays(arrays: dict[str, np.ndarray], prefix: str) -> list[RegressionTree]:
    offs = arrays[f"{prefix}offsets"]
    trees = []
    for s, e in zip(offs[:-1], offs[1:]):
        trees.append(
            RegressionTree(
                feature=arrays[f"{prefix}feature"][s:e],
                threshold=arrays[f"{prefix}threshold"][s:e],
                left=arrays[f"{prefix}left"][s:e],
                right=arrays[f"{prefix}right"][s:e],
                value=arrays[f"{prefix}value"][s:e],
            )
        )
    return trees


def _tree_params_meta(p: TreeParams) -> dict:
    return {
        "max_depth": p.max_depth,
        "min_samples_leaf": p.min_samples_leaf,
        "feature_subsample": p.feature_subsample,
        "split_mode": p.split_mode,
    }


def _boost_params_meta(p: BoostParams) -> dict:
    return {
        "n_trees": p.n_trees,
        "shrinkage": p.shrinkage,
        "loss": p.loss,
        "subsample": p.subsample,
        "seed": p.seed,
        "k": p.k,
        "sigma": p.sigma,
    }


class GradientBoostedModel(RankModel):
    """Pointwise GBM ranker on the clicked-or-booked binary target."""

    kind = "gbm"

    def __init__(self, boost: BoostParams | None = None, tree: TreeParams | None = None):
        self.boost = boost or BoostParams(loss="logistic")
        self.tree = tree or TreeParams(max_depth=4)

    def fit(self, features, grades, countries=None):
        y = (np.asarray(grades) > 0).astype(float)
        if self.boost.loss == "squared":
            y = np.asarray(grades, dtype=float)
        self.model, self.loss_history = gbm_fit(features.values, y, self.boost, self.tree)
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(features.srch_ids)
        return self

    def score_rows(self, features, countries=None):
        self.check_schema(features)
        return self.model.predict(features.values)

    def state(self):
        meta = self._common_state_meta()
        meta.update(
            kind=self.kind,
            boost=_boost_params_meta(self.boost),
            tree=_tree_params_meta(self.tree),
            base_score=self.model.base_score,
        )
        arrays = _trees_to_arrays(self.model.trees, "t/")
        arrays["train_srch_ids"] = self.train_srch_ids
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        inst = cls(BoostParams(**meta["boost"]), TreeParams(**meta["tree"]))
        inst._restore_common(meta, arrays)
        inst.model = BoostedTrees(
            base_score=meta["base_score"],
            shrinkage=meta["boost"]["shrinkage"],
            trees=_trees_from_arrays(arrays, "t/"),
        )
        return inst


class _ForestModelBase(RankModel):
    mode = "bootstrap_rf"

    def __init__(
        self,
        n_trees: int = 100,
        tree: TreeParams | None = None,
        seed: int = 0,
    ):
        self.n_trees = n_trees
        self.tree = tree or TreeParams(max_depth=12, feature_subsample=0.7)
        self.seed = seed

    def fit(self, features, grades, countries=None):
        y = (np.asarray(grades) > 0).astype(float)
        self.model = forest_fit(
            features.values, y, self.n_trees, self.tree, self.seed, mode=self.mode
        )
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(features.srch_ids)
        return self

    def score_rows(self, features, countries=None):
        self.check_schema(features)
        return self.model.predict(features.values)

    def state(self):
        meta = self._common_state_meta()
        meta.update(
            kind=self.kind,
            n_trees=self.n_trees,
            tree=_tree_params_meta(self.tree),
            seed=self.seed,
        )
        arrays = _trees_to_arrays(self.model.trees, "t/")
        arrays["train_srch_ids"] = self.train_srch_ids
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        inst = cls(meta["n_trees"], TreeParams(**meta["tree"]), meta["seed"])
        inst._restore_common(meta, arrays)
        inst.model = Forest(_trees_from_arrays(arrays, "t/"))
        return inst


class RandomForestModel(_ForestModelBase):
    kind = "random_forest"
    mode = "bootstrap_rf"


class ExtraTreesModel(_ForestModelBase):
    kind = "ert"
    mode = "ert"


class LambdaMartModel(RankModel):
    """Listwise ranker boosted on lambda gradients."""

    kind = "lambdamart"

    def __init__(
        self,
        boost: BoostParams | None = None,
        tree: TreeParams | None = None,
        early_stop_rounds: int = 0,
    ):
        self.boost = boost or BoostParams(loss="lambdarank")
        self.tree = tree or TreeParams(max_depth=4)
        self.early_stop_rounds = early_stop_rounds

    def fit(self, features, grades, countries=None, valid=None):
        offsets = group_offsets(features.srch_ids)
        valid_arrays = None
        if valid is not None:
            fm_v, grades_v = valid
            valid_arrays = (
                fm_v.values,
                np.asarray(grades_v, dtype=float),
                group_offsets(fm_v.srch_ids),
            )
        self.model, self.valid_history = lambdamart_fit(
            features.values,
            grades,
            offsets,
            self.boost,
            self.tree,
            valid=valid_arrays,
            early_stop_rounds=self.early_stop_rounds,
        )
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(features.srch_ids)
        return self

    def score_rows(self, features, countries=None):
        self.check_schema(features)
        return self.model.predict(features.values)

    def state(self):
        meta = self._common_state_meta()
        meta.update(
            kind=self.kind,
            boost=_boost_params_meta(self.boost),
            tree=_tree_params_meta(self.tree),
            early_stop_rounds=self.early_stop_rounds,
        )
        arrays = _trees_to_arrays(self.model.trees, "t/")
        arrays["train_srch_ids"] = self.train_srch_ids
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        inst = cls(
            BoostParams(**meta["boost"]),
            TreeParams(**meta["tree"]),
            meta["early_stop_rounds"],
        )
        inst._restore_common(meta, arrays)
        inst.model = BoostedTrees(
            base_score=0.0,
            shrinkage=meta["boost"]["shrinkage"],
            trees=_trees_from_arrays(arrays, "t/"),
        )
        return inst


def query_zscore(scores: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Population z-score within each query; constant queries become zeros."""
    out = np.zeros_like(scores, dtype=float)
    for s, e in zip(offsets[:-1], offsets[1:]):
        block = scores[s:e]
        sd = block.std()
        if sd > 0:
            out[s:e] = (block - block.mean()) / sd
    return out


class PerCountryForest(RankModel):
    """One forest per country piece (balanced rows), falling back to a
    full-train model for countries that are unseen or too small.

    All outputs are query-z-scored so per-country and fallback score scales
    align; within-query ranking is unaffected.
    """

    kind = "per_country_rf"

    def __init__(
        self,
        fallback: RankModel,
        n_trees: int = 50,
        tree: TreeParams | None = None,
        min_rows: int = 200,
        seed: int = 0,
    ):
        self.fallback = fallback
        self.n_trees = n_trees
        self.tree = tree or TreeParams(max_depth=12, feature_subsample=0.7)
        self.min_rows = min_rows
        self.seed = seed

    def fit(self, features, grades, countries=None):
        if countries is None:
            raise ValueError("per_country_rf requires per-row countries")
        countries = np.asarray(countries)
        grades = np.asarray(grades)
        if not hasattr(self.fallback, "feature_columns"):
            # unfitted fallback: train it on the full training rows
            self.fallback.fit(features, grades)
        X = features.values
        srch_ids = features.srch_ids
        self.models: dict[int, Forest] = {}
        seeds = {}
        uniq = np.unique(countries)
        children = np.random.SeedSequence(self.seed).spawn(len(uniq))
        for c, child in zip(uniq, children):
            rows = np.flatnonzero(countries == c)
            if rows.size < self.min_rows:
                continue
            child_seed = int(child.generate_state(1)[0])
            mask = balance_mask(srch_ids[rows], grades[rows], child_seed)
            bal = rows[mask]
            if bal.size == 0:
                continue
            y = (grades[bal] > 0).astype(float)
            self.models[int(c)] = forest_fit(
                X[bal], y, self.n_trees, self.tree, child_seed, mode="bootstrap_rf"
            )
        self.feature_columns = list(features.columns)
        self.train_srch_ids = np.unique(srch_ids)
        return self

    def score_rows(self, features, countries=None):
        if countries is None:
            raise ValueError("per_country_rf requires per-row countries")
        self.check_schema(features)
        countries = np.asarray(countries)
        scores = np.asarray(self.fallback.score_rows(features), dtype=float).copy()
        for c, forest in self.models.items():
            rows = np.flatnonzero(countries == c)
            if rows.size:
                scores[rows] = forest.predict(features.values[rows])
        offsets = group_offsets(features.srch_ids)
        return query_zscore(scores, offsets)

    def state(self):
        from .model_io import model_state  # deferred: avoids import cycle

        meta = self._common_state_meta()
        fb_meta, fb_arrays = model_state(self.fallback)
        meta.update(
            kind=self.kind,
            n_trees=self.n_trees,
            tree=_tree_params_meta(self.tree),
            min_rows=self.min_rows,
            seed=self.seed,
            countries=sorted(self.models),
            fallback=fb_meta,
        )
        arrays = {"train_srch_ids": self.train_srch_ids}
        for name, arr in fb_arrays.items():
            arrays[f"fallback/{name}"] = arr
        for c, forest in self.models.items():
            arrays.update(_trees_to_arrays(forest.trees, f"c{c}/"))
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        from .model_io import model_from_state

        fb_arrays = {
            name[len("fallback/"):]: arr
            for name, arr in arrays.items()
            if name.startswith("fallback/")
        }
        fallback = model_from_state(meta["fallback"], fb_arrays)
        inst = cls(
            fallback,
            n_trees=meta["n_trees"],
            tree=TreeParams(**meta["tree"]),
            min_rows=meta["min_rows"],
            seed=meta["seed"],
        )
        inst._restore_common(meta, arrays)
        inst.models = {
            int(c): Forest(_trees_from_arrays(arrays, f"c{c}/")) for c in meta["countries"]
        }
        return inst
