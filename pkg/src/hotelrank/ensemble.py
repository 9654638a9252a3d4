"""Score combination: z-score linear blends, GBM stacking on held-out
scores, and listwise LambdaMART ensembling.

Normalization uses the population standard deviation (divide by n); a
constant score vector normalizes to zeros. Stacking refuses inputs computed
on a base model's own training queries unless leakage is explicitly allowed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base import MODEL_REGISTRY, group_offsets
from .metrics import ScoreList
from .tree_models import (
    BoostParams,
    BoostedTrees,
    TreeParams,
    _boost_params_meta,
    _tree_params_meta,
    _trees_from_arrays,
    _trees_to_arrays,
    gbm_fit,
    lambdamart_fit,
)

NORMALIZATIONS = ("none", "global_z", "query_z")


class InputMismatchError(ValueError):
    """Ensemble inputs do not cover identical (srch_id, prop_id) sets."""


class LeakageError(RuntimeError):
    """Stacking split overlaps a base model's training queries."""


def zscore(values, mode: str = "global", offsets=None) -> np.ndarray:
    """(x - mean) / population std; zero-variance input maps to zeros."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("zscore needs a non-empty input")
    if mode == "global":
        sd = values.std()
        return (values - values.mean()) / sd if sd > 0 else np.zeros_like(values)
    if mode == "query":
        if offsets is None:
            raise ValueError("query mode needs group offsets")
        out = np.zeros_like(values)
        for s, e in zip(offsets[:-1], offsets[1:]):
            block = values[s:e]
            sd = block.std()
            if sd > 0:
                out[s:e] = (block - block.mean()) / sd
        return out
    raise ValueError(f"unknown zscore mode: {mode}")


def _normalize_columns(matrix: np.ndarray, normalization: str, offsets) -> np.ndarray:
    if normalization == "none":
        return matrix
    if normalization == "global_z":
        return np.column_stack([zscore(matrix[:, j], "global") for j in range(matrix.shape[1])])
    if normalization == "query_z":
        return np.column_stack(
            [zscore(matrix[:, j], "query", offsets) for j in range(matrix.shape[1])]
        )
    raise ValueError(f"unknown normalization: {normalization}")


def align_inputs(
    inputs: dict[str, ScoreList]
) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Common row universe of several score lists, sorted by (srch_id, prop_id).

    Returns (sorted input names, srch_ids, prop_ids, score matrix). Any
    coverage difference raises with the offending pairs listed.
    """
    if not inputs:
        raise InputMismatchError("no ensemble inputs given")
    names = sorted(inputs)
    first = inputs[names[0]]
    order = np.lexsort((first.prop_ids, first.srch_ids))
    srch = first.srch_ids[order]
    prop = first.prop_ids[order]
    universe = set(zip(srch.tolist(), prop.tolist()))
    problems = []
    for name in names[1:]:
        other = set(zip(inputs[name].srch_ids.tolist(), inputs[name].prop_ids.tolist()))
        for pair in sorted(universe - other)[:10]:
            problems.append(f"input {name} missing {pair}")
        for pair in sorted(other - universe)[:10]:
            problems.append(f"input {name} has extra {pair}")
    if problems:
        raise InputMismatchError("; ".join(problems))
    cols = []
    for name in names:
        lookup = inputs[name].to_lookup()
        cols.append(np.array([lookup[(s, p)] for s, p in zip(srch.tolist(), prop.tolist())]))
    return names, srch, prop, np.column_stack(cols)


def linear_blend(
    inputs: dict[str, ScoreList],
    weights: dict[str, float],
    normalization: str = "global_z",
) -> ScoreList:
    """Weighted sum of (optionally normalized) input scores, row by row."""
    names, srch, prop, matrix = align_inputs(inputs)
    for name in names:
        if name not in weights:
            raise ValueError(f"no weight given for input {name}")
        if not np.isfinite(weights[name]):
            raise ValueError(f"weight for {name} must be finite")
    offsets = group_offsets(srch)
    normed = _normalize_columns(matrix, normalization, offsets)
    blended = normed @ np.array([weights[name] for name in names])
    return ScoreList(srch, prop, blended)


@dataclass
class BlendSpec:
    """Parsed blend file: input score paths, weights, normalization mode."""

    inputs: dict[str, str] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    normalization: str = "global_z"


def parse_blend_spec(path) -> BlendSpec:
    """Text format: ``input <name> <path>``, ``weight <name> <real>``,
    ``normalize global_z|query_z|none``; blank lines and # comments allowed."""
    spec = BlendSpec()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "input" and len(parts) == 3:
                spec.inputs[parts[1]] = parts[2]
            elif parts[0] == "weight" and len(parts) == 3:
                spec.weights[parts[1]] = float(parts[2])
            elif parts[0] == "normalize" and len(parts) == 2:
                if parts[1] not in NORMALIZATIONS:
                    raise ValueError(f"{path}: line {line_no}: unknown normalization {parts[1]}")
                spec.normalization = parts[1]
            else:
                raise ValueError(f"{path}: line {line_no}: cannot parse: {line}")
    if not spec.inputs:
        raise ValueError(f"{path}: no input lines")
    return spec


def _weight_grid(n_inputs: int, steps: int):
    if n_inputs == 1:
        yield (1.0,)
        return
    for first in range(steps):
        w = first / (steps - 1)
        for rest in _weight_grid(n_inputs - 1, steps):
            yield (w,) + tuple(r * (1.0 - w) for r in rest)


def grid_search_weights(
    inputs: dict[str, ScoreList],
    ds,
    normalization: str = "global_z",
    steps: int = 11,
    k: int = 38,
) -> dict[str, float]:
    """Coarse convex-weight grid maximizing NDCG@k on a tuning split.

    This is a convenience beyond the original recipe, whose weights were
    tuned by hand; use a split the final evaluation never sees.
    """
    from .metrics import evaluate

    names = sorted(inputs)
    best = None
    for weights in _weight_grid(len(names), steps):
        wmap = dict(zip(names, weights))
        blended = linear_blend(inputs, wmap, normalization)
        v = evaluate(blended, ds, k=k).mean_ndcg
        if best is None or v > best[0]:
            best = (v, wmap)
    return best[1]


def check_leakage(stack_srch_ids, base_train_srch_ids, allow_leakage: bool):
    """Refuse stacking on queries any base model trained on."""
    overlap = set(np.asarray(stack_srch_ids).tolist()) & set(
        np.asarray(base_train_srch_ids).tolist()
    )
    if overlap and not allow_leakage:
        sample = sorted(overlap)[:10]
        raise LeakageError(
            f"{len(overlap)} stacking queries overlap a base model's training set "
            f"(e.g. {sample}); pass allow_leakage to override"
        )


def _rows_for_dataset(inputs: dict[str, ScoreList], ds) -> tuple[list[str], np.ndarray]:
    """Score matrix aligned to dataset iteration order (sorted column names)."""
    names = sorted(inputs)
    lookups = {name: inputs[name].to_lookup() for name in names}
    srch = ds.row_srch_ids()
    prop = ds.row_prop_ids()
    missing = []
    cols = {name: np.empty(len(srch)) for name in names}
    for i, (s, p) in enumerate(zip(srch.tolist(), prop.tolist())):
        for name in names:
            v = lookups[name].get((s, p))
            if v is None:
                missing.append(f"input {name} missing ({s},{p})")
                if len(missing) >= 20:
                    raise InputMismatchError("; ".join(missing))
            else:
                cols[name][i] = v
    if missing:
        raise InputMismatchError("; ".join(missing))
    return names, np.column_stack([cols[n] for n in names])


class GbmStacker:
    """GBM over base-model scores (plus a few raw features) -> click label."""

    kind = "gbm_stack"

    def __init__(self, boost: BoostParams | None = None, tree: TreeParams | None = None):
        self.boost = boost or BoostParams(n_trees=120, loss="logistic")
        self.tree = tree or TreeParams(max_depth=3)

    def fit(
        self,
        inputs: dict[str, ScoreList],
        ds,
        extras=None,
        base_train_srch_ids=None,
        allow_leakage: bool = False,
    ):
        if base_train_srch_ids is not None:
            check_leakage(ds.row_srch_ids(), base_train_srch_ids, allow_leakage)
        self.input_names, score_matrix = _rows_for_dataset(inputs, ds)
        self.extra_columns = [] if extras is None else list(extras.columns)
        X = score_matrix
        if extras is not None:
            if not np.array_equal(extras.srch_ids, ds.row_srch_ids()):
                raise InputMismatchError("extras rows do not align with the dataset")
            X = np.column_stack([score_matrix, extras.values])
        clicks = np.array([imp.click_bool for imp in ds.iter_impressions()], dtype=float)
        self.model, self.loss_history = gbm_fit(X, clicks, self.boost, self.tree)
        return self

    def predict(self, inputs: dict[str, ScoreList], extras=None) -> ScoreList:
        if sorted(inputs) != self.input_names:
            raise InputMismatchError(
                f"stacker expects inputs {self.input_names}, got {sorted(inputs)}"
            )
        names, srch, prop, matrix = align_inputs(inputs)
        X = matrix
        if self.extra_columns:
            if extras is None:
                raise InputMismatchError("stacker was fit with extras; none given")
            if list(extras.columns) != self.extra_columns:
                raise InputMismatchError("extras columns differ from fit time")
            order = np.lexsort((extras.prop_ids, extras.srch_ids))
            if not (
                np.array_equal(extras.srch_ids[order], srch)
                and np.array_equal(extras.prop_ids[order], prop)
            ):
                raise InputMismatchError("extras rows do not cover the ensemble inputs")
            X = np.column_stack([matrix, extras.values[order]])
        return ScoreList(srch, prop, self.model.predict(X))

    def state(self):
        meta = {
            "kind": self.kind,
            "boost": _boost_params_meta(self.boost),
            "tree": _tree_params_meta(self.tree),
            "inputs": self.input_names,
            "extra_columns": self.extra_columns,
            "base_score": self.model.base_score,
        }
        return meta, _trees_to_arrays(self.model.trees, "t/")

    @classmethod
    def from_state(cls, meta, arrays):
        inst = cls(BoostParams(**meta["boost"]), TreeParams(**meta["tree"]))
        inst.input_names = list(meta["inputs"])
        inst.extra_columns = list(meta["extra_columns"])
        inst.model = BoostedTrees(
            base_score=meta["base_score"],
            shrinkage=meta["boost"]["shrinkage"],
            trees=_trees_from_arrays(arrays, "t/"),
        )
        return inst


class ListwiseEnsembler:
    """LambdaMART over z-scored base-model score columns.

    Tree output is piecewise constant, so rows falling in the same leaves
    would tie and lose the inputs' finer ordering; a tiny multiple of the
    mean normalized input breaks those ties without ever outweighing a
    genuine tree preference.
    """

    kind = "listwise_ensemble"
    TIEBREAK_EPS = 1e-6

    def __init__(
        self,
        boost: BoostParams | None = None,
        tree: TreeParams | None = None,
        normalization: str = "global_z",
    ):
        # modest capacity: the ensembler sees a handful of score columns and
        # a few hundred queries, deep boosting just memorizes them
        self.boost = boost or BoostParams(n_trees=30, loss="lambdarank")
        self.tree = tree or TreeParams(max_depth=3, min_samples_leaf=20)
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization: {normalization}")
        self.normalization = normalization

    def fit(
        self,
        inputs: dict[str, ScoreList],
        ds,
        base_train_srch_ids=None,
        allow_leakage: bool = False,
    ):
        if base_train_srch_ids is not None:
            check_leakage(ds.row_srch_ids(), base_train_srch_ids, allow_leakage)
        self.input_names, matrix = _rows_for_dataset(inputs, ds)
        srch = ds.row_srch_ids()
        offsets = group_offsets(srch)
        X = _normalize_columns(matrix, self.normalization, offsets)
        self.model, _ = lambdamart_fit(
            X, ds.grades(), offsets, self.boost, self.tree
        )
        return self

    def predict(self, inputs: dict[str, ScoreList]) -> ScoreList:
        if sorted(inputs) != self.input_names:
            raise InputMismatchError(
                f"ensembler expects inputs {self.input_names}, got {sorted(inputs)}"
            )
        names, srch, prop, matrix = align_inputs(inputs)
        offsets = group_offsets(srch)
        X = _normalize_columns(matrix, self.normalization, offsets)
        scores = self.model.predict(X) + self.TIEBREAK_EPS * X.mean(axis=1)
        return ScoreList(srch, prop, scores)

    def state(self):
        meta = {
            "kind": self.kind,
            "boost": _boost_params_meta(self.boost),
            "tree": _tree_params_meta(self.tree),
            "inputs": self.input_names,
            "normalization": self.normalization,
        }
        return meta, _trees_to_arrays(self.model.trees, "t/")

    @classmethod
    def from_state(cls, meta, arrays):
        inst = cls(
            BoostParams(**meta["boost"]),
            TreeParams(**meta["tree"]),
            meta["normalization"],
        )
        inst.input_names = list(meta["inputs"])
        inst.model = BoostedTrees(
            base_score=0.0,
            shrinkage=meta["boost"]["shrinkage"],
            trees=_trees_from_arrays(arrays, "t/"),
        )
        return inst


MODEL_REGISTRY["gbm_stack"] = GbmStacker
MODEL_REGISTRY["listwise_ensemble"] = ListwiseEnsembler
