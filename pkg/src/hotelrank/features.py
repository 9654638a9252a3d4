"""Feature engineering: quantile buckets, listwise ranks, composites,
per-country quartile imputation, one-way counts, CTR/CVR tables, and the
ordered pipeline that turns a Dataset into a dense FeatureMatrix.

Label-dependent transforms (CTR/CVR tables, fm_score / lr_score columns)
learn from the training split during fit; applying a fitted pipeline never
reads click or booking flags, so mutating labels cannot change its output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base import group_offsets
from .schema import RAW_COLUMNS, VISITOR_QUERY_COLUMNS, Dataset


class PipelineError(RuntimeError):
    """Bad pipeline spec, unknown column, or apply before fit."""


# names resolvable directly from impression fields rather than the raw map
_FIELD_COLUMNS = ("srch_id", "prop_id", "prop_country_id", "position")

DERIVED_NAMES = [
    "ump",
    "price_diff",
    "starrating_diff",
    "per_fee",
    "score2ma",
    "total_fee",
    "score1d2",
]


def column_values(ds: Dataset, column: str) -> np.ndarray:
    """Per-row values of a raw or id column; missing cells become NaN."""
    if column in _FIELD_COLUMNS:
        return np.array(
            [float(getattr(imp, column)) for imp in ds.iter_impressions()], dtype=float
        )
    out = np.full(ds.n_rows, np.nan)
    for i, imp in enumerate(ds.iter_impressions()):
        v = imp.raw.get(column)
        if v is not None:
            out[i] = v
    return out


# ---------------------------------------------------------------------------
# Core transforms
# ---------------------------------------------------------------------------


def bucket_thresholds(values, n_buckets: int) -> np.ndarray:
    """Empirical quantile cut points at j/n for j = 1..n (lower order statistic)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("bucket needs at least one value")
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    ordered = np.sort(values)
    n = values.size
    idx = [min(n - 1, max(0, math.ceil(j * n / n_buckets) - 1)) for j in range(1, n_buckets + 1)]
    return ordered[idx]


def bucket_assign(values, thresholds: np.ndarray) -> np.ndarray:
    """0-based bucket index: smallest j with value <= t_j, clamped above."""
    values = np.asarray(values, dtype=float)
    idx = np.searchsorted(thresholds, values, side="left")
    return np.minimum(idx, len(thresholds) - 1)


def bucket(values, n_buckets: int) -> np.ndarray:
    """One-hot quantile binarization of a value list (rows sum to one)."""
    thresholds = bucket_thresholds(values, n_buckets)
    assign = bucket_assign(values, thresholds)
    out = np.zeros((len(assign), n_buckets))
    out[np.arange(len(assign)), assign] = 1.0
    return out


def listwise_rank(values, direction: str = "asc") -> np.ndarray:
    """Rank within one query list; 1 is best, ties take the minimum rank."""
    values = np.asarray(values, dtype=float)
    if direction not in ("asc", "desc"):
        raise ValueError(f"unknown direction: {direction}")
    ordered = np.sort(values)
    if direction == "asc":
        better = np.searchsorted(ordered, values, side="left")
    else:
        better = len(values) - np.searchsorted(ordered, values, side="right")
    return better + 1


def composite(f1, f2, f2_max: int) -> np.ndarray:
    """Injective pairing f1 * (f2_max + 1) + f2 of two non-negative int features."""
    f1 = np.asarray(f1, dtype=np.int64)
    f2 = np.asarray(f2, dtype=np.int64)
    if np.any(f1 < 0) or np.any(f2 < 0):
        raise ValueError("composite features must be non-negative")
    return f1 * (int(f2_max) + 1) + f2


def derived_features(values) -> dict[str, float]:
    """The seven derived columns from one impression's (imputed) inputs."""
    price = values["price_usd"]
    rooms = values["srch_room_count"]
    persons = values["srch_adults_count"] + values["srch_children_count"]
    return {
        "ump": math.exp(values["prop_log_historical_price"]) - price,
        "price_diff": values["visitor_hist_adr_usd"] - price,
        "starrating_diff": values["visitor_hist_starrating"] - values["prop_starrating"],
        "per_fee": price * rooms / (persons if persons > 0 else 1.0),
        "score2ma": values["prop_location_score2"] * values["srch_query_affinity_score"],
        "total_fee": price * rooms,
        "score1d2": (values["prop_location_score2"] + 1e-4)
        / (values["prop_location_score1"] + 1e-4),
    }


def impute_missing(ds: Dataset, column: str):
    """Per-country first-quartile imputation of one column.

    Returns (fitted per-country table, imputed per-row values). Countries
    with no observed values fall back to the global Q1.
    """
    imputer = _fit_imputer(ds, [column])
    raw = column_values(ds, column).reshape(-1, 1)
    filled = imputer.transform(raw, ds.row_countries())
    return imputer, filled[:, 0]


@dataclass
class CtrCvrTable:
    """Click-through and conversion rates keyed by prop_id or price bucket."""

    key: str  # "prop_id" | "price_bucket"
    keys: np.ndarray
    presentations: np.ndarray
    clicks: np.ndarray
    bookings: np.ndarray
    ctr: np.ndarray
    cvr: np.ndarray
    global_ctr: float
    global_cvr: float
    price_thresholds: np.ndarray | None = None

    def lookup(self, key_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.keys, key_values)
        idx_c = np.minimum(idx, len(self.keys) - 1)
        hit = (self.keys.size > 0) & (self.keys[idx_c] == key_values)
        ctr = np.where(hit, self.ctr[idx_c], self.global_ctr)
        cvr = np.where(hit, self.cvr[idx_c], self.global_cvr)
        return ctr, cvr


def ctr_cvr_fit(train: Dataset, key: str = "prop_id", n_price_buckets: int = 20) -> CtrCvrTable:
    """CTR_i = clicks_i / presentations_i, CVR_i = bookings_i / clicks_i,
    with the global rate standing in wherever a denominator is zero."""
    if key not in ("prop_id", "price_bucket"):
        raise ValueError(f"unknown ctr/cvr key: {key}")
    clicks = np.array([imp.click_bool for imp in train.iter_impressions()], dtype=float)
    books = np.array([imp.booking_bool for imp in train.iter_impressions()], dtype=float)
    thresholds = None
    if key == "prop_id":
        key_values = column_values(train, "prop_id")
    else:
        _, price = impute_missing(train, "price_usd")
        thresholds = bucket_thresholds(price, n_price_buckets)
        key_values = bucket_assign(price, thresholds).astype(float)
    keys, inverse = np.unique(key_values, return_inverse=True)
    pres = np.bincount(inverse).astype(float)
    ck = np.bincount(inverse, weights=clicks)
    bk = np.bincount(inverse, weights=books)
    total_clicks = float(clicks.sum())
    global_ctr = total_clicks / len(clicks) if len(clicks) else 0.0
    global_cvr = float(books.sum()) / total_clicks if total_clicks > 0 else 0.0
    ctr = np.where(pres > 0, ck / np.maximum(pres, 1.0), global_ctr)
    cvr = np.where(ck > 0, bk / np.maximum(ck, 1.0), global_cvr)
    return CtrCvrTable(
        key=key,
        keys=keys,
        presentations=pres,
        clicks=ck,
        bookings=bk,
        ctr=ctr,
        cvr=cvr,
        global_ctr=global_ctr,
        global_cvr=global_cvr,
        price_thresholds=thresholds,
    )


# ---------------------------------------------------------------------------
# FeatureMatrix
# ---------------------------------------------------------------------------


@dataclass
class FeatureMatrix:
    """Dense rows aligned 1:1 with dataset iteration order."""

    values: np.ndarray
    columns: list[str]
    srch_ids: np.ndarray
    prop_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.srch_ids = np.asarray(self.srch_ids, dtype=np.int64)
        self.prop_ids = np.asarray(self.prop_ids, dtype=np.int64)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise PipelineError(f"unknown feature column: {name}")

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            self.values[rows], list(self.columns), self.srch_ids[rows], self.prop_ids[rows]
        )

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("srch_id\tprop_id\t" + "\t".join(self.columns) + "\n")
            for i in range(len(self.values)):
                vals = "\t".join(repr(float(v)) for v in self.values[i])
                fh.write(f"{self.srch_ids[i]}\t{self.prop_ids[i]}\t{vals}\n")

    def write_ranking_text(self, path, grades=None):
        """SVMRank-style lines: ``<grade> qid:<srch_id> <idx>:<val> ...``
        with 1-based ascending feature indices; zero values are omitted."""
        grades = np.zeros(len(self.values), dtype=int) if grades is None else np.asarray(grades)
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self.values)):
                feats = " ".join(
                    f"{j + 1}:{float(self.values[i, j])!r}"
                    for j in range(self.values.shape[1])
                    if self.values[i, j] != 0.0
                )
                fh.write(f"{int(grades[i])} qid:{self.srch_ids[i]} {feats}".rstrip() + "\n")


# ---------------------------------------------------------------------------
# Pipeline internals
# ---------------------------------------------------------------------------


@dataclass
class _Imputer:
    columns: list[str]
    countries: np.ndarray  # sorted
    q1: np.ndarray  # (n_countries, n_columns), NaN where country unobserved
    global_q1: np.ndarray  # (n_columns,)

    def transform(self, raw: np.ndarray, countries: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.countries, countries)
        idx_c = np.minimum(idx, max(len(self.countries) - 1, 0))
        known = (self.countries.size > 0) & (self.countries[idx_c] == countries)
        fill = np.where(known[:, None], self.q1[idx_c], np.nan)
        fill = np.where(np.isnan(fill), self.global_q1[None, :], fill)
        return np.where(np.isnan(raw), fill, raw)


def _fit_imputer(ds: Dataset, columns: list[str]) -> _Imputer:
    raw = np.column_stack([column_values(ds, c) for c in columns])
    row_countries = ds.row_countries()
    countries = np.unique(row_countries)
    q1 = np.full((len(countries), len(columns)), np.nan)
    global_q1 = np.empty(len(columns))
    for j, c in enumerate(columns):
        col = raw[:, j]
        observed = col[~np.isnan(col)]
        if observed.size == 0:
            raise PipelineError(f"column entirely missing, cannot impute: {c}")
        global_q1[j] = np.quantile(observed, 0.25)
        for i, country in enumerate(countries):
            vals = col[(row_countries == country) & ~np.isnan(col)]
            if vals.size:
                q1[i, j] = np.quantile(vals, 0.25)
    return _Imputer(list(columns), countries, q1, global_q1)


class _Frame:
    """Mutable column store shared by stages while a pipeline runs."""

    def __init__(self, ds: Dataset, base_columns: list[str], imputer: _Imputer):
        for c in base_columns:
            if c not in ds.columns and c not in _FIELD_COLUMNS:
                from .schema import SchemaError

                raise SchemaError(f"column missing from dataset: {c}")
        raw = np.column_stack([column_values(ds, c) for c in base_columns])
        filled = imputer.transform(raw, ds.row_countries())
        self.ds = ds
        self.srch_ids = ds.row_srch_ids()
        self.prop_ids = ds.row_prop_ids()
        self.offsets = group_offsets(self.srch_ids)
        self.names: list[str] = []
        self.data: dict[str, np.ndarray] = {}
        for j, c in enumerate(base_columns):
            self.add(c, filled[:, j])

    def add(self, name: str, values: np.ndarray):
        if name in self.data:
            raise PipelineError(f"duplicate feature column: {name}")
        self.names.append(name)
        self.data[name] = np.asarray(values, dtype=float)

    def col(self, name: str) -> np.ndarray:
        if name not in self.data:
            raise PipelineError(f"column not available in pipeline: {name}")
        return self.data[name]


class _ImputeMarker:
    """Imputation always runs on the base columns; the token is an explicit
    no-op marker so specs can state it."""

    token = "impute"
    out_columns: list[str] = []

    def fit(self, ctx):
        pass

    def apply(self, frame):
        return []

    def meta(self):
        return {"token": self.token}

    def arrays(self):
        return {}

    @classmethod
    def from_meta(cls, meta, arrays):
        return cls()


class _IdColumnsStage:
    token = "id_columns"
    out_columns = ["srch_id", "prop_id"]

    def fit(self, ctx):
        pass

    def apply(self, frame):
        return [frame.srch_ids.astype(float), frame.prop_ids.astype(float)]

    def meta(self):
        return {"token": self.token}

    def arrays(self):
        return {}

    @classmethod
    def from_meta(cls, meta, arrays):
        return cls()


class _RankStage:
    token = "rank"

    def __init__(self, column: str, direction: str = "asc", out_name: str | None = None):
        if direction not in ("asc", "desc"):
            raise PipelineError(f"rank direction must be asc or desc: {direction}")
        self.column = column
        self.direction = direction
        self.out_columns = [out_name or f"{column}_rank"]

    def fit(self, ctx):
        ctx.frame.col(self.column)  # existence check

    def apply(self, frame):
        values = frame.col(self.column)
        out = np.empty_like(values)
        for s, e in zip(frame.offsets[:-1], frame.offsets[1:]):
            out[s:e] = listwise_rank(values[s:e], self.direction)
        return [out]

    def meta(self):
        return {
            "token": self.token,
            "column": self.column,
            "direction": self.direction,
            "out": self.out_columns[0],
        }

    def arrays(self):
        return {}

    @classmethod
    def from_meta(cls, meta, arrays):
        return cls(meta["column"], meta["direction"], meta["out"])


class _DerivedStage:
    token = "derived"
    out_columns = list(DERIVED_NAMES)

    _inputs = [
        "price_usd",
        "prop_log_historical_price",
        "visitor_hist_adr_usd",
        "visitor_hist_starrating",
        "prop_starrating",
        "srch_room_count",
        "srch_adults_count",
        "srch_children_count",
        "prop_location_score2",
        "srch_query_affinity_score",
        "prop_location_score1",
    ]

    def fit(self, ctx):
        for c in self._inputs:
            ctx.frame.col(c)

    def apply(self, frame):
        price = frame.col("price_usd")
        rooms = frame.col("srch_room_count")
        persons = frame.col("srch_adults_count") + frame.col("srch_children_count")
        persons = np.where(persons > 0, persons, 1.0)
        return [
            np.exp(frame.col("prop_log_historical_price")) - price,
            frame.col("visitor_hist_adr_usd") - price,
            frame.col("visitor_hist_starrating") - frame.col("prop_starrating"),
            price * rooms / persons,
            frame.col("prop_location_score2") * frame.col("srch_query_affinity_score"),
            price * rooms,
            (frame.col("prop_location_score2") + 1e-4) / (frame.col("prop_location_score1") + 1e-4),
        ]

    def meta(self):
        return {"token": self.token}

    def arrays(self):
        return {}

    @classmethod
    def from_meta(cls, meta, arrays):
        return cls()


class _CompositeStage:
    token = "composite"

    def __init__(self, col1: str, col2: str, f2_max: int | None = None):
        self.col1 = col1
        self.col2 = col2
        self.f2_max = f2_max
        self.out_columns = [f"{col1}_x_{col2}"]

    def _ints(self, frame, name):
        vals = np.rint(frame.col(name)).astype(np.int64)
        if np.any(vals < 0):
            raise PipelineError(f"composite input must be non-negative: {name}")
        return vals

    def fit(self, ctx):
        f2 = self._ints(ctx.frame, self.col2)
        self._ints(ctx.frame, self.col1)
        self.f2_max = int(f2.max()) if f2.size else 0

    def apply(self, frame):
        if self.f2_max is None:
            raise PipelineError("composite applied before fit")
        f1 = self._ints(frame, self.col1)
        # unseen larger values clip to the training max, keeping the pairing injective
        f2 = np.minimum(self._ints(frame, self.col2), self.f2_max)
        return [composite(f1, f2, self.f2_max).astype(float)]

    def meta(self):
        return {"token": self.token, "col1": self.col1, "col2": self.col2, "f2_max": self.f2_max}

    def arrays(self):
        return {}

    @classmethod
    def from_meta(cls, meta, arrays):
        return cls(meta["col1"], meta["col2"], meta["f2_max"])


class _CountStage:
    """One-way value counts over train plus test, the one transform that
    deliberately sees the unlabeled test rows."""

    token = "count"

    def __init__(self, column: str):
        self.column = column
        self.out_columns = [f"{column}_cnt"]
        self.keys: np.ndarray | None = None
        self.counts: np.ndarray | None = None

    def fit(self, ctx):
        vals = column_values(ctx.train_ds, self.column)
        if ctx.test_ds is not None:
            vals = np.concatenate([vals, column_values(ctx.test_ds, self.column)])
        vals = vals[~np.isnan(vals)]
        self.keys, counts = np.unique(vals, return_counts=True)
        self.counts = counts.astype(float)

    def apply(self, frame):
        if self.keys is None:
            raise PipelineError("count applied before fit")
        vals = column_values(frame.ds, self.column)
        idx = np.searchsorted(self.keys, vals)
        idx_c = np.minimum(idx, max(len(self.keys) - 1, 0))
        hit = (self.keys.size > 0) & (self.keys[idx_c] == vals)
        return [np.where(hit, self.counts[idx_c], 0.0)]

    def meta(self):
        return {"token": self.token, "column": self.column}

    def arrays(self):
        return {"keys": self.keys, "counts": self.counts}

    @classmethod
    def from_meta(cls, meta, arrays):
        inst = cls(meta["column"])
        inst.keys = arrays["keys"]
        inst.counts = arrays["counts"]
        return inst


class _BucketStage:
    token = "bucket"

    def __init__(self, column: str, n_buckets: int):
        if n_buckets < 1:
            raise PipelineError("bucket needs n_buckets >= 1")
        self.column = column
        self.n_buckets = n_buckets
        self.out_columns = [f"{column}_bucket_{j}" for j in range(1, n_buckets + 1)]
        self.thresholds: np.ndarray | None = None

    def fit(self, ctx):
        self.thresholds = bucket_thresholds(ctx.frame.col(self.column), self.n_buckets)

    def apply(self, frame):
        if self.thresholds is None:
            raise PipelineError("bucket applied before fit")
        assign = bucket_assign(frame.col(self.column), self.thresholds)
        out = np.zeros((len(assign), self.n_buckets))
        out[np.arange(len(assign)), assign] = 1.0
        return [out[:, j] for j in range(self.n_buckets)]

    def meta(self):
        return {"token": self.token, "column": self.column, "n_buckets": self.n_buckets}

    def arrays(self):
        return {"thresholds": self.thresholds}

    @classmethod
    def from_meta(cls, meta, arrays):
        inst = cls(meta["column"], meta["n_buckets"])
        inst.thresholds = arrays["thresholds"]
        return inst


class _CtrCvrStage:
    token = "ctr_cvr"

    def __init__(self, key: str, n_price_buckets: int = 20):
        if key not in ("prop_id", "price_bucket"):
            raise PipelineError(f"ctr_cvr key must be prop_id or price_bucket: {key}")
        self.key = key
        self.n_price_buckets = n_price_buckets
        short = "prop" if key == "prop_id" else "price"
        self.out_columns = [f"{short}_ctr", f"{short}_cvr"]
        self.table: CtrCvrTable | None = None

    def fit(self, ctx):
        self.table = ctr_cvr_fit(ctx.train_ds, self.key, self.n_price_buckets)

    def apply(self, frame):
        if self.table is None:
            raise PipelineError("ctr_cvr applied before fit")
        if self.key == "prop_id":
            key_values = frame.prop_ids.astype(float)
        else:
            key_values = bucket_assign(
                frame.col("price_usd"), self.table.price_thresholds
            ).astype(float)
        ctr, cvr = self.table.lookup(key_values)
        return [ctr, cvr]

    def meta(self):
        return {
            "token": self.token,
            "key": self.key,
            "n_price_buckets": self.n_price_buckets,
            "global_ctr": None if self.table is None else self.table.global_ctr,
            "global_cvr": None if self.table is None else self.table.global_cvr,
        }

    def arrays(self):
        t = self.table
        arrays = {
            "keys": t.keys,
            "presentations": t.presentations,
            "clicks": t.clicks,
            "bookings": t.bookings,
            "ctr": t.ctr,
            "cvr": t.cvr,
        }
        if t.price_thresholds is not None:
            arrays["price_thresholds"] = t.price_thresholds
        return arrays

    @classmethod
    def from_meta(cls, meta, arrays):
        inst = cls(meta["key"], meta["n_price_buckets"])
        inst.table = CtrCvrTable(
            key=meta["key"],
            keys=arrays["keys"],
            presentations=arrays["presentations"],
            clicks=arrays["clicks"],
            bookings=arrays["bookings"],
            ctr=arrays["ctr"],
            cvr=arrays["cvr"],
            global_ctr=meta["global_ctr"],
            global_cvr=meta["global_cvr"],
            price_thresholds=arrays.get("price_thresholds"),
        )
        return inst


class _ScoreStageBase:
    """Query-level propensity column learnt only from visitor+query features.

    The submodel trains on the fit split's click labels; apply uses fitted
    weights on features alone, so it stays label-free downstream.
    """

    def __init__(self):
        self.input_columns: list[str] | None = None
        self.mean = None
        self.std = None

    def _input_matrix(self, frame):
        return np.column_stack([frame.col(c) for c in self.input_columns])

    def fit(self, ctx):
        self.input_columns = [c for c in VISITOR_QUERY_COLUMNS if c in ctx.frame.data]
        if not self.input_columns:
            raise PipelineError(f"{self.token} needs visitor/query columns in the data")
        from .base import standardize_fit

        X = self._input_matrix(ctx.frame)
        self.mean, self.std = standardize_fit(X)
        y = (np.asarray(ctx.grades) > 0).astype(float)
        self._fit_submodel((X - self.mean) / self.std, y, ctx.seed)


class _LrScoreStage(_ScoreStageBase):
    token = "lr_score"
    out_columns = ["lr_score"]

    def _fit_submodel(self, Xs, y, seed):
        from .linear_models import WeightedLrConfig, weighted_lr_fit_arrays

        cfg = WeightedLrConfig(learning_rate=0.5, epochs=150, l2=1e-4, seed=seed)
        self.w, self.b, _, _ = weighted_lr_fit_arrays(Xs, y, cfg)

    def apply(self, frame):
        if self.input_columns is None:
            raise PipelineError("lr_score applied before fit")
        Xs = (self._input_matrix(frame) - self.mean) / self.std
        return [Xs @ self.w + self.b]

    def meta(self):
        return {"token": self.token, "inputs": self.input_columns}

    def arrays(self):
        return {"w": self.w, "b": np.array([self.b]), "mean": self.mean, "std": self.std}

    @classmethod
    def from_meta(cls, meta, arrays):
        inst = cls()
        inst.input_columns = list(meta["inputs"])
        inst.w = arrays["w"]
        inst.b = float(arrays["b"][0])
        inst.mean = arrays["mean"]
        inst.std = arrays["std"]
        return inst


class _FmScoreStage(_ScoreStageBase):
    token = "fm_score"
    out_columns = ["fm_score"]

    def _fit_submodel(self, Xs, y, seed):
        from .fm import FmParams, fm_fit_arrays

        params = FmParams(k=4, epochs=3, learning_rate=0.02, l2=1e-4, seed=seed)
        self.model, _ = fm_fit_arrays(Xs, y, params)

    def apply(self, frame):
        if self.input_columns is None:
            raise PipelineError("fm_score applied before fit")
        from .fm import fm_predict

        Xs = (self._input_matrix(frame) - self.mean) / self.std
        return [fm_predict(self.model, Xs)]

    def meta(self):
        return {"token": self.token, "inputs": self.input_columns}

    def arrays(self):
        return {
            "w0": np.array([self.model.w0]),
            "w": self.model.w,
            "V": self.model.V,
            "mean": self.mean,
            "std": self.std,
        }

    @classmethod
    def from_meta(cls, meta, arrays):
        from .fm import FmModel

        inst = cls()
        inst.input_columns = list(meta["inputs"])
        inst.model = FmModel(w0=float(arrays["w0"][0]), w=arrays["w"], V=arrays["V"])
        inst.mean = arrays["mean"]
        inst.std = arrays["std"]
        return inst


_STAGE_CLASSES = {
    cls.token: cls
    for cls in (
        _ImputeMarker,
        _IdColumnsStage,
        _RankStage,
        _DerivedStage,
        _CompositeStage,
        _CountStage,
        _BucketStage,
        _CtrCvrStage,
        _LrScoreStage,
        _FmScoreStage,
    )
}


def _make_stage(token: str):
    parts = token.split(":")
    name = parts[0]
    args = parts[1:]
    if name == "impute" or name == "id_columns" or name == "derived":
        if args:
            raise PipelineError(f"{name} takes no arguments: {token}")
        return _STAGE_CLASSES[name]()
    if name == "rank":
        if not 1 <= len(args) <= 3:
            raise PipelineError(f"rank wants column[:direction[:out_name]]: {token}")
        return _RankStage(args[0], args[1] if len(args) > 1 else "asc",
                          args[2] if len(args) > 2 else None)
    if name == "composite":
        if len(args) != 2:
            raise PipelineError(f"composite wants two columns: {token}")
        return _CompositeStage(args[0], args[1])
    if name == "count":
        if len(args) != 1:
            raise PipelineError(f"count wants one column: {token}")
        return _CountStage(args[0])
    if name == "bucket":
        if len(args) != 2:
            raise PipelineError(f"bucket wants column:n: {token}")
        return _BucketStage(args[0], int(args[1]))
    if name == "ctr_cvr":
        if not 1 <= len(args) <= 2:
            raise PipelineError(f"ctr_cvr wants key[:n_buckets]: {token}")
        return _CtrCvrStage(args[0], int(args[1]) if len(args) > 1 else 20)
    if name == "fm_score":
        return _FmScoreStage()
    if name == "lr_score":
        return _LrScoreStage()
    raise PipelineError(f"unknown pipeline stage: {token}")


@dataclass
class _FitContext:
    frame: _Frame
    train_ds: Dataset
    test_ds: Dataset | None
    grades: np.ndarray
    seed: int


class Pipeline:
    """Unfitted ordered transform list; fit() learns every stage on train data."""

    def __init__(self, stages: list[str] | None = None, keep: list[str] | None = None):
        self.tokens = list(stages or [])
        for token in self.tokens:
            _make_stage(token)  # validate early
        self.keep = list(keep) if keep is not None else None

    def fit(self, train_ds: Dataset, test_ds: Dataset | None = None, seed: int = 0):
        base_columns = [c for c in RAW_COLUMNS if c in train_ds.columns]
        imputer = _fit_imputer(train_ds, base_columns)
        frame = _Frame(train_ds, base_columns, imputer)
        grades = train_ds.grades() if train_ds.labeled else np.zeros(train_ds.n_rows)
        stages = []
        for i, token in enumerate(self.tokens):
            stage = _make_stage(token)
            ctx = _FitContext(frame, train_ds, test_ds, grades, seed + i)
            stage.fit(ctx)
            for name, col in zip(stage.out_columns, stage.apply(frame)):
                frame.add(name, col)
            stages.append(stage)
        return FittedPipeline(base_columns, imputer, stages, self.keep)


def build_pipeline(stages: list[str] | None = None, keep: list[str] | None = None) -> Pipeline:
    return Pipeline(stages, keep)


class FittedPipeline:
    def __init__(self, base_columns, imputer: _Imputer, stages, keep):
        self.base_columns = list(base_columns)
        self.imputer = imputer
        self.stages = stages
        self.keep = keep

    def apply(self, ds: Dataset) -> FeatureMatrix:
        frame = _Frame(ds, self.base_columns, self.imputer)
        for stage in self.stages:
            for name, col in zip(stage.out_columns, stage.apply(frame)):
                frame.add(name, col)
        names = self._select(frame.names)
        values = np.column_stack([frame.data[n] for n in names]) if names else np.zeros(
            (ds.n_rows, 0)
        )
        return FeatureMatrix(values, names, frame.srch_ids, frame.prop_ids)

    def _select(self, available: list[str]) -> list[str]:
        if self.keep is None:
            return list(available)
        chosen: list[str] = []
        for pattern in self.keep:
            if pattern.endswith("*"):
                prefix = pattern[:-1]
                matched = [n for n in available if n.startswith(prefix) and n not in chosen]
                if not matched:
                    raise PipelineError(f"keep pattern matched nothing: {pattern}")
                chosen.extend(matched)
            else:
                if pattern not in available:
                    raise PipelineError(f"keep column not produced by pipeline: {pattern}")
                if pattern not in chosen:
                    chosen.append(pattern)
        return chosen

    @property
    def output_columns(self) -> list[str] | None:
        # known only after an apply for wildcard keeps; exact otherwise
        return None if self.keep is None else list(self.keep)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "base_columns": self.base_columns,
            "keep": self.keep,
            "imputer_columns": self.imputer.columns,
            "stages": [s.meta() for s in self.stages],
        }
        arrays = {
            "imputer/countries": self.imputer.countries,
            "imputer/q1": self.imputer.q1,
            "imputer/global_q1": self.imputer.global_q1,
        }
        for i, stage in enumerate(self.stages):
            for name, arr in stage.arrays().items():
                arrays[f"s{i}/{name}"] = arr
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "FittedPipeline":
        imputer = _Imputer(
            columns=list(meta["imputer_columns"]),
            countries=arrays["imputer/countries"],
            q1=arrays["imputer/q1"],
            global_q1=arrays["imputer/global_q1"],
        )
        stages = []
        for i, smeta in enumerate(meta["stages"]):
            stage_cls = _STAGE_CLASSES[smeta["token"]]
            prefix = f"s{i}/"
            sub = {
                name[len(prefix):]: arr
                for name, arr in arrays.items()
                if name.startswith(prefix)
            }
            stages.append(stage_cls.from_meta(smeta, sub))
        return cls(meta["base_columns"], imputer, stages, meta["keep"])


# ---------------------------------------------------------------------------
# Presets mirroring the shipped model recipes
# ---------------------------------------------------------------------------

# Table-1 style: derived formulas, one-way counts, and the two learnt
# propensity columns. random_bool_f has no definition anywhere, so the kept
# list carries 19 of the 20 entries.
_GBM_TABLE1_KEEP = [
    "fm_score",
    "lr_score",
    "prop_location_score2",
    "ump",
    "price_diff",
    "random_bool_cnt",
    "starrating_diff",
    "prop_id_cnt",
    "score1d2",
    "random_bool",
    "srch_destination_id_cnt",
    "date_time",
    "per_fee",
    "price_usd",
    "score2ma",
    "prop_location_score2_cnt",
    "prop_review_score",
    "total_fee",
    "orig_destination_distance",
]

PRESETS: dict[str, tuple[list[str], list[str] | None]] = {
    "base": ([], None),
    "ftrl-7feat": (
        ["impute", "id_columns"],
        [
            "srch_id",
            "prop_id",
            "srch_destination_id",
            "prop_starrating",
            "prop_location_score1",
            "prop_location_score2",
            "price_usd",
        ],
    ),
    "gbm-table1": (
        [
            "impute",
            "derived",
            "count:prop_id",
            "count:srch_destination_id",
            "count:random_bool",
            "count:prop_location_score2",
            "fm_score",
            "lr_score",
        ],
        _GBM_TABLE1_KEEP,
    ),
    "fm-table2": (
        [
            "impute",
            "id_columns",
            "derived",
            "bucket:prop_id:32",
            "bucket:srch_destination_id:32",
            "bucket:srch_room_count:8",
            "rank:price_usd:asc:price_rank",
            "rank:price_diff:desc:price_diff_rank",
            "rank:prop_starrating:desc:star_rank",
        ],
        [
            "prop_id_bucket_*",
            "srch_destination_id_bucket_*",
            "srch_room_count_bucket_*",
            "price_usd",
            "prop_location_score1",
            "prop_location_score2",
            "price_rank",
            "price_diff_rank",
            "star_rank",
        ],
    ),
    "lambdamart-table3": (
        [
            "impute",
            "derived",
            "rank:price_usd:asc:price_rank",
            "rank:price_diff:desc:price_diff_rank",
            "rank:prop_starrating:desc:star_rank",
            "fm_score",
            "lr_score",
        ],
        [
            "prop_starrating",
            "prop_location_score1",
            "prop_location_score2",
            "price_rank",
            "price_diff_rank",
            "star_rank",
            "fm_score",
            "lr_score",
        ],
    ),
    "lambdamart-ctrcvr": (
        ["impute", "ctr_cvr:prop_id", "ctr_cvr:price_bucket:20"],
        None,
    ),
}


def preset_pipeline(name: str) -> Pipeline:
    if name not in PRESETS:
        raise PipelineError(f"unknown preset: {name} (have: {', '.join(sorted(PRESETS))})")
    stages, keep = PRESETS[name]
    return Pipeline(stages, keep)
