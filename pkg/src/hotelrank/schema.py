"""Expedia-style data model: loading, grading, splitting, sampling, synthesis.

A dataset is a list of query groups; each group is the block of candidate
hotels shown for one search. Raw numeric columns live in a per-impression
map where a missing cell is simply absent (never a sentinel number).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .base import group_offsets, sigmoid

# Raw numeric columns, in canonical export order. date_time is unix seconds.
RAW_COLUMNS = [
    "price_usd",
    "prop_starrating",
    "prop_review_score",
    "prop_location_score1",
    "prop_location_score2",
    "prop_log_historical_price",
    "visitor_hist_adr_usd",
    "visitor_hist_starrating",
    "srch_room_count",
    "srch_adults_count",
    "srch_children_count",
    "srch_booking_window",
    "srch_query_affinity_score",
    "orig_destination_distance",
    "srch_destination_id",
    "random_bool",
    "date_time",
]

ID_COLUMNS = ["srch_id", "prop_id", "prop_country_id", "position"]
LABEL_COLUMNS = ["click_bool", "booking_bool"]

# Columns that describe the visitor or the query itself; constant within a
# query group, used to train the fm_score / lr_score pipeline columns.
VISITOR_QUERY_COLUMNS = [
    "visitor_hist_adr_usd",
    "visitor_hist_starrating",
    "srch_room_count",
    "srch_adults_count",
    "srch_children_count",
    "srch_booking_window",
    "srch_query_affinity_score",
]

GRADE_BOOKED = 5
GRADE_CLICKED = 1


class SchemaError(ValueError):
    """Malformed input file or row."""


@dataclass
class SearchImpression:
    """One candidate hotel row within a search query."""

    srch_id: int
    prop_id: int
    prop_country_id: int
    position: int
    raw: dict[str, float] = field(default_factory=dict)
    click_bool: int = 0
    booking_bool: int = 0


@dataclass
class QueryGroup:
    """All impressions shown for one search, in display order."""

    srch_id: int
    impressions: list[SearchImpression]

    @property
    def country(self) -> int:
        # group country = first impression's prop_country_id
        return self.impressions[0].prop_country_id


@dataclass
class Dataset:
    """Query groups plus the raw-column schema present in the source."""

    groups: list[QueryGroup]
    columns: list[str]
    labeled: bool = True

    @property
    def n_rows(self) -> int:
        return sum(len(g.impressions) for g in self.groups)

    def iter_impressions(self):
        for g in self.groups:
            yield from g.impressions

    def row_srch_ids(self) -> np.ndarray:
        return np.array(
            [g.srch_id for g in self.groups for _ in g.impressions], dtype=np.int64
        )

    def row_prop_ids(self) -> np.ndarray:
        return np.array([imp.prop_id for imp in self.iter_impressions()], dtype=np.int64)

    def row_countries(self) -> np.ndarray:
        return np.array(
            [imp.prop_country_id for imp in self.iter_impressions()], dtype=np.int64
        )

    def grades(self) -> np.ndarray:
        return np.array([relevance(imp) for imp in self.iter_impressions()], dtype=np.int64)

    def offsets(self) -> np.ndarray:
        return group_offsets(self.row_srch_ids())


def relevance(imp: SearchImpression) -> int:
    """Relevance grade: 5 booked, 1 clicked only, 0 neither."""
    if imp.booking_bool:
        return GRADE_BOOKED
    if imp.click_bool:
        return GRADE_CLICKED
    return 0


def _validate_groups(groups: list[QueryGroup]):
    seen_srch = set()
    for g in groups:
        if not g.impressions:
            raise SchemaError(f"empty query group srch_id={g.srch_id}")
        if g.srch_id in seen_srch:
            raise SchemaError(f"duplicate srch_id across groups: {g.srch_id}")
        seen_srch.add(g.srch_id)
        props = set()
        for imp in g.impressions:
            if imp.srch_id != g.srch_id:
                raise SchemaError(f"mixed srch_id inside group {g.srch_id}")
            if imp.prop_id in props:
                raise SchemaError(
                    f"duplicate prop_id {imp.prop_id} in srch_id {g.srch_id}"
                )
            props.add(imp.prop_id)


def _parse_int(text: str, column: str, line_no: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise SchemaError(f"line {line_no}: column {column}: not an integer: {text!r}")


def _parse_raw(text: str, column: str, line_no: int) -> float | None:
    if text is None or text == "" or text == "NULL":
        return None
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"line {line_no}: column {column}: not numeric: {text!r}")


def load_csv(path, has_labels: bool = True) -> Dataset:
    """Parse a CSV dataset. "NULL" or an empty cell marks a missing value.

    Rows violating booking => click are repaired by setting click_bool = 1.
    Unrecognized columns (e.g. competitor comp1..comp8 blocks) are ignored.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        col_idx = {name: i for i, name in enumerate(header)}
        required = list(ID_COLUMNS) + (list(LABEL_COLUMNS) if has_labels else [])
        for name in required:
            if name not in col_idx:
                raise SchemaError(f"{path}: required column missing: {name}")
        raw_present = [c for c in RAW_COLUMNS if c in col_idx]

        by_srch: dict[int, QueryGroup] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(
                    f"line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            srch_id = _parse_int(row[col_idx["srch_id"]], "srch_id", line_no)
            prop_id = _parse_int(row[col_idx["prop_id"]], "prop_id", line_no)
            country = _parse_int(row[col_idx["prop_country_id"]], "prop_country_id", line_no)
            position = _parse_int(row[col_idx["position"]], "position", line_no)
            if position < 1:
                raise SchemaError(f"line {line_no}: position must be >= 1")
            raw = {}
            for c in raw_present:
                v = _parse_raw(row[col_idx[c]], c, line_no)
                if v is not None:
                    raw[c] = v
            if "price_usd" in raw and raw["price_usd"] < 0:
                raise SchemaError(f"line {line_no}: negative price_usd")
            if "srch_room_count" in raw and raw["srch_room_count"] < 1:
                raise SchemaError(f"line {line_no}: srch_room_count must be >= 1")
            click = book = 0
            if has_labels:
                click = _parse_int(row[col_idx["click_bool"]], "click_bool", line_no)
                book = _parse_int(row[col_idx["booking_bool"]], "booking_bool", line_no)
                if click not in (0, 1) or book not in (0, 1):
                    raise SchemaError(f"line {line_no}: flags must be 0 or 1")
                if book == 1 and click == 0:
                    click = 1  # a booking is also a click
            imp = SearchImpression(srch_id, prop_id, country, position, raw, click, book)
            group = by_srch.get(srch_id)
            if group is None:
                by_srch[srch_id] = QueryGroup(srch_id, [imp])
            else:
                group.impressions.append(imp)

    groups = list(by_srch.values())
    _validate_groups(groups)
    return Dataset(groups=groups, columns=raw_present, labeled=has_labels)


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_csv(ds: Dataset, path, include_labels: bool | None = None):
    """Export to CSV sorted by srch_id then original row order."""
    if include_labels is None:
        include_labels = ds.labeled
    header = list(ID_COLUMNS) + list(ds.columns)
    if include_labels:
        header += LABEL_COLUMNS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for g in sorted(ds.groups, key=lambda g: g.srch_id):
            for imp in g.impressions:
                row = [imp.srch_id, imp.prop_id, imp.prop_country_id, imp.position]
                for c in ds.columns:
                    v = imp.raw.get(c)
                    row.append("NULL" if v is None else _fmt_num(v))
                if include_labels:
                    row += [imp.click_bool, imp.booking_bool]
                writer.writerow(row)


def split_validation(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Hold out every query with srch_id % 10 == 1 as the validation set."""
    valid_groups = [g for g in ds.groups if g.srch_id % 10 == 1]
    train_groups = [g for g in ds.groups if g.srch_id % 10 != 1]
    if not valid_groups:
        warnings.warn("validation split is empty: no srch_id = 1 (mod 10)")
    if not train_groups:
        warnings.warn("train split is empty: every srch_id = 1 (mod 10)")
    return (
        Dataset(train_groups, ds.columns, ds.labeled),
        Dataset(valid_groups, ds.columns, ds.labeled),
    )


def sample_fraction(ds: Dataset, p: float, seed: int) -> Dataset:
    """Keep each query group independently with probability p."""
    if not 0 < p <= 1:
        raise ValueError(f"sampling fraction must be in (0, 1], got {p}")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(ds.groups)) < p
    groups = [g for g, k in zip(ds.groups, keep) if k]
    return Dataset(groups, ds.columns, ds.labeled)


def balance_mask(srch_ids, grades, seed: int) -> np.ndarray:
    """Row mask keeping, per query, every positive plus one sampled negative
    apiece (without replacement; exhausted negatives are all kept).
    Queries without positives contribute no rows."""
    ids = np.asarray(srch_ids)
    pos = np.asarray(grades) > 0
    keep = np.zeros(ids.size, dtype=bool)
    rng = np.random.default_rng(seed)
    offs = group_offsets(ids)
    for s, e in zip(offs[:-1], offs[1:]):
        block = np.arange(s, e)
        p_idx = block[pos[s:e]]
        if p_idx.size == 0:
            continue
        keep[p_idx] = True
        n_idx = block[~pos[s:e]]
        take = min(p_idx.size, n_idx.size)
        if take:
            keep[rng.choice(n_idx, size=take, replace=False)] = True
    return keep


def balance(ds: Dataset, seed: int) -> Dataset:
    """Per-query balanced subsample: one negative kept per positive."""
    mask = balance_mask(ds.row_srch_ids(), ds.grades(), seed)
    groups = []
    i = 0
    for g in ds.groups:
        kept = []
        for imp in g.impressions:
            if mask[i]:
                kept.append(imp)
            i += 1
        if kept:
            groups.append(QueryGroup(g.srch_id, kept))
    return Dataset(groups, ds.columns, ds.labeled)


def split_by_country(ds: Dataset) -> dict[int, Dataset]:
    """Partition groups by the group country (first impression's prop_country_id)."""
    pieces: dict[int, list[QueryGroup]] = {}
    for g in ds.groups:
        pieces.setdefault(g.country, []).append(g)
    return {c: Dataset(gs, ds.columns, ds.labeled) for c, gs in pieces.items()}


# ---------------------------------------------------------------------------
# Synthetic data with a planted ranking signal
# ---------------------------------------------------------------------------

# Coefficients of the planted latent utility, applied to the per-query
# standardized columns (price_usd, prop_starrating, prop_location_score2,
# prop_location_score1). Cheap, well-starred, well-located hotels win.
PLANTED_BETA = {
    "price_usd": -2.0,
    "prop_starrating": 0.5,
    "prop_location_score2": 0.9,
    "prop_location_score1": 0.4,
}

# Booking probability among clicked rows: sigmoid(slope * u_z + intercept).
# A steep slope with a low intercept makes bookings the high-utility minority
# of clicks, which only grade-aware (listwise) learners can exploit.
BOOKING_SLOPE = 3.0
BOOKING_INTERCEPT = -6.0

# Per-country log-price level spread; large values make a global price scale
# a poor stand-in for the within-query price ordering.
COUNTRY_PRICE_SHIFT_SD = 0.45

# Within-query log-price dispersion varies per query by exp(N(0, sd)): the
# utility weighs *standardized* price, so a single global coefficient cannot
# fit every query while within-query ranks stay exact.
PRICE_SIGMA_BASE = 0.45
PRICE_SIGMA_LOG_SD = 0.8


@dataclass(frozen=True)
class SynthConfig:
    n_queries: int
    impressions_per_query: int
    n_countries: int
    seed: int
    positive_rate: float = 0.044
    utility_noise: float = 0.5
    missing_rate: float = 0.05
    srch_id_start: int = 1


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Draw an Expedia-shaped dataset whose clicks follow a planted utility.

    Clicked impressions per query are Plackett-Luce samples of the utility
    (Gumbel top-k); the expected positive rate equals cfg.positive_rate.
    Bookings among clicks lean towards higher utility. ~missing_rate of
    prop_location_score2 cells and of per-query visitor histories are blanked
    after the utility is computed, so imputation has real work to do.
    """
    if cfg.n_queries < 1 or cfg.impressions_per_query < 1 or cfg.n_countries < 1:
        raise ValueError("n_queries, impressions_per_query, n_countries must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    m = cfg.impressions_per_query
    beta = PLANTED_BETA
    country_price_shift = rng.normal(0.0, COUNTRY_PRICE_SHIFT_SD, cfg.n_countries)
    pool = max(200, 2 * m)
    n_dest = max(2, cfg.n_queries // 4)
    base_time = 1_357_000_000  # early 2013

    groups = []
    for q in range(cfg.n_queries):
        srch_id = cfg.srch_id_start + q
        country = q % cfg.n_countries + 1

        # query-level fields (constant within the group)
        has_hist = rng.random() >= cfg.missing_rate
        visitor_adr = float(np.exp(rng.normal(4.7, 0.5))) if has_hist else None
        visitor_star = float(rng.uniform(2.0, 5.0)) if has_hist else None
        rooms = 1 + int(min(rng.poisson(0.3), 3))
        adults = 1 + int(rng.poisson(0.8))
        children = int(rng.poisson(0.4))
        window = int(rng.exponential(14.0))
        affinity = -float(rng.exponential(10.0))
        dest_id = int(rng.integers(1, n_dest + 1))
        random_bool = int(rng.random() < 0.3)
        date_time = base_time + int(rng.integers(0, 365 * 24 * 3600))

        prop_ids = rng.choice(pool, size=m, replace=False) + country * 1000
        price_sigma = PRICE_SIGMA_BASE * float(np.exp(rng.normal(0.0, PRICE_SIGMA_LOG_SD)))
        price = np.exp(rng.normal(4.6 + country_price_shift[country - 1], price_sigma, m))
        star = rng.choice([1, 2, 3, 4, 5], size=m, p=[0.08, 0.18, 0.34, 0.27, 0.13])
        review = np.round(2 * np.clip(rng.normal(3.8, 0.8, m), 0, 5)) / 2
        loc1 = rng.uniform(0.0, 7.0, m)
        loc2 = rng.uniform(0.0, 1.0, m)
        log_hist = np.log(price) + rng.normal(0.0, 0.15, m)
        distance = np.exp(rng.normal(5.0, 1.2, m))

        # planted utility on per-query standardized signal columns
        u = np.zeros(m)
        for col, vals in (
            ("price_usd", price),
            ("prop_starrating", star.astype(float)),
            ("prop_location_score2", loc2),
            ("prop_location_score1", loc1),
        ):
            sd = vals.std()
            z = (vals - vals.mean()) / sd if sd > 0 else np.zeros(m)
            u += beta[col] * z
        u = u + rng.normal(0.0, cfg.utility_noise, m)

        target = cfg.positive_rate * m
        n_clicks = int(target) + int(rng.random() < (target - int(target)))
        n_clicks = min(n_clicks, m)
        gumbel = rng.gumbel(size=m)
        order = np.argsort(-(u + gumbel), kind="stable")
        clicked = order[:n_clicks]

        click = np.zeros(m, dtype=int)
        click[clicked] = 1
        book = np.zeros(m, dtype=int)
        if n_clicks:
            u_sd = u.std()
            u_z = (u - u.mean()) / u_sd if u_sd > 0 else np.zeros(m)
            p_book = sigmoid(BOOKING_SLOPE * u_z[clicked] + BOOKING_INTERCEPT)
            book[clicked] = rng.random(n_clicks) < p_book

        loc2_missing = rng.random(m) < cfg.missing_rate

        impressions = []
        for i in range(m):
            raw = {
                "price_usd": float(price[i]),
                "prop_starrating": float(star[i]),
                "prop_review_score": float(review[i]),
                "prop_location_score1": float(loc1[i]),
                "prop_log_historical_price": float(log_hist[i]),
                "srch_room_count": float(rooms),
                "srch_adults_count": float(adults),
                "srch_children_count": float(children),
                "srch_booking_window": float(window),
                "srch_query_affinity_score": float(affinity),
                "orig_destination_distance": float(distance[i]),
                "srch_destination_id": float(dest_id),
                "random_bool": float(random_bool),
                "date_time": float(date_time),
            }
            if not loc2_missing[i]:
                raw["prop_location_score2"] = float(loc2[i])
            if has_hist:
                raw["visitor_hist_adr_usd"] = visitor_adr
                raw["visitor_hist_starrating"] = visitor_star
            impressions.append(
                SearchImpression(
                    srch_id=srch_id,
                    prop_id=int(prop_ids[i]),
                    prop_country_id=country,
                    position=i + 1,
                    raw=raw,
                    click_bool=int(click[i]),
                    booking_bool=int(book[i]),
                )
            )
        groups.append(QueryGroup(srch_id, impressions))

    return Dataset(groups, list(RAW_COLUMNS), labeled=True)
