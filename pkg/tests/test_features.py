import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from hotelrank import schema
from hotelrank.features import (
    FeatureMatrix,
    Pipeline,
    PipelineError,
    bucket,
    bucket_assign,
    bucket_thresholds,
    composite,
    ctr_cvr_fit,
    derived_features,
    impute_missing,
    listwise_rank,
    preset_pipeline,
)
from oracles import brute_rank

UMP_EXAMPLE = 9.484315641933809  # exp(4.6) - 90, 30-digit checked
SCORE1D2_EXAMPLE = 0.2001 / 1.0001


class TestBucket:
    def test_four_values_two_buckets(self):
        thresholds = bucket_thresholds([1, 2, 3, 4], 2)
        assert list(thresholds) == [2, 4]
        assert list(bucket_assign([1, 2, 3, 4], thresholds)) == [0, 0, 1, 1]

    def test_all_equal(self):
        out = bucket([3.0, 3.0, 3.0], 4)
        assert (out[:, 0] == 1).all()

    def test_single_bucket(self):
        out = bucket([5.0, 1.0, 2.0], 1)
        assert out.shape == (3, 1)
        assert (out == 1).all()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            bucket([], 2)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(1, 8))
    @settings(max_examples=150, deadline=None)
    def test_one_hot_and_monotone(self, values, n):
        out = bucket(values, n)
        assert np.array_equal(out.sum(axis=1), np.ones(len(values)))
        assign = bucket_assign(values, bucket_thresholds(values, n))
        order = np.argsort(values, kind="stable")
        assert (np.diff(assign[order]) >= 0).all()

    def test_values_above_max_clamp(self):
        thresholds = bucket_thresholds([1.0, 2.0], 2)
        assert bucket_assign([99.0], thresholds)[0] == 1


class TestListwiseRank:
    def test_asc(self):
        assert list(listwise_rank([100, 50, 75], "asc")) == [3, 1, 2]

    def test_min_rank_ties(self):
        assert list(listwise_rank([50, 50, 75], "asc")) == [1, 1, 3]

    def test_single(self):
        assert list(listwise_rank([42.0], "desc")) == [1]

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=25),
           st.sampled_from(["asc", "desc"]))
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, values, direction):
        assert list(listwise_rank(values, direction)) == brute_rank(values, direction)

    @given(st.lists(st.integers(0, 10**6), min_size=1, max_size=25, unique=True))
    @settings(max_examples=50, deadline=None)
    def test_distinct_values_are_permutation(self, values):
        ranks = sorted(listwise_rank(values, "asc"))
        assert ranks == list(range(1, len(values) + 1))


class TestComposite:
    def test_rooms_window_example(self):
        assert composite([2], [3], f2_max=30)[0] == 65

    def test_zero_first_feature(self):
        assert composite([0], [7], f2_max=30)[0] == 7

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            composite([-1], [0], f2_max=5)

    def test_injective_small_domain(self):
        seen = {}
        for f1 in range(51):
            for f2 in range(51):
                v = int(composite([f1], [f2], f2_max=50)[0])
                assert v not in seen
                seen[v] = (f1, f2)


class TestImpute:
    def _ds(self, values_by_country, column="prop_location_score2"):
        rows = []
        q = 1
        for country, values in values_by_country.items():
            for v in values:
                raw = {"price_usd": 1.0}
                if v is not None:
                    raw[column] = v
                rows.append((q, len(rows) + 1, country, raw, 0, 0))
            q += 1
        return make_dataset(rows)

    def test_interpolated_q1(self):
        ds = self._ds({1: [0.1, 0.3, 0.5, None]})
        _, filled = impute_missing(ds, "prop_location_score2")
        assert filled[-1] == pytest.approx(0.2, abs=1e-12)

    def test_no_missing_unchanged(self):
        ds = self._ds({1: [0.4, 0.6]})
        _, filled = impute_missing(ds, "prop_location_score2")
        assert list(filled) == [0.4, 0.6]

    def test_country_without_values_uses_global(self):
        ds = self._ds({1: [0.1, 0.3, 0.5], 2: [None, None]})
        _, filled = impute_missing(ds, "prop_location_score2")
        assert filled[3] == pytest.approx(0.2, abs=1e-12)

    def test_entirely_missing_errors(self):
        ds = self._ds({1: [None, None]})
        with pytest.raises(PipelineError, match="entirely missing"):
            impute_missing(ds, "prop_location_score2")

    def test_imputed_within_observed_range(self, small_dataset):
        _, filled = impute_missing(small_dataset, "prop_location_score2")
        observed = [imp.raw["prop_location_score2"]
                    for imp in small_dataset.iter_impressions()
                    if "prop_location_score2" in imp.raw]
        assert np.isnan(filled).sum() == 0
        assert filled.min() >= min(observed) - 1e-12
        assert filled.max() <= max(observed) + 1e-12


class TestDerived:
    def _values(self, **overrides):
        base = {
            "price_usd": 90.0,
            "prop_log_historical_price": 4.6,
            "visitor_hist_adr_usd": 120.0,
            "visitor_hist_starrating": 4.0,
            "prop_starrating": 3.0,
            "srch_room_count": 2.0,
            "srch_adults_count": 2.0,
            "srch_children_count": 2.0,
            "prop_location_score2": 0.2,
            "srch_query_affinity_score": -5.0,
            "prop_location_score1": 1.0,
        }
        base.update(overrides)
        return base

    def test_ump(self):
        out = derived_features(self._values())
        assert out["ump"] == pytest.approx(UMP_EXAMPLE, abs=1e-9)

    def test_fee_substitution(self):
        out = derived_features(self._values(price_usd=100.0))
        assert out["per_fee"] == pytest.approx(50.0)
        assert out["total_fee"] == pytest.approx(200.0)

    def test_score1d2(self):
        out = derived_features(self._values())
        assert out["score1d2"] == pytest.approx(SCORE1D2_EXAMPLE, abs=1e-12)

    def test_diffs_and_score2ma(self):
        out = derived_features(self._values())
        assert out["price_diff"] == pytest.approx(30.0)
        assert out["starrating_diff"] == pytest.approx(1.0)
        assert out["score2ma"] == pytest.approx(-1.0)

    def test_zero_persons_denominator(self):
        out = derived_features(self._values(srch_adults_count=0.0, srch_children_count=0.0))
        assert out["per_fee"] == pytest.approx(180.0)  # denominator treated as 1


class TestCounts:
    def _ds(self, dest_ids):
        return make_dataset(
            [(q, 1, 1, {"price_usd": 1.0, "srch_destination_id": float(d)}, 0, 0)
             for q, d in enumerate(dest_ids, start=1)]
        )

    def test_count_definition(self):
        train = self._ds([3, 3, 3, 3, 3, 3, 3, 5])
        fitted = Pipeline(["count:srch_destination_id"]).fit(train)
        fm = fitted.apply(train)
        col = fm.column("srch_destination_id_cnt")
        assert list(col[:7]) == [7.0] * 7
        assert col[7] == 1.0

    def test_unseen_value_zero(self):
        train = self._ds([3, 3])
        other = self._ds([4])
        fitted = Pipeline(["count:srch_destination_id"]).fit(train)
        assert fitted.apply(other).column("srch_destination_id_cnt")[0] == 0.0

    def test_counts_over_train_plus_test(self):
        train = self._ds([3, 3, 3])
        test = self._ds([3, 3, 3, 3])
        fitted = Pipeline(["count:srch_destination_id"]).fit(train, test_ds=test)
        assert fitted.apply(train).column("srch_destination_id_cnt")[0] == 7.0


class TestCtrCvr:
    def _ds(self, rows):
        return make_dataset(rows)

    def test_ctr_fraction(self):
        rows = [(q, 77, 1, {"price_usd": 1.0}, 1 if q <= 3 else 0, 0) for q in range(1, 11)]
        table = ctr_cvr_fit(self._ds(rows), key="prop_id")
        ctr, _ = table.lookup(np.array([77.0]))
        assert ctr[0] == pytest.approx(0.3)

    def test_cvr_fraction(self):
        rows = [(q, 77, 1, {"price_usd": 1.0}, 1, 1 if q <= 2 else 0) for q in range(1, 5)]
        table = ctr_cvr_fit(self._ds(rows), key="prop_id")
        _, cvr = table.lookup(np.array([77.0]))
        assert cvr[0] == pytest.approx(0.5)

    def test_zero_clicks_gets_global_cvr(self):
        rows = [(1, 77, 1, {"price_usd": 1.0}, 0, 0),
                (2, 88, 1, {"price_usd": 1.0}, 1, 1)]
        table = ctr_cvr_fit(self._ds(rows), key="prop_id")
        _, cvr = table.lookup(np.array([77.0]))
        assert cvr[0] == pytest.approx(table.global_cvr) == pytest.approx(1.0)

    def test_all_clicked_ctr_one(self):
        rows = [(q, 70 + q, 1, {"price_usd": 1.0}, 1, 0) for q in range(1, 6)]
        table = ctr_cvr_fit(self._ds(rows), key="prop_id")
        assert (table.ctr == 1.0).all()

    def test_price_bucket_scale(self, small_dataset):
        table = ctr_cvr_fit(small_dataset, key="price_bucket", n_price_buckets=5)
        assert table.price_thresholds is not None
        assert ((table.ctr >= 0) & (table.ctr <= 1)).all()
        assert ((table.cvr >= 0) & (table.cvr <= 1)).all()


class TestPipeline:
    def test_empty_spec_raw_columns_only(self, small_dataset):
        fm = Pipeline([]).fit(small_dataset).apply(small_dataset)
        assert fm.columns == [c for c in schema.RAW_COLUMNS if c in small_dataset.columns]
        assert not np.isnan(fm.values).any()

    def test_composition(self, small_dataset):
        fm = (
            Pipeline(["impute", "rank:price_usd:asc", "derived"])
            .fit(small_dataset)
            .apply(small_dataset)
        )
        assert "price_usd_rank" in fm.columns
        assert "ump" in fm.columns
        assert not np.isnan(fm.values).any()

    def test_unseen_prop_id_fallbacks(self, small_dataset):
        train, valid = schema.split_validation(small_dataset)
        fitted = Pipeline(["count:prop_id", "ctr_cvr:prop_id"]).fit(train)
        fm = fitted.apply(valid)  # unseen ids must not raise
        assert not np.isnan(fm.values).any()

    def test_apply_before_fit_is_state_error(self, small_dataset):
        from hotelrank.features import _CountStage, _Frame, _fit_imputer

        stage = _CountStage("prop_id")
        imputer = _fit_imputer(small_dataset, ["price_usd"])
        frame = _Frame(small_dataset, ["price_usd"], imputer)
        with pytest.raises(PipelineError, match="before fit"):
            stage.apply(frame)

    def test_unknown_stage_rejected(self):
        with pytest.raises(PipelineError, match="unknown pipeline stage"):
            Pipeline(["frobnicate:x"])

    def test_label_mutation_leaves_output_unchanged(self, small_dataset):
        fitted = preset_pipeline("gbm-table1").fit(small_dataset, seed=0)
        before = fitted.apply(small_dataset).values.tobytes()
        mutated = schema.Dataset(
            [
                schema.QueryGroup(
                    g.srch_id,
                    [
                        schema.SearchImpression(
                            imp.srch_id, imp.prop_id, imp.prop_country_id,
                            imp.position, imp.raw, 1 - imp.click_bool,
                            1 - imp.booking_bool,
                        )
                        for imp in g.impressions
                    ],
                )
                for g in small_dataset.groups
            ],
            small_dataset.columns,
            True,
        )
        after = fitted.apply(mutated).values.tobytes()
        assert before == after

    def test_missing_fitted_column_raises(self, small_dataset, tmp_path):
        fitted = Pipeline([]).fit(small_dataset)
        stripped = make_dataset([(1, 1, 1, {"price_usd": 5.0}, 0, 0)])
        with pytest.raises(schema.SchemaError, match="column missing"):
            fitted.apply(stripped)

    def test_state_round_trip(self, small_dataset):
        from hotelrank.features import FittedPipeline

        fitted = preset_pipeline("lambdamart-ctrcvr").fit(small_dataset, seed=0)
        meta, arrays = fitted.state()
        again = FittedPipeline.from_state(meta, arrays)
        a = fitted.apply(small_dataset)
        b = again.apply(small_dataset)
        assert a.columns == b.columns
        assert a.values.tobytes() == b.values.tobytes()


class TestPresets:
    @pytest.mark.parametrize("name", ["base", "ftrl-7feat", "gbm-table1",
                                      "fm-table2", "lambdamart-table3",
                                      "lambdamart-ctrcvr"])
    def test_presets_run(self, name, small_dataset):
        fm = preset_pipeline(name).fit(small_dataset, seed=0).apply(small_dataset)
        assert len(fm.columns) > 0
        assert not np.isnan(fm.values).any()

    def test_ftrl_7feat_columns(self, small_dataset):
        fm = preset_pipeline("ftrl-7feat").fit(small_dataset, seed=0).apply(small_dataset)
        assert fm.columns == [
            "srch_id", "prop_id", "srch_destination_id", "prop_starrating",
            "prop_location_score1", "prop_location_score2", "price_usd",
        ]

    def test_unknown_preset(self):
        with pytest.raises(PipelineError, match="unknown preset"):
            preset_pipeline("nope")


class TestExports:
    def test_tsv(self, tmp_path, small_dataset):
        fm = Pipeline([], keep=["price_usd"]).fit(small_dataset).apply(small_dataset)
        path = tmp_path / "m.tsv"
        fm.write_tsv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "srch_id\tprop_id\tprice_usd"
        assert len(lines) == small_dataset.n_rows + 1

    def test_ranking_text(self, tmp_path, small_dataset):
        fm = Pipeline([], keep=["price_usd", "prop_starrating"]).fit(
            small_dataset
        ).apply(small_dataset)
        path = tmp_path / "m.txt"
        fm.write_ranking_text(path, small_dataset.grades())
        first = path.read_text().splitlines()[0]
        parts = first.split()
        assert parts[0] in {"0", "1", "5"}
        assert parts[1].startswith("qid:")
        assert parts[2].startswith("1:")
