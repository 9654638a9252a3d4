import numpy as np
import pytest

from hotelrank.features import FeatureMatrix
from hotelrank.linear_models import FtrlConfig, FtrlRanker
from hotelrank.tree_models import (
    BoostParams,
    BoostedTrees,
    ExtraTreesModel,
    Forest,
    GradientBoostedModel,
    LambdaMartModel,
    PerCountryForest,
    RandomForestModel,
    TreeParams,
    forest_fit,
    gbm_fit,
    lambda_gradients,
    lambdamart_fit,
    query_zscore,
    tree_fit,
)
from oracles import brute_lambdas

LAMBDA_EXAMPLE = 0.18453512321427128  # 0.5 * (1 - 1/log2(3)), 30-digit checked
DELTA_EXAMPLE = 0.36907024642854256


def _fm(X, srch_ids, prop_ids=None):
    X = np.asarray(X, dtype=float)
    if prop_ids is None:
        prop_ids = np.arange(len(X))
    return FeatureMatrix(X, [f"f{i}" for i in range(X.shape[1])],
                         np.asarray(srch_ids), np.asarray(prop_ids))


class TestRegressionTree:
    def test_no_valid_split_gives_mean_leaf(self):
        X = np.ones((6, 2))  # constant features: nothing to split on
        y = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        tree = tree_fit(X, y, params=TreeParams(max_depth=3, min_samples_leaf=1))
        assert tree.n_leaves == 1
        assert tree.predict(X)[0] == pytest.approx(3.5)

    def test_xor_depth_two(self):
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        y = np.array([0.0, 1.0, 1.0, 0.0])
        tree = tree_fit(X, y, params=TreeParams(max_depth=2, min_samples_leaf=1))
        assert np.mean((tree.predict(X) - y) ** 2) == pytest.approx(0.0, abs=1e-24)

    def test_pure_node_stops(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.ones(4)
        tree = tree_fit(X, y, params=TreeParams(max_depth=5, min_samples_leaf=1))
        assert tree.n_leaves == 1

    def test_depth_limit(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 3))
        y = rng.normal(size=200)
        tree = tree_fit(X, y, params=TreeParams(max_depth=3, min_samples_leaf=1))
        assert tree.depth() <= 3

    def test_min_samples_leaf(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 2))
        y = rng.normal(size=50)
        tree = tree_fit(X, y, params=TreeParams(max_depth=8, min_samples_leaf=10))
        leaves = tree.apply(X)
        _, counts = np.unique(leaves, return_counts=True)
        assert counts.min() >= 10

    def test_piecewise_constant(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(100, 3))
        y = rng.normal(size=100)
        tree = tree_fit(X, y, params=TreeParams(max_depth=4, min_samples_leaf=5))
        thresholds = tree.threshold[tree.feature >= 0]
        eps = max(1e-9, np.min(np.abs(np.subtract.outer(X.ravel(), thresholds))) / 10)
        X2 = X + eps * 0.1  # too small to cross any split threshold
        row = X[0:1].copy()
        for f in range(3):
            pert = row.copy()
            gaps = np.abs(thresholds[tree.feature[tree.feature >= 0] == f] - row[0, f]) if np.any(tree.feature == f) else np.array([1.0])
            step = (gaps.min() / 2) if gaps.size else 1.0
            pert[0, f] += step * 0.5
            assert tree.predict(pert)[0] == tree.predict(row)[0]

    def test_weighted_fit(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        y = np.array([0.0, 10.0, 0.0, 10.0])
        w = np.array([1.0, 3.0, 3.0, 1.0])
        tree = tree_fit(X, y, weights=w, params=TreeParams(max_depth=1, min_samples_leaf=1))
        left = tree.predict(np.array([[0.0]]))[0]
        right = tree.predict(np.array([[1.0]]))[0]
        assert left == pytest.approx(7.5)
        assert right == pytest.approx(2.5)


class TestGbm:
    def test_single_stump_base_score(self):
        X = np.ones((10, 1))
        y = np.arange(10.0)
        model, _ = gbm_fit(X, y, BoostParams(n_trees=1, loss="squared"),
                           TreeParams(max_depth=1, min_samples_leaf=1))
        assert np.allclose(model.predict(X), y.mean())

    def test_step_function_capacity(self):
        X = np.linspace(0, 1, 50).reshape(-1, 1)
        y = (X[:, 0] > 0.5).astype(float) * 3.0
        model, losses = gbm_fit(
            X, y, BoostParams(n_trees=200, shrinkage=0.1, loss="squared", seed=0),
            TreeParams(max_depth=2, min_samples_leaf=1),
        )
        assert losses[-1] < 1e-3

    def test_staged_squared_loss_monotone(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(120, 3))
        y = X[:, 0] * 2 + rng.normal(size=120) * 0.1
        _, losses = gbm_fit(X, y, BoostParams(n_trees=60, loss="squared", seed=0),
                            TreeParams(max_depth=3, min_samples_leaf=5))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_staged_prefix_consistency(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(80, 2))
        y = rng.normal(size=80)
        full, _ = gbm_fit(X, y, BoostParams(n_trees=30, loss="squared", seed=0),
                          TreeParams(max_depth=2, min_samples_leaf=4))
        partial = BoostedTrees(full.base_score, full.shrinkage, full.trees[:12])
        assert np.array_equal(full.predict(X, n_stages=12), partial.predict(X))

    def test_logistic_requires_binary(self):
        with pytest.raises(ValueError, match="binary"):
            gbm_fit(np.ones((4, 1)), np.array([0.0, 0.5, 1.0, 1.0]),
                    BoostParams(n_trees=1, loss="logistic"))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            BoostParams(n_trees=0)
        with pytest.raises(ValueError):
            BoostParams(shrinkage=0.0)
        with pytest.raises(ValueError):
            TreeParams(max_depth=0)


class TestForest:
    def test_degenerate_forest_equals_single_tree(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(60, 3))
        y = rng.normal(size=60)
        params = TreeParams(max_depth=4, min_samples_leaf=2, feature_subsample=1.0)
        forest = forest_fit(X, y, 1, params, seed=0, mode="bootstrap_rf", bootstrap=False)
        single = tree_fit(X, y, params=params)
        assert np.array_equal(forest.predict(X), single.predict(X))

    def test_predictions_within_target_range(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(100, 4))
        y = rng.uniform(2.0, 5.0, 100)
        forest = forest_fit(X, y, 10, TreeParams(max_depth=6, min_samples_leaf=2), seed=1)
        pred = forest.predict(rng.normal(size=(40, 4)))
        assert pred.min() >= y.min() - 1e-12
        assert pred.max() <= y.max() + 1e-12

    def test_seed_determinism(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(80, 3))
        y = rng.normal(size=80)
        p = TreeParams(max_depth=5, min_samples_leaf=3, feature_subsample=0.7)
        a = forest_fit(X, y, 5, p, seed=4, mode="ert").predict(X)
        b = forest_fit(X, y, 5, p, seed=4, mode="ert").predict(X)
        assert np.array_equal(a, b)

    def test_ert_differs_from_rf(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(80, 3))
        y = X[:, 0] + rng.normal(size=80) * 0.1
        p = TreeParams(max_depth=4, min_samples_leaf=3)
        ert = forest_fit(X, y, 3, p, seed=0, mode="ert").predict(X)
        rf = forest_fit(X, y, 3, p, seed=0, mode="bootstrap_rf").predict(X)
        assert not np.array_equal(ert, rf)


class TestLambdaGradients:
    def test_hand_example(self):
        lam, hess = lambda_gradients(np.array([0.0, 0.0]), np.array([5, 0]), k=38, sigma=1.0)
        assert lam[0] == pytest.approx(LAMBDA_EXAMPLE, abs=1e-9)
        assert lam[1] == pytest.approx(-LAMBDA_EXAMPLE, abs=1e-9)
        assert hess[0] == pytest.approx(0.25 * DELTA_EXAMPLE, abs=1e-9)

    def test_equal_grades_zero(self):
        lam, hess = lambda_gradients(np.array([0.3, -0.2, 0.8]), np.array([1, 1, 1]))
        assert np.array_equal(lam, np.zeros(3))
        assert np.array_equal(hess, np.zeros(3))

    def test_sum_exactly_zero(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            n = int(rng.integers(2, 9))
            scores = rng.normal(size=n)
            grades = rng.choice([0, 1, 5], n)
            lam, _ = lambda_gradients(scores, grades)
            assert sum(lam.tolist()) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            n = int(rng.integers(1, 9))
            scores = rng.normal(size=n)
            grades = rng.choice([0, 1, 5], n)
            k = int(rng.integers(1, 10))
            sigma = float(rng.uniform(0.5, 2.0))
            lam, hess = lambda_gradients(scores, grades, k=k, sigma=sigma)
            blam, bhess = brute_lambdas(list(scores), list(grades), k, sigma)
            assert np.abs(lam - np.asarray(blam)).max() < 1e-12
            assert np.abs(hess - np.asarray(bhess)).max() < 1e-12

    def test_lambda_shrinks_with_margin(self):
        grades = np.array([5, 0])
        mags = []
        for gap in (0.0, 1.0, 3.0, 8.0):
            lam, _ = lambda_gradients(np.array([gap, 0.0]), grades)
            mags.append(abs(lam[0]))
        assert all(b < a for a, b in zip(mags, mags[1:]))


class TestLambdaMart:
    def _toy(self, n_queries=60, per_query=8, seed=14):
        rng = np.random.default_rng(seed)
        n = n_queries * per_query
        X = rng.normal(size=(n, 3))
        utility = X[:, 0] * 2 - X[:, 1]
        srch = np.repeat(np.arange(n_queries), per_query)
        offsets = np.arange(0, n + 1, per_query)
        grades = np.zeros(n)
        for s in range(n_queries):
            block = slice(s * per_query, (s + 1) * per_query)
            best = np.argmax(utility[block] + rng.normal(0, 0.3, per_query))
            grades[s * per_query + best] = rng.choice([1, 5])
        return X, grades, offsets, srch

    def test_learns_toy_ranking(self):
        X, grades, offsets, srch = self._toy()
        model, _ = lambdamart_fit(
            X, grades, offsets,
            BoostParams(n_trees=30, loss="lambdarank", seed=0),
            TreeParams(max_depth=3, min_samples_leaf=5),
        )
        from hotelrank.tree_models import _mean_ndcg

        fitted = _mean_ndcg(model.predict(X), grades, offsets, 38)
        base = _mean_ndcg(np.zeros(len(X)), grades, offsets, 38)
        assert fitted > base + 0.2

    def test_empty_model_is_base_score(self):
        model = BoostedTrees(base_score=0.0, shrinkage=0.1, trees=[])
        assert np.array_equal(model.predict(np.ones((5, 2))), np.zeros(5))

    def test_validation_history_and_early_stop(self):
        X, grades, offsets, srch = self._toy()
        Xv, gv, ov, _ = self._toy(seed=15)
        model, history = lambdamart_fit(
            X, grades, offsets,
            BoostParams(n_trees=40, loss="lambdarank", seed=0),
            TreeParams(max_depth=3, min_samples_leaf=5),
            valid=(Xv, gv, ov),
            early_stop_rounds=5,
        )
        assert len(history) == len(model.trees)
        assert len(model.trees) <= 40

    def test_model_round_trip(self, tmp_path):
        from hotelrank.model_io import load_model, save_model

        X, grades, offsets, srch = self._toy(n_queries=20)
        fm = _fm(X, srch)
        model = LambdaMartModel(BoostParams(n_trees=10, loss="lambdarank", seed=0),
                                TreeParams(max_depth=3, min_samples_leaf=5))
        model.fit(fm, grades)
        path = tmp_path / "lm.bin"
        save_model(path, model)
        again = load_model(path)
        assert np.array_equal(again.score_rows(fm), model.score_rows(fm))

    def test_schema_mismatch_rejected(self):
        from hotelrank.base import SchemaMismatchError

        X, grades, offsets, srch = self._toy(n_queries=20)
        fm = _fm(X, srch)
        model = LambdaMartModel(BoostParams(n_trees=2, loss="lambdarank", seed=0),
                                TreeParams(max_depth=2, min_samples_leaf=5))
        model.fit(fm, grades)
        other = FeatureMatrix(X, ["a", "b", "c"], fm.srch_ids, fm.prop_ids)
        with pytest.raises(SchemaMismatchError):
            model.score_rows(other)


class TestPerCountry:
    def _data(self, n_countries=3, n_queries_per=30, per_query=6, seed=16):
        rng = np.random.default_rng(seed)
        rows = []
        srch, props, countries, grades = [], [], [], []
        X = []
        q = 0
        for c in range(1, n_countries + 1):
            for _ in range(n_queries_per):
                q += 1
                for p in range(per_query):
                    x = rng.normal(size=2)
                    X.append(x)
                    srch.append(q)
                    props.append(p)
                    countries.append(c)
                g = np.zeros(per_query)
                g[rng.integers(0, per_query)] = 1
                grades.extend(g)
        return (_fm(np.array(X), np.array(srch), np.array(props)),
                np.array(grades), np.array(countries))

    def test_unseen_country_routes_to_fallback(self):
        fm, grades, countries = self._data()
        fallback = FtrlRanker(FtrlConfig(epochs=1, seed=0, l1=0.0, l2=0.0)).fit(fm, grades)
        model = PerCountryForest(fallback, n_trees=3, tree=TreeParams(max_depth=3, min_samples_leaf=2),
                                 min_rows=10, seed=0)
        model.fit(fm, grades, countries)
        unseen = np.full(len(countries), 99)
        out = model.score_rows(fm, unseen)
        expected = query_zscore(np.asarray(fallback.score_rows(fm), dtype=float),
                                np.arange(0, len(countries) + 1, 6))
        assert np.allclose(out, expected)

    def test_single_country_uses_its_model(self):
        fm, grades, countries = self._data(n_countries=1)
        fallback = FtrlRanker(FtrlConfig(epochs=1, seed=0, l1=0.0, l2=0.0)).fit(fm, grades)
        model = PerCountryForest(fallback, n_trees=3, tree=TreeParams(max_depth=3, min_samples_leaf=2),
                                 min_rows=10, seed=0)
        model.fit(fm, grades, countries)
        assert set(model.models) == {1}
        out = model.score_rows(fm, countries)
        forest_scores = model.models[1].predict(fm.values)
        expected = query_zscore(forest_scores, np.arange(0, len(countries) + 1, 6))
        assert np.allclose(out, expected)

    def test_small_pieces_skipped(self):
        fm, grades, countries = self._data(n_countries=2)
        fallback = FtrlRanker(FtrlConfig(epochs=1, seed=0, l1=0.0, l2=0.0)).fit(fm, grades)
        model = PerCountryForest(fallback, n_trees=2, tree=TreeParams(max_depth=2, min_samples_leaf=2),
                                 min_rows=10**6, seed=0)
        model.fit(fm, grades, countries)
        assert model.models == {}

    def test_many_countries_piece_count(self):
        from hotelrank import schema
        from hotelrank.features import Pipeline

        # 25 impressions per query guarantees at least one positive per query,
        # so every country piece is trainable
        ds = schema.generate_synthetic(schema.SynthConfig(344, 25, 172, seed=4))
        fitted = Pipeline([], keep=["price_usd", "prop_starrating"]).fit(ds)
        fm = fitted.apply(ds)
        fallback = FtrlRanker(FtrlConfig(epochs=1, seed=0)).fit(fm, ds.grades())
        model = PerCountryForest(fallback, n_trees=2, tree=TreeParams(max_depth=2, min_samples_leaf=1),
                                 min_rows=1, seed=0)
        model.fit(fm, ds.grades(), ds.row_countries())
        assert len(model.models) == 172

    def test_round_trip(self, tmp_path):
        from hotelrank.model_io import load_model, save_model

        fm, grades, countries = self._data()
        fallback = FtrlRanker(FtrlConfig(epochs=1, seed=0)).fit(fm, grades)
        model = PerCountryForest(fallback, n_trees=2, tree=TreeParams(max_depth=2, min_samples_leaf=2),
                                 min_rows=10, seed=0)
        model.fit(fm, grades, countries)
        path = tmp_path / "pc.bin"
        save_model(path, model)
        again = load_model(path)
        assert np.allclose(again.score_rows(fm, countries), model.score_rows(fm, countries))
