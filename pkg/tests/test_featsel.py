import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hids import dataio, featsel
from hids.errors import ConfigError, DataError

from oracles import lasso_grid_2d, lasso_objective, pearson


def make_ds(X, y=None):
    X = np.asarray(X, dtype=float)
    y = np.zeros(len(X), int) if y is None else np.asarray(y)
    names = sorted({f"c{int(v)}" for v in np.unique(y)})
    schema = dataio.make_schema([(f"f{i}", "numeric") for i in range(X.shape[1])] + [("y", "label")])
    return dataio.Dataset(schema, X, y, names)


# two-feature, eight-row LASSO fixture
LASSO_X = np.array([[1.0, 0.5], [2.0, 1.9], [3.0, 2.2], [4.0, 4.1],
                    [5.0, 4.4], [6.0, 6.3], [7.0, 6.4], [8.0, 8.8]])
LASSO_Y = np.array([1.2, 1.9, 3.4, 3.9, 5.3, 5.8, 7.4, 7.7])


def _std(X, y):
    Xs = (X - X.mean(0)) / X.std(0)
    return Xs, y - y.mean()


class TestCorrelation:
    def test_self_and_negation(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=30)
        rho = featsel.correlation_matrix(make_ds(np.c_[x, -x, x]))
        assert rho[0, 2] == pytest.approx(1.0)
        assert rho[0, 1] == pytest.approx(-1.0)

    def test_five_row_fixture(self):
        X = np.array([[1.0, 2.0], [2.0, 1.0], [4.0, 5.0], [5.0, 3.0], [7.0, 8.0]])
        rho = featsel.correlation_matrix(make_ds(X))
        assert rho[0, 1] == pytest.approx(pearson(X[:, 0], X[:, 1]), abs=1e-12)

    def test_constant_column(self):
        rho = featsel.correlation_matrix(make_ds([[1, 3], [2, 3], [4, 3]]))
        assert rho[0, 1] == 0 and rho[1, 1] == 1

    def test_single_row(self):
        with pytest.raises(DataError):
            featsel.correlation_matrix(make_ds([[1, 2]]))

    @settings(max_examples=40)
    @given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 5)),
                  elements=st.floats(-100, 100)))
    def test_symmetric_bounded(self, X):
        rho = featsel.correlation_matrix(make_ds(X))
        assert np.array_equal(rho, rho.T)
        assert np.all(np.abs(rho) <= 1.0)


class TestCorrelationFilter:
    def test_duplicate_drops_higher_index(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 50))
        sub = featsel.correlation_filter(make_ds(np.c_[a, b, a]), 0.95)
        assert sub.indices == [0, 1]

    def test_theta_one_keeps_all(self):
        rng = np.random.default_rng(2)
        sub = featsel.correlation_filter(make_ds(rng.normal(size=(40, 4))), 1.0)
        assert sub.indices == [0, 1, 2, 3]

    def test_theta_nonpositive(self):
        with pytest.raises(ConfigError):
            featsel.correlation_filter(make_ds(np.eye(3)), 0.0)

    def test_four_feature_exhaustive_scan(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(60, 2))
        X = np.c_[base[:, 0], base[:, 0] + 0.1 * rng.normal(size=60), base[:, 1],
                  -base[:, 1] + 0.05 * rng.normal(size=60)]
        theta = 0.9
        # brute-force pair scan with the same tie-break, on loop-computed correlations
        dropped = set()
        for i, j in itertools.combinations(range(4), 2):
            if i in dropped or j in dropped:
                continue
            if abs(pearson(X[:, i], X[:, j])) > theta:
                dropped.add(j)
        expected = [i for i in range(4) if i not in dropped]
        assert featsel.correlation_filter(make_ds(X), theta).indices == expected == [0, 2]

    @settings(max_examples=30)
    @given(arrays(np.float64, st.tuples(st.integers(3, 25), st.integers(2, 6)),
                  elements=st.integers(-5, 5).map(float)), st.floats(0.1, 1.0))
    def test_no_kept_pair_exceeds_theta(self, X, theta):
        sub = featsel.correlation_filter(make_ds(X), theta)
        rho = np.abs(featsel.correlation_matrix(make_ds(X)))
        for i, j in itertools.combinations(sub.indices, 2):
            assert rho[i, j] <= theta


class TestWrapper:
    def _data(self, seed=0, n=300):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, n)
        noise = rng.normal(size=(n, 4))
        return make_ds(np.c_[noise[:, :2], y.astype(float), noise[:, 2:]], y)

    def test_forward_picks_predictive_first(self):
        sub = featsel.wrapper_select(self._data(), "forward")
        assert sub.trace[0][1] == 2
        assert 2 in sub.indices

    def test_backward_zero_rounds_keeps_all(self):
        sub = featsel.wrapper_select(self._data(), "backward", max_rounds=0)
        assert sub.indices == list(range(5))

    def test_forward_max_features(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 2, 300)
        X = np.c_[y + 0.8 * rng.normal(size=300), y + 0.8 * rng.normal(size=300),
                  y + 0.8 * rng.normal(size=300)]
        sub = featsel.wrapper_select(make_ds(X, y), "forward", max_features=2, patience=5)
        assert len(sub.indices) == 2

    def test_forward_scores_nondecreasing_over_accepted(self):
        sub = featsel.wrapper_select(self._data(5), "forward", patience=3)
        best = -np.inf
        accepted = []
        for _, _, s in sub.trace:
            if s > best:
                accepted.append(s)
                best = s
        assert accepted == sorted(accepted)

    def test_deterministic(self):
        a = featsel.wrapper_select(self._data(2), "backward", seed=9)
        b = featsel.wrapper_select(self._data(2), "backward", seed=9)
        assert a.indices == b.indices and a.trace == b.trace

    def test_scorer_failure_keeps_trace(self):
        calls = []

        def scorer(Xt, yt, Xv, yv):
            calls.append(Xt.shape[1])
            if len(calls) > 5:
                raise RuntimeError("boom")
            return float(Xt.shape[1])

        with pytest.raises(featsel.WrapperAborted) as info:
            featsel.wrapper_select(self._data(), "forward", scorer=scorer, patience=10)
        assert len(info.value.trace) == 1


class TestLasso:
    def test_zero_lambda_is_ols(self):
        m = featsel.lasso_fit(LASSO_X, LASSO_Y, 0.0)
        A = np.c_[LASSO_X, np.ones(len(LASSO_X))]
        ols = np.linalg.lstsq(A, LASSO_Y, rcond=None)[0]
        assert np.allclose(m.coefficients, ols[:2], atol=1e-6)
        assert m.intercept == pytest.approx(ols[2], abs=1e-6)

    def test_lambda_max_zeroes_all(self):
        lm = featsel.lambda_max(LASSO_X, LASSO_Y)
        Xs, yc = _std(LASSO_X, LASSO_Y)
        assert lm == pytest.approx(np.max(np.abs(Xs.T @ yc)) / len(yc))
        assert np.all(featsel.lasso_fit(LASSO_X, LASSO_Y, lm).coefficients == 0)
        assert np.any(featsel.lasso_fit(LASSO_X, LASSO_Y, 0.9 * lm).coefficients != 0)

    @pytest.mark.parametrize("lam", [0.05, 0.3, 1.0])
    def test_matches_grid_oracle(self, lam):
        Xs, yc = _std(LASSO_X, LASSO_Y)
        m = featsel.lasso_fit(LASSO_X, LASSO_Y, lam)
        grid = lasso_grid_2d(Xs, yc, lam)
        assert np.allclose(m.coef_std, grid, atol=1e-4)
        assert lasso_objective(Xs, yc, m.coef_std, lam) <= lasso_objective(Xs, yc, grid, lam) + 1e-12

    def test_support_shrinks_along_sweep(self):
        lams = np.linspace(0, featsel.lambda_max(LASSO_X, LASSO_Y) * 1.1, 20)
        counts = [len(featsel.lasso_fit(LASSO_X, LASSO_Y, l).support) for l in lams]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[0] == 2 and counts[-1] == 0

    def test_non_convergence_flag(self, caplog):
        m = featsel.lasso_fit(LASSO_X, LASSO_Y, 0.01, tol=0.0, max_iter=3)
        assert not m.converged and m.n_iter == 3

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            featsel.lasso_fit(LASSO_X, LASSO_Y, -1)

    def test_select_multiclass_union(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 3, 400)
        X = np.c_[(y == 0) + 0.1 * rng.normal(size=400), (y == 1) + 0.1 * rng.normal(size=400),
                  rng.normal(size=400)]
        sub = featsel.lasso_select(make_ds(X, y), 0.2)
        assert sub.indices == [0, 1]

    def test_select_all_zero_falls_back(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 100)
        X = np.c_[rng.normal(size=100), y + 0.2 * rng.normal(size=100)]
        sub = featsel.lasso_select(make_ds(X, y), 10.0)
        assert sub.indices == [1]


class TestSubset:
    def test_json_round_trip_and_apply(self):
        ds = make_ds(np.arange(12.0).reshape(4, 3))
        sub = featsel.FeatureSubset([2, 0], "corr", 0.5, ["f0", "f2"], 0.9)
        back = featsel.FeatureSubset.from_dict(__import__("json").loads(sub.to_json()))
        assert back.indices == [0, 2]
        out = featsel.apply_subset(ds, back)
        assert out.feature_names == ["f0", "f2"]
        assert np.array_equal(out.features, ds.features[:, [0, 2]])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            featsel.FeatureSubset([], "corr", 0.0)
