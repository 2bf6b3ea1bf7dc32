import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hids import som, synth
from hids.errors import ConfigError, DataError

from oracles import brute_bmu, nearest_rank_sorted, u_matrix_loops

CENTERS = [[0.0, 0.0], [4.0, 0.0], [2.0, 3.5]]


def cluster_fixture(seed=0):
    """600 points from three 2-D Gaussians, z-scored per column."""
    X, y = synth.gaussian_clusters(600, CENTERS, 0.5, seed=seed)
    return (X - X.mean(0)) / X.std(0), y


def purity(bmus, y):
    return sum(np.bincount(y[bmus == n]).max() for n in np.unique(bmus)) / len(y)


@pytest.fixture(scope="module")
def trained():
    X, y = cluster_fixture()
    grid, trace = som.train(som.init_grid(10, 10, 2, 0), X, som.SomSchedule(epochs=10), seed=100)
    return X, y, grid, trace


class TestInit:
    def test_shape_and_range(self):
        g = som.init_grid(4, 3, 5, seed=1)
        assert g.weights.shape == (12, 5)
        assert g.weights.min() >= 0 and g.weights.max() <= 1

    def test_degenerate_range_is_constant(self):
        g = som.init_grid(3, 3, 2, seed=0, init_range=(0.0, 0.0))
        assert np.all(g.weights == 0)

    def test_bad_range(self):
        with pytest.raises(ConfigError):
            som.init_grid(2, 2, 2, 0, init_range=(1.0, 0.0))

    def test_seeded(self):
        assert np.array_equal(som.init_grid(5, 5, 3, 7).weights, som.init_grid(5, 5, 3, 7).weights)


class TestBmu:
    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        g = som.init_grid(10, 10, 3, seed=2)
        Q = rng.uniform(-0.5, 1.5, size=(1000, 3))
        batch = som.find_bmus(g, Q)
        for q, b in zip(Q, batch):
            want, d = brute_bmu(g.weights, q)
            assert som.find_bmu(g, q) == want == b
            assert som.quantization_error(g, q) == pytest.approx(d, abs=1e-12)

    def test_tie_goes_to_lower_index(self):
        g = som.SomGrid(3, 1, np.array([[1.0], [-1.0], [1.0]]))
        assert som.find_bmu(g, [0.0]) == 0

    def test_qe_examples(self):
        g = som.SomGrid(2, 1, np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert som.quantization_error(g, [3.0, 4.0]) == 0.0
        assert som.quantization_error(g, [6.0, 8.0]) == 5.0

    def test_dim_mismatch(self):
        g = som.init_grid(2, 2, 3, 0)
        with pytest.raises(DataError):
            som.find_bmu(g, [0.0, 1.0])
        with pytest.raises(DataError):
            som.find_bmus(g, np.zeros((4, 2)))

    def test_non_finite_rejected(self):
        g = som.init_grid(2, 2, 2, 0)
        with pytest.raises(DataError):
            som.find_bmu(g, [np.nan, 0.0])


class TestTrain:
    def test_zero_rate_leaves_grid(self):
        X, _ = cluster_fixture()
        g = som.init_grid(5, 5, 2, 0)
        out, trace = som.train(g, X, som.SomSchedule(eta0=0.0, epochs=3), seed=0)
        assert np.array_equal(out.weights, g.weights)
        assert len(trace) == 4 and len(set(trace)) == 1

    def test_zero_epochs(self):
        X, _ = cluster_fixture()
        g = som.init_grid(5, 5, 2, 0)
        out, trace = som.train(g, X, som.SomSchedule(epochs=0), seed=0)
        assert np.array_equal(out.weights, g.weights) and len(trace) == 1

    def test_input_grid_not_mutated(self):
        X, _ = cluster_fixture()
        g = som.init_grid(5, 5, 2, 0)
        before = g.weights.copy()
        som.train(g, X, som.SomSchedule(epochs=1), seed=0)
        assert np.array_equal(g.weights, before)

    def test_single_sample_contracts_toward_it(self):
        g = som.init_grid(4, 4, 2, seed=3)
        x = np.array([[0.5, 0.5]])
        before = np.linalg.norm(g.weights - x, axis=1)
        out, _ = som.train(g, x, som.SomSchedule(eta0=0.5, epochs=1), seed=0)
        after = np.linalg.norm(out.weights - x, axis=1)
        assert np.all(after <= before + 1e-15)
        assert after.min() < before.min()

    def test_deterministic(self):
        X, _ = cluster_fixture()
        a = som.train(som.init_grid(5, 5, 2, 0), X, som.SomSchedule(epochs=2), seed=4)
        b = som.train(som.init_grid(5, 5, 2, 0), X, som.SomSchedule(epochs=2), seed=4)
        assert np.array_equal(a[0].weights, b[0].weights) and a[1] == b[1]

    def test_fixture_qe_falls_and_clusters_are_pure(self, trained):
        X, y, grid, trace = trained
        assert trace[-1] <= 0.3 * trace[0]
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert purity(som.find_bmus(grid, X), y) >= 0.9

    def test_weights_stay_in_data_hull_box(self, trained):
        X, _, grid, _ = trained
        lo = np.minimum(X.min(0), 0.0)
        hi = np.maximum(X.max(0), 1.0)
        assert np.all(grid.weights >= lo - 1e-12) and np.all(grid.weights <= hi + 1e-12)

    def test_paper_literal_mode_is_worse_than_lattice(self):
        # a data-space kernel drags every nearby node onto the sample, so nodes collapse
        X, _ = cluster_fixture()
        g = som.init_grid(5, 5, 2, 0)
        lit, t_lit = som.train(g, X, som.SomSchedule(epochs=2, neighborhood_mode="paper_literal"), 0)
        _, t_lat = som.train(g, X, som.SomSchedule(epochs=2), 0)
        assert np.all(np.isfinite(lit.weights))
        assert t_lat[-1] < t_lit[-1]

    def test_empty_data(self):
        with pytest.raises(DataError):
            som.train(som.init_grid(2, 2, 2, 0), np.empty((0, 2)), som.SomSchedule(), seed=0)

    @pytest.mark.parametrize("kw", [{"eta0": 1.5}, {"sigma0": 0.1}, {"epochs": -1},
                                    {"neighborhood_mode": "hex"}])
    def test_bad_schedule(self, kw):
        with pytest.raises(ConfigError):
            som.train(som.init_grid(2, 2, 2, 0), np.zeros((3, 2)), som.SomSchedule(**kw), seed=0)

    def test_default_time_constant_ends_sigma_near_one(self):
        s = som.SomSchedule(sigma0=3.0)
        _, tau_s = s.time_constants(1000)
        assert s.sigma0 * np.exp(-1000 / tau_s) == pytest.approx(1.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_weights_remain_convex_combinations(self, seed):
        # with eta <= 1 and h <= 1, every update is a convex step toward a sample
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 3, size=(30, 2))
        g = som.init_grid(3, 3, 2, seed)
        out, _ = som.train(g, X, som.SomSchedule(eta0=1.0, epochs=2), seed=seed)
        lo = np.minimum(X.min(0), g.weights.min(0))
        hi = np.maximum(X.max(0), g.weights.max(0))
        assert np.all(out.weights >= lo - 1e-9) and np.all(out.weights <= hi + 1e-9)


class TestThreshold:
    def test_median_of_four(self):
        assert som.nearest_rank([1, 2, 3, 4], 50) == 2

    def test_matches_sort_oracle(self):
        v = np.random.default_rng(9).exponential(size=1000)
        assert som.nearest_rank(v, 95) == nearest_rank_sorted(v.tolist(), 95)

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=50), st.floats(0.1, 100))
    def test_nearest_rank_property(self, vals, pct):
        assert som.nearest_rank(vals, pct) == nearest_rank_sorted(vals, pct)

    def test_percentile_100_flags_nothing(self, trained):
        X, _, grid, _ = trained
        model = som.fit_threshold(grid, X, 100.0)
        flags, qe = som.anomaly_flags(model, X)
        assert model.threshold == qe.max() and not flags.any()

    def test_strict_inequality(self):
        g = som.SomGrid(1, 1, np.array([[0.0]]))
        model = som.AnomalyModel(g, 1.0, 95.0)
        assert not som.is_anomaly(model, [1.0])
        assert som.is_anomaly(model, [1.0 + 1e-9])

    def test_held_out_flag_rate(self, trained):
        X, _, grid, _ = trained
        model = som.fit_threshold(grid, X, 95.0)
        held, _ = cluster_fixture(seed=1)
        flags, _ = som.anomaly_flags(model, held)
        assert abs(flags.mean() - 0.05) <= 0.02

    def test_bad_percentile(self):
        g = som.init_grid(2, 2, 1, 0)
        for p in (0.0, 101.0):
            with pytest.raises(ConfigError):
                som.fit_threshold(g, np.zeros((3, 1)), p)

    def test_empty(self):
        with pytest.raises(DataError):
            som.nearest_rank([], 50)


class TestUMatrix:
    def test_uniform_grid_is_zero(self):
        g = som.SomGrid(3, 2, np.ones((6, 4)))
        assert np.all(som.u_matrix(g) == 0)

    def test_two_nodes(self):
        g = som.SomGrid(2, 1, np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert np.array_equal(som.u_matrix(g), [[5.0, 5.0]])

    def test_single_node(self):
        assert np.array_equal(som.u_matrix(som.SomGrid(1, 1, np.zeros((1, 2)))), [[0.0]])

    @pytest.mark.parametrize("w,h", [(10, 10), (4, 7), (1, 5)])
    def test_matches_loop_oracle(self, w, h):
        g = som.init_grid(w, h, 3, seed=w * h)
        assert np.allclose(som.u_matrix(g), u_matrix_loops(g.weights, w, h), atol=1e-12)

    def test_hits_sum_and_csv(self, trained, tmp_path):
        X, _, grid, _ = trained
        hits = som.bmu_hits(grid, X)
        assert hits.shape == (10, 10) and hits.sum() == len(X)
        som.write_grid_csv(tmp_path / "u.csv", som.u_matrix(grid))
        rows = (tmp_path / "u.csv").read_text().splitlines()
        assert len(rows) == 10 and len(rows[0].split(",")) == 10
