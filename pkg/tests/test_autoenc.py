import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hids import autoenc, dataio
from hids.errors import ConfigError, DataError, NumericalError

from oracles import central_diff_check


def rank2(seed=0, n=500, d=8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2)) @ rng.normal(size=(2, d))
    return (X - X.min(0)) / (X.max(0) - X.min(0))


def identity_ae(d):
    return autoenc.Autoencoder([(np.eye(d), np.zeros(d))], [(np.eye(d), np.zeros(d))], "relu")


def zero_ae(d, k):
    return autoenc.Autoencoder([(np.zeros((d, k)), np.zeros(k))], [(np.zeros((k, d)), np.zeros(d))])


class TestEncodeDecode:
    def test_identity_on_nonnegative(self):
        x = np.array([0.0, 0.3, 2.0])
        assert np.array_equal(autoenc.encode(identity_ae(3), x), x)
        assert np.array_equal(autoenc.decode(identity_ae(3), x), x)

    def test_zero_weights(self):
        assert np.array_equal(autoenc.encode(zero_ae(3, 2), [1.0, -2.0, 3.0]), [0.0, 0.0])

    def test_three_to_two_fixture(self):
        W = np.array([[1.0, -1.0], [0.5, 2.0], [0.0, 1.0]])
        b = np.array([0.1, -3.0])
        ae = autoenc.Autoencoder([(W, b)], [(W.T, np.zeros(3))], "relu")
        # z = relu([1 + 1 + 0.1, -1 + 4 + 3 - 3]) = [2.1, 3.0]
        assert np.allclose(autoenc.encode(ae, [1.0, 2.0, 3.0]), [2.1, 3.0])
        sig = autoenc.Autoencoder([(W, b)], [(W.T, np.zeros(3))], "sigmoid")
        assert np.allclose(autoenc.encode(sig, [1.0, 2.0, 3.0]), 1 / (1 + np.exp(-np.array([2.1, 3.0]))))

    def test_decoder_output_is_linear(self):
        ae = autoenc.Autoencoder([(np.eye(1), np.zeros(1))], [(np.array([[-2.0]]), np.zeros(1))])
        assert autoenc.decode(ae, [1.5]) == pytest.approx([-3.0])

    def test_shapes_and_purity(self):
        ae = autoenc.init_autoencoder(6, (5, 4), 3, seed=0)
        X = np.random.default_rng(0).random((7, 6))
        z = autoenc.encode(ae, X)
        assert z.shape == (7, 3) and autoenc.decode(ae, z).shape == (7, 6)
        assert np.array_equal(z, autoenc.encode(ae, X))

    def test_dim_mismatch(self):
        ae = autoenc.init_autoencoder(4, (3,), 2)
        with pytest.raises(DataError):
            autoenc.encode(ae, np.zeros(5))
        with pytest.raises(DataError):
            autoenc.decode(ae, np.zeros(3))

    def test_bad_activation(self):
        with pytest.raises(ConfigError):
            autoenc.init_autoencoder(4, (3,), 2, activation="tanh")


class TestLosses:
    def test_perfect_reconstruction(self):
        assert autoenc.reconstruction_loss(identity_ae(3), np.random.default_rng(1).random((5, 3))) == 0

    def test_zero_output_is_mean_sq_norm(self):
        X = np.random.default_rng(2).normal(size=(6, 3))
        assert autoenc.reconstruction_loss(zero_ae(3, 2), X) == pytest.approx(np.mean((X ** 2).sum(1)))

    def test_fixture_per_sample_sum(self):
        ae = autoenc.init_autoencoder(3, (4,), 2, seed=5)
        X = np.random.default_rng(3).random((4, 3))
        total = 0.0
        for x in X:
            xh = autoenc.decode(ae, autoenc.encode(ae, x))
            total += sum((a - b) ** 2 for a, b in zip(x, xh))
        assert autoenc.reconstruction_loss(ae, X) == pytest.approx(total / 4, abs=1e-14)

    def test_regularized(self):
        ae = autoenc.init_autoencoder(3, (4,), 2, seed=5)
        X = np.random.default_rng(3).random((4, 3))
        base = autoenc.reconstruction_loss(ae, X)
        assert autoenc.regularized_loss(ae, X, 0.0) == base
        sq = sum(float((p ** 2).sum()) for layer in ae.encoder for p in layer)
        assert autoenc.regularized_loss(ae, X, 0.5) == pytest.approx(base + 0.5 * sq)
        assert autoenc.encoder_sq_norm(zero_ae(3, 2)) == 0.0

    def test_empty_data(self):
        with pytest.raises(DataError):
            autoenc.reconstruction_loss(identity_ae(2), np.empty((0, 2)))


class TestGradients:
    def test_sigmoid_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        ae = autoenc.init_autoencoder(5, (4,), 3, activation="sigmoid", seed=6)
        for p in ae.params():
            p += rng.normal(0, 0.3, p.shape)
        X = rng.random((6, 5))
        _, grads = autoenc.loss_and_grads(ae, X, 0.1)
        f = lambda: autoenc.loss_and_grads(ae, X, 0.1)[0]
        assert central_diff_check(f, ae.params(), grads) < 1e-4

    def test_relu_away_from_kinks(self):
        rng = np.random.default_rng(7)
        # positive weights and inputs keep every pre-activation well above zero
        ae = autoenc.init_autoencoder(3, (4,), 2, seed=0)
        for layer in ae.encoder + ae.decoder[:-1]:
            layer[0][:] = rng.uniform(0.2, 1.0, layer[0].shape)
            layer[1][:] = 0.1
        X = rng.uniform(0.5, 1.0, (5, 3))
        _, grads = autoenc.loss_and_grads(ae, X, 0.01)
        f = lambda: autoenc.loss_and_grads(ae, X, 0.01)[0]
        assert central_diff_check(f, ae.params(), grads) < 1e-4


class TestTrain:
    def test_zero_epochs(self):
        ae = autoenc.init_autoencoder(8, (4,), 2, seed=0)
        out, hist = autoenc.train(ae, rank2(), autoenc.AeTrainConfig(epochs=0))
        assert all(np.array_equal(a, b) for a, b in zip(ae.params(), out.params()))
        assert len(hist["loss"]) == 1

    def test_rank2_reaches_five_percent(self):
        ae = autoenc.init_autoencoder(8, (), 2, seed=1)
        _, hist = autoenc.train(ae, rank2(), autoenc.AeTrainConfig(epochs=50, lr=0.01, seed=2))
        assert hist["loss"][-1] < 0.05 * hist["loss"][0]

    def test_default_config_trace_nonincreasing(self):
        ae = autoenc.init_autoencoder(8, (16, 8), 2, seed=1)
        _, hist = autoenc.train(ae, rank2(), autoenc.AeTrainConfig(seed=2))
        loss = hist["loss"]
        assert all(b <= a for a, b in zip(loss, loss[1:]))

    def test_huge_lambda_shrinks_encoder(self):
        ae = autoenc.init_autoencoder(8, (4,), 2, seed=3)
        _, hist = autoenc.train(ae, rank2(), autoenc.AeTrainConfig(lam=1e6, lr=0.01, epochs=8))
        norms = hist["encoder_norm"]
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_early_stop(self):
        ae = autoenc.init_autoencoder(8, (), 2, seed=1)
        cfg = autoenc.AeTrainConfig(epochs=50, lr=0.01, seed=2, early_stop_loss=0.05)
        _, hist = autoenc.train(ae, rank2(), cfg)
        assert len(hist["loss"]) < 51 and hist["reconstruction"][-1] <= 0.05

    def test_deterministic(self):
        ae = autoenc.init_autoencoder(8, (4,), 2, seed=0)
        a, _ = autoenc.train(ae, rank2(), autoenc.AeTrainConfig(epochs=2, seed=5))
        b, _ = autoenc.train(ae, rank2(), autoenc.AeTrainConfig(epochs=2, seed=5))
        assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_aborts(self):
        ae = autoenc.init_autoencoder(2, (), 2, seed=0)
        with pytest.raises(NumericalError):
            autoenc.train(ae, np.array([[1e200, 1e200]]), autoenc.AeTrainConfig(epochs=1))

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"lam": -1}, {"epochs": -1}, {"batch_size": 0}])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            autoenc.AeTrainConfig(**kw).validate()


class TestCompress:
    def _ds(self, X):
        schema = dataio.make_schema([(f"f{i}", "numeric") for i in range(X.shape[1])] + [("y", "label")])
        return dataio.Dataset(schema, X, np.arange(len(X)) % 2, ["a", "b"])

    def test_shape_and_labels(self):
        X = np.random.default_rng(0).random((9, 4))
        ae = autoenc.init_autoencoder(4, (3,), 2, seed=0)
        out = autoenc.compress(ae, self._ds(X))
        assert out.features.shape == (9, 2)
        assert np.array_equal(out.labels, np.arange(9) % 2)
        for row, z in zip(X, out.features):
            assert np.allclose(autoenc.encode(ae, row), z, rtol=0, atol=1e-12)

    def test_identity_keeps_features(self):
        X = np.random.default_rng(1).random((5, 3))
        assert np.array_equal(autoenc.compress(identity_ae(3), self._ds(X)).features, X)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 12))
    def test_row_count_preserved(self, n):
        X = np.random.default_rng(n).random((n, 4))
        out = autoenc.compress(autoenc.init_autoencoder(4, (3,), 2), self._ds(X))
        assert out.n_rows == n
