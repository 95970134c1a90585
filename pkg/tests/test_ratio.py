import numpy as np
import pytest

from eim._rng import rng_from_seed
from eim.ratio import (Adam, FeatureMap, Mlp, MlpClassifier, TrainConfig,
                       bce_from_logits, train_ratio)
from eim.validation import InputError


def finite_difference(fn, x, h=1e-5):
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = fn()
        xf[i] = orig - h
        lo = fn()
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * h)
    return g


class TestForward:
    def test_zero_weights_give_zero_logit(self):
        net = Mlp([2, 4, 1], rng=rng_from_seed(0))
        for w in net.weights:
            w[:] = 0.0
        clf = MlpClassifier(net, d_x=2)
        assert clf.forward_logit(np.zeros(2)) == 0.0
        assert clf.forward_logit(rng_from_seed(1).standard_normal(2)) == 0.0

    def test_single_linear_layer_affine(self):
        net = Mlp([1, 1], weights=[np.array([[1.0]])], biases=[np.array([-0.5])])
        clf = MlpClassifier(net, d_x=1)
        for x in (-1.0, 0.0, 2.5):
            assert clf.forward_logit(np.array([x])) == pytest.approx(x - 0.5)

    def test_matches_independent_forward_pass(self):
        rng = rng_from_seed(2)
        net = Mlp([3, 5, 4, 1], activation="tanh", rng=rng)
        x = rng.standard_normal(3)
        h = x
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            h = np.tanh(h @ w + b)
        expected = float((h @ net.weights[-1] + net.biases[-1])[0])
        clf = MlpClassifier(net, d_x=3)
        assert clf.forward_logit(x) == pytest.approx(expected, rel=1e-12)

    def test_width_mismatch(self):
        clf = MlpClassifier(Mlp([3, 4, 1], rng=rng_from_seed(3)), d_x=3)
        with pytest.raises(InputError):
            clf.forward_logit(np.zeros(4))


class TestGradients:
    def test_linear_layer_gradient_is_weight(self):
        w = np.array([[0.7], [-1.2]])
        net = Mlp([2, 1], weights=[w], biases=[np.zeros(1)])
        clf = MlpClassifier(net, d_x=2)
        np.testing.assert_allclose(clf.input_gradient(np.array([0.3, 0.4])),
                                   w[:, 0], rtol=1e-12)

    def test_constant_net_zero_gradient(self):
        net = Mlp([2, 6, 1], rng=rng_from_seed(4))
        net.weights[-1][:] = 0.0
        clf = MlpClassifier(net, d_x=2)
        np.testing.assert_allclose(clf.input_gradient(np.ones(2)), 0.0, atol=1e-15)

    @staticmethod
    def _away_from_kinks(net, x, margin=1e-3):
        # central differences are invalid across relu kinks; require a margin
        h = x
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            pre = h @ w + b
            if np.min(np.abs(pre)) < margin:
                return False
            h = np.maximum(pre, 0.0) if net.activation == "relu" else np.tanh(pre)
        return True

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_input_gradient_matches_finite_differences(self, activation):
        checked = 0
        trial = 0
        while checked < 10:
            rng = rng_from_seed(100 + trial)
            trial += 1
            sizes = [3, int(rng.integers(4, 9)), int(rng.integers(4, 9)), 1]
            net = Mlp(sizes, activation=activation, rng=rng)
            x = rng.standard_normal((1, 3))
            if activation == "relu" and not self._away_from_kinks(net, x):
                continue
            checked += 1
            grad = net.input_gradient(x)[0]
            fd = finite_difference(lambda: float(net.forward(x)[0, 0]), x)[0]
            denom = np.maximum(np.abs(fd), 1e-4)
            assert np.max(np.abs(grad - fd) / denom) < 1e-4

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_weight_gradients_match_finite_differences(self, activation):
        checked = 0
        trial = 0
        while checked < 10:
            rng = rng_from_seed(200 + trial)
            trial += 1
            net = Mlp([2, 5, 4, 1], activation=activation, rng=rng)
            x = rng.standard_normal((6, 2))
            y = (rng.random(6) > 0.5).astype(float)
            if activation == "relu" and not self._away_from_kinks(net, x):
                continue
            checked += 1

            def loss():
                return bce_from_logits(net.forward(x)[:, 0], y)

            out, acts = net.forward_cached(x)
            dz = (1.0 / (1.0 + np.exp(-out[:, 0])) - y) / len(y)
            dws, dbs, _ = net.backward(acts, dz[:, None])
            for arr, grad in zip(net.weights + net.biases, dws + dbs):
                fd = finite_difference(loss, arr)
                denom = np.maximum(np.abs(fd), 1e-4)
                assert np.max(np.abs(grad - fd) / denom) < 1e-4


class TestTraining:
    def test_indistinguishable_classes(self):
        rng = rng_from_seed(5)
        p = rng.normal(0, 1, size=(4000, 1))
        q = rng.normal(0, 1, size=(4000, 1))
        clf, report = train_ratio(p, q, TrainConfig(max_epochs=60), seed=6)
        assert report.best_val_bce == pytest.approx(np.log(2), abs=0.02)
        probes = np.linspace(-2, 2, 50)[:, None]
        assert np.mean(np.abs(clf.forward_logit(probes))) <= 0.15

    def test_mean_shift_log_ratio(self):
        rng = rng_from_seed(0)
        p = rng.normal(0, 1, size=(10000, 1))
        q = rng.normal(1, 1, size=(10000, 1))
        clf, _ = train_ratio(p, q, TrainConfig(), seed=1)
        grid = np.linspace(-2, 3, 200)[:, None]
        rmse = np.sqrt(np.mean((clf.log_ratio(grid) - (grid[:, 0] - 0.5)) ** 2))
        assert rmse <= 0.1

    def test_variance_ratio_log_ratio(self):
        rng = rng_from_seed(8)
        p = rng.normal(0, 1, size=(10000, 1))
        q = rng.normal(0, 2, size=(10000, 1))
        clf, _ = train_ratio(p, q, TrainConfig(), seed=1)
        grid = np.linspace(-2.5, 2.5, 200)[:, None]
        # oracle: log N(x;0,4) - log N(x;0,1) = 3x^2/8 - ln 2
        true = (grid[:, 0] ** 2) * 3.0 / 8.0 - np.log(2.0)
        rmse = np.sqrt(np.mean((clf.log_ratio(grid) - true) ** 2))
        assert rmse <= 0.15

    def test_early_stopping_best_not_worse_than_last(self):
        rng = rng_from_seed(9)
        p = rng.normal(0, 1, size=(2000, 2))
        q = rng.normal(0.5, 1, size=(2000, 2))
        clf, report = train_ratio(p, q, TrainConfig(max_epochs=40), seed=2)
        assert report.best_val_bce <= report.rows[-1][2] + 1e-12
        assert report.best_epoch <= report.rows[-1][0]

    def test_empty_inputs_rejected(self):
        with pytest.raises(InputError):
            train_ratio(np.zeros((0, 1)), np.zeros((5, 1)), TrainConfig())

    def test_deterministic_given_seed(self):
        rng = rng_from_seed(10)
        p = rng.normal(0, 1, size=(600, 1))
        q = rng.normal(1, 1, size=(600, 1))
        cfg = TrainConfig(max_epochs=8, validation_fraction=0.25)
        a, _ = train_ratio(p, q, cfg, seed=3)
        b, _ = train_ratio(p, q, cfg, seed=3)
        probes = np.linspace(-2, 2, 20)[:, None]
        np.testing.assert_array_equal(a.forward_logit(probes), b.forward_logit(probes))


class TestRepresentationalLimit:
    def test_quadratic_features_linear_logit_reaches_analytic_ratio(self):
        # with quadratic features and exact Gaussian classes the optimum is in
        # the model class; training should reach it on the 99% mass region
        rng = rng_from_seed(11)
        p = rng.normal(0.0, 1.0, size=(20000, 1))
        q = rng.normal(0.8, 1.3, size=(20000, 1))
        fmap = FeatureMap(name="square", fn=lambda x: x ** 2, width=1)
        cfg = TrainConfig(hidden_sizes=(), max_epochs=400, patience=40,
                          learning_rate=3e-3, l2=0.0)
        clf, _ = train_ratio(p, q, cfg, features=fmap, seed=4)
        lo, hi = 0.8 - 2.58 * 1.3, 0.8 + 2.58 * 1.3
        grid = np.linspace(lo, hi, 300)[:, None]
        true = (-((grid[:, 0] - 0.8) ** 2) / (2 * 1.3 ** 2) - np.log(1.3)
                + (grid[:, 0] ** 2) / 2.0)
        rmse = np.sqrt(np.mean((clf.log_ratio(grid) - true) ** 2))
        assert rmse <= 0.05

    def test_feature_map_concatenation_shapes(self):
        fmap = FeatureMap(name="pair", fn=lambda x: np.concatenate([x, x ** 2], axis=1),
                          width=4)
        rng = rng_from_seed(12)
        p = rng.normal(0, 1, size=(300, 2))
        q = rng.normal(1, 1, size=(300, 2))
        clf, _ = train_ratio(p, q, TrainConfig(max_epochs=3), features=fmap, seed=5)
        assert clf.net.layer_sizes[0] == 2 + 4
        assert clf.forward_logit(p[:5]).shape == (5,)

    def test_feature_width_mismatch_caught(self):
        bad = FeatureMap(name="bad", fn=lambda x: x, width=3)
        rng = rng_from_seed(13)
        with pytest.raises(InputError):
            train_ratio(rng.normal(size=(50, 2)), rng.normal(size=(50, 2)),
                        TrainConfig(max_epochs=2), features=bad, seed=6)


class TestAdam:
    def test_converges_on_quadratic(self):
        p = [np.array([5.0, -3.0])]
        opt = Adam(p, learning_rate=0.1)
        for _ in range(800):
            opt.step([2.0 * p[0]])
        assert np.max(np.abs(p[0])) < 1e-3
