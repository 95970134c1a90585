import json

import numpy as np
import pytest

from eim._rng import rng_from_seed
from eim.distributions import GMM, Categorical, Gaussian
from eim.io import dumps, from_document, load_model, save_model, to_document
from eim.ratio import TrainConfig, train_ratio
from eim.validation import InputError


def random_gmm(seed, k=3, d=2):
    rng = rng_from_seed(seed)
    comps = []
    for _ in range(k):
        a = rng.standard_normal((d, d))
        comps.append(Gaussian(rng.standard_normal(d) * 3, a @ a.T + 0.2 * np.eye(d)))
    w = rng.dirichlet(np.ones(k))
    return GMM(comps, Categorical(w))


class TestModelDocuments:
    def test_gmm_round_trip_bit_exact(self, tmp_path):
        m = random_gmm(0)
        path = tmp_path / "model.json"
        save_model(m, path)
        back = load_model(path)
        for a, b in zip(m.components, back.components):
            np.testing.assert_array_equal(a.mean, b.mean)
            np.testing.assert_array_equal(a.chol, b.chol)
        np.testing.assert_array_equal(m.coefficients.probabilities,
                                      back.coefficients.probabilities)

    def test_double_round_trip_stable_bytes(self, tmp_path):
        m = random_gmm(1)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_model(m, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_document_fields(self):
        doc = to_document(random_gmm(2, k=2, d=3))
        assert doc["version"] == 1
        assert doc["type"] == "gmm"
        assert len(doc["weights"]) == 2
        assert len(doc["means"][0]) == 3
        assert len(doc["cholesky_factors"]) == 2

    def test_gaussian_and_categorical_round_trip(self, tmp_path):
        g = Gaussian([1.0, -2.0], np.array([[2.0, 0.5], [0.5, 1.0]]))
        save_model(g, tmp_path / "g.json")
        back = load_model(tmp_path / "g.json")
        np.testing.assert_array_equal(g.mean, back.mean)
        np.testing.assert_array_equal(g.chol, back.chol)
        c = Categorical([0.25, 0.5, 0.25])
        save_model(c, tmp_path / "c.json")
        np.testing.assert_array_equal(
            c.probabilities, load_model(tmp_path / "c.json").probabilities)

    def test_seventeen_digit_floats_on_disk(self, tmp_path):
        g = Gaussian([1.0 / 3.0], [[np.pi]])
        save_model(g, tmp_path / "g.json")
        text = (tmp_path / "g.json").read_text()
        assert "0.33333333333333331" in text
        parsed = json.loads(text)
        assert parsed["means"][0][0] == 1.0 / 3.0

    def test_unknown_type_rejected(self):
        with pytest.raises(InputError):
            from_document({"version": 1, "type": "mystery"})
        with pytest.raises(InputError):
            from_document({"version": 99, "type": "gmm"})

    def test_classifier_round_trip(self, tmp_path):
        rng = rng_from_seed(3)
        p = rng.normal(0, 1, size=(300, 2))
        q = rng.normal(1, 1, size=(300, 2))
        clf, _ = train_ratio(p, q, TrainConfig(max_epochs=3, hidden_sizes=(8,)),
                             seed=4)
        save_model(clf, tmp_path / "clf.json")
        back = load_model(tmp_path / "clf.json")
        probes = rng.normal(size=(20, 2))
        np.testing.assert_array_equal(clf.forward_logit(probes),
                                      back.forward_logit(probes))

    def test_dumps_deterministic(self):
        m = random_gmm(5)
        assert dumps(to_document(m)) == dumps(to_document(m))
