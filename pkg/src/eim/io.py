"""Versioned text serialization for models and classifiers.

Documents are JSON with every float emitted at 17 significant digits, which
uniquely determines the underlying double, so save/load round trips are
bit-exact. Mixture documents carry the fields `version`, `type`, `weights`,
`means`, `cholesky_factors`.
"""

from __future__ import annotations

import json

import numpy as np

from .distributions import GMM, Categorical, Gaussian
from .validation import InputError

FORMAT_VERSION = 1


def _emit(obj, parts):
    if isinstance(obj, dict):
        parts.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                parts.append(", ")
            parts.append(json.dumps(k))
            parts.append(": ")
            _emit(v, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(", ")
            _emit(v, parts)
        parts.append("]")
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(format(float(obj), ".17g"))
    elif obj is None:
        parts.append("null")
    else:
        parts.append(json.dumps(obj))


def dumps(doc: dict) -> str:
    parts = []
    _emit(doc, parts)
    parts.append("\n")
    return "".join(parts)


def _array(a):
    return np.asarray(a, dtype=float).tolist()


def to_document(obj) -> dict:
    if isinstance(obj, Gaussian):
        return {"version": FORMAT_VERSION, "type": "gaussian",
                "weights": [1.0], "means": [_array(obj.mean)],
                "cholesky_factors": [_array(obj.chol)]}
    if isinstance(obj, Categorical):
        return {"version": FORMAT_VERSION, "type": "categorical",
                "weights": _array(obj.probabilities)}
    if isinstance(obj, GMM):
        return {"version": FORMAT_VERSION, "type": "gmm",
                "weights": _array(obj.coefficients.probabilities),
                "means": [_array(c.mean) for c in obj.components],
                "cholesky_factors": [_array(c.chol) for c in obj.components]}
    # networks and mixtures of experts register themselves to avoid import cycles
    hook = getattr(obj, "to_document", None)
    if hook is not None:
        return hook()
    raise InputError(f"cannot serialize object of type {type(obj).__name__}")


def _gaussian_from(mean, chol) -> Gaussian:
    chol = np.asarray(chol, dtype=float)
    return Gaussian(np.asarray(mean, dtype=float), chol @ chol.T)


def from_document(doc: dict):
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported document version {version!r}")
    kind = doc.get("type")
    if kind == "gaussian":
        return _gaussian_from(doc["means"][0], doc["cholesky_factors"][0])
    if kind == "categorical":
        return Categorical(doc["weights"])
    if kind == "gmm":
        comps = [_gaussian_from(m, c)
                 for m, c in zip(doc["means"], doc["cholesky_factors"])]
        return GMM(comps, Categorical(doc["weights"]))
    if kind == "mlp_classifier":
        from .ratio import MlpClassifier
        return MlpClassifier.from_document(doc)
    if kind == "mixture_of_experts":
        from .conditional import MixtureOfExperts
        return MixtureOfExperts.from_document(doc)
    raise InputError(f"unknown document type {kind!r}")


def save_model(obj, path):
    with open(path, "w") as fh:
        fh.write(dumps(to_document(obj)))


def load_model(path):
    with open(path) as fh:
        return from_document(json.load(fh))
