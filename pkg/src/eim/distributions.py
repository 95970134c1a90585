"""Exact probability primitives: Gaussians, categoricals, mixtures, closed-form KLs.

All types are immutable after construction (arrays are frozen), so they can be
shared freely across threads; sampling takes an explicit generator handle.
Gaussians cache their Cholesky factor and natural parameters (precision Q and
precision-mean q) because the trust-region updates work in natural coordinates.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ._rng import as_generator
from .validation import InputError, NumericalError, as_matrix, as_vector, check_square

_LOG_2PI = np.log(2.0 * np.pi)
_MIN_PIVOT = 1e-12


class KLResult(float):
    """Non-negative KL divergence in nats (rounding noise clamped to zero)."""

    def __new__(cls, value):
        if value < -1e-12 or not np.isfinite(value):
            raise NumericalError(f"KL evaluated to {value}")
        return super().__new__(cls, max(float(value), 0.0))

    @property
    def value(self) -> float:
        return float(self)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


class Gaussian:
    """Multivariate normal with cached Cholesky factor and natural parameters."""

    def __init__(self, mean, covariance):
        mean = as_vector(np.asarray(mean, dtype=float).reshape(-1), "mean")
        cov = check_square(np.atleast_2d(np.asarray(covariance, dtype=float)), "covariance")
        if cov.shape[0] != mean.shape[0]:
            raise InputError(f"mean dim {mean.shape[0]} != covariance dim {cov.shape[0]}")
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        if asym > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise InputError(f"covariance not symmetric (max asymmetry {asym:.3e})")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc
        if np.min(np.diag(chol)) < _MIN_PIVOT:
            raise NumericalError("covariance is numerically singular (pivot < 1e-12)")
        self.mean = _freeze(mean)
        self.covariance = _freeze(cov)
        self.chol = _freeze(chol)
        # natural parameters: precision Q = Sigma^-1, precision-mean q = Q mu
        l_inv = np.linalg.inv(chol)
        self.precision = _freeze(l_inv.T @ l_inv)
        self.precision_mean = _freeze(self.precision @ mean)
        self.log_det_cov = 2.0 * float(np.sum(np.log(np.diag(chol))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_natural(cls, precision, precision_mean) -> "Gaussian":
        """Build from Q = Sigma^-1 and q = Q mu."""
        q_mat = check_square(np.atleast_2d(np.asarray(precision, dtype=float)), "precision")
        q_vec = as_vector(np.asarray(precision_mean, dtype=float).reshape(-1), "precision_mean",
                          q_mat.shape[0])
        q_mat = 0.5 * (q_mat + q_mat.T)
        try:
            chol_q = np.linalg.cholesky(q_mat)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("precision is not positive definite") from exc
        inv_cq = np.linalg.inv(chol_q)
        cov = inv_cq.T @ inv_cq
        mean = cov @ q_vec
        return cls(mean, cov)

    def log_density(self, x) -> np.ndarray:
        """log N(x; mu, Sigma) for a single point or rows of a matrix."""
        single = np.asarray(x).ndim == 1
        pts = as_matrix(x, "x", self.dim)
        diff = pts - self.mean
        sol = np.linalg.solve(self.chol, diff.T)  # lower triangular
        maha = np.sum(sol * sol, axis=0)
        out = -0.5 * (self.dim * _LOG_2PI + self.log_det_cov + maha)
        return out[0] if single else out

    def sample(self, n, rng) -> np.ndarray:
        if n < 1:
            raise InputError(f"n must be >= 1, got {n}")
        rng = as_generator(rng)
        z = rng.standard_normal((int(n), self.dim))
        return self.mean + z @ self.chol.T

    def log_partition_natural(self) -> float:
        """A(Q, q) = 0.5 (q^T Q^-1 q + d log 2pi - log det Q)."""
        mu = self.mean
        return 0.5 * (float(self.precision_mean @ mu) + self.dim * _LOG_2PI + self.log_det_cov)

    def __repr__(self):
        return f"Gaussian(dim={self.dim})"


class Categorical:
    """Probability vector on the simplex."""

    def __init__(self, probabilities):
        p = as_vector(np.asarray(probabilities, dtype=float).reshape(-1), "probabilities")
        if np.any(p < 0):
            raise InputError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-10:
            raise InputError(f"probabilities sum to {p.sum():.12f}, expected 1")
        self.probabilities = _freeze(p / p.sum())

    @property
    def dim(self) -> int:
        return self.probabilities.shape[0]

    def sample(self, n, rng) -> np.ndarray:
        if n < 1:
            raise InputError(f"n must be >= 1, got {n}")
        rng = as_generator(rng)
        return rng.choice(self.dim, size=int(n), p=self.probabilities)

    def __repr__(self):
        return f"Categorical({np.array2string(self.probabilities, precision=4)})"


class GMM:
    """Gaussian mixture: shared-dimension components plus categorical coefficients."""

    def __init__(self, components, coefficients):
        components = list(components)
        if not components:
            raise InputError("GMM needs at least one component")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise InputError(f"components disagree on dimension: {sorted(dims)}")
        if not isinstance(coefficients, Categorical):
            coefficients = Categorical(coefficients)
        if coefficients.dim != len(components):
            raise InputError(
                f"{coefficients.dim} coefficients for {len(components)} components")
        self.components = tuple(components)
        self.coefficients = coefficients

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    def component_log_densities(self, x) -> np.ndarray:
        pts = as_matrix(x, "x", self.dim)
        return np.stack([c.log_density(pts) for c in self.components], axis=1)

    def log_density(self, x) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        comp = self.component_log_densities(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.coefficients.probabilities)
        out = logsumexp(comp + logw, axis=1)
        out = np.maximum(out, np.finfo(float).min)
        return out[0] if single else out

    def responsibilities(self, x) -> np.ndarray:
        comp = self.component_log_densities(x)
        with np.errstate(divide="ignore"):
            joint = comp + np.log(self.coefficients.probabilities)
        joint -= logsumexp(joint, axis=1, keepdims=True)
        return np.exp(joint)

    def sample(self, n, rng):
        """Returns (samples, component labels)."""
        if n < 1:
            raise InputError(f"n must be >= 1, got {n}")
        rng = as_generator(rng)
        labels = self.coefficients.sample(n, rng)
        out = np.empty((int(n), self.dim))
        for i, comp in enumerate(self.components):
            idx = np.flatnonzero(labels == i)
            if idx.size:
                out[idx] = comp.sample(idx.size, rng)
        return out, labels

    def __repr__(self):
        return f"GMM(K={self.n_components}, dim={self.dim})"


def kl_gaussian(a: Gaussian, b: Gaussian) -> KLResult:
    """Closed-form KL(a || b) between Gaussians of equal dimension."""
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    d = a.dim
    # tr(Sigma_b^-1 Sigma_a) via Cholesky of b
    m = np.linalg.solve(b.chol, a.chol)
    trace = float(np.sum(m * m))
    diff = b.mean - a.mean
    sol = np.linalg.solve(b.chol, diff)
    maha = float(sol @ sol)
    return KLResult(0.5 * (trace + maha - d + b.log_det_cov - a.log_det_cov))


def kl_categorical(a: Categorical, b: Categorical) -> KLResult:
    """Discrete KL(a || b); 0 log 0 treated as 0; b must cover a's support."""
    if a.dim != b.dim:
        raise InputError(f"length mismatch: {a.dim} vs {b.dim}")
    pa, pb = a.probabilities, b.probabilities
    bad = (pa > 0) & (pb <= 0)
    if np.any(bad):
        raise InputError(f"support violation at entries {np.flatnonzero(bad).tolist()}")
    mask = pa > 0
    return KLResult(float(np.sum(pa[mask] * (np.log(pa[mask]) - np.log(pb[mask])))))
