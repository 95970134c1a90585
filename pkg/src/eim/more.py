"""Closed-form KL trust-region updates for Gaussians and categoricals.

The updates maximize E_q[f] with f = -phi under KL(q||q_old) <= eps. With the
extra unit KL penalty of the bound (`kl_weight=1`) the optimizer tilts the old
natural parameters by f/(eta+1); `kl_weight=0` recovers the plain trust-region
update (the "no KL" ablation). The Lagrange multiplier eta is found by
bracketing plus bisection on the monotone dual derivative eps - KL(eta).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .distributions import Categorical, Gaussian, kl_categorical, kl_gaussian
from .validation import InputError, NumericalError, as_matrix, as_vector, check_positive


class UpdateRejectedError(NumericalError):
    """No multiplier in the search bracket produced a valid new distribution."""


@dataclass
class QuadraticSurrogate:
    """Local quadratic model value(x) = -0.5 x^T F x + f^T x + f0."""

    F: np.ndarray
    f: np.ndarray
    f0: float

    def __post_init__(self):
        self.F = 0.5 * (np.atleast_2d(np.asarray(self.F, dtype=float))
                        + np.atleast_2d(np.asarray(self.F, dtype=float)).T)
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.f0 = float(self.f0)
        if self.F.shape != (self.f.shape[0], self.f.shape[0]):
            raise InputError(f"F shape {self.F.shape} does not match f length {len(self.f)}")

    @property
    def dim(self) -> int:
        return self.f.shape[0]

    def evaluate(self, x) -> np.ndarray:
        pts = as_matrix(x, "x", self.dim)
        quad = -0.5 * np.einsum("ni,ij,nj->n", pts, self.F, pts)
        out = quad + pts @ self.f + self.f0
        return out[0] if np.asarray(x).ndim == 1 else out

    def expectation(self, g: Gaussian) -> float:
        """E[value(x)] under a Gaussian."""
        mu, sig = g.mean, g.covariance
        return float(-0.5 * (np.trace(self.F @ sig) + mu @ self.F @ mu)
                     + self.f @ mu + self.f0)

    def negated(self) -> "QuadraticSurrogate":
        return QuadraticSurrogate(-self.F, -self.f, -self.f0)


@dataclass
class TrustRegionConfig:
    epsilon: float
    eta_min: float = 1e-8
    eta_max: float = 1e8
    dual_tolerance: float = 1e-10

    def __post_init__(self):
        check_positive(self.epsilon, "epsilon")
        if not 0 < self.eta_min < self.eta_max:
            raise InputError("need 0 < eta_min < eta_max")


@dataclass
class DualSolution:
    eta: float
    constraint_active: bool
    achieved_kl: float


def fit_surrogate(samples, values, ridge=1e-9, whiten: Gaussian | None = None
                  ) -> QuadraticSurrogate:
    """Ridge least squares of values on {x_i x_j (i<=j), x_i, 1}.

    With `whiten`, inputs are centered and rotated by that Gaussian's Cholesky
    factor before fitting (raw quadratic features are badly conditioned away
    from the origin) and coefficients are mapped back afterwards.
    """
    x = as_matrix(samples, "samples")
    v = as_vector(np.asarray(values, dtype=float).reshape(-1), "values", x.shape[0])
    n, d = x.shape
    n_feat = d * (d + 1) // 2 + d + 1
    if n < n_feat:
        raise InputError(f"need at least {n_feat} samples to identify a quadratic in "
                         f"dim {d}, got {n}")
    if whiten is not None:
        if whiten.dim != d:
            raise InputError("whitening Gaussian dimension mismatch")
        z = solve_triangular(whiten.chol, (x - whiten.mean).T, lower=True).T
    else:
        z = x
    iu, ju = np.triu_indices(d)
    phi = np.concatenate([z[:, iu] * z[:, ju], z, np.ones((n, 1))], axis=1)
    gram = phi.T @ phi
    lam = ridge * max(np.trace(gram) / gram.shape[0], 1e-30)
    try:
        w = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), phi.T @ v)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("surrogate design is rank deficient") from exc
    if not np.all(np.isfinite(w)):
        raise NumericalError("surrogate fit produced non-finite coefficients")
    n_quad = len(iu)
    coef_quad, coef_lin, coef_const = w[:n_quad], w[n_quad:n_quad + d], w[-1]
    f_z = np.zeros((d, d))
    f_z[iu, ju] = -coef_quad
    f_z[ju, iu] = -coef_quad
    f_z[np.diag_indices(d)] = -2.0 * coef_quad[iu == ju]
    if whiten is None:
        return QuadraticSurrogate(f_z, coef_lin, coef_const)
    l_inv = np.linalg.inv(whiten.chol)
    big_f = l_inv.T @ f_z @ l_inv
    b = l_inv.T @ coef_lin
    mu = whiten.mean
    return QuadraticSurrogate(big_f, big_f @ mu + b,
                              coef_const - 0.5 * mu @ big_f @ mu - b @ mu)


def _bracket_and_bisect(kl_at, tr: TrustRegionConfig):
    """Find eta: smallest feasible if KL already within eps, else KL(eta)=eps.

    `kl_at(eta)` returns the achieved KL or None when the candidate update is
    invalid (non-PD precision). Validity is monotone in eta, KL is
    non-increasing, so a geometric scan plus log-space bisection suffices.
    """
    eps = tr.epsilon
    eta = tr.eta_min
    kl = kl_at(eta)
    while kl is None:
        if eta >= tr.eta_max:
            raise UpdateRejectedError("no multiplier up to eta_max gives a valid update")
        eta = min(eta * 10.0, tr.eta_max)
        kl = kl_at(eta)
    if kl <= eps:
        return eta, False, kl
    lo, hi = eta, tr.eta_max
    kl_hi = kl_at(hi)
    if kl_hi is None or kl_hi > eps:
        raise UpdateRejectedError("trust region cannot be met even at eta_max")
    for _ in range(300):
        mid = np.sqrt(lo * hi)
        kl_mid = kl_at(mid)
        if kl_mid is None or kl_mid > eps:
            lo = mid
        else:
            hi, kl_hi = mid, kl_mid
        if abs(kl_hi - eps) <= tr.dual_tolerance or hi / lo < 1 + 1e-15:
            break
    return hi, True, kl_hi


def gaussian_more_update(old: Gaussian, surrogate: QuadraticSurrogate,
                         tr: TrustRegionConfig, kl_weight: float = 1.0):
    """Trust-region step for one Gaussian given the surrogate of the logit phi.

    The step maximizes f = -phi, tilting the natural parameters:
    Q_new = Q_old + F/(eta+w), q_new = q_old + f/(eta+w) with w = kl_weight.
    Candidates with non-PD precision are skipped by moving eta toward eta_max;
    if none is valid the update is rejected and the caller keeps the old
    component.
    """
    if surrogate.dim != old.dim:
        raise InputError("surrogate dimension does not match the Gaussian")
    fs = surrogate.negated()
    cache = {}

    def candidate(eta):
        if eta not in cache:
            beta = 1.0 / (eta + kl_weight)
            try:
                g = Gaussian.from_natural(old.precision + beta * fs.F,
                                          old.precision_mean + beta * fs.f)
                cache[eta] = (g, float(kl_gaussian(g, old)))
            except NumericalError:
                cache[eta] = None
        return cache[eta]

    def kl_at(eta):
        c = candidate(eta)
        return None if c is None else c[1]

    eta, active, kl = _bracket_and_bisect(kl_at, tr)
    new, _ = candidate(eta)
    return new, DualSolution(eta=eta, constraint_active=active, achieved_kl=kl)


def categorical_more_update(old: Categorical, losses, tr: TrustRegionConfig,
                            kl_weight: float = 1.0):
    """Trust-region step for mixture coefficients given per-component losses phi."""
    phi = as_vector(np.asarray(losses, dtype=float).reshape(-1), "losses", old.dim)
    if np.any(old.probabilities <= 0):
        raise InputError("old coefficients must be strictly positive")
    log_old = np.log(old.probabilities)

    def candidate(eta):
        logw = log_old - phi / (eta + kl_weight)
        logw -= logsumexp(logw)
        return Categorical(np.exp(logw) / np.exp(logw).sum())

    def kl_at(eta):
        return float(kl_categorical(candidate(eta), old))

    eta, active, kl = _bracket_and_bisect(kl_at, tr)
    return candidate(eta), DualSolution(eta=eta, constraint_active=active, achieved_kl=kl)


def gaussian_dual_value(old: Gaussian, surrogate: QuadraticSurrogate, eta: float,
                        epsilon: float, kl_weight: float = 1.0) -> float:
    """g(eta) = eta*eps + (eta+w)*(A(Q_new,q_new) - A(Q_old,q_old) + beta*f0)."""
    fs = surrogate.negated()
    beta = 1.0 / (eta + kl_weight)
    new = Gaussian.from_natural(old.precision + beta * fs.F,
                                old.precision_mean + beta * fs.f)
    log_z = new.log_partition_natural() - old.log_partition_natural() + beta * fs.f0
    return eta * epsilon + (eta + kl_weight) * log_z


def categorical_dual_value(old: Categorical, losses, eta: float, epsilon: float,
                           kl_weight: float = 1.0) -> float:
    phi = np.asarray(losses, dtype=float).reshape(-1)
    log_z = logsumexp(np.log(old.probabilities) - phi / (eta + kl_weight))
    return eta * epsilon + (eta + kl_weight) * float(log_z)
