"""Marginal I-projection fitting of Gaussian mixtures, plus baselines.

The main loop alternates an E-step (snapshot the model, retrain the density
ratio classifier on data vs model samples) with closed-form M-steps: a
trust-region tilt of the coefficients on per-component expected logits, then a
trust-region tilt of each component on a whitened quadratic surrogate of the
logits. Baselines: maximum-likelihood EM, the adversarial f-GAN/b-GAN
I-projection, and the no-KL / joint-gradient ablations.

Random streams are derived from the run seed with fixed keys so parallel or
re-ordered execution cannot change results:
(0, t) model sampling, (1, t) classifier training, (2, t, i) component i
samples, (3, t, i) coefficient resampling, (4, t) trace evaluation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ._rng import as_generator, rng_from_seed
from .distributions import GMM, Categorical, Gaussian, kl_categorical, kl_gaussian
from .more import (TrustRegionConfig, UpdateRejectedError, categorical_more_update,
                   fit_surrogate, gaussian_more_update)
from .ratio import Adam, FeatureMap, Mlp, TrainConfig, train_ratio
from .validation import InputError, as_matrix, check_count


@dataclass
class EimGmmConfig:
    iterations: int = 100
    samples_per_component: int = 1000
    component_epsilon: float = 0.05
    weight_epsilon: float = 0.05
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    feature_map: Optional[FeatureMap] = None
    resample_coefficients: bool = False
    update_weights: bool = True
    surrogate_ridge: float = 1e-9
    joint_steps: int = 10
    joint_learning_rate: float = 1e-3
    eval_samples: int = 2000

    def __post_init__(self):
        check_count(self.samples_per_component, "samples_per_component")
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if self.component_epsilon <= 0 or self.weight_epsilon <= 0:
            raise InputError("trust regions must be positive")


@dataclass
class IterationRecord:
    iteration: int
    expected_logits: np.ndarray
    coefficient_losses: np.ndarray
    weight_kl: float
    component_kls: np.ndarray
    rejected: np.ndarray
    i_projection: float
    i_projection_stderr: float
    discriminator_val_bce: float
    wall_clock: float  # in-memory diagnostic; not exported (reruns stay bit-identical)

    CSV_EXCLUDE = ("wall_clock",)


@dataclass
class GanRecord:
    iteration: int
    i_projection: float
    i_projection_stderr: float
    discriminator_objective: float
    generator_objective: float
    wall_clock: float

    CSV_EXCLUDE = ("wall_clock",)


@dataclass
class GanConfig:
    generator_learning_rate: float = 1e-3
    discriminator_learning_rate: float = 1e-3
    steps_per_alternation: int = 1
    batch_size: int = 1000
    iterations: int = 5000
    seed: int = 0
    hidden_sizes: tuple = (50, 50, 50)
    activation: str = "relu"
    l2: float = 1e-3
    eval_samples: int = 2000
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        for name in ("generator_learning_rate", "discriminator_learning_rate",
                     "steps_per_alternation", "batch_size"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")


def init_gmm_from_data(data, n_components, seed, covariance_scale=0.25,
                       jitter=1e-6) -> GMM:
    """k-means++-style means on the data, scaled data covariance, uniform weights.

    The shared covariance is the data covariance times `covariance_scale`.
    Starting components at the full data spread makes a wide component straddle
    several modes, where the quadratic surrogate has a spurious symmetric
    attractor; a fraction of the data covariance keeps each component local to
    its seed point (the trust region grows covariances again when needed).
    """
    x = as_matrix(data, "data")
    k = check_count(n_components, "n_components")
    rng = rng_from_seed(seed, 9)
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
        else:
            centers.append(x[rng.choice(n, p=d2 / total)])
    cov = (covariance_scale * np.atleast_2d(np.cov(x.T))
           + jitter * np.eye(x.shape[1]))
    comps = [Gaussian(c, cov) for c in centers]
    return GMM(comps, Categorical(np.full(k, 1.0 / k)))


def mixture_kls(new: GMM, old: GMM):
    comp = np.array([float(kl_gaussian(a, b))
                     for a, b in zip(new.components, old.components)])
    return float(kl_categorical(new.coefficients, old.coefficients)), comp


def _trace_i_projection(model, target_log_density, n, rng):
    if target_log_density is None:
        return np.nan, np.nan
    x, _ = model.sample(n, rng)
    diffs = model.log_density(x) - target_log_density(x)
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(len(diffs)))


def run_eim_gmm(data, init: GMM, cfg: EimGmmConfig,
                target_log_density: Optional[Callable] = None, kl_weight: float = 1.0):
    """One full EIM run; returns the final model and the per-iteration trace."""
    x = as_matrix(data, "data", init.dim)
    if x.shape[0] == 0:
        raise InputError("data must be non-empty")
    model = init
    clf = None
    records = []
    tr_w = TrustRegionConfig(cfg.weight_epsilon)
    tr_c = TrustRegionConfig(cfg.component_epsilon)
    m = cfg.samples_per_component
    for t in range(cfg.iterations):
        tic = time.perf_counter()
        q_old = model
        model_x, _ = q_old.sample(x.shape[0], rng_from_seed(cfg.seed, 0, t))
        clf, report = train_ratio(x, model_x, cfg.train, cfg.feature_map,
                                  seed=rng_from_seed(cfg.seed, 1, t), init=clf)
        comp_samples = [q_old.components[i].sample(m, rng_from_seed(cfg.seed, 2, t, i))
                        for i in range(q_old.n_components)]
        comp_logits = [clf.log_ratio(s) for s in comp_samples]
        expected_logits = np.array([lg.mean() for lg in comp_logits])
        if cfg.resample_coefficients:
            coeff_losses = np.array([
                clf.log_ratio(q_old.components[i].sample(
                    m, rng_from_seed(cfg.seed, 3, t, i))).mean()
                for i in range(q_old.n_components)])
        else:
            coeff_losses = expected_logits
        if cfg.update_weights and q_old.n_components > 1:
            new_weights, wsol = categorical_more_update(
                q_old.coefficients, coeff_losses, tr_w, kl_weight=kl_weight)
            weight_kl = wsol.achieved_kl
        else:
            new_weights, weight_kl = q_old.coefficients, 0.0
        new_comps, comp_kls, rejected = [], [], []
        for i, old_c in enumerate(q_old.components):
            surr = fit_surrogate(comp_samples[i], comp_logits[i],
                                 ridge=cfg.surrogate_ridge, whiten=old_c)
            try:
                new_c, sol = gaussian_more_update(old_c, surr, tr_c, kl_weight=kl_weight)
                new_comps.append(new_c)
                comp_kls.append(sol.achieved_kl)
                rejected.append(False)
            except UpdateRejectedError:
                new_comps.append(old_c)
                comp_kls.append(0.0)
                rejected.append(True)
        model = GMM(new_comps, new_weights)
        ip, ip_se = _trace_i_projection(model, target_log_density, cfg.eval_samples,
                                        rng_from_seed(cfg.seed, 4, t))
        records.append(IterationRecord(
            iteration=t, expected_logits=expected_logits, coefficient_losses=coeff_losses,
            weight_kl=weight_kl, component_kls=np.array(comp_kls),
            rejected=np.array(rejected), i_projection=ip, i_projection_stderr=ip_se,
            discriminator_val_bce=report.best_val_bce,
            wall_clock=time.perf_counter() - tic))
    return model, records


def run_em_gmm(data, init: GMM, iterations, covariance_floor=1e-6, seed=0):
    """Maximum-likelihood EM with a covariance floor each M-step.

    Returns the fitted model and the mean log-likelihood trace (evaluated
    before each update and once more at the end, so the trace is monotone).
    Components whose responsibility mass collapses are reseeded from a random
    datum and the event is recorded on the trace as a (iteration, component)
    pair in `reseeds`.
    """
    x = as_matrix(data, "data", init.dim)
    n, d = x.shape
    if n <= d:
        raise InputError("need more data points than dimensions")
    rng = rng_from_seed(seed, 8)
    model = init
    lls = []
    reseeds = []
    data_cov = np.atleast_2d(np.cov(x.T)) + covariance_floor * np.eye(d)
    floor = covariance_floor * np.eye(d)
    for t in range(iterations):
        lls.append(float(model.log_density(x).mean()))
        resp = model.responsibilities(x)
        nk = resp.sum(axis=0)
        weights = nk / n
        new_comps = []
        for i in range(model.n_components):
            if nk[i] < 1e-8:
                reseeds.append((t, i))
                new_comps.append(Gaussian(x[rng.integers(n)], data_cov))
                weights[i] = 1.0 / n
                continue
            mu = resp[:, i] @ x / nk[i]
            diff = x - mu
            cov = (resp[:, i] * diff.T) @ diff / nk[i] + floor
            new_comps.append(Gaussian(mu, 0.5 * (cov + cov.T)))
        model = GMM(new_comps, Categorical(weights / weights.sum()))
    lls.append(float(model.log_density(x).mean()))
    return model, {"log_likelihood": lls, "reseeds": reseeds}


# --- f-GAN / b-GAN -----------------------------------------------------------

def fgan_i_projection_objective(v_data, v_model) -> float:
    """f-GAN value for the reverse KL: g(v) = -exp(-v), f*(t) = -1 - log(-t)."""
    v_data = np.asarray(v_data, dtype=float)
    v_model = np.asarray(v_model, dtype=float)
    return float(-np.mean(np.exp(-v_data)) + np.mean(1.0 - v_model))


def bgan_i_projection_objective(log_ratio_data, log_ratio_model) -> float:
    """b-GAN value with r_l = log r plugged into the Bregman objective for -log u."""
    r_data = np.asarray(log_ratio_data, dtype=float)
    r_model = np.asarray(log_ratio_model, dtype=float)
    term_data = np.mean(-np.exp(-r_data))
    term_model = np.mean(r_model - 1.0)
    return float(term_data - term_model)


class _GmmParameters:
    """Unconstrained view of a GMM: weight logits, means, raw Cholesky factors."""

    def __init__(self, init: GMM):
        self.d = init.dim
        self.k = init.n_components
        self.w = np.log(init.coefficients.probabilities).copy()
        self.means = np.stack([c.mean for c in init.components]).copy()
        self.chol_raw = np.zeros((self.k, self.d, self.d))
        for i, c in enumerate(init.components):
            raw = np.tril(c.chol, -1).copy()
            raw[np.diag_indices(self.d)] = np.log(np.diag(c.chol))
            self.chol_raw[i] = raw

    def parameters(self):
        return [self.w, self.means, self.chol_raw]

    def weights(self) -> np.ndarray:
        e = np.exp(self.w - self.w.max())
        return e / e.sum()

    def chols(self) -> np.ndarray:
        ls = np.tril(self.chol_raw, -1)
        idx = np.arange(self.d)
        ls[:, idx, idx] = np.exp(self.chol_raw[:, idx, idx])
        return ls

    def chol_raw_grad(self, dl: np.ndarray, ls: np.ndarray) -> np.ndarray:
        """Chain d/dL into d/draw (diagonal is log-parameterized)."""
        g = np.tril(dl)
        idx = np.arange(self.d)
        g[:, idx, idx] = dl[:, idx, idx] * ls[:, idx, idx]
        return g

    def build(self) -> GMM:
        ls = self.chols()
        comps = [Gaussian(self.means[i], ls[i] @ ls[i].T) for i in range(self.k)]
        return GMM(comps, Categorical(self.weights()))


def fgan_generator_gradients(params: _GmmParameters, v_values, v_input_grads,
                             labels, u, ls):
    """Gradients of the generator objective E_q[1 - V].

    Component means and Cholesky factors get reparametrized gradients through
    x = mu_z + L_z u; the weight logits get the score-function gradient with a
    batch-mean baseline (exactly zero for constant V).
    """
    n, d = u.shape
    pis = params.weights()
    gmu = np.zeros_like(params.means)
    gl = np.zeros((params.k, d, d))
    gw = np.zeros(params.k)
    h = 1.0 - v_values
    centered = h - h.mean()
    for i in range(params.k):
        idx = np.flatnonzero(labels == i)
        if idx.size:
            gmu[i] = -v_input_grads[idx].sum(axis=0) / n
            gl[i] = -np.einsum("nd,ne->de", v_input_grads[idx], u[idx]) / n
        # score function: grad_w log pi_z = e_z - pi
        gw[i] = (np.sum(centered[labels == i]) - pis[i] * centered.sum()) / n
    return [gw, gmu, params.chol_raw_grad(gl, ls)]


def run_fgan_gmm(data, init: GMM, cfg: GanConfig,
                 target_log_density: Optional[Callable] = None):
    """Alternating single-step adversarial minimization of the I-projection.

    The variational function V is trained to maximize -E_p[exp(-V)] + E_q[1-V];
    the generator takes reparametrized gradient steps on E_q[1-V] for component
    parameters and score-function steps (batch-mean baseline) for the weights.
    Aborts early when the traced I-projection exceeds `divergence_factor` times
    its initial value for `divergence_patience` consecutive iterations.
    """
    x = as_matrix(data, "data", init.dim)
    n, d = x.shape
    params = _GmmParameters(init)
    rng_init = rng_from_seed(cfg.seed, 1)
    # V works on data-standardized inputs
    shift, scale = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8)
    vnet = Mlp([d, *cfg.hidden_sizes, 1], cfg.activation, rng=rng_init)
    adam_v = Adam(vnet.parameters(), cfg.discriminator_learning_rate)
    adam_g = Adam(params.parameters(), cfg.generator_learning_rate)
    records = []
    diverged = False
    initial_ip = None
    bad_streak = 0
    for t in range(cfg.iterations):
        tic = time.perf_counter()
        rng = rng_from_seed(cfg.seed, 0, t)
        model = params.build()
        d_obj = g_obj = np.nan
        for _ in range(cfg.steps_per_alternation):
            xb = x[rng.choice(n, size=min(cfg.batch_size, n), replace=False)]
            xq, _ = model.sample(cfg.batch_size, rng)
            zp = (xb - shift) / scale
            zq = (xq - shift) / scale
            out_p, acts_p = vnet.forward_cached(zp)
            out_q, acts_q = vnet.forward_cached(zq)
            d_obj = fgan_i_projection_objective(out_p[:, 0], out_q[:, 0])
            # ascend: d obj / d V(xp) = exp(-V)/n_p, d obj / d V(xq) = -1/n_q
            dp = -np.exp(-out_p) / len(zp)   # minimize -objective
            dq = np.ones_like(out_q) / len(zq)
            gw_p, gb_p, _ = vnet.backward(acts_p, dp)
            gw_q, gb_q, _ = vnet.backward(acts_q, dq)
            grads = [a + b for a, b in zip(gw_p, gw_q)] + \
                    [a + b for a, b in zip(gb_p, gb_q)]
            if cfg.l2 > 0:
                for i in range(len(vnet.weights)):
                    grads[i] += 2.0 * cfg.l2 * vnet.weights[i]
            adam_v.step(grads)
        for _ in range(cfg.steps_per_alternation):
            model = params.build()
            ls = params.chols()
            labels = model.coefficients.sample(cfg.batch_size, rng)
            u = rng.standard_normal((cfg.batch_size, d))
            xs = params.means[labels] + np.einsum("nij,nj->ni", ls[labels], u)
            zs = (xs - shift) / scale
            out, acts = vnet.forward_cached(zs)
            _, _, dz = vnet.backward(acts, np.ones_like(out), need_input_grad=True)
            dvdx = dz / scale
            g_obj = float(np.mean(1.0 - out[:, 0]))
            grads = fgan_generator_gradients(params, out[:, 0], dvdx, labels, u, ls)
            adam_g.step(grads)
        model = params.build()
        ip, ip_se = _trace_i_projection(model, target_log_density, cfg.eval_samples,
                                        rng_from_seed(cfg.seed, 4, t))
        records.append(GanRecord(iteration=t, i_projection=ip, i_projection_stderr=ip_se,
                                 discriminator_objective=d_obj, generator_objective=g_obj,
                                 wall_clock=time.perf_counter() - tic))
        if np.isfinite(ip):
            if initial_ip is None:
                initial_ip = ip
            bad_streak = bad_streak + 1 if ip > cfg.divergence_factor * abs(initial_ip) else 0
            if bad_streak >= cfg.divergence_patience:
                diverged = True
                break
    return params.build(), {"records": records, "diverged": diverged}


# --- ablations ----------------------------------------------------------------

def joint_m_step_objective(params: _GmmParameters, q_old: GMM, clf, noise,
                           kl_penalty: bool):
    """Value and gradients of the joint surrogate objective for one Adam step.

    Objective: sum_i pi_i * (mean phi(x_i) [+ KL(q_i||q_old_i)]) [+ KL(pi||pi_old)]
    with x_i = mu_i + L_i u_i reparametrized on the fixed `noise` draws. The
    discrete latent is marginalized analytically, so the weight gradient is
    exact rather than score-function based.
    """
    d, k = params.d, params.k
    pis = params.weights()
    ls = params.chols()
    pi_old = q_old.coefficients.probabilities
    value = 0.0
    gmu = np.zeros_like(params.means)
    gl = np.zeros((k, d, d))
    dpi = np.zeros(k)
    for i in range(k):
        u = noise[i]
        xs = params.means[i] + u @ ls[i].T
        phi = clf.log_ratio(xs)
        dphi = clf.log_ratio_gradient(xs)
        c_i = float(phi.mean())
        gmu_i = dphi.mean(axis=0)
        gl_i = dphi.T @ u / len(u)
        if kl_penalty:
            old_c = q_old.components[i]
            sigma = ls[i] @ ls[i].T
            c_i += float(kl_gaussian(Gaussian(params.means[i], sigma), old_c))
            gmu_i = gmu_i + old_c.precision @ (params.means[i] - old_c.mean)
            l_inv = np.linalg.inv(ls[i])
            prec_new = l_inv.T @ l_inv
            gl_i = gl_i + (old_c.precision - prec_new) @ ls[i]
        value += pis[i] * c_i
        gmu[i] = pis[i] * gmu_i
        gl[i] = pis[i] * gl_i
        dpi[i] = c_i
    if kl_penalty:
        value += float(np.sum(pis * (np.log(pis) - np.log(pi_old))))
        dpi = dpi + np.log(pis) - np.log(pi_old) + 1.0
    gw = pis * (dpi - float(pis @ dpi))
    graw = params.chol_raw_grad(gl, ls)
    return value, [gw, gmu, graw]


def run_eim_ablation(data, init: GMM, cfg: EimGmmConfig, variant: str,
                     target_log_density: Optional[Callable] = None):
    """Ablations of the main loop: drop the extra KL, or replace the closed-form
    M-steps with joint Adam steps on the reparametrized objective."""
    if variant == "no_kl":
        return run_eim_gmm(data, init, cfg, target_log_density, kl_weight=0.0)
    if variant not in ("joint", "joint_no_kl"):
        raise InputError(f"unknown ablation variant {variant!r}")
    kl_penalty = variant == "joint"
    x = as_matrix(data, "data", init.dim)
    params = _GmmParameters(init)
    adam = Adam(params.parameters(), cfg.joint_learning_rate)
    clf = None
    records = []
    m = cfg.samples_per_component
    for t in range(cfg.iterations):
        tic = time.perf_counter()
        q_old = params.build()
        model_x, _ = q_old.sample(x.shape[0], rng_from_seed(cfg.seed, 0, t))
        clf, report = train_ratio(x, model_x, cfg.train, cfg.feature_map,
                                  seed=rng_from_seed(cfg.seed, 1, t), init=clf)
        phibar = np.full(params.k, np.nan)
        for step in range(cfg.joint_steps):
            rng = rng_from_seed(cfg.seed, 2, t, step)
            noise = [rng.standard_normal((m, params.d)) for _ in range(params.k)]
            _, grads = joint_m_step_objective(params, q_old, clf, noise, kl_penalty)
            adam.step(grads)
        model = params.build()
        weight_kl, comp_kls = mixture_kls(model, q_old)
        ip, ip_se = _trace_i_projection(model, target_log_density, cfg.eval_samples,
                                        rng_from_seed(cfg.seed, 4, t))
        records.append(IterationRecord(
            iteration=t, expected_logits=phibar, coefficient_losses=phibar,
            weight_kl=weight_kl, component_kls=comp_kls,
            rejected=np.zeros(params.k, dtype=bool), i_projection=ip,
            i_projection_stderr=ip_se, discriminator_val_bce=report.best_val_bce,
            wall_clock=time.perf_counter() - tic))
    return params.build(), records
