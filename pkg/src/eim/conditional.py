"""Conditional I-projection: Gaussian mixtures of experts with network gating.

Experts map a context y to a Gaussian (mean plus Cholesky factor with
log-parameterized diagonal); the gating net maps y to softmax probabilities.
The density-ratio classifier discriminates joint (x, y) pairs, with one model
sample drawn per data context so the conditional and joint log ratios agree.
Updates are plain Adam on the penalized objectives: the gating loss carries
the closed-form categorical KL to the snapshot, each expert loss carries the
closed-form per-context Gaussian KL, reparametrized samples feed the logit
term, and expert batches are importance-weighted by gating probability over
prior so rarely used experts still receive gradient signal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from ._rng import as_generator, rng_from_seed
from .ratio import Adam, FeatureMap, Mlp, TrainConfig, train_ratio
from .validation import InputError, NumericalError, as_matrix, check_count

_LOG_2PI = np.log(2.0 * np.pi)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class MixtureOfExperts:
    """Conditional GMM q(x|y) with neural gating and per-expert Gaussian heads."""

    def __init__(self, gating: Mlp, experts: list, d_y: int, d_x: int):
        if gating.layer_sizes[-1] != len(experts):
            raise InputError("gating output width must equal the number of experts")
        out_width = 2 * d_x + d_x * (d_x - 1) // 2
        for net in experts:
            if net.layer_sizes[-1] != out_width:
                raise InputError(f"expert output width must be {out_width}")
        self.gating = gating
        self.experts = list(experts)
        self.d_y = int(d_y)
        self.d_x = int(d_x)

    @property
    def n_components(self) -> int:
        return len(self.experts)

    def copy(self) -> "MixtureOfExperts":
        return MixtureOfExperts(self.gating.copy(), [e.copy() for e in self.experts],
                                self.d_y, self.d_x)

    def gating_probs(self, contexts) -> np.ndarray:
        y = as_matrix(contexts, "contexts", self.d_y)
        return _softmax(self.gating.forward(y))

    def _split_outputs(self, out, contexts=None):
        d = self.d_x
        n = out.shape[0]
        mu = out[:, :d]
        logd = out[:, d:2 * d]
        if not np.all(np.isfinite(out)) or np.any(logd > 40):
            bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1) | (logd > 40).any(axis=1))
            ctx = None if contexts is None else np.asarray(contexts)[bad[:5]]
            raise NumericalError(f"expert emitted unusable covariance at {len(bad)} "
                                 f"contexts; first offenders: {ctx}")
        chol = np.zeros((n, d, d))
        il, jl = np.tril_indices(d, -1)
        chol[:, il, jl] = out[:, 2 * d:]
        idx = np.arange(d)
        chol[:, idx, idx] = np.exp(logd)
        return mu, chol

    def expert_params(self, i, contexts):
        """(means, cholesky factors) of expert i at the given contexts."""
        y = as_matrix(contexts, "contexts", self.d_y)
        return self._split_outputs(self.experts[i].forward(y), y)

    def component_log_densities(self, contexts, x) -> np.ndarray:
        y = as_matrix(contexts, "contexts", self.d_y)
        xs = as_matrix(x, "x", self.d_x)
        cols = []
        for i in range(self.n_components):
            mu, chol = self.expert_params(i, y)
            cols.append(_gaussian_log_density_batch(xs, mu, chol))
        return np.stack(cols, axis=1)

    def log_density(self, contexts, x) -> np.ndarray:
        """log q(x|y) for aligned rows of contexts and x."""
        single = np.asarray(x).ndim == 1
        comp = self.component_log_densities(contexts, x)
        logits = self.gating.forward(as_matrix(contexts, "contexts", self.d_y))
        logp = logits - logsumexp(logits, axis=1, keepdims=True)
        out = logsumexp(comp + logp, axis=1)
        return out[0] if single else out

    def sample(self, contexts, rng, n_per_context=1):
        """Draw n_per_context x's for every context row; returns (x, labels).

        Rows are grouped per context: output row i*n_per_context + s belongs
        to context row i.
        """
        rng = as_generator(rng)
        y = as_matrix(contexts, "contexts", self.d_y)
        n = y.shape[0]
        reps = check_count(n_per_context, "n_per_context")
        probs = self.gating_probs(y)
        cum = np.cumsum(probs, axis=1)
        draws = rng.random((n, reps))
        labels = (draws[:, :, None] > cum[:, None, :]).sum(axis=2)
        out = np.zeros((n, reps, self.d_x))
        u = rng.standard_normal((n, reps, self.d_x))
        for i in range(self.n_components):
            rows = np.flatnonzero((labels == i).any(axis=1))
            if rows.size == 0:
                continue
            mu, chol = self.expert_params(i, y[rows])
            xs = mu[:, None, :] + np.einsum("bij,bsj->bsi", chol, u[rows])
            mask = labels[rows] == i
            sel = np.where(mask[:, :, None], xs, out[rows])
            out[rows] = sel
        return out.reshape(n * reps, self.d_x), labels.reshape(-1)

    def to_document(self):
        def net_doc(net):
            return {"layer_sizes": list(net.layer_sizes), "activation": net.activation,
                    "weights": [w.tolist() for w in net.weights],
                    "biases": [b.tolist() for b in net.biases]}
        return {"version": 1, "type": "mixture_of_experts",
                "d_y": self.d_y, "d_x": self.d_x,
                "gating": net_doc(self.gating),
                "experts": [net_doc(e) for e in self.experts]}

    @classmethod
    def from_document(cls, doc):
        def net_from(d):
            return Mlp(d["layer_sizes"], d["activation"],
                       weights=d["weights"], biases=d["biases"])
        return cls(net_from(doc["gating"]), [net_from(d) for d in doc["experts"]],
                   doc["d_y"], doc["d_x"])


def _gaussian_log_density_batch(x, mu, chol):
    """Row-wise log N(x_i; mu_i, L_i L_i^T)."""
    diff = (x - mu)[:, :, None]
    z = np.linalg.solve(chol, diff)[:, :, 0]
    idx = np.arange(x.shape[1])
    logdet = 2.0 * np.log(chol[:, idx, idx]).sum(axis=1)
    return -0.5 * (x.shape[1] * _LOG_2PI + logdet + np.sum(z * z, axis=1))


def _batch_gaussian_kl(mu_new, chol_new, mu_old, chol_old):
    """Row-wise KL(new||old) plus the pieces reused by the gradients."""
    d = mu_new.shape[1]
    inv_old = np.linalg.inv(chol_old)
    prec_old = np.einsum("bji,bjk->bik", inv_old, inv_old)
    m = np.einsum("bij,bjk->bik", inv_old, chol_new)
    trace = np.einsum("bij,bij->b", m, m)
    diff = mu_new - mu_old
    s = np.einsum("bij,bj->bi", inv_old, diff)
    maha = np.sum(s * s, axis=1)
    idx = np.arange(d)
    logdet_old = 2.0 * np.log(chol_old[:, idx, idx]).sum(axis=1)
    logdet_new = 2.0 * np.log(chol_new[:, idx, idx]).sum(axis=1)
    kl = 0.5 * (trace + maha - d + logdet_old - logdet_new)
    return kl, prec_old


def moe_sample(model: MixtureOfExperts, contexts, n_per_context=1, seed=0):
    return model.sample(contexts, as_generator(seed), n_per_context)


def moe_log_density(model: MixtureOfExperts, contexts, x):
    return model.log_density(contexts, x)


def init_moe_from_data(contexts, targets, n_components, hidden_sizes=(64, 64),
                       activation="relu", seed=0, init_sigma_scale=0.5) -> MixtureOfExperts:
    """Experts anchored at random data targets with data-scaled covariance.

    Last layers start at zero so the gating is exactly uniform and each expert
    is initially constant; distinct anchors break the expert symmetry.
    """
    y = as_matrix(contexts, "contexts")
    x = as_matrix(targets, "targets")
    k = check_count(n_components, "n_components")
    rng = rng_from_seed(seed, 7)
    d_y, d_x = y.shape[1], x.shape[1]
    out_width = 2 * d_x + d_x * (d_x - 1) // 2
    log_sigma = np.log(np.maximum(x.std(axis=0) * init_sigma_scale, 1e-3))
    anchors = x[rng.choice(x.shape[0], size=k, replace=x.shape[0] < k)]
    experts = []
    for i in range(k):
        net = Mlp([d_y, *hidden_sizes, out_width], activation, rng=rng)
        net.weights[-1][:] = 0.0
        net.biases[-1][:d_x] = anchors[i]
        net.biases[-1][d_x:2 * d_x] = log_sigma
        experts.append(net)
    gating = Mlp([d_y, *hidden_sizes, k], activation, rng=rng)
    gating.weights[-1][:] = 0.0
    gating.biases[-1][:] = 0.0
    return MixtureOfExperts(gating, experts, d_y, d_x)


@dataclass
class CondEimConfig:
    iterations: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_per_iteration: int = 10
    contexts_per_batch: int = 256
    samples_per_context: int = 4
    pure_penalty: bool = True
    update_gating_first: bool = True
    gating_normalize_by_prior: bool = False
    prior_floor: float = 1e-6
    train: TrainConfig = field(default_factory=TrainConfig)
    feature_map: Optional[FeatureMap] = None
    seed: int = 0

    def __post_init__(self):
        check_count(self.iterations, "iterations")
        check_count(self.epochs_per_iteration, "epochs_per_iteration")
        check_count(self.samples_per_context, "samples_per_context")
        if not self.pure_penalty:
            raise InputError("only the pure-penalty conditional update is supported")


@dataclass
class CondIterationRecord:
    iteration: int
    gating_kl: float
    component_kls: np.ndarray
    train_log_likelihood: float
    discriminator_val_bce: float
    wall_clock: float

    CSV_EXCLUDE = ("wall_clock",)


def gating_step_gradients(model, snapshot, clf, contexts, phibar, cfg):
    """Loss and gating-net gradients on one context batch given fixed phibar."""
    y = contexts
    logits, acts = model.gating.forward_cached(y)
    pis = _softmax(logits)
    logp = np.log(np.maximum(pis, 1e-300))
    logp_old = np.log(np.maximum(snapshot.gating_probs(y), 1e-300))
    b = y.shape[0]
    score = phibar
    if cfg.gating_normalize_by_prior:
        prior = np.maximum(pis.mean(axis=0), cfg.prior_floor)
        score = phibar / prior
    dl_dpi = score + logp - logp_old + 1.0
    loss = float(np.mean(np.sum(pis * (score + logp - logp_old), axis=1)))
    inner = np.sum(pis * dl_dpi, axis=1, keepdims=True)
    dlogits = pis * (dl_dpi - inner) / b
    dws, dbs, _ = model.gating.backward(acts, dlogits)
    return loss, dws + dbs


def expert_step_gradients(model, snapshot, clf, i, contexts, weights, noise):
    """Loss and expert-i gradients on one batch: logit term plus KL penalty."""
    y = contexts
    b, s = noise.shape[0], noise.shape[1]
    d = model.d_x
    out, acts = model.experts[i].forward_cached(y)
    mu, chol = model._split_outputs(out, y)
    mu_old, chol_old = snapshot.expert_params(i, y)
    xs = mu[:, None, :] + np.einsum("bij,bsj->bsi", chol, noise)
    flat = xs.reshape(b * s, d)
    rep_y = np.repeat(y, s, axis=0)
    phi = clf.log_ratio(flat, context=rep_y).reshape(b, s)
    dphi = clf.log_ratio_gradient(flat, context=rep_y).reshape(b, s, d)
    kl, prec_old = _batch_gaussian_kl(mu, chol, mu_old, chol_old)
    per_ctx = phi.mean(axis=1) + kl
    loss = float(np.mean(weights * per_ctx))
    wb = (weights / b)[:, None]
    dmu = wb * (dphi.mean(axis=1)
                + np.einsum("bij,bj->bi", prec_old, mu - mu_old))
    inv_new_t = np.linalg.inv(np.transpose(chol, (0, 2, 1)))
    dchol = wb[:, :, None] * (np.einsum("bsd,bse->bde", dphi, noise) / s
                              + np.einsum("bij,bjk->bik", prec_old, chol) - inv_new_t)
    dout = np.zeros_like(out)
    dout[:, :d] = dmu
    idx = np.arange(d)
    dout[:, d:2 * d] = dchol[:, idx, idx] * chol[:, idx, idx]
    il, jl = np.tril_indices(d, -1)
    dout[:, 2 * d:] = dchol[:, il, jl]
    dws, dbs, _ = model.experts[i].backward(acts, dout)
    return loss, dws + dbs


def run_eim_moe(contexts, targets, init: MixtureOfExperts, cfg: CondEimConfig):
    """Conditional EIM outer loop; returns the trained model and trace."""
    y = as_matrix(contexts, "contexts", init.d_y)
    x = as_matrix(targets, "targets", init.d_x)
    if y.shape[0] != x.shape[0]:
        raise InputError("contexts and targets must be row-aligned")
    model = init.copy()
    clf = None
    adam_gating = Adam(model.gating.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2)
    adam_experts = [Adam(e.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2)
                    for e in model.experts]
    records = []
    k = model.n_components
    n = y.shape[0]
    for t in range(cfg.iterations):
        tic = time.perf_counter()
        snapshot = model.copy()
        model_x, _ = snapshot.sample(y, rng_from_seed(cfg.seed, 0, t))
        clf, report = train_ratio(x, model_x, cfg.train, cfg.feature_map,
                                  seed=rng_from_seed(cfg.seed, 1, t),
                                  p_context=y, q_context=y, init=clf)

        def phibar_on(batch_y, rng):
            cols = np.zeros((batch_y.shape[0], k))
            for i in range(k):
                mu, chol = snapshot.expert_params(i, batch_y)
                u = rng.standard_normal((batch_y.shape[0], cfg.samples_per_context,
                                         model.d_x))
                xs = mu[:, None, :] + np.einsum("bij,bsj->bsi", chol, u)
                flat = xs.reshape(-1, model.d_x)
                rep = np.repeat(batch_y, cfg.samples_per_context, axis=0)
                cols[:, i] = clf.log_ratio(flat, context=rep).reshape(
                    batch_y.shape[0], -1).mean(axis=1)
            return cols

        def gating_pass(rng):
            for _ in range(cfg.epochs_per_iteration):
                order = rng.permutation(n)
                for start in range(0, n, cfg.contexts_per_batch):
                    yb = y[order[start:start + cfg.contexts_per_batch]]
                    phibar = phibar_on(yb, rng)
                    _, grads = gating_step_gradients(model, snapshot, clf, yb, phibar, cfg)
                    adam_gating.step(grads)

        def expert_pass():
            for i in range(k):
                rng_i = rng_from_seed(cfg.seed, 3, t, i)
                for _ in range(cfg.epochs_per_iteration):
                    order = rng_i.permutation(n)
                    for start in range(0, n, cfg.contexts_per_batch):
                        yb = y[order[start:start + cfg.contexts_per_batch]]
                        pis = model.gating_probs(yb)
                        w = pis[:, i] / np.maximum(pis[:, i].mean(), cfg.prior_floor)
                        noise = rng_i.standard_normal(
                            (yb.shape[0], cfg.samples_per_context, model.d_x))
                        _, grads = expert_step_gradients(model, snapshot, clf, i,
                                                         yb, w, noise)
                        adam_experts[i].step(grads)

        if cfg.update_gating_first:
            gating_pass(rng_from_seed(cfg.seed, 2, t))
            expert_pass()
        else:
            expert_pass()
            gating_pass(rng_from_seed(cfg.seed, 2, t))

        pis = model.gating_probs(y)
        pis_old = snapshot.gating_probs(y)
        gating_kl = float(np.mean(np.sum(
            pis * (np.log(np.maximum(pis, 1e-300))
                   - np.log(np.maximum(pis_old, 1e-300))), axis=1)))
        comp_kls = np.zeros(k)
        for i in range(k):
            mu, chol = model.expert_params(i, y)
            mu_o, chol_o = snapshot.expert_params(i, y)
            kl, _ = _batch_gaussian_kl(mu, chol, mu_o, chol_o)
            comp_kls[i] = kl.mean()
        if not np.isfinite(gating_kl) or not np.all(np.isfinite(comp_kls)):
            raise NumericalError(f"non-finite KL in trace at iteration {t}")
        records.append(CondIterationRecord(
            iteration=t, gating_kl=gating_kl, component_kls=comp_kls,
            train_log_likelihood=float(model.log_density(y, x).mean()),
            discriminator_val_bce=report.best_val_bce,
            wall_clock=time.perf_counter() - tic))
    return model, records


def run_ml_moe(contexts, targets, init: MixtureOfExperts, cfg: CondEimConfig,
               test_contexts=None, test_targets=None):
    """Conditional maximum-likelihood baseline: Adam on the mixture log density."""
    y = as_matrix(contexts, "contexts", init.d_y)
    x = as_matrix(targets, "targets", init.d_x)
    model = init.copy()
    params = model.gating.parameters()
    for e in model.experts:
        params = params + e.parameters()
    adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2)
    n, d = x.shape[0], model.d_x
    k = model.n_components
    records = []
    rng = rng_from_seed(cfg.seed, 5)
    for t in range(cfg.iterations):
        tic = time.perf_counter()
        for _ in range(cfg.epochs_per_iteration):
            order = rng.permutation(n)
            for start in range(0, n, cfg.contexts_per_batch):
                idx = order[start:start + cfg.contexts_per_batch]
                yb, xb = y[idx], x[idx]
                b = len(idx)
                logits, acts_g = model.gating.forward_cached(yb)
                logp = logits - logsumexp(logits, axis=1, keepdims=True)
                comp_terms = []
                caches = []
                for i in range(k):
                    out, acts = model.experts[i].forward_cached(yb)
                    mu, chol = model._split_outputs(out, yb)
                    comp_terms.append(_gaussian_log_density_batch(xb, mu, chol))
                    caches.append((out, acts, mu, chol))
                comp = np.stack(comp_terms, axis=1)
                joint = comp + logp
                lse = logsumexp(joint, axis=1)
                resp = np.exp(joint - lse[:, None])
                # gating gradient of -mean(lse)
                dlogp = -resp / b
                dlogits = dlogp - np.exp(logp) * dlogp.sum(axis=1, keepdims=True)
                gws, gbs, _ = model.gating.backward(acts_g, dlogits)
                grads = gws + gbs
                for i in range(k):
                    out, acts, mu, chol = caches[i]
                    coef = (-resp[:, i] / b)[:, None]
                    diff = (xb - mu)[:, :, None]
                    a = np.linalg.solve(
                        np.einsum("bij,bkj->bik", chol, chol), diff)[:, :, 0]
                    dmu = coef * a
                    inv_new_t = np.linalg.inv(np.transpose(chol, (0, 2, 1)))
                    dchol = coef[:, :, None] * (
                        np.einsum("bi,bj->bij", a, np.einsum("bj,bjk->bk", a, chol))
                        - inv_new_t)
                    dout = np.zeros_like(out)
                    dout[:, :d] = dmu
                    didx = np.arange(d)
                    dout[:, d:2 * d] = dchol[:, didx, didx] * chol[:, didx, didx]
                    il, jl = np.tril_indices(d, -1)
                    dout[:, 2 * d:] = dchol[:, il, jl]
                    ews, ebs, _ = model.experts[i].backward(acts, dout)
                    grads = grads + ews + ebs
                adam.step(grads)
        rec = {"iteration": t,
               "train_log_likelihood": float(model.log_density(y, x).mean()),
               "wall_clock": time.perf_counter() - tic}
        if test_contexts is not None:
            rec["test_log_likelihood"] = float(
                model.log_density(test_contexts, test_targets).mean())
        records.append(rec)
    return model, records
