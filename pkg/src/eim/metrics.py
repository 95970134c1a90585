"""Evaluation metrics: MC I-projection, held-out likelihood, task scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._rng import rng_from_seed
from .conditional import MixtureOfExperts
from .distributions import GMM
from .tasks import TaskSpec, forward_kinematics, line_distance, trajectory_clearances
from .validation import InputError, as_matrix, check_count


@dataclass
class IProjectionEstimate:
    value: float
    stderr: float
    n: int
    n_excluded: int


def mc_i_projection(model, target_log_density, n, seed, contexts=None,
                    target_is_conditional=False) -> IProjectionEstimate:
    """Monte-Carlo estimate of KL(q||p): mean of log q - log p under model samples.

    Samples with a non-finite target log density are excluded and counted.
    For conditional models pass the evaluation `contexts`; the estimate then
    averages over one draw per context repetition.
    """
    if target_log_density is None:
        raise InputError("target density handle required for the I-projection")
    n = check_count(n, "n")
    rng = rng_from_seed(seed, 0) if np.isscalar(seed) else seed
    if contexts is None:
        x, _ = model.sample(n, rng)
        log_q = model.log_density(x)
        log_p = np.asarray(target_log_density(x), dtype=float)
    else:
        ctx = as_matrix(contexts, "contexts")
        reps = int(np.ceil(n / ctx.shape[0]))
        x, _ = model.sample(ctx, rng, n_per_context=reps)
        rep_ctx = np.repeat(ctx, reps, axis=0)
        x, rep_ctx = x[:n], rep_ctx[:n]
        log_q = model.log_density(rep_ctx, x)
        if target_is_conditional:
            log_p = np.asarray(target_log_density(rep_ctx, x), dtype=float)
        else:
            log_p = np.asarray(target_log_density(x), dtype=float)
    ok = np.isfinite(log_p)
    diffs = log_q[ok] - log_p[ok]
    if diffs.size == 0:
        raise InputError("target log density non-finite at every sample")
    stderr = float(diffs.std(ddof=1) / np.sqrt(diffs.size)) if diffs.size > 1 else np.inf
    return IProjectionEstimate(value=float(diffs.mean()), stderr=stderr,
                               n=int(diffs.size), n_excluded=int((~ok).sum()))


def test_log_likelihood(model, x, contexts=None) -> float:
    """Mean model log density over a held-out set (nats per sample)."""
    if contexts is None:
        return float(np.mean(model.log_density(as_matrix(x, "x"))))
    return float(np.mean(model.log_density(as_matrix(contexts, "contexts"),
                                           as_matrix(x, "x"))))


def task_metrics(model, task: TaskSpec, n, seed, config_hash="") -> dict:
    """Task-specific scores; returns {metric_name: value} plus bookkeeping keys."""
    n = check_count(n, "n")
    rng = rng_from_seed(seed, 1)
    out = {"n": n, "seed": seed, "config_hash": config_hash}
    if task.metric == "i_projection":
        est = mc_i_projection(model, task.target_log_density(), n, rng)
        out.update(i_projection=est.value, i_projection_stderr=est.stderr,
                   n_excluded=est.n_excluded)
    elif task.metric == "line_rmse":
        if not isinstance(model, GMM):
            raise InputError("line metric needs a marginal mixture model")
        x, _ = model.sample(n, rng)
        d = line_distance(forward_kinematics(x))
        out.update(line_rmse=float(np.sqrt(np.mean(d ** 2))),
                   line_mean_distance=float(d.mean()))
    elif task.metric == "success_rate":
        if not isinstance(model, MixtureOfExperts):
            raise InputError("obstacle metric needs a conditional model")
        ctx = task.test_context_set
        if ctx is None:
            raise InputError("task carries no held-out context set")
        x, _ = model.sample(ctx, rng, n_per_context=n)
        rep_ctx = np.repeat(ctx, n, axis=0)
        clear = trajectory_clearances(x, rep_ctx)
        success = np.all(clear > 0, axis=1)
        violation = np.any(clear < 0, axis=1)
        out.update(success_rate=float(success.mean()),
                   clearance_violation_rate=float(violation.mean()))
    else:
        raise InputError(f"task {task.name!r} has no supported metric handle")
    return out


def metric_rows(method, task_name, seed, metrics: dict):
    """Flatten a metric record into (method, task, seed, metric, value) rows."""
    skip = {"n", "seed", "config_hash"}
    return [(method, task_name, seed, k, v) for k, v in metrics.items()
            if k not in skip]
