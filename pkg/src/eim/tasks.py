"""Synthetic tasks with ground-truth handles.

Three generators: random GMM targets (analytic density attached), planar-robot
line reaching (expert joint configurations produced by damped-least-squares
inverse kinematics; the real expert procedure is unknown, this is a stand-in),
and context-conditional obstacle avoidance (via-point trajectories realized as
natural cubic splines, eight above/below modes per context).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from ._rng import rng_from_seed
from .distributions import GMM, Categorical, Gaussian
from .ratio import FeatureMap
from .validation import InputError, check_count

LINE_X = 7.0
LINE_HALF_SPAN = 4.0
N_LINKS = 10
OBSTACLE_X = np.array([0.25, 0.5, 0.75])
# 0.05 reproduces the imperfect-expert regime (roughly 13% of sampled expert
# trajectories collide); at 0.1 the obstacles cover so much of the transit
# corridor that even midpoint via-points collide almost half the time
OBSTACLE_RADIUS = 0.05
TRAJ_START = (0.0, 0.5)
TRAJ_GOAL = (1.0, 0.5)
SPLINE_CHECK_POINTS = 200


@dataclass
class TaskSpec:
    """Dataset plus the handles evaluation needs (analytic density, predicates)."""

    name: str
    dim: int
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray
    seed: int
    context_dim: int = 0
    train_contexts: Optional[np.ndarray] = None
    test_contexts: Optional[np.ndarray] = None
    validation_contexts: Optional[np.ndarray] = None
    test_context_set: Optional[np.ndarray] = None
    target: Optional[GMM] = None
    feature_map: Optional[FeatureMap] = None
    metric: Optional[str] = None
    constants: dict = field(default_factory=dict)

    def target_log_density(self):
        return None if self.target is None else self.target.log_density


# --- random GMM targets -------------------------------------------------------

def gen_random_gmm_task(dim, components, seed, train_n=10000, test_n=5000,
                        validation_n=5000) -> TaskSpec:
    """Random target GMM: means U[-5,5]^d, covariance AA^T + I/2, Dirichlet weights."""
    dim = check_count(dim, "dim")
    components = check_count(components, "components")
    rng = rng_from_seed(seed, 0)
    comps = []
    for _ in range(components):
        mean = rng.uniform(-5.0, 5.0, size=dim)
        a = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        comps.append(Gaussian(mean, a @ a.T + 0.5 * np.eye(dim)))
    w = rng.dirichlet(np.full(components, 5.0))
    w = np.maximum(w, 0.05)
    target = GMM(comps, Categorical(w / w.sum()))
    splits = []
    for part, n in enumerate((train_n, test_n, validation_n)):
        x, _ = target.sample(n, rng_from_seed(seed, 1, part))
        splits.append(x)
    return TaskSpec(name="random-gmm", dim=dim, train=splits[0], test=splits[1],
                    validation=splits[2], seed=seed, target=target,
                    metric="i_projection",
                    constants={"components": components, "dim": dim})


# --- planar robot line reaching -----------------------------------------------

def forward_kinematics(angles) -> np.ndarray:
    """End-effector position of the unit-link planar chain (cumulative angles)."""
    a = np.atleast_2d(np.asarray(angles, dtype=float))
    if a.shape[1] != N_LINKS:
        raise InputError(f"expected {N_LINKS} joint angles, got {a.shape[1]}")
    c = np.cumsum(a, axis=1)
    pos = np.stack([np.cos(c).sum(axis=1), np.sin(c).sum(axis=1)], axis=1)
    return pos[0] if np.asarray(angles).ndim == 1 else pos


def _fk_jacobian(angles) -> np.ndarray:
    c = np.cumsum(angles, axis=1)
    sin_c, cos_c = np.sin(c), np.cos(c)
    # d pos / d theta_k sums the link vectors from k on
    jx = -np.cumsum(sin_c[:, ::-1], axis=1)[:, ::-1]
    jy = np.cumsum(cos_c[:, ::-1], axis=1)[:, ::-1]
    return np.stack([jx, jy], axis=1)  # (n, 2, N_LINKS)


def end_effector_feature_map() -> FeatureMap:
    return FeatureMap(name="end_effector", fn=lambda x: forward_kinematics(x),
                      width=2, jacobian=lambda x, context=None: _fk_jacobian(
                          np.atleast_2d(np.asarray(x, dtype=float))))


def line_distance(points) -> np.ndarray:
    """Distance from (x, y) points to the segment x=LINE_X, |y| <= LINE_HALF_SPAN."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    dx = p[:, 0] - LINE_X
    dy = np.maximum(np.abs(p[:, 1]) - LINE_HALF_SPAN, 0.0)
    out = np.hypot(dx, dy)
    return out[0] if np.asarray(points).ndim == 1 else out


def damped_least_squares_ik(targets, initial_angles, damping=0.5, steps=200,
                            tolerance=1e-2):
    """Batched DLS iterations toward per-row 2-D targets; returns (angles, ok)."""
    theta = np.array(initial_angles, dtype=float, copy=True)
    tgt = np.atleast_2d(np.asarray(targets, dtype=float))
    active = np.ones(len(theta), dtype=bool)
    lam2 = damping ** 2
    for _ in range(steps):
        pos = forward_kinematics(theta[active])
        err = tgt[active] - pos
        done = np.linalg.norm(err, axis=1) <= tolerance
        if done.any():
            idx = np.flatnonzero(active)
            active[idx[done]] = False
            if not active.any():
                break
            pos, err = pos[~done], err[~done]
        jac = _fk_jacobian(theta[active])
        jjt = np.einsum("nij,nkj->nik", jac, jac)
        jjt[:, 0, 0] += lam2
        jjt[:, 1, 1] += lam2
        step = np.einsum("nji,nj->ni", jac, np.linalg.solve(jjt, err[:, :, None])[:, :, 0])
        theta[active] += step
    final_err = np.linalg.norm(np.atleast_2d(tgt) - forward_kinematics(theta), axis=1)
    return theta, final_err <= tolerance


def gen_robot_line_task(n, seed, test_n=None, validation_n=None, damping=0.5,
                        ik_steps=200, tolerance=1e-2) -> TaskSpec:
    """Expert joint configurations reaching the vertical target line."""
    n = check_count(n, "n")
    test_n = n // 2 if test_n is None else test_n
    validation_n = n // 2 if validation_n is None else validation_n
    splits = []
    for part, count in enumerate((n, test_n, validation_n)):
        rng = rng_from_seed(seed, 2, part)
        need = count
        accepted = []
        attempts = 0
        while need > 0:
            batch = max(need, 64)
            ys = rng.uniform(-LINE_HALF_SPAN, LINE_HALF_SPAN, size=batch)
            tgt = np.stack([np.full(batch, LINE_X), ys], axis=1)
            theta0 = rng.normal(0.0, 0.5, size=(batch, N_LINKS))
            theta, ok = damped_least_squares_ik(tgt, theta0, damping, ik_steps, tolerance)
            accepted.append(theta[ok][:need])
            need -= len(accepted[-1])
            attempts += batch
            if attempts > 100 * count and need > 0:
                raise InputError("inverse kinematics acceptance rate below 1%")
        splits.append(np.concatenate(accepted, axis=0))
    return TaskSpec(name="robot-line", dim=N_LINKS, train=splits[0], test=splits[1],
                    validation=splits[2], seed=seed,
                    feature_map=end_effector_feature_map(), metric="line_rmse",
                    constants={"line_x": LINE_X, "half_span": LINE_HALF_SPAN,
                               "damping": damping, "tolerance": tolerance})


# --- obstacle avoidance ---------------------------------------------------------

def trajectory_heights(via_points, n_points=SPLINE_CHECK_POINTS):
    """Natural cubic spline heights through start, three via points, goal."""
    v = np.atleast_2d(np.asarray(via_points, dtype=float))
    knots_x = np.concatenate([[TRAJ_START[0]], OBSTACLE_X, [TRAJ_GOAL[0]]])
    ys = np.concatenate([np.full((len(v), 1), TRAJ_START[1]), v,
                         np.full((len(v), 1), TRAJ_GOAL[1])], axis=1)
    spline = CubicSpline(knots_x, ys.T, bc_type="natural")
    grid = np.linspace(0.0, 1.0, n_points)
    return grid, spline(grid).T  # (n, n_points)


def trajectory_clearances(via_points, obstacle_heights, n_points=SPLINE_CHECK_POINTS):
    """Per-obstacle signed clearance: min spline distance minus the radius."""
    v = np.atleast_2d(np.asarray(via_points, dtype=float))
    ctx = np.atleast_2d(np.asarray(obstacle_heights, dtype=float))
    if ctx.shape[0] == 1 and v.shape[0] > 1:
        ctx = np.broadcast_to(ctx, (v.shape[0], 3))
    grid, heights = trajectory_heights(v, n_points)
    dx = grid[None, None, :] - OBSTACLE_X[None, :, None]
    dy = heights[:, None, :] - ctx[:, :, None]
    dist = np.sqrt(dx * dx + dy * dy)
    return dist.min(axis=2) - OBSTACLE_RADIUS


def trajectory_success(via_points, obstacle_heights, n_points=SPLINE_CHECK_POINTS):
    """True when every checked point clears every obstacle (distance > radius)."""
    return np.all(trajectory_clearances(via_points, obstacle_heights, n_points) > 0,
                  axis=1)


def clearance_feature_map() -> FeatureMap:
    return FeatureMap(name="obstacle_clearance",
                      fn=lambda x, context: trajectory_clearances(x, context),
                      width=3)


def sample_via_points(obstacle_heights, n, rng):
    """Above/below each obstacle with probability proportional to the open gap."""
    ctx = np.asarray(obstacle_heights, dtype=float).reshape(3)
    top_gap = 1.0 - (ctx + OBSTACLE_RADIUS)
    bottom_gap = ctx - OBSTACLE_RADIUS
    p_above = top_gap / (top_gap + bottom_gap)
    above = rng.random((n, 3)) < p_above
    mid = np.where(above, (ctx + OBSTACLE_RADIUS + 1.0) / 2.0,
                   (ctx - OBSTACLE_RADIUS) / 2.0)
    gap = np.where(above, top_gap, bottom_gap)
    via = rng.normal(mid, gap / 4.0)
    return np.clip(via, 0.02, 0.98)


def gen_obstacle_task(n_contexts, samples_per_context, seed, test_contexts=None,
                      validation_contexts=None) -> TaskSpec:
    """Context-conditional via-point dataset (contexts = obstacle heights)."""
    n_contexts = check_count(n_contexts, "n_contexts")
    samples_per_context = check_count(samples_per_context, "samples_per_context")
    test_contexts = max(1, n_contexts // 2) if test_contexts is None else test_contexts
    validation_contexts = (max(1, n_contexts // 2) if validation_contexts is None
                           else validation_contexts)
    splits = []
    context_sets = []
    for part, count in enumerate((n_contexts, test_contexts, validation_contexts)):
        rng = rng_from_seed(seed, 3, part)
        ctx = rng.uniform(0.2, 0.8, size=(count, 3))
        vias = np.concatenate([sample_via_points(c, samples_per_context, rng)
                               for c in ctx], axis=0)
        rep = np.repeat(ctx, samples_per_context, axis=0)
        splits.append((rep, vias))
        context_sets.append(ctx)
    (train_ctx, train_v), (test_ctx, test_v), (val_ctx, val_v) = splits
    return TaskSpec(name="obstacle", dim=3, context_dim=3,
                    train=train_v, test=test_v, validation=val_v,
                    train_contexts=train_ctx, test_contexts=test_ctx,
                    validation_contexts=val_ctx, test_context_set=context_sets[1],
                    seed=seed, feature_map=clearance_feature_map(),
                    metric="success_rate",
                    constants={"n_contexts": n_contexts,
                               "samples_per_context": samples_per_context,
                               "radius": OBSTACLE_RADIUS})


_FEATURE_MAPS = {
    "end_effector": end_effector_feature_map,
    "obstacle_clearance": clearance_feature_map,
}


def feature_map_from_name(name: str) -> FeatureMap:
    if name not in _FEATURE_MAPS:
        raise InputError(f"unknown feature map {name!r}; known: {sorted(_FEATURE_MAPS)}")
    return _FEATURE_MAPS[name]()
