"""Estimator-style wrappers so the fitting algorithms compose with sklearn idioms.

Constructors only store hyperparameters (get_params/set_params work as usual);
fit() builds the run config, initializes the model from data and dispatches to
the functional cores. Fitted state lives in `model_` and `history_`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin

from ._rng import rng_from_seed
from .conditional import CondEimConfig, init_moe_from_data, run_eim_moe, run_ml_moe
from .gmm import (EimGmmConfig, GanConfig, init_gmm_from_data, run_eim_ablation,
                  run_eim_gmm, run_em_gmm, run_fgan_gmm)
from .ratio import TrainConfig
from .validation import InputError, as_matrix

_EIM_VARIANTS = ("closed_form", "no_kl", "joint", "joint_no_kl")


class _MarginalDensityMixin:
    def sample(self, n, seed=0):
        self._check_fitted()
        return self.model_.sample(n, rng_from_seed(seed, 11))

    def score_samples(self, X):
        self._check_fitted()
        return self.model_.log_density(as_matrix(X, "X"))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def _check_fitted(self):
        if getattr(self, "model_", None) is None:
            raise InputError("estimator is not fitted")


class EimGmm(_MarginalDensityMixin, DensityMixin, BaseEstimator):
    """I-projection GMM fit (closed-form trust-region updates by default).

    `variant` selects the ablations: "no_kl" drops the bound's extra KL term,
    "joint"/"joint_no_kl" replace the closed-form M-steps with joint Adam steps.
    """

    def __init__(self, n_components=5, iterations=100, samples_per_component=1000,
                 component_epsilon=0.05, weight_epsilon=0.05, seed=0,
                 feature_map=None, resample_coefficients=False, update_weights=True,
                 variant="closed_form", joint_steps=10, joint_learning_rate=1e-3,
                 train_config=None, eval_samples=2000):
        self.n_components = n_components
        self.iterations = iterations
        self.samples_per_component = samples_per_component
        self.component_epsilon = component_epsilon
        self.weight_epsilon = weight_epsilon
        self.seed = seed
        self.feature_map = feature_map
        self.resample_coefficients = resample_coefficients
        self.update_weights = update_weights
        self.variant = variant
        self.joint_steps = joint_steps
        self.joint_learning_rate = joint_learning_rate
        self.train_config = train_config
        self.eval_samples = eval_samples

    def _config(self):
        return EimGmmConfig(
            iterations=self.iterations,
            samples_per_component=self.samples_per_component,
            component_epsilon=self.component_epsilon,
            weight_epsilon=self.weight_epsilon,
            train=self.train_config or TrainConfig(),
            seed=self.seed, feature_map=self.feature_map,
            resample_coefficients=self.resample_coefficients,
            update_weights=self.update_weights,
            joint_steps=self.joint_steps,
            joint_learning_rate=self.joint_learning_rate,
            eval_samples=self.eval_samples)

    def fit(self, X, y=None, target_log_density=None, init=None):
        if self.variant not in _EIM_VARIANTS:
            raise InputError(f"variant must be one of {_EIM_VARIANTS}")
        x = as_matrix(X, "X")
        init = init or init_gmm_from_data(x, self.n_components, self.seed)
        self.init_ = init
        cfg = self._config()
        if self.variant == "closed_form":
            self.model_, self.history_ = run_eim_gmm(x, init, cfg, target_log_density)
        else:
            self.model_, self.history_ = run_eim_ablation(x, init, cfg, self.variant,
                                                          target_log_density)
        return self


class EmGmm(_MarginalDensityMixin, DensityMixin, BaseEstimator):
    """Maximum-likelihood EM baseline (the M-projection counterpart)."""

    def __init__(self, n_components=5, iterations=100, covariance_floor=1e-6, seed=0):
        self.n_components = n_components
        self.iterations = iterations
        self.covariance_floor = covariance_floor
        self.seed = seed

    def fit(self, X, y=None, init=None):
        x = as_matrix(X, "X")
        init = init or init_gmm_from_data(x, self.n_components, self.seed)
        self.init_ = init
        self.model_, self.history_ = run_em_gmm(x, init, self.iterations,
                                                self.covariance_floor, self.seed)
        return self


class FGanGmm(_MarginalDensityMixin, DensityMixin, BaseEstimator):
    """Adversarial I-projection baseline (f-GAN / b-GAN objective)."""

    def __init__(self, n_components=5, iterations=5000, generator_learning_rate=1e-3,
                 discriminator_learning_rate=1e-3, batch_size=1000,
                 steps_per_alternation=1, hidden_sizes=(50, 50, 50), l2=1e-3,
                 seed=0, eval_samples=2000):
        self.n_components = n_components
        self.iterations = iterations
        self.generator_learning_rate = generator_learning_rate
        self.discriminator_learning_rate = discriminator_learning_rate
        self.batch_size = batch_size
        self.steps_per_alternation = steps_per_alternation
        self.hidden_sizes = hidden_sizes
        self.l2 = l2
        self.seed = seed
        self.eval_samples = eval_samples

    def fit(self, X, y=None, target_log_density=None, init=None):
        x = as_matrix(X, "X")
        init = init or init_gmm_from_data(x, self.n_components, self.seed)
        self.init_ = init
        cfg = GanConfig(generator_learning_rate=self.generator_learning_rate,
                        discriminator_learning_rate=self.discriminator_learning_rate,
                        steps_per_alternation=self.steps_per_alternation,
                        batch_size=self.batch_size, iterations=self.iterations,
                        seed=self.seed, hidden_sizes=tuple(self.hidden_sizes),
                        l2=self.l2, eval_samples=self.eval_samples)
        self.model_, self.history_ = run_fgan_gmm(x, init, cfg, target_log_density)
        return self


class _ConditionalMixin:
    def sample(self, X, n_per_context=1, seed=0):
        self._check_fitted()
        return self.model_.sample(as_matrix(X, "X"), rng_from_seed(seed, 11),
                                  n_per_context)

    def score_samples(self, X, y):
        self._check_fitted()
        return self.model_.log_density(as_matrix(X, "X"), as_matrix(y, "y"))

    def score(self, X, y):
        return float(np.mean(self.score_samples(X, y)))

    def predict(self, X):
        """Gating-weighted mean of the expert means at each context."""
        self._check_fitted()
        x = as_matrix(X, "X")
        probs = self.model_.gating_probs(x)
        out = np.zeros((x.shape[0], self.model_.d_x))
        for i in range(self.model_.n_components):
            mu, _ = self.model_.expert_params(i, x)
            out += probs[:, i:i + 1] * mu
        return out

    def _check_fitted(self):
        if getattr(self, "model_", None) is None:
            raise InputError("estimator is not fitted")


class _CondBase(_ConditionalMixin, BaseEstimator):
    def __init__(self, n_components=4, iterations=100, learning_rate=1e-3, beta1=0.5,
                 epochs_per_iteration=10, contexts_per_batch=256, samples_per_context=4,
                 hidden_sizes=(64, 64), init_sigma_scale=0.5, update_gating_first=True,
                 feature_map=None, train_config=None, seed=0):
        self.n_components = n_components
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.epochs_per_iteration = epochs_per_iteration
        self.contexts_per_batch = contexts_per_batch
        self.samples_per_context = samples_per_context
        self.hidden_sizes = hidden_sizes
        self.init_sigma_scale = init_sigma_scale
        self.update_gating_first = update_gating_first
        self.feature_map = feature_map
        self.train_config = train_config
        self.seed = seed

    def _config(self):
        return CondEimConfig(
            iterations=self.iterations, learning_rate=self.learning_rate,
            beta1=self.beta1, epochs_per_iteration=self.epochs_per_iteration,
            contexts_per_batch=self.contexts_per_batch,
            samples_per_context=self.samples_per_context,
            update_gating_first=self.update_gating_first,
            train=self.train_config or TrainConfig(),
            feature_map=self.feature_map, seed=self.seed)

    def _init_model(self, contexts, targets):
        return init_moe_from_data(contexts, targets, self.n_components,
                                  hidden_sizes=tuple(self.hidden_sizes),
                                  seed=self.seed,
                                  init_sigma_scale=self.init_sigma_scale)


class EimMixtureOfExperts(_CondBase):
    """Conditional EIM: fit(X=contexts, y=targets)."""

    def fit(self, X, y, init=None):
        ctx, tgt = as_matrix(X, "X"), as_matrix(y, "y")
        init = init or self._init_model(ctx, tgt)
        self.init_ = init
        self.model_, self.history_ = run_eim_moe(ctx, tgt, init, self._config())
        return self


class MlMixtureOfExperts(_CondBase):
    """Conditional maximum-likelihood baseline: fit(X=contexts, y=targets)."""

    def fit(self, X, y, init=None):
        ctx, tgt = as_matrix(X, "X"), as_matrix(y, "y")
        init = init or self._init_model(ctx, tgt)
        self.init_ = init
        self.model_, self.history_ = run_ml_moe(ctx, tgt, init, self._config())
        return self
