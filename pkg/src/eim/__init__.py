"""Sample-based I-projection fitting of mixture models.

Fits Gaussian mixtures (and conditional mixtures of experts) so the model
stays inside the data: samples from both are fed to a logistic density-ratio
classifier, and closed-form KL trust-region updates (or penalized Adam steps
in the conditional case) move each component against the estimated log ratio.
Maximum-likelihood EM and the adversarial f-GAN serve as baselines.
"""

from .distributions import GMM, Categorical, Gaussian, KLResult, kl_categorical, kl_gaussian
from .estimators import EimGmm, EimMixtureOfExperts, EmGmm, FGanGmm, MlMixtureOfExperts
from .conditional import (CondEimConfig, MixtureOfExperts, init_moe_from_data,
                          moe_log_density, moe_sample, run_eim_moe, run_ml_moe)
from .gmm import (EimGmmConfig, GanConfig, IterationRecord, init_gmm_from_data,
                  run_eim_ablation, run_eim_gmm, run_em_gmm, run_fgan_gmm)
from .io import load_model, save_model
from .metrics import mc_i_projection, task_metrics, test_log_likelihood
from .more import (DualSolution, QuadraticSurrogate, TrustRegionConfig,
                   categorical_more_update, fit_surrogate, gaussian_more_update)
from .ratio import FeatureMap, MlpClassifier, TrainConfig, train_ratio
from .tasks import (TaskSpec, forward_kinematics, gen_obstacle_task,
                    gen_random_gmm_task, gen_robot_line_task)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
