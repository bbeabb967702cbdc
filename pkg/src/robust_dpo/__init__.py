"""Distributionally robust DPO for log-linear policies on finite prompt/response spaces."""

from .core import (DomainError, FeatureMap, PolicyParams, PreferenceDataset, PreferenceSample,
                   empirical_covariance, feature_difference, min_eigenvalue)
from .policy import PolicyPair, action_probabilities, preference_score, project_params
from .prefgen import (MixMode, MixtureSpec, SamplingSpec, TabularReward, bt_preference_prob,
                      expected_policy_reward, mixture_reward, realizable_reward, sample_dataset)
from .losses import (LossConstants, dpo_gradient, dpo_hessian, empirical_dpo_loss, input_gradient_norm,
                     loss_constants, pointwise_dpo_loss)
from .robust import (RobustKind, RobustSpec, TiltResult, kl_dual_value, kl_worst_case_exact,
                     kldpo_loss_approx, kldpo_worst_kernel, wasserstein_dual_value, wdpo_loss_approx,
                     wdpo_pointwise_upper)
from .train import Method, TrainConfig, TrainReport, finite_difference_gradient, robust_gradient, train

__version__ = "0.1.0"
