"""The non-robust DPO loss family for log-linear policies.

Everything reduces to the score h = (theta - theta_ref)^T x with
x = psi(s, a1) - psi(s, a2):

    l(z)        = softplus(-(2y - 1) * beta * h)
    grad_theta  = -beta * res * x,             res = y*sig(-beta h) - (1-y)*sig(beta h)
    hess_theta  = beta^2 sig(beta h) sig(-beta h) x x^T
    grad_x      = -beta * res * (theta - theta_ref)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DomainError, FeatureMap, PreferenceDataset, PreferenceSample, feature_difference, feature_differences, seq_sum, seq_sum_outer
from .policy import PolicyPair, preference_score
from .prefgen import sigmoid, softplus


@dataclass(frozen=True)
class LossConstants:
    """gamma: curvature floor of the pointwise loss on the parameter ball.
    K: uniform bound on the pointwise loss; L is the same bound under its
    other name."""

    beta: float
    B: float
    gamma: float
    K: float
    L: float

    def recomputed(self) -> "LossConstants":
        return loss_constants(self.beta, self.B)


def loss_constants(beta: float, B: float) -> LossConstants:
    if not beta > 0 or B < 0:
        raise DomainError(f"need beta > 0 and B >= 0, got beta={beta}, B={B}")
    t = 4.0 * beta * B
    e = math.exp(-t)  # e^{t}/(1+e^{t})^2 == e^{-t}/(1+e^{-t})^2, overflow-free
    gamma = beta * beta * e / (1.0 + e) ** 2
    K = softplus(t)
    return LossConstants(beta=beta, B=B, gamma=gamma, K=K, L=K)


# -- array kernels (rows are samples) ---------------------------------------

def signed_margin(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """beta * h oriented towards the preferred response."""
    return (2 * labels - 1) * (beta * (x @ delta))


def pointwise_losses(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return softplus(-signed_margin(delta, beta, x, labels))


def residuals(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """y*sig(-beta h) - (1-y)*sig(beta h), i.e. y - sig(beta h) without cancellation."""
    bh = beta * (x @ delta)
    return np.where(labels == 1, sigmoid(-bh), -sigmoid(bh))


def loss_gradients(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample theta-gradients, shape (n, d)."""
    return (-beta * residuals(delta, beta, x, labels))[:, None] * x


def input_gradient_norms(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return beta * np.abs(residuals(delta, beta, x, labels)) * float(np.linalg.norm(delta))


def dpo_objective(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> float:
    return seq_sum(pointwise_losses(delta, beta, x, labels)) / x.shape[0]


def dpo_objective_gradient(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return seq_sum(loss_gradients(delta, beta, x, labels)) / x.shape[0]


def _nonempty(ds: PreferenceDataset) -> None:
    if len(ds) == 0:
        raise DomainError("empty dataset")


# -- public operations ------------------------------------------------------

def pointwise_dpo_loss(pp: PolicyPair, fm: FeatureMap, sample: PreferenceSample) -> float:
    h = preference_score(pp, fm, sample)
    return softplus(-(2 * sample.label - 1) * pp.beta * h)


def empirical_dpo_loss(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset) -> float:
    _nonempty(ds)
    return dpo_objective(pp.delta, pp.beta, feature_differences(ds, fm), ds.labels)


def dpo_gradient(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset) -> np.ndarray:
    _nonempty(ds)
    return dpo_objective_gradient(pp.delta, pp.beta, feature_differences(ds, fm), ds.labels)


def dpo_hessian(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset) -> np.ndarray:
    """(1/n) sum_i beta^2 sig(beta h_i) sig(-beta h_i) x_i x_i^T.

    No second derivative of the features appears: h is linear in theta.
    """
    _nonempty(ds)
    x = feature_differences(ds, fm)
    bh = pp.beta * (x @ pp.delta)
    w = pp.beta ** 2 * sigmoid(bh) * sigmoid(-bh)
    return seq_sum_outer(x, np.atleast_1d(w)) / len(ds)


def input_gradient_norm(pp: PolicyPair, fm: FeatureMap, sample: PreferenceSample) -> float:
    """||grad_x l(z; theta)||_2 with x the feature difference and y held fixed."""
    x = feature_difference(sample, fm)[None, :]
    return float(input_gradient_norms(pp.delta, pp.beta, x, np.array([sample.label]))[0])
