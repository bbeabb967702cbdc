"""Log-linear softmax policies and the DPO preference score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, FeatureMap, PolicyParams, PreferenceDataset, PreferenceSample, feature_difference, feature_differences

# set True to cross-check every closed-form score against the log-ratio path
DEBUG_CROSSCHECK = False
CROSSCHECK_TOL = 1e-10


@dataclass(frozen=True)
class PolicyPair:
    """Current policy theta, reference theta_ref and the DPO temperature beta."""

    current: PolicyParams
    reference: PolicyParams
    beta: float

    def __post_init__(self):
        if self.current.dim != self.reference.dim:
            raise DomainError(f"theta has dim {self.current.dim}, theta_ref has {self.reference.dim}")
        if not self.beta > 0:
            raise DomainError(f"beta must be positive, got {self.beta}")

    @classmethod
    def uniform_reference(cls, current: PolicyParams, beta: float) -> "PolicyPair":
        return cls(current, PolicyParams.zeros(current.dim, current.bound), beta)

    @property
    def delta(self) -> np.ndarray:
        """theta - theta_ref, the only direction the DPO loss depends on."""
        return self.current.theta - self.reference.theta

    def with_theta(self, theta: np.ndarray) -> "PolicyPair":
        return PolicyPair(PolicyParams(theta, self.current.bound), self.reference, self.beta)


def _check_dim(p: PolicyParams, fm: FeatureMap) -> None:
    if p.dim != fm.dim:
        raise DomainError(f"theta has dim {p.dim}, feature map has {fm.dim}")


def log_action_probabilities(p: PolicyParams, fm: FeatureMap, state: int) -> np.ndarray:
    _check_dim(p, fm)
    if not 0 <= state < fm.num_states:
        raise IndexError(f"state {state} out of range [0, {fm.num_states})")
    logits = fm.table[state] @ p.theta
    shifted = logits - logits.max()
    return shifted - np.log(np.sum(np.exp(shifted)))


def action_probabilities(p: PolicyParams, fm: FeatureMap, state: int) -> np.ndarray:
    """pi_theta(. | s) = softmax(theta^T psi(s, .)), max-subtracted."""
    _check_dim(p, fm)
    if not 0 <= state < fm.num_states:
        raise IndexError(f"state {state} out of range [0, {fm.num_states})")
    logits = fm.table[state] @ p.theta
    w = np.exp(logits - logits.max())
    return w / w.sum()


def policy_table(p: PolicyParams, fm: FeatureMap) -> np.ndarray:
    """All action distributions at once, shape (num_states, num_actions)."""
    _check_dim(p, fm)
    logits = fm.table @ p.theta
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def log_ratio_score(pp: PolicyPair, fm: FeatureMap, sample: PreferenceSample) -> float:
    """h via its definition from log-probabilities; verification path only."""
    lp = log_action_probabilities(pp.current, fm, sample.state)
    lr = log_action_probabilities(pp.reference, fm, sample.state)
    a, b = sample.first, sample.second
    return float((lp[a] - lr[a]) - (lp[b] - lr[b]))


def preference_score(pp: PolicyPair, fm: FeatureMap, sample: PreferenceSample) -> float:
    """h_theta(s, a1, a2) = (theta - theta_ref)^T (psi(s, a1) - psi(s, a2)).

    The softmax normalisers cancel in the log-ratio difference, which is why
    the score is linear in theta.
    """
    _check_dim(pp.current, fm)
    h = float(pp.delta @ feature_difference(sample, fm))
    if DEBUG_CROSSCHECK:
        ref = log_ratio_score(pp, fm, sample)
        if abs(h - ref) > CROSSCHECK_TOL:
            raise AssertionError(f"closed-form score {h!r} != log-ratio score {ref!r}")
    return h


def preference_scores(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset, x: np.ndarray | None = None) -> np.ndarray:
    _check_dim(pp.current, fm)
    if x is None:
        x = feature_differences(ds, fm)
    return x @ pp.delta


def project_theta(theta: np.ndarray, bound: float) -> np.ndarray:
    """Euclidean projection onto the ball of radius ``bound``; identity inside."""
    norm = float(np.linalg.norm(theta))
    if norm <= bound:
        return theta
    out = theta / norm * bound
    # rescaling can land one ulp outside the ball
    while np.linalg.norm(out) > bound:
        out = out * (1.0 - 2.0 ** -52)
    return out


def project_params(p: PolicyParams) -> PolicyParams:
    theta = project_theta(p.theta, p.bound)
    if theta is p.theta:
        return p
    return PolicyParams(theta, p.bound)
