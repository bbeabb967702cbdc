"""Reward tables, Bradley-Terry preference sampling and reward mixing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .core import DatasetMeta, DomainError, FeatureMap, PolicyParams, PreferenceDataset, substream
from .policy import policy_table

PROB_TOL = 1e-12
MAX_REDRAW_ROUNDS = 10_000


def sigmoid(t):
    """Logistic function without overflow for large |t|."""
    t = np.asarray(t, dtype=float)
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def softplus(t):
    """log(1 + e^t) in the branch-stable form max(t, 0) + log1p(e^-|t|)."""
    t = np.asarray(t, dtype=float)
    out = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TabularReward:
    table: np.ndarray

    def __post_init__(self):
        table = np.array(self.table, dtype=float, copy=True)
        if table.ndim != 2:
            raise DomainError(f"reward table must be (states, actions), got {table.shape}")
        if not np.all(np.isfinite(table)):
            raise DomainError("reward table has non-finite entries")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    def to_json(self) -> str:
        doc = {"num_states": self.num_states, "num_actions": self.num_actions,
               "table": [float(v) for v in self.table.ravel()]}
        return json.dumps(doc) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TabularReward":
        doc = json.loads(text)
        flat = np.asarray(doc["table"], dtype=float)
        return cls(flat.reshape(doc["num_states"], doc["num_actions"]))


@dataclass(frozen=True)
class SamplingSpec:
    """Nominal data-generating distribution: s ~ mu, a1, a2 ~ pi_behavior(.|s)."""

    prompt_dist: np.ndarray
    behavior: PolicyParams
    n: int
    seed: int

    def __post_init__(self):
        mu = np.array(self.prompt_dist, dtype=float, copy=True)
        if mu.ndim != 1 or np.any(mu < 0) or abs(math.fsum(mu) - 1.0) > PROB_TOL:
            raise DomainError("prompt_dist must be a probability vector")
        if self.n < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        mu.setflags(write=False)
        object.__setattr__(self, "prompt_dist", mu)


class MixMode(str, Enum):
    CONVEX = "convex"
    GEOMETRIC = "geometric"


@dataclass(frozen=True)
class MixtureSpec:
    mode: MixMode
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "mode", MixMode(self.mode))
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")


def _check_cell(r: TabularReward, s: int, a: int) -> None:
    if not (0 <= s < r.num_states and 0 <= a < r.num_actions):
        raise IndexError(f"cell ({s}, {a}) outside reward grid {r.table.shape}")


def bt_preference_prob(r: TabularReward, s: int, a1: int, a2: int) -> float:
    """P(a1 > a2 | s) under Bradley-Terry, as sigmoid of the reward gap."""
    _check_cell(r, s, a1)
    _check_cell(r, s, a2)
    return sigmoid(r.table[s, a1] - r.table[s, a2])


def mixture_reward(r1: TabularReward, r2: TabularReward, spec: MixtureSpec) -> TabularReward:
    if r1.table.shape != r2.table.shape:
        raise DomainError(f"reward grids differ: {r1.table.shape} vs {r2.table.shape}")
    a = spec.alpha
    if spec.mode is MixMode.CONVEX:
        return TabularReward(a * r1.table + (1.0 - a) * r2.table)
    if np.any(r1.table <= 0) or np.any(r2.table <= 0):
        raise DomainError("geometric mixing needs strictly positive rewards")
    return TabularReward(r1.table ** a * r2.table ** (1.0 - a))


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index i with cdf[i-1] <= u < cdf[i]; rows of ``cdf`` broadcast against ``u``."""
    idx = np.sum(u[..., None] >= cdf, axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def sample_dataset(fm: FeatureMap, spec: SamplingSpec, r: TabularReward,
                   alpha_o: float | None = None, reward_desc: Any = None) -> PreferenceDataset:
    """Draw n comparisons from the nominal distribution.

    Pairs with a1 == a2 are rejected and both actions redrawn, which samples
    exactly from the law of (a1, a2) conditioned on a1 != a2.  Labels are
    Bernoulli(sigmoid(r(s,a1) - r(s,a2))) and the drawn order is kept.

    Draw order from the Philox stream: all states, all (a1, a2) uniforms,
    redraw rounds for ties, then label uniforms.
    """
    if fm.num_actions < 2:
        raise DomainError("need at least two actions to form a comparison")
    if r.table.shape != (fm.num_states, fm.num_actions):
        raise DomainError(f"reward grid {r.table.shape} does not match feature map")
    if spec.prompt_dist.shape[0] != fm.num_states:
        raise DomainError("prompt_dist length does not match the number of states")
    rng = substream(spec.seed, "sample_dataset")
    n = spec.n
    pi = policy_table(spec.behavior, fm)
    pi_cdf = np.cumsum(pi, axis=1)
    mu_cdf = np.cumsum(spec.prompt_dist)

    states = _inverse_cdf(mu_cdf, rng.random(n))
    u = rng.random((n, 2))
    a1 = _inverse_cdf(pi_cdf[states], u[:, 0])
    a2 = _inverse_cdf(pi_cdf[states], u[:, 1])
    ties = np.flatnonzero(a1 == a2)
    rounds = 0
    while ties.size:
        rounds += 1
        if rounds > MAX_REDRAW_ROUNDS:
            raise DomainError("behaviour policy almost never proposes two distinct actions")
        u = rng.random((ties.size, 2))
        a1[ties] = _inverse_cdf(pi_cdf[states[ties]], u[:, 0])
        a2[ties] = _inverse_cdf(pi_cdf[states[ties]], u[:, 1])
        ties = ties[a1[ties] == a2[ties]]

    p = sigmoid(r.table[states, a1] - r.table[states, a2])
    labels = (rng.random(n) < p).astype(np.int64)
    meta = DatasetMeta(n=n, seed=spec.seed, alpha_o=alpha_o, reward=reward_desc)
    return PreferenceDataset(states, a1, a2, labels, meta)


def realizable_reward(theta_true: PolicyParams, pp_ref: PolicyParams, beta: float, fm: FeatureMap) -> TabularReward:
    """r(s, a) = beta * log(pi_true(a|s) / pi_ref(a|s)), with the log-partition term dropped.

    Under this reward the Bradley-Terry probabilities equal
    sigmoid(beta * h_true), so theta_true minimises the population DPO loss.
    """
    if theta_true.dim != fm.dim or pp_ref.dim != fm.dim:
        raise DomainError("parameter dimension does not match the feature map")
    logits_true = fm.table @ theta_true.theta
    logits_ref = fm.table @ pp_ref.theta
    return TabularReward(beta * (logits_true - logits_ref))


def expected_policy_reward(p: PolicyParams, fm: FeatureMap, mu: np.ndarray, r: TabularReward) -> float:
    """sum_s mu(s) sum_a pi_theta(a|s) r(s, a), summed with ``math.fsum``."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape[0] != fm.num_states or r.table.shape != (fm.num_states, fm.num_actions):
        raise DomainError("mu / reward shape does not match the feature map")
    pi = policy_table(p, fm)
    return math.fsum((mu[:, None] * pi * r.table).ravel())


def random_feature_map(num_states: int, num_actions: int, dim: int, rng: np.random.Generator,
                       radius: float = 1.0) -> FeatureMap:
    """Features drawn uniformly from the ball of the given radius (<= 1)."""
    g = rng.standard_normal((num_states, num_actions, dim))
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    r = radius * rng.random((num_states, num_actions, 1)) ** (1.0 / dim)
    return FeatureMap(g * r)
