"""Study harnesses: reward-shift sweeps, estimation-error rates, and a
simulated data-parallel KLDPO kernel."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import DomainError, FeatureMap, PolicyParams, PreferenceDataset, empirical_covariance, feature_differences, substream
from .losses import pointwise_losses
from .policy import PolicyPair
from .prefgen import (MixMode, MixtureSpec, SamplingSpec, TabularReward, expected_policy_reward, mixture_reward,
                      random_feature_map, realizable_reward, sample_dataset, sigmoid)
from .robust import kldpo_worst_kernel, regularity_report
from .train import TrainConfig, TrainingError, train

log = logging.getLogger(__name__)

ERROR_RIDGE = 1e-3


def derived_seed(*parts) -> int:
    """A 63-bit integer seed determined by the integer tuple ``parts``."""
    return int(np.random.SeedSequence(entropy=[int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class Environment:
    """Finite prompt/response space with a fixed data-collection protocol."""

    fm: FeatureMap
    prompt_dist: np.ndarray
    behavior: PolicyParams
    reference: PolicyParams
    beta: float

    def sampling(self, n: int, seed: int) -> SamplingSpec:
        return SamplingSpec(self.prompt_dist, self.behavior, n, seed)

    def pair(self, theta: np.ndarray, bound: float) -> PolicyPair:
        return PolicyPair(PolicyParams(theta, bound), self.reference, self.beta)


@dataclass(frozen=True)
class NamedMethod:
    name: str
    config: TrainConfig
    robust: bool = False


# -- environments -----------------------------------------------------------

def rate_environment(seed: int, dim: int = 8, num_states: int = 20, num_actions: int = 5,
                     beta: float = 1.0, B: float = 3.0, theta_norm: float = 1.0) -> tuple[Environment, PolicyParams]:
    """Random features, uniform prompts and behaviour, zero reference; theta_true of the given norm."""
    rng = substream(seed, "rate_environment")
    fm = random_feature_map(num_states, num_actions, dim, rng)
    t = rng.standard_normal(dim)
    theta_true = PolicyParams(t / np.linalg.norm(t) * theta_norm, B)
    zero = PolicyParams.zeros(dim, B)
    env = Environment(fm, np.full(num_states, 1.0 / num_states), zero, zero, beta)
    return env, theta_true


def shift_environment(seed: int, dim: int = 8, num_states: int = 20, num_actions: int = 5, beta: float = 1.0,
                      B: float = 5.0, scale: float = 4.0, correlation: float = -0.8) -> tuple[Environment, TabularReward, TabularReward]:
    """Two positive rewards r_k = scale * sigmoid(g_k) with (g_1, g_2) jointly
    Gaussian per cell and negatively correlated, so that optimising one
    tends to hurt the other.  r_2 is rescaled to the grid mean of r_1 so
    neither reward dominates the other on average."""
    rng = substream(seed, "shift_environment")
    fm = random_feature_map(num_states, num_actions, dim, rng)
    g1 = rng.standard_normal((num_states, num_actions))
    g2 = correlation * g1 + math.sqrt(1.0 - correlation ** 2) * rng.standard_normal((num_states, num_actions))
    t1, t2 = scale * sigmoid(g1), scale * sigmoid(g2)
    r1 = TabularReward(t1)
    r2 = TabularReward(t2 * (t1.mean() / t2.mean()))
    zero = PolicyParams.zeros(dim, B)
    env = Environment(fm, np.full(num_states, 1.0 / num_states), zero, zero, beta)
    return env, r1, r2


# -- shift sweep ------------------------------------------------------------

@dataclass(frozen=True)
class ShiftStudySpec:
    alpha_train: float
    alpha_grid: tuple
    mode: MixMode
    methods: tuple
    seeds: tuple
    env: Environment
    r1: TabularReward
    r2: TabularReward
    n: int

    def __post_init__(self):
        object.__setattr__(self, "mode", MixMode(self.mode))
        if len(self.alpha_grid) == 0 or any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise DomainError("alpha_grid must be nonempty with values in [0, 1]")
        if not 0.0 <= self.alpha_train <= 1.0:
            raise DomainError("alpha_train must lie in [0, 1]")
        if len({m.name for m in self.methods}) != len(self.methods):
            raise DomainError("method names must be unique")


@dataclass
class StudyReport:
    """Rows of (method, seed, coordinate, metric) plus a JSON-able summary."""

    coordinate: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", self.coordinate, "metric"])
        for method, seed, coord, metric in self.rows:
            w.writerow([method, seed, repr(coord), "" if metric is None else repr(metric)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary, indent=1, sort_keys=True) + "\n"


def _train_cell(method: NamedMethod, env: Environment, ds: PreferenceDataset, where: str):
    cfg = method.config
    init = env.pair(np.zeros(env.fm.dim), cfg.B)
    if init.beta != cfg.beta:
        init = PolicyPair(init.current, init.reference, cfg.beta)
    try:
        return train(cfg, init, env.fm, ds)
    except (TrainingError, DomainError) as exc:
        log.warning("cell %s failed: %s", where, exc)
        return None


def shift_sweep(spec: ShiftStudySpec) -> StudyReport:
    """Train every method on data labelled by the alpha_train mixture and
    score it by expected reward under each mixture in the grid."""
    env = spec.env
    eval_rewards = [mixture_reward(spec.r1, spec.r2, MixtureSpec(spec.mode, a)) for a in spec.alpha_grid]
    train_reward = mixture_reward(spec.r1, spec.r2, MixtureSpec(spec.mode, spec.alpha_train))
    report = StudyReport("alpha")
    per_method: dict[str, list[list[float]]] = {m.name: [] for m in spec.methods}
    failed = []
    for seed in spec.seeds:
        ds = sample_dataset(env.fm, env.sampling(spec.n, seed), train_reward, alpha_o=spec.alpha_train,
                            reward_desc=f"{spec.mode.value}-mixture")
        for method in spec.methods:
            rep = _train_cell(method, env, ds, f"{method.name}/seed={seed}")
            if rep is None:
                failed.append([method.name, seed])
                for a in spec.alpha_grid:
                    report.rows.append((method.name, seed, float(a), None))
                continue
            values = [expected_policy_reward(rep.final_params, env.fm, env.prompt_dist, r) for r in eval_rewards]
            per_method[method.name].append(values)
            for a, v in zip(spec.alpha_grid, values):
                report.rows.append((method.name, seed, float(a), v))
    report.rows.sort(key=lambda r: (r[0], r[1], r[2]))
    methods = {}
    for m in spec.methods:
        vals = np.array(per_method[m.name]) if per_method[m.name] else np.empty((0, len(spec.alpha_grid)))
        methods[m.name] = {
            "robust": m.robust,
            "median": [float(v) for v in np.median(vals, axis=0)] if vals.size else None,
            "mean": [float(v) for v in vals.mean(axis=0)] if vals.size else None,
            "spread": [float(v) for v in vals.std(axis=0)] if vals.size else None,
        }
    report.summary = {"mode": spec.mode.value, "alpha_train": spec.alpha_train,
                      "alpha_grid": [float(a) for a in spec.alpha_grid], "seeds": list(spec.seeds),
                      "methods": methods, "failed_cells": failed}
    return report


def best_cells_rank(summary: dict, method: str, alpha: float) -> int:
    """Rank (0 = best) of the grid cell at ``alpha`` in the method's median curve."""
    grid = summary["alpha_grid"]
    med = summary["methods"][method]["median"]
    i = min(range(len(grid)), key=lambda k: abs(grid[k] - alpha))
    return sum(1 for v in med if v > med[i])


def far_shift_comparison(summary: dict, alphas, baseline: str = "dpo") -> dict:
    """Per alpha: best median among robust methods versus the baseline median."""
    grid = summary["alpha_grid"]
    out = {}
    for a in alphas:
        i = min(range(len(grid)), key=lambda k: abs(grid[k] - a))
        robust = {name: m["median"][i] for name, m in summary["methods"].items() if m["robust"] and m["median"]}
        best = max(robust, key=robust.get)
        base = summary["methods"][baseline]["median"][i]
        out[float(grid[i])] = {"best_robust": best, "robust_median": robust[best], "baseline_median": base,
                               "robust_wins": robust[best] >= base}
    return out


# -- estimation-error rates -------------------------------------------------

@dataclass(frozen=True)
class RateStudySpec:
    n_grid: tuple
    repetitions: int
    theta_true: PolicyParams
    env: Environment
    methods: tuple
    reference_n: int
    seed: int = 0

    def __post_init__(self):
        g = list(self.n_grid)
        if not g or any(b <= a for a, b in zip(g, g[1:])) or g[0] < 1:
            raise DomainError("n_grid must be a strictly increasing list of positive counts")
        if self.repetitions < 3:
            raise DomainError("repetitions must be >= 3")
        if self.reference_n < 1:
            raise DomainError("reference_n must be positive")


def log_log_slope(ns, errors) -> float | None:
    """Least-squares slope of log(error) against log(n); None for fewer than two points."""
    ns = np.asarray(ns, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if ns.size < 2:
        return None
    lx, ly = np.log(ns), np.log(errors)
    lx = lx - lx.mean()
    return float(np.sum(lx * (ly - ly.mean())) / np.sum(lx * lx))


def weighted_error(theta: np.ndarray, target: np.ndarray, cov: np.ndarray, ridge: float = ERROR_RIDGE) -> float:
    e = theta - target
    return math.sqrt(float(e @ (cov + ridge * np.eye(cov.shape[0])) @ e))


def rate_experiment(spec: RateStudySpec) -> StudyReport:
    """Estimation error against n for each method.

    DPO is compared with theta_true in the (Sigma_D + 1e-3 I)-norm.  Robust
    methods are compared in the Euclidean norm with the same method trained
    on one dataset of size reference_n.  Datasets are shared across methods
    for each (n, repetition).
    """
    env = spec.env
    reward = realizable_reward(spec.theta_true, env.reference, env.beta, env.fm)
    references = {}
    if any(m.robust for m in spec.methods):
        big = sample_dataset(env.fm, env.sampling(spec.reference_n, derived_seed(spec.seed, 1, spec.reference_n)), reward)
        for m in spec.methods:
            if m.robust:
                rep = _train_cell(m, env, big, f"{m.name}/reference")
                references[m.name] = None if rep is None else rep.final_params.theta
    errors: dict[str, dict[int, list[float]]] = {m.name: {n: [] for n in spec.n_grid} for m in spec.methods}
    report = StudyReport("n")
    regularity = None
    for n in spec.n_grid:
        for rep_i in range(spec.repetitions):
            ds = sample_dataset(env.fm, env.sampling(n, derived_seed(spec.seed, 0, n, rep_i)), reward)
            if regularity is None:
                # second-moment eigenvalue at the smallest dataset, empirical and worst-case KL tilts at theta_true
                regularity = regularity_report(env.pair(spec.theta_true.theta, spec.theta_true.bound), env.fm, ds)
            cov = None
            for m in spec.methods:
                res = _train_cell(m, env, ds, f"{m.name}/n={n}/rep={rep_i}")
                err = None
                if res is not None:
                    theta = res.final_params.theta
                    if m.robust:
                        target = references.get(m.name)
                        if target is not None:
                            err = float(np.linalg.norm(theta - target))
                    else:
                        if cov is None:
                            cov = empirical_covariance(ds, env.fm)
                        err = weighted_error(theta, spec.theta_true.theta, cov)
                if err is not None:
                    errors[m.name][n].append(err)
                report.rows.append((m.name, rep_i, n, err))
    report.rows.sort(key=lambda r: (r[0], r[2], r[1]))
    methods = {}
    for m in spec.methods:
        ns = [n for n in spec.n_grid if errors[m.name][n]]
        med = [float(np.median(errors[m.name][n])) for n in ns]
        methods[m.name] = {"robust": m.robust, "n": ns, "median_error": med, "slope": log_log_slope(ns, med)}
    report.summary = {"n_grid": list(spec.n_grid), "repetitions": spec.repetitions, "reference_n": spec.reference_n,
                      "methods": methods, "regularity": regularity}
    return report


# -- simulated data-parallel kernel -----------------------------------------

class SyncMode(str, Enum):
    LOCAL = "local"
    ALL_GATHER = "all_gather"


@dataclass(frozen=True)
class DistributedSimReport:
    workers: int
    microbatch: int
    tau: float
    full_batch: np.ndarray
    all_gather: np.ndarray
    local: np.ndarray
    all_gather_gap: float
    local_gap: float
    local_mean_variance: float
    all_gather_mean_variance: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "worker", "full_batch", "all_gather", "local"])
        for i in range(self.full_batch.size):
            w.writerow([i, i // self.microbatch, repr(float(self.full_batch[i])),
                        repr(float(self.all_gather[i])), repr(float(self.local[i]))])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"workers": self.workers, "microbatch": self.microbatch, "tau": self.tau,
               "all_gather_max_gap": self.all_gather_gap, "local_max_gap": self.local_gap,
               "local_mean_loss_variance": self.local_mean_variance,
               "all_gather_mean_loss_variance": self.all_gather_mean_variance}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def distributed_kernel_sim(ds: PreferenceDataset, tau: float, workers: int, microbatch: int,
                           pp: PolicyPair, fm: FeatureMap, sync: SyncMode | str | None = None) -> DistributedSimReport:
    """Compare KLDPO kernels computed per worker with the synchronised one.

    The first workers*microbatch samples form the global batch, split into
    contiguous micro-batches.  With all_gather every worker centres its
    tilt on the global mean loss, which reproduces the full-batch kernel;
    with local each worker only sees its own micro-batch and the weights
    are scaled by 1/workers so they again sum to one.  Both modes are always
    computed; ``sync`` is accepted for interface symmetry.
    """
    if sync is not None:
        SyncMode(sync)
    if workers < 1 or microbatch < 1:
        raise DomainError("workers and microbatch must be positive")
    total = workers * microbatch
    if total > len(ds):
        raise DomainError(f"{workers} workers x {microbatch} samples exceeds dataset size {len(ds)}")
    x = feature_differences(ds, fm)[:total]
    losses = pointwise_losses(pp.delta, pp.beta, x, ds.labels[:total])
    full = kldpo_worst_kernel(losses, np.full(total, 1.0 / total), tau)

    gathered = np.empty(total)
    local = np.empty(total)
    local_means = np.empty(workers)
    gathered_means = np.empty(workers)
    base = np.full(microbatch, 1.0 / microbatch)
    for k in range(workers):
        sl = slice(k * microbatch, (k + 1) * microbatch)
        # after the all-gather every worker holds all losses and keeps its own slice
        gathered[sl] = kldpo_worst_kernel(losses.copy(), np.full(total, 1.0 / total), tau)[sl]
        gathered_means[k] = float(np.mean(losses))
        local[sl] = kldpo_worst_kernel(losses[sl], base, tau) / workers
        local_means[k] = float(np.mean(losses[sl]))
    return DistributedSimReport(
        workers=workers, microbatch=microbatch, tau=tau, full_batch=full, all_gather=gathered, local=local,
        all_gather_gap=float(np.max(np.abs(gathered - full))), local_gap=float(np.max(np.abs(local - full))),
        local_mean_variance=float(np.var(local_means)), all_gather_mean_variance=float(np.var(gathered_means)))
