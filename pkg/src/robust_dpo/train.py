"""Projected gradient descent for the DPO, WDPO and KLDPO objectives."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Union

import numpy as np

from .core import DomainError, FeatureMap, PolicyParams, PreferenceDataset, feature_differences, max_eigenvalue, seq_sum, seq_sum_outer, substream
from .losses import dpo_objective, dpo_objective_gradient, loss_gradients, pointwise_losses, residuals
from .policy import PolicyPair, project_theta
from .prefgen import sigmoid
from .robust import RobustKind, RobustSpec, kldpo_objective, kldpo_worst_kernel, wdpo_objective


class Method(str, Enum):
    DPO = "dpo"
    WDPO = "wdpo"
    KLDPO = "kldpo"


class TrainingError(RuntimeError):
    """Raised when the loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """``lr_mode='smoothness'`` scales ``lr`` by 1 / (beta^2/4 * lambda_max(Sigma_D)),
    the smoothness constant of the full-batch DPO loss."""

    method: Method = Method.DPO
    lr: float = 1.0
    epochs: int = 100
    batch: Union[int, str] = "full"
    seed: int = 0
    robust: RobustSpec = field(default_factory=RobustSpec)
    stop_tol: float = 1e-8
    beta: float = 1.0
    B: float = 1.0
    lr_mode: str = "absolute"

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.lr >= 0:
            # lr = 0 is accepted as the null-update case
            raise DomainError(f"lr must be nonnegative, got {self.lr}")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if not (self.batch == "full" or (isinstance(self.batch, int) and self.batch >= 1)):
            raise DomainError(f"batch must be 'full' or a positive count, got {self.batch!r}")
        if self.stop_tol < 0 or not self.beta > 0 or not self.B > 0:
            raise DomainError("need stop_tol >= 0, beta > 0, B > 0")
        if self.lr_mode not in ("absolute", "smoothness"):
            raise DomainError(f"unknown lr_mode {self.lr_mode!r}")

    def with_(self, **kw) -> "TrainConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return TrainConfig(**d)


@dataclass(frozen=True)
class TrainReport:
    final_params: PolicyParams
    loss_trace: tuple
    grad_norm_trace: tuple
    epochs_run: int
    converged: bool

    def __post_init__(self):
        if len(self.loss_trace) != self.epochs_run or len(self.grad_norm_trace) != self.epochs_run:
            raise DomainError("trace lengths must equal epochs_run")

    def to_json(self) -> str:
        doc = {"final_params": {"B": self.final_params.bound, "theta": [float(t) for t in self.final_params.theta]},
               "loss_trace": list(self.loss_trace), "grad_norm_trace": list(self.grad_norm_trace),
               "epochs_run": self.epochs_run, "converged": self.converged}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        doc = json.loads(text)
        fp = doc["final_params"]
        return cls(PolicyParams(np.asarray(fp["theta"], dtype=float), fp["B"]), tuple(doc["loss_trace"]),
                   tuple(doc["grad_norm_trace"]), doc["epochs_run"], doc["converged"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "grad_norm"])
        for k, (l, g) in enumerate(zip(self.loss_trace, self.grad_norm_trace), start=1):
            w.writerow([k, repr(l), repr(g)])
        return buf.getvalue()


# -- objectives on (x, labels) arrays ---------------------------------------

def wdpo_gradient(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray, rho_o: float) -> np.ndarray:
    """Gradient of DPO + rho_o * beta * ||delta|| * sqrt(mean res_i^2).

    With S = sqrt(mean res^2) and d res_i / d theta = -beta s_i x_i,
    s_i = sig(beta h_i) sig(-beta h_i):

        grad = rho_o beta [ S delta/||delta|| - (beta ||delta|| / S) mean(res_i s_i x_i) ]

    At delta = 0 the regulariser has a norm kink and contributes 0.
    """
    g = dpo_objective_gradient(delta, beta, x, labels)
    if rho_o == 0:
        return g
    norm = float(np.linalg.norm(delta))
    if norm == 0:
        return g
    n = x.shape[0]
    res = residuals(delta, beta, x, labels)
    S = math.sqrt(seq_sum(res * res) / n)
    if S == 0:
        return g + rho_o * beta * S * delta / norm
    bh = beta * (x @ delta)
    s = sigmoid(bh) * sigmoid(-bh)
    inner = seq_sum((res * s)[:, None] * x) / n
    return g + rho_o * beta * (S * delta / norm - (beta * norm / S) * inner)


def kldpo_gradient(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray, tau: float) -> np.ndarray:
    """sum_i w_i grad l(z_i) with the kernel weights held fixed."""
    losses = pointwise_losses(delta, beta, x, labels)
    n = x.shape[0]
    w = kldpo_worst_kernel(losses, np.full(n, 1.0 / n), tau)
    return seq_sum(w[:, None] * loss_gradients(delta, beta, x, labels))


def _check_robust(cfg: TrainConfig) -> None:
    kind = cfg.robust.kind
    if cfg.method is Method.WDPO and kind is not RobustKind.WASSERSTEIN_APPROX:
        raise DomainError(f"wdpo training needs a wasserstein_approx robust spec, got {kind.value}")
    if cfg.method is Method.KLDPO and kind is not RobustKind.KL_APPROX:
        raise DomainError(f"kldpo training needs a kl_approx robust spec, got {kind.value}")


def objective_value(cfg: TrainConfig, delta: np.ndarray, x: np.ndarray, labels: np.ndarray) -> float:
    if cfg.method is Method.DPO:
        return dpo_objective(delta, cfg.beta, x, labels)
    if cfg.method is Method.WDPO:
        return wdpo_objective(delta, cfg.beta, x, labels, cfg.robust.rho_o)
    return kldpo_objective(delta, cfg.beta, x, labels, cfg.robust.tau)


def objective_gradient(cfg: TrainConfig, delta: np.ndarray, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if cfg.method is Method.DPO:
        return dpo_objective_gradient(delta, cfg.beta, x, labels)
    if cfg.method is Method.WDPO:
        return wdpo_gradient(delta, cfg.beta, x, labels, cfg.robust.rho_o)
    return kldpo_gradient(delta, cfg.beta, x, labels, cfg.robust.tau)


def robust_gradient(cfg: TrainConfig, pp: PolicyPair, fm: FeatureMap, batch: PreferenceDataset) -> np.ndarray:
    """Gradient of the method's objective on ``batch`` at pp.current."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    _check_robust(cfg)
    pp_cfg = pp if pp.beta == cfg.beta else PolicyPair(pp.current, pp.reference, cfg.beta)
    return objective_gradient(cfg, pp_cfg.delta, feature_differences(batch, fm), batch.labels)


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, step: float = 1e-5) -> np.ndarray:
    """Central differences (f(theta + h e_j) - f(theta - h e_j)) / 2h per coordinate."""
    if not step > 0:
        raise DomainError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        out[j] = (f(theta + e) - f(theta - e)) / (2.0 * step)
    return out


# -- training loop ----------------------------------------------------------

def smoothness_constant(beta: float, x: np.ndarray) -> float:
    """beta^2/4 * lambda_max(Sigma_D), a Lipschitz constant of the DPO gradient."""
    cov = seq_sum_outer(x) / x.shape[0]
    return beta * beta / 4.0 * max_eigenvalue(cov)


def _step_size(cfg: TrainConfig, x: np.ndarray) -> float:
    if cfg.lr_mode == "absolute" or cfg.lr == 0:
        return cfg.lr
    L = smoothness_constant(cfg.beta, x)
    if L <= 0:
        raise DomainError("smoothness-scaled step needs a nonzero feature covariance")
    return cfg.lr / L


def _finite(value, what: str, epoch: int) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"non-finite {what} at epoch {epoch}")


def _step(theta: np.ndarray, grad: np.ndarray, lr: float, bound: float, epoch: int) -> np.ndarray:
    trial = theta - lr * grad
    _finite(trial, "parameter update", epoch)
    return project_theta(trial, bound)


def stationarity(theta: np.ndarray, grad: np.ndarray, lr: float, bound: float) -> float:
    """Norm of the projected-gradient mapping; equals ||grad|| whenever the step stays in the ball."""
    if lr == 0:
        return float(np.linalg.norm(grad))
    trial = theta - lr * grad
    if np.linalg.norm(trial) <= bound:
        return float(np.linalg.norm(grad))
    return float(np.linalg.norm(theta - project_theta(trial, bound)) / lr)


def train(cfg: TrainConfig, pp_init: PolicyPair, fm: FeatureMap, ds: PreferenceDataset) -> TrainReport:
    """Projected gradient descent on the configured objective.

    Each epoch performs the parameter updates (one step for full batch,
    one per shuffled mini-batch otherwise) and then records the full-dataset
    objective and the stationarity measure at the new iterate.  Training
    stops early once that measure is <= stop_tol.
    """
    if len(ds) == 0:
        raise DomainError("empty dataset")
    if pp_init.current.dim != fm.dim:
        raise DomainError("initial parameters do not match the feature dimension")
    _check_robust(cfg)
    x = feature_differences(ds, fm)
    y = ds.labels
    n = len(ds)
    lr = _step_size(cfg, x)
    ref = pp_init.reference.theta
    theta = project_theta(pp_init.current.theta.astype(float), cfg.B)

    losses: list[float] = []
    gnorms: list[float] = []
    converged = False
    full_batch = cfg.batch == "full" or cfg.batch >= n
    g_full = objective_gradient(cfg, theta - ref, x, y)
    _finite(g_full, "gradient", 0)
    for epoch in range(1, cfg.epochs + 1):
        if full_batch:
            theta = _step(theta, g_full, lr, cfg.B, epoch)
        else:
            order = substream(cfg.seed, f"minibatch/{epoch}").permutation(n)
            for start in range(0, n, cfg.batch):
                idx = order[start:start + cfg.batch]
                g = objective_gradient(cfg, theta - ref, x[idx], y[idx])
                _finite(g, "gradient", epoch)
                theta = _step(theta, g, lr, cfg.B, epoch)
        loss = objective_value(cfg, theta - ref, x, y)
        _finite(loss, "loss", epoch)
        g_full = objective_gradient(cfg, theta - ref, x, y)
        _finite(g_full, "gradient", epoch)
        gn = stationarity(theta, g_full, lr, cfg.B)
        losses.append(loss)
        gnorms.append(gn)
        if gn <= cfg.stop_tol:
            converged = True
            break
    return TrainReport(final_params=PolicyParams(theta, cfg.B), loss_trace=tuple(losses),
                       grad_norm_trace=tuple(gnorms), epochs_run=len(losses), converged=converged)
