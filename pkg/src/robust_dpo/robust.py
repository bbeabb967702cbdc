"""Robust DPO losses.

Two tractable surrogates used for training:

* ``wdpo_loss_approx`` -- DPO loss plus rho_o times the root-mean-square of
  the input-space loss gradients (Wasserstein ball ~ gradient regulariser).
* ``kldpo_loss_approx`` -- loss reweighted by an exponential tilt of the
  per-sample losses at temperature tau (KL ball worst case).

And the exact formulations they approximate, used as oracles:

* ``kl_dual_value``: inf_{lam in [lo, hi]} lam*rho + lam*log E_q exp(l/lam)
* ``kl_worst_case_exact``: the maximising tilt with KL(p || q) = rho
* ``wasserstein_dual_value``: inf_{eta >= 0} eta*rho^2
  + E_i max_{z'} [l(z') - eta*d(z', z_i)^2] over a finite support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Callable

import numpy as np

from .core import (DomainError, FeatureMap, PreferenceDataset, PreferenceSample, feature_differences, min_eigenvalue,
                   seq_sum, seq_sum_outer)
from .losses import dpo_objective, input_gradient_norm, input_gradient_norms, pointwise_dpo_loss, pointwise_losses
from .policy import PolicyPair

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
KL_BRACKET = (1e-6, 1e6)
DEFAULT_TOL = 1e-8


class RobustKind(str, Enum):
    WASSERSTEIN_APPROX = "wasserstein_approx"
    KL_APPROX = "kl_approx"
    KL_EXACT = "kl_exact"
    WASSERSTEIN_EXACT = "wasserstein_exact"


@dataclass(frozen=True)
class RobustSpec:
    kind: RobustKind = RobustKind.KL_APPROX
    rho_o: float = 0.0
    tau: float = 1.0
    rho: float = 0.0
    p: int = 2
    lambda_lo: float = KL_BRACKET[0]
    lambda_hi: float = KL_BRACKET[1]
    tol: float = DEFAULT_TOL
    grid_resolution: int = 2
    grid_radius: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", RobustKind(self.kind))
        if self.p != 2:
            raise DomainError("only the order-2 Wasserstein distance is supported")
        if not (self.lambda_lo > 0 and self.lambda_lo < self.lambda_hi):
            raise DomainError(f"need 0 < lambda_lo < lambda_hi, got [{self.lambda_lo}, {self.lambda_hi}]")
        if not self.tol > 0 or not self.tau > 0:
            raise DomainError("tol and tau must be positive")
        if self.rho_o < 0 or self.rho < 0:
            raise DomainError("radii must be nonnegative")


@dataclass(frozen=True)
class TiltResult:
    weights: np.ndarray
    lam: float
    mu: float
    achieved_kl: float
    boundary: bool = False
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mu": self.mu, "achieved_kl": self.achieved_kl,
                "boundary": self.boundary, "iterations": self.iterations,
                "weights": [float(w) for w in self.weights]}


@dataclass(frozen=True)
class ScalarSearch:
    argmin: float
    value: float
    iterations: int


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = DEFAULT_TOL,
                   max_iter: int = 500) -> ScalarSearch:
    """Minimise a unimodal f on [lo, hi] until the bracket is narrower than tol.

    The endpoints are evaluated as well, so minima sitting on the boundary
    of the interval are returned exactly.
    """
    a, b = float(lo), float(hi)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol and it < max_iter:
        it += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    best = min([(fc, c), (fd, d), (f(lo), float(lo)), (f(hi), float(hi))])
    return ScalarSearch(argmin=best[1], value=best[0], iterations=it)


# -- Wasserstein surrogate --------------------------------------------------

def wdpo_objective(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray, rho_o: float) -> float:
    base = dpo_objective(delta, beta, x, labels)
    if rho_o == 0:
        return base
    g = input_gradient_norms(delta, beta, x, labels)
    return base + rho_o * math.sqrt(seq_sum(g * g) / x.shape[0])


def wdpo_loss_approx(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset, rho_o: float) -> float:
    """Empirical DPO loss + rho_o * (mean_i ||grad_x l(z_i)||^2)^(1/2)."""
    if rho_o < 0:
        raise DomainError("rho_o must be nonnegative")
    if len(ds) == 0:
        raise DomainError("empty dataset")
    return wdpo_objective(pp.delta, pp.beta, feature_differences(ds, fm), ds.labels, rho_o)


def wdpo_pointwise_upper(pp: PolicyPair, fm: FeatureMap, sample: PreferenceSample, rho_o: float) -> float:
    """l(z) + rho_o * ||grad_x l(z)||^2 (sqrt(v) <= v relaxation, per sample)."""
    if rho_o < 0:
        raise DomainError("rho_o must be nonnegative")
    g = input_gradient_norm(pp, fm, sample)
    return pointwise_dpo_loss(pp, fm, sample) + rho_o * g * g


# -- KL surrogate -----------------------------------------------------------

def _as_distribution(base, n: int) -> np.ndarray:
    q = np.asarray(base, dtype=float)
    if q.shape != (n,):
        raise DomainError(f"base has shape {q.shape}, losses have length {n}")
    if np.any(q < 0) or abs(math.fsum(q) - 1.0) > 1e-12:
        raise DomainError("base must be a probability vector")
    return q


def kldpo_worst_kernel(losses, base, tau: float) -> np.ndarray:
    """w_i proportional to q_i * exp((l_i - sum_j q_j l_j) / tau), log-sum-exp stabilised."""
    l = np.asarray(losses, dtype=float)
    q = _as_distribution(base, l.shape[0])
    if not tau > 0:
        raise DomainError("tau must be positive")
    support = q > 0
    if np.all(l[support] == l[support][0]):
        return q.copy()
    z = (l - float(q @ l)) / tau
    z = z - z[support].max()
    w = np.where(support, q * np.exp(z), 0.0)
    return w / w.sum()


def kldpo_objective(delta: np.ndarray, beta: float, x: np.ndarray, labels: np.ndarray, tau: float) -> float:
    losses = pointwise_losses(delta, beta, x, labels)
    n = x.shape[0]
    w = kldpo_worst_kernel(losses, np.full(n, 1.0 / n), tau)
    return seq_sum(w * losses)


def kldpo_loss_approx(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset, tau: float) -> float:
    """sum_i w_i l(z_i) with w the worst-case kernel over the empirical base 1/n."""
    if len(ds) == 0:
        raise DomainError("empty dataset")
    return kldpo_objective(pp.delta, pp.beta, feature_differences(ds, fm), ds.labels, tau)


# -- exact KL ball ----------------------------------------------------------

def _log_mgf(l: np.ndarray, q: np.ndarray, lam: float) -> float:
    """lam * log sum_i q_i exp(l_i / lam), stabilised around the max loss."""
    support = q > 0
    m = float(l[support].max())
    s = float(np.sum(q[support] * np.exp((l[support] - m) / lam)))
    return m + lam * math.log(s)


def kl_dual_objective(losses, base, rho: float, lam: float) -> float:
    l = np.asarray(losses, dtype=float)
    q = _as_distribution(base, l.shape[0])
    return lam * rho + _log_mgf(l, q, lam)


def kl_dual_solve(losses, base, rho: float, lambda_lo: float = KL_BRACKET[0],
                  lambda_hi: float = KL_BRACKET[1], tol: float = DEFAULT_TOL) -> ScalarSearch:
    l = np.asarray(losses, dtype=float)
    q = _as_distribution(base, l.shape[0])
    if rho < 0 or not (0 < lambda_lo < lambda_hi):
        raise DomainError("need rho >= 0 and 0 < lambda_lo < lambda_hi")
    support = q > 0
    if np.all(l[support] == l[support][0]):
        # objective is lam*rho + c: minimised at the lower end
        return ScalarSearch(argmin=lambda_lo, value=lambda_lo * rho + float(l[support][0]), iterations=0)
    return golden_section(lambda lam: lam * rho + _log_mgf(l, q, lam), lambda_lo, lambda_hi, tol)


def kl_dual_value(losses, base, rho: float, lambda_lo: float = KL_BRACKET[0],
                  lambda_hi: float = KL_BRACKET[1], tol: float = DEFAULT_TOL) -> float:
    """Dual form of sup_{KL(p||q) <= rho} E_p[l]; the objective is convex in lambda."""
    return kl_dual_solve(losses, base, rho, lambda_lo, lambda_hi, tol).value


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tilt_at_temperature(losses, base, lam: float) -> TiltResult:
    """p_i = q_i exp((l_i - mu - lam) / lam) with mu fixed by normalisation."""
    l = np.asarray(losses, dtype=float)
    q = _as_distribution(base, l.shape[0])
    support = q > 0
    m = float(l[support].max())
    z = np.where(support, q * np.exp((l - m) / lam), 0.0)
    p = z / z.sum()
    log_norm = _log_mgf(l, q, lam)  # = mu + lam
    return TiltResult(weights=p, lam=lam, mu=log_norm - lam, achieved_kl=kl_divergence(p, q))


def kl_worst_case_exact(losses, base, rho: float, tol: float = DEFAULT_TOL,
                        bracket: tuple[float, float] = KL_BRACKET, max_iter: int = 400) -> TiltResult:
    """Worst-case distribution in {p : KL(p || q) <= rho} for the loss vector.

    The maximiser is an exponential tilt of q.  Its KL to q decreases
    strictly and continuously in the temperature lam, so lam is found by
    bisection on log(lam) until |KL - rho| <= tol.  If rho reaches the KL of
    the tilt's zero-temperature limit (q restricted to the argmax losses) the
    limit itself is returned with ``boundary=True`` and lam = 0.
    """
    l = np.asarray(losses, dtype=float)
    q = _as_distribution(base, l.shape[0])
    if not rho > 0:
        raise DomainError("rho must be positive")
    support = q > 0
    if np.all(l[support] == l[support][0]):
        raise DomainError("all losses are equal: no tilt reaches a positive KL radius")

    top = support & (l == l[support].max())
    kl_limit = -math.log(float(q[top].sum()))
    if rho >= kl_limit:
        p = np.where(top, q, 0.0) / q[top].sum()
        return TiltResult(weights=p, lam=0.0, mu=float(l[support].max()),
                          achieved_kl=kl_divergence(p, q), boundary=True)

    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    res_hi = tilt_at_temperature(l, q, bracket[1])
    if res_hi.achieved_kl >= rho - tol:
        # radius below what the widest temperature resolves
        return TiltResult(res_hi.weights, res_hi.lam, res_hi.mu, res_hi.achieved_kl,
                          boundary=res_hi.achieved_kl > rho + tol)
    res_lo = tilt_at_temperature(l, q, bracket[0])
    if res_lo.achieved_kl <= rho + tol:
        return TiltResult(res_lo.weights, res_lo.lam, res_lo.mu, res_lo.achieved_kl,
                          boundary=res_lo.achieved_kl < rho - tol)

    res = res_hi
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        res = tilt_at_temperature(l, q, math.exp(mid))
        gap = res.achieved_kl - rho
        if abs(gap) <= tol:
            break
        if gap > 0:  # too concentrated: raise the temperature
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return TiltResult(res.weights, res.lam, res.mu, res.achieved_kl, boundary=False, iterations=it)


# -- exact Wasserstein ball -------------------------------------------------

@dataclass(frozen=True)
class WassersteinSolve:
    value: float
    eta: float
    eta_max: float
    iterations: int


def _wasserstein_setup(atom_losses, atom_coords, sample_indices, atom_labels):
    losses = np.asarray(atom_losses, dtype=float)
    coords = np.asarray(atom_coords, dtype=float)
    if losses.ndim != 1 or losses.size == 0:
        raise DomainError("empty support")
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.shape[0] != losses.shape[0]:
        raise DomainError("atom_coords and atom_losses disagree in length")
    idx = np.asarray(sample_indices, dtype=np.int64)
    if idx.size == 0:
        raise DomainError("no sample points")
    if idx.min() < 0 or idx.max() >= losses.size:
        raise IndexError("sample index outside the support")
    uniq, counts = np.unique(idx, return_counts=True)
    d2 = np.sum((coords[uniq][:, None, :] - coords[None, :, :]) ** 2, axis=2)
    if atom_labels is not None:
        labels = np.asarray(atom_labels)
        d2 = np.where(labels[uniq][:, None] == labels[None, :], d2, np.inf)
    return losses, d2, counts / idx.size, losses[idx]


def wasserstein_dual_solve(atom_losses, atom_coords, sample_indices, rho: float,
                           tol: float = DEFAULT_TOL, atom_labels=None) -> WassersteinSolve:
    if rho < 0:
        raise DomainError("rho must be nonnegative")
    losses, d2, weights, _ = _wasserstein_setup(atom_losses, atom_coords, sample_indices, atom_labels)
    finite = np.isfinite(d2)
    gain = np.where(finite, losses[None, :], -np.inf)
    cost = np.where(finite, d2, 0.0)

    def objective(eta: float) -> float:
        inner = np.max(gain - eta * cost, axis=1)
        return eta * rho * rho + float(weights @ inner)

    # beyond eta_max every inner max sits at the sample atom itself
    spread = float(losses.max() - losses.min())
    positive = d2[finite & (d2 > 0)]
    if spread <= 0 or positive.size == 0:
        eta_max = 1.0
    else:
        eta_max = 2.0 * spread / float(positive.min())
    res = golden_section(objective, 0.0, eta_max, tol)
    return WassersteinSolve(value=res.value, eta=res.argmin, eta_max=eta_max, iterations=res.iterations)


def wasserstein_dual_value(atom_losses, atom_coords, sample_indices, rho: float,
                           tol: float = DEFAULT_TOL, atom_labels=None) -> float:
    """Order-2 Wasserstein worst-case expected loss over a finite support.

    ``atom_labels`` (optional) forbids transport between atoms carrying
    different labels.
    """
    return wasserstein_dual_solve(atom_losses, atom_coords, sample_indices, rho, tol, atom_labels).value


def wasserstein_support(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset,
                        resolution: int = 2, radius: float = 0.5):
    """Candidate support for the Moreau-Yosida inner maximum.

    Atoms are the dataset's distinct (x, y) pairs plus, around each, a grid
    of offsets with ``resolution`` steps per direction out to ``radius``: a
    full tensor grid when d <= 3, otherwise points along each axis.  Grid
    points keep the label of the atom they surround.

    Returns (losses, coords, labels, sample_indices).
    """
    x = feature_differences(ds, fm)
    keyed = np.concatenate([x, ds.labels[:, None].astype(float)], axis=1)
    uniq, inverse = np.unique(keyed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    d = fm.dim
    steps = radius * np.arange(-resolution, resolution + 1) / max(resolution, 1)
    if d <= 3:
        offsets = np.array([o for o in product(steps, repeat=d) if any(o)], dtype=float).reshape(-1, d)
    else:
        offsets = np.array([s * np.eye(d)[j] for j in range(d) for s in steps if s != 0]).reshape(-1, d)
    base_x, base_y = uniq[:, :d], uniq[:, d]
    grid_x = (base_x[:, None, :] + offsets[None, :, :]).reshape(-1, d)
    grid_y = np.repeat(base_y, offsets.shape[0])
    coords = np.concatenate([base_x, grid_x])
    labels = np.concatenate([base_y, grid_y]).astype(np.int64)
    losses = pointwise_losses(pp.delta, pp.beta, coords, labels)
    return losses, coords, labels, inverse


def robust_loss(spec: RobustSpec, pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset) -> float:
    """Evaluate the loss selected by ``spec.kind`` on the dataset."""
    kind = spec.kind
    if kind is RobustKind.WASSERSTEIN_APPROX:
        return wdpo_loss_approx(pp, fm, ds, spec.rho_o)
    if kind is RobustKind.KL_APPROX:
        return kldpo_loss_approx(pp, fm, ds, spec.tau)
    if kind is RobustKind.KL_EXACT:
        x = feature_differences(ds, fm)
        losses = pointwise_losses(pp.delta, pp.beta, x, ds.labels)
        n = len(ds)
        return kl_dual_value(losses, np.full(n, 1.0 / n), spec.rho, spec.lambda_lo, spec.lambda_hi, spec.tol)
    losses, coords, labels, idx = wasserstein_support(pp, fm, ds, spec.grid_resolution, spec.grid_radius)
    return wasserstein_dual_value(losses, coords, idx, spec.rho, spec.tol, atom_labels=labels)


def regularity_report(pp: PolicyPair, fm: FeatureMap, ds: PreferenceDataset, radii=(0.01, 0.1, 0.5)) -> dict:
    """Smallest eigenvalue of the feature-difference second moment under the
    empirical distribution and under the exact KL worst-case tilt at each radius.

    A positive value at every reweighting is what the estimation-error bounds
    need; it can only be checked at finitely many members of the ball.
    """
    x = feature_differences(ds, fm)
    n = len(ds)
    if n == 0:
        raise DomainError("empty dataset")
    q = np.full(n, 1.0 / n)
    report = {"empirical": min_eigenvalue(seq_sum_outer(x) / n), "tilts": []}
    losses = pointwise_losses(pp.delta, pp.beta, x, ds.labels)
    for rho in radii:
        try:
            tilt = kl_worst_case_exact(losses, q, float(rho))
        except DomainError:
            # equal losses: the tilt is the empirical distribution itself
            report["tilts"].append({"rho": float(rho), "min_eigenvalue": report["empirical"], "boundary": False})
            continue
        report["tilts"].append({"rho": float(rho), "min_eigenvalue": min_eigenvalue(seq_sum_outer(x, tilt.weights)),
                                "boundary": tilt.boundary})
    return report
