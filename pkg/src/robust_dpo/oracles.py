"""Independent reference computations used to validate the solvers.

These deliberately take different routes from the production code: brute
enumeration instead of duality, direct root finding instead of tilting,
Newton's method instead of gradient descent.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from .core import DomainError
from .prefgen import sigmoid, softplus


def wasserstein_grid_primal(atom_losses, atom_coords, sample_indices, rho: float,
                            grid: int = 10_000, atom_labels=None) -> float:
    """max E_p[l] over transport plans from the empirical sample with cost <= rho^2.

    Plans move each sample's 1/n mass onto support atoms.  The feasible set is
    a product of simplices cut by one linear cost constraint, so the optimum
    lies on an edge of the product polytope: every sample is sent to a single
    atom except at most one, which splits its mass between two atoms.  All
    such edges are enumerated and the split fraction is scanned on a uniform
    grid of ``grid`` steps, giving a lower bound within spread/grid of the
    optimum.
    """
    losses = np.asarray(atom_losses, dtype=float)
    coords = np.asarray(atom_coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    idx = [int(i) for i in sample_indices]
    n, m = len(idx), losses.size
    if n == 0 or m == 0:
        raise DomainError("empty instance")
    d2 = np.sum((coords[idx][:, None, :] - coords[None, :, :]) ** 2, axis=2)
    if atom_labels is not None:
        labels = np.asarray(atom_labels)
        d2 = np.where(labels[idx][:, None] == labels[None, :], d2, np.inf)
    budget = rho * rho
    t = np.linspace(0.0, 1.0, grid + 1)
    best = -math.inf
    for assign in product(range(m), repeat=n):
        cost = sum(d2[i, a] for i, a in enumerate(assign)) / n
        if not math.isfinite(cost):
            continue
        gain = sum(losses[a] for a in assign) / n
        if cost <= budget:
            best = max(best, gain)
        for i, a in enumerate(assign):
            for b in range(m):
                if b == a or not math.isfinite(d2[i, b]):
                    continue
                # move fraction t of sample i from atom a to atom b
                costs = cost + t * (d2[i, b] - d2[i, a]) / n
                gains = gain + t * (losses[b] - losses[a]) / n
                ok = costs <= budget
                if ok.any():
                    best = max(best, float(gains[ok].max()))
    return best


def binary_tilt_root(rho: float, tol: float = 1e-15) -> float:
    """p0 in (0, 1/2) with p0 log(2 p0) + (1 - p0) log(2 (1 - p0)) = rho.

    KL of (p0, 1 - p0) from uniform decreases strictly on (0, 1/2]; solved by
    plain bisection.
    """
    if not 0 < rho < math.log(2):
        raise DomainError("rho must lie in (0, log 2)")

    def kl(p: float) -> float:
        return p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))

    lo, hi = 0.0, 0.5
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid == 0.0 or kl(mid) > rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def kl_dual_grid(losses, base, rho: float, lo: float = 1e-3, hi: float = 1e3, points: int = 2000) -> float:
    """Minimum of the KL dual objective over log-spaced lambda values."""
    l = np.asarray(losses, dtype=float)
    q = np.asarray(base, dtype=float)
    best = math.inf
    for lam in np.logspace(math.log10(lo), math.log10(hi), points):
        m = l.max()
        val = lam * rho + m + lam * math.log(float(np.sum(q * np.exp((l - m) / lam))))
        best = min(best, val)
    return best


def newton_dpo_minimizer(x: np.ndarray, labels: np.ndarray, beta: float, theta_ref: np.ndarray,
                         iters: int = 100, tol: float = 1e-14) -> np.ndarray:
    """Unconstrained minimiser of the empirical DPO loss by damped Newton steps.

    Uses plain numpy sums (not the sequential summation of the production
    path) and a backtracking line search on the loss.
    """
    x = np.asarray(x, dtype=float)
    sign = 2.0 * np.asarray(labels) - 1.0
    delta = np.zeros(x.shape[1])

    def loss(dl):
        return float(np.mean(softplus(-sign * beta * (x @ dl))))

    for _ in range(iters):
        bh = beta * (x @ delta)
        p = sigmoid(bh)
        grad = -beta * ((labels - p)[:, None] * x).mean(axis=0)
        hess = beta * beta * ((p * (1 - p))[:, None, None] * (x[:, :, None] * x[:, None, :])).mean(axis=0)
        step = np.linalg.solve(hess, grad)
        f0, t = loss(delta), 1.0
        while loss(delta - t * step) > f0 and t > 1e-10:
            t *= 0.5
        delta = delta - t * step
        if np.linalg.norm(grad) < tol:
            break
    return delta + theta_ref
