"""Registry of invariant checks run by the ``verify`` command.

Every invariant of the loss, robust-loss and training layers has an id in
``REGISTERED_INVARIANTS``; ``run_checks`` executes all registered checks on
fixtures generated from a seed and fails if any id has no executed check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import FeatureMap, PolicyParams, PreferenceDataset, empirical_covariance, feature_differences, min_eigenvalue, substream
from .losses import (dpo_gradient, dpo_hessian, empirical_dpo_loss, input_gradient_norm, loss_constants,
                     pointwise_dpo_loss)
from .oracles import binary_tilt_root, wasserstein_grid_primal
from .policy import PolicyPair
from .prefgen import SamplingSpec, TabularReward, random_feature_map, sample_dataset
from .robust import (RobustSpec, kl_dual_value, kl_worst_case_exact, kldpo_worst_kernel, tilt_at_temperature,
                     wasserstein_dual_value, wdpo_loss_approx)
from .train import Method, TrainConfig, finite_difference_gradient, robust_gradient, train

REGISTERED_INVARIANTS = {
    "losses": ["loss_bounded", "gradient_matches_fd", "hessian_dominates_gamma_cov",
               "hessian_depends_on_difference_only", "input_gradient_matches_fd", "input_gradient_max_at_disfavored"],
    "robust": ["wdpo_zero_radius_bitwise", "kernel_likelihood_ratio_order", "kl_dual_monotone_above_mean",
               "kl_exact_primal_dual", "kl_exact_binary_root", "wasserstein_dual_matches_grid_primal",
               "wasserstein_boundaries", "kernel_matches_exact_tilt"],
    "train": ["projection_invariant", "full_batch_descent", "method_reductions", "determinism",
              "robust_gradient_matches_fd"],
}

FD_STEP = 1e-5
FD_RTOL = 1e-5


@dataclass
class Instance:
    fm: FeatureMap
    pp: PolicyPair
    ds: PreferenceDataset


def random_instance(rng: np.random.Generator, n: int | None = None, dim: int | None = None,
                    beta: float | None = None, B: float = 2.0) -> Instance:
    dim = dim or int(rng.integers(2, 9))
    num_states, num_actions = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    fm = random_feature_map(num_states, num_actions, dim, rng)
    beta = beta if beta is not None else float(rng.uniform(0.2, 2.0))

    def ball_point():
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v) * B * rng.uniform(0.05, 1.0)

    pp = PolicyPair(PolicyParams(ball_point(), B), PolicyParams(ball_point(), B), beta)
    reward = TabularReward(rng.standard_normal((num_states, num_actions)))
    n = n or int(rng.integers(2, 65))
    spec = SamplingSpec(np.full(num_states, 1.0 / num_states), PolicyParams.zeros(dim, B), n, int(rng.integers(2 ** 31)))
    return Instance(fm, pp, sample_dataset(fm, spec, reward))


def fd_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||n||, 1e-3): relative, with an absolute floor for vanishing gradients."""
    return float(np.linalg.norm(analytic - numeric) / max(float(np.linalg.norm(numeric)), 1e-3))


# -- losses -----------------------------------------------------------------

def check_loss_bounded(rng):
    worst = math.inf
    for _ in range(50):
        inst = random_instance(rng)
        K = loss_constants(inst.pp.beta, inst.pp.current.bound).K
        for s in inst.ds:
            l = pointwise_dpo_loss(inst.pp, inst.fm, s)
            worst = min(worst, K - l, l)
    return worst > 0, {"min_margin": worst}


def check_gradient_fd(rng):
    worst = 0.0
    for _ in range(100):
        inst = random_instance(rng)
        g = dpo_gradient(inst.pp, inst.fm, inst.ds)
        fd = finite_difference_gradient(lambda t: empirical_dpo_loss(inst.pp.with_theta(t), inst.fm, inst.ds),
                                        inst.pp.current.theta, FD_STEP)
        worst = max(worst, fd_relative_error(g, fd))
    return worst <= FD_RTOL, {"max_relative_error": worst}


def check_hessian_gamma(rng):
    worst = math.inf
    for _ in range(100):
        inst = random_instance(rng)
        gamma = loss_constants(inst.pp.beta, inst.pp.current.bound).gamma
        H = dpo_hessian(inst.pp, inst.fm, inst.ds)
        S = empirical_covariance(inst.ds, inst.fm)
        worst = min(worst, min_eigenvalue(H - gamma * S), min_eigenvalue(H))
    return worst >= -1e-10, {"min_eigenvalue": worst}


def check_hessian_difference_only(rng):
    worst = 0.0
    for _ in range(30):
        inst = random_instance(rng)
        shift = rng.standard_normal(inst.fm.dim) * 0.1
        B = inst.pp.current.bound * 2
        moved = PolicyPair(PolicyParams(inst.pp.current.theta + shift, B),
                           PolicyParams(inst.pp.reference.theta + shift, B), inst.pp.beta)
        worst = max(worst, float(np.max(np.abs(dpo_hessian(inst.pp, inst.fm, inst.ds) - dpo_hessian(moved, inst.fm, inst.ds)))))
    return worst <= 1e-12, {"max_abs_difference": worst}


def _loss_at_x(pp: PolicyPair, x: np.ndarray, y: int) -> float:
    from .prefgen import softplus
    return softplus(-(2 * y - 1) * pp.beta * float(pp.delta @ x))


def check_input_gradient_fd(rng):
    worst = 0.0
    for _ in range(100):
        inst = random_instance(rng, n=4)
        for s in inst.ds:
            x = inst.fm.table[s.state, s.first] - inst.fm.table[s.state, s.second]
            fd = finite_difference_gradient(lambda v: _loss_at_x(inst.pp, v, s.label), x, FD_STEP)
            g = input_gradient_norm(inst.pp, inst.fm, s)
            worst = max(worst, abs(g - float(np.linalg.norm(fd))) / max(float(np.linalg.norm(fd)), 1e-3))
    return worst <= FD_RTOL, {"max_relative_error": worst}


def check_input_gradient_disfavored(rng):
    ok = True
    for _ in range(50):
        inst = random_instance(rng, n=8)
        for s in inst.ds:
            h = float(inst.pp.delta @ (inst.fm.table[s.state, s.first] - inst.fm.table[s.state, s.second]))
            disfavored = 0 if h > 0 else 1
            s_dis = type(s)(s.state, s.first, s.second, disfavored)
            s_fav = type(s)(s.state, s.first, s.second, 1 - disfavored)
            ok &= input_gradient_norm(inst.pp, inst.fm, s_dis) >= input_gradient_norm(inst.pp, inst.fm, s_fav)
    return bool(ok), {}


# -- robust -----------------------------------------------------------------

def check_wdpo_zero(rng):
    ok = True
    for _ in range(30):
        inst = random_instance(rng)
        ok &= wdpo_loss_approx(inst.pp, inst.fm, inst.ds, 0.0) == empirical_dpo_loss(inst.pp, inst.fm, inst.ds)
    return bool(ok), {}


def check_kernel_order(rng):
    ok = True
    for _ in range(100):
        m = int(rng.integers(2, 12))
        l = rng.random(m) * 3
        q = np.full(m, 1.0 / m)
        w = kldpo_worst_kernel(l, q, float(rng.uniform(0.1, 5)))
        for i in range(m):
            for j in range(m):
                if l[i] > l[j]:
                    ok &= w[i] > w[j]
    return bool(ok), {}


def check_kl_dual_monotone(rng):
    ok, worst = True, math.inf
    for _ in range(50):
        m = int(rng.integers(2, 11))
        l, q = rng.random(m) * 2, rng.dirichlet(np.ones(m))
        vals = [kl_dual_value(l, q, r) for r in (0.0, 0.01, 0.1, 0.5, 1.0)]
        ok &= all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
        worst = min(worst, vals[0] - float(q @ l))
    return bool(ok) and worst >= -1e-9, {"min_gap_to_mean": worst}


def check_kl_exact(rng):
    gap, kl_err, bound = 0.0, 0.0, math.inf
    for _ in range(50):
        m = int(rng.integers(2, 11))
        l, q = rng.random(m) * 2, rng.dirichlet(np.ones(m))
        rho = float(rng.uniform(0.01, 1.0))
        t = kl_worst_case_exact(l, q, rho)
        primal = float(t.weights @ l)
        gap = max(gap, abs(primal - kl_dual_value(l, q, rho)))
        if not t.boundary:
            kl_err = max(kl_err, abs(t.achieved_kl - rho))
            bound = min(bound, -float(q @ l) - (-t.mu - t.lam))
    return gap <= 1e-5 and kl_err <= 1e-8 and bound >= -1e-10, {"max_primal_dual_gap": gap, "max_kl_error": kl_err,
                                                                "min_bound_slack": bound}


def check_kl_binary(rng):
    worst = 0.0
    for rho in (0.01, 0.05, 0.2, 0.5):
        t = kl_worst_case_exact([0.0, 1.0], [0.5, 0.5], rho, tol=1e-12)
        worst = max(worst, abs(t.weights[0] - binary_tilt_root(rho)))
    return worst <= 1e-6, {"max_abs_error": worst}


def _wasserstein_instance(rng):
    m = int(rng.integers(2, 5))
    coords = rng.standard_normal((m, 2))
    losses = rng.random(m)
    idx = rng.integers(0, m, size=int(rng.integers(1, 4)))
    diam = max(float(np.linalg.norm(a - b)) for a in coords for b in coords)
    return losses, coords, idx, diam


def check_wasserstein_grid(rng):
    worst = 0.0
    for _ in range(20):
        losses, coords, idx, diam = _wasserstein_instance(rng)
        for frac in (0.1, 0.3, 0.6):
            rho = frac * diam
            worst = max(worst, abs(wasserstein_dual_value(losses, coords, idx, rho)
                                   - wasserstein_grid_primal(losses, coords, idx, rho, grid=2000)))
    return worst <= 1e-3, {"max_abs_gap": worst}


def check_wasserstein_bounds(rng):
    ok = True
    for _ in range(20):
        losses, coords, idx, diam = _wasserstein_instance(rng)
        vals = [wasserstein_dual_value(losses, coords, idx, f * diam) for f in (0.0, 0.2, 0.5, 1.0)]
        ok &= abs(vals[0] - float(np.mean(losses[idx]))) <= 1e-8
        ok &= all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
        ok &= abs(wasserstein_dual_value(losses, coords, idx, max(diam, diam * diam)) - float(losses.max())) <= 1e-8
    return bool(ok), {}


def check_kernel_tilt(rng):
    worst = 0.0
    for _ in range(30):
        m = int(rng.integers(2, 11))
        l = rng.random(m) * 2
        q = np.full(m, 1.0 / m)
        tau = float(rng.uniform(0.1, 5))
        worst = max(worst, float(np.max(np.abs(kldpo_worst_kernel(l, q, tau) - tilt_at_temperature(l, q, tau).weights))))
    return worst <= 1e-8, {"max_abs_difference": worst}


# -- train ------------------------------------------------------------------

def _methods():
    return [TrainConfig(method=Method.DPO), TrainConfig(method=Method.WDPO, robust=RobustSpec(kind="wasserstein_approx", rho_o=0.1)),
            TrainConfig(method=Method.KLDPO, robust=RobustSpec(kind="kl_approx", tau=1.0))]


def check_projection(rng):
    ok = True
    for cfg in _methods():
        inst = random_instance(rng, n=32)
        c = cfg.with_(lr=50.0, epochs=20, B=0.5, beta=inst.pp.beta, stop_tol=0.0)
        for e in range(1, 21):
            rep = train(c.with_(epochs=e), inst.pp, inst.fm, inst.ds)
            ok &= float(np.linalg.norm(rep.final_params.theta)) <= 0.5
    return bool(ok), {}


def check_descent(rng):
    worst = -math.inf
    for _ in range(10):
        inst = random_instance(rng, n=64)
        cfg = TrainConfig(lr=1.0, lr_mode="smoothness", epochs=50, beta=inst.pp.beta, B=2.0, stop_tol=0.0)
        tr = train(cfg, inst.pp, inst.fm, inst.ds).loss_trace
        worst = max(worst, max(b - a for a, b in zip(tr, tr[1:])))
    return worst <= 1e-12, {"max_increase": worst}


def check_reductions(rng):
    worst = 0.0
    for _ in range(5):
        inst = random_instance(rng, n=32)
        base = TrainConfig(lr=0.5, epochs=100, beta=inst.pp.beta, B=2.0, stop_tol=0.0)
        ref = train(base, inst.pp, inst.fm, inst.ds).loss_trace
        w = train(base.with_(method=Method.WDPO, robust=RobustSpec(kind="wasserstein_approx", rho_o=0.0)), inst.pp, inst.fm, inst.ds).loss_trace
        k = train(base.with_(method=Method.KLDPO, robust=RobustSpec(kind="kl_approx", tau=1e6)), inst.pp, inst.fm, inst.ds).loss_trace
        if w != ref:
            return False, {"wdpo_bitwise": False}
        worst = max(worst, max(abs(a - b) for a, b in zip(ref, k)))
    return worst <= 1e-6, {"max_kldpo_deviation": worst}


def check_determinism(rng):
    inst = random_instance(rng, n=40)
    ok = True
    for cfg in _methods():
        for batch in ("full", 7):
            c = cfg.with_(lr=0.3, epochs=30, batch=batch, beta=inst.pp.beta, B=2.0, seed=5)
            ok &= train(c, inst.pp, inst.fm, inst.ds).to_json() == train(c, inst.pp, inst.fm, inst.ds).to_json()
    return bool(ok), {}


def check_robust_gradient(rng):
    worst = 0.0
    for _ in range(40):
        inst = random_instance(rng)
        x = feature_differences(inst.ds, inst.fm)
        for cfg in _methods():
            cfg = cfg.with_(beta=inst.pp.beta, B=inst.pp.current.bound)
            g = robust_gradient(cfg, inst.pp, inst.fm, inst.ds)
            if cfg.method is Method.KLDPO:
                from .losses import pointwise_losses
                l0 = pointwise_losses(inst.pp.delta, inst.pp.beta, x, inst.ds.labels)
                w = kldpo_worst_kernel(l0, np.full(len(inst.ds), 1 / len(inst.ds)), cfg.robust.tau)
                f = lambda t: float(w @ pointwise_losses(t - inst.pp.reference.theta, inst.pp.beta, x, inst.ds.labels))
            elif cfg.method is Method.WDPO:
                f = lambda t: wdpo_loss_approx(inst.pp.with_theta(t), inst.fm, inst.ds, cfg.robust.rho_o)
            else:
                f = lambda t: empirical_dpo_loss(inst.pp.with_theta(t), inst.fm, inst.ds)
            fd = finite_difference_gradient(f, inst.pp.current.theta, FD_STEP)
            worst = max(worst, fd_relative_error(g, fd))
    return worst <= FD_RTOL, {"max_relative_error": worst}


CHECKS: dict[tuple[str, str], Callable] = {
    ("losses", "loss_bounded"): check_loss_bounded,
    ("losses", "gradient_matches_fd"): check_gradient_fd,
    ("losses", "hessian_dominates_gamma_cov"): check_hessian_gamma,
    ("losses", "hessian_depends_on_difference_only"): check_hessian_difference_only,
    ("losses", "input_gradient_matches_fd"): check_input_gradient_fd,
    ("losses", "input_gradient_max_at_disfavored"): check_input_gradient_disfavored,
    ("robust", "wdpo_zero_radius_bitwise"): check_wdpo_zero,
    ("robust", "kernel_likelihood_ratio_order"): check_kernel_order,
    ("robust", "kl_dual_monotone_above_mean"): check_kl_dual_monotone,
    ("robust", "kl_exact_primal_dual"): check_kl_exact,
    ("robust", "kl_exact_binary_root"): check_kl_binary,
    ("robust", "wasserstein_dual_matches_grid_primal"): check_wasserstein_grid,
    ("robust", "wasserstein_boundaries"): check_wasserstein_bounds,
    ("robust", "kernel_matches_exact_tilt"): check_kernel_tilt,
    ("train", "projection_invariant"): check_projection,
    ("train", "full_batch_descent"): check_descent,
    ("train", "method_reductions"): check_reductions,
    ("train", "determinism"): check_determinism,
    ("train", "robust_gradient_matches_fd"): check_robust_gradient,
}


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def run_checks(seed: int = 0, only: list[str] | None = None) -> dict:
    """Run every registered check; the report fails if any registered id was not executed."""
    results = []
    executed = set()
    for (module, name), fn in CHECKS.items():
        cid = f"{module}.{name}"
        if only and cid not in only:
            continue
        rng = substream(seed, f"verify/{cid}")
        try:
            passed, metrics = fn(rng)
            error = None
        except Exception as exc:  # a crashing check is a failed check
            passed, metrics, error = False, {}, f"{type(exc).__name__}: {exc}"
        executed.add(cid)
        entry = {"id": cid, "passed": bool(passed), "metrics": {k: _json_safe(float(v)) for k, v in metrics.items()}}
        if error:
            entry["error"] = error
        results.append(entry)
    registered = {f"{m}.{n}" for m, names in REGISTERED_INVARIANTS.items() for n in names}
    if only:
        registered &= set(only)
    missing = sorted(registered - executed)
    return {"seed": seed, "checks": results, "missing": missing,
            "passed": not missing and all(r["passed"] for r in results)}
