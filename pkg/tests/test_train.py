import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_dpo.core import DomainError, PolicyParams, feature_differences
from robust_dpo.experiments import rate_environment
from robust_dpo.losses import dpo_gradient, empirical_dpo_loss, pointwise_losses
from robust_dpo.oracles import newton_dpo_minimizer
from robust_dpo.policy import PolicyPair
from robust_dpo.prefgen import realizable_reward, sample_dataset
from robust_dpo.robust import RobustSpec, kldpo_worst_kernel, wdpo_loss_approx
from robust_dpo.train import (TrainConfig, TrainReport, TrainingError, finite_difference_gradient,
                              robust_gradient, train)
from robust_dpo.verify import random_instance

WDPO = dict(method="wdpo", robust=RobustSpec(kind="wasserstein_approx", rho_o=0.2))
KLDPO = dict(method="kldpo", robust=RobustSpec(kind="kl_approx", tau=0.8))


def _cfg(inst, **kw):
    base = dict(beta=inst.pp.beta, B=inst.pp.current.bound, lr=0.5, epochs=20, stop_tol=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(epochs=0)
    with pytest.raises(DomainError):
        TrainConfig(lr=-1.0)
    with pytest.raises(DomainError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(method="adam")


def test_method_robust_spec_mismatch(instance):
    with pytest.raises(DomainError):
        robust_gradient(_cfg(instance, method="wdpo"), instance.pp, instance.fm, instance.ds)


def test_finite_difference_examples(rng):
    theta = rng.standard_normal(5)
    assert np.max(np.abs(finite_difference_gradient(lambda t: 0.5 * t @ t, theta, 1e-5) - theta)) <= 1e-10
    c = rng.standard_normal(5)
    assert np.max(np.abs(finite_difference_gradient(lambda t: c @ t, theta, 1e-3) - c)) <= 1e-12
    with pytest.raises(DomainError):
        finite_difference_gradient(lambda t: 0.0, theta, 0.0)


def test_gradient_reductions(rng):
    inst = random_instance(rng)
    g = dpo_gradient(inst.pp, inst.fm, inst.ds)
    zero = _cfg(inst, method="wdpo", robust=RobustSpec(kind="wasserstein_approx", rho_o=0.0))
    assert np.array_equal(robust_gradient(zero, inst.pp, inst.fm, inst.ds), g)
    assert np.array_equal(robust_gradient(_cfg(inst), inst.pp, inst.fm, inst.ds), g)
    # identical samples give identical losses, hence the uniform kernel
    same = inst.ds.subset([0] * 6)
    k = robust_gradient(_cfg(inst, **KLDPO), inst.pp, inst.fm, same)
    assert np.max(np.abs(k - dpo_gradient(inst.pp, inst.fm, same))) <= 1e-15


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_wdpo_gradient_matches_finite_differences(seed):
    inst = random_instance(np.random.default_rng(seed))
    cfg = _cfg(inst, **WDPO)
    g = robust_gradient(cfg, inst.pp, inst.fm, inst.ds)
    fd = finite_difference_gradient(lambda t: wdpo_loss_approx(inst.pp.with_theta(t), inst.fm, inst.ds, 0.2),
                                    inst.pp.current.theta, 1e-5)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_kldpo_gradient_is_frozen_weight_gradient(seed):
    inst = random_instance(np.random.default_rng(seed))
    x = feature_differences(inst.ds, inst.fm)
    n = len(inst.ds)
    w = kldpo_worst_kernel(pointwise_losses(inst.pp.delta, inst.pp.beta, x, inst.ds.labels), np.full(n, 1 / n), 0.8)
    ref = inst.pp.reference.theta
    fd = finite_difference_gradient(lambda t: float(w @ pointwise_losses(t - ref, inst.pp.beta, x, inst.ds.labels)),
                                    inst.pp.current.theta, 1e-5)
    g = robust_gradient(_cfg(inst, **KLDPO), inst.pp, inst.fm, inst.ds)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


def test_frozen_weight_gradient_is_gradient_of_log_mgf(rng):
    # sum_i w_i grad l_i equals the exact gradient of tau * log mean exp(l / tau)
    inst = random_instance(rng)
    x = feature_differences(inst.ds, inst.fm)
    ref, tau = inst.pp.reference.theta, 0.8

    def soft_max(t):
        l = pointwise_losses(t - ref, inst.pp.beta, x, inst.ds.labels)
        m = l.max()
        return m + tau * np.log(np.mean(np.exp((l - m) / tau)))

    fd = finite_difference_gradient(soft_max, inst.pp.current.theta, 1e-5)
    g = robust_gradient(_cfg(inst, **KLDPO), inst.pp, inst.fm, inst.ds)
    assert np.linalg.norm(g - fd) <= 1e-6


def test_wdpo_subgradient_at_reference(instance):
    pp = PolicyPair(instance.pp.reference, instance.pp.reference, instance.pp.beta)
    g = robust_gradient(_cfg(instance, **WDPO), pp, instance.fm, instance.ds)
    assert np.array_equal(g, dpo_gradient(pp, instance.fm, instance.ds))


def test_null_update_returns_projected_init(instance):
    far = PolicyPair(PolicyParams(instance.pp.current.theta * 100, 1e3), instance.pp.reference, instance.pp.beta)
    rep = train(_cfg(instance, lr=0.0, epochs=1), far, instance.fm, instance.ds)
    B = instance.pp.current.bound
    expected = far.current.theta / np.linalg.norm(far.current.theta) * B
    assert np.allclose(rep.final_params.theta, expected, rtol=0, atol=1e-15)
    assert np.linalg.norm(rep.final_params.theta) <= B
    assert rep.epochs_run == 1 and len(rep.loss_trace) == 1


def test_projection_holds_every_epoch(rng):
    inst = random_instance(rng, n=30)
    for kw in ({}, WDPO, KLDPO):
        for e in range(1, 15):
            rep = train(_cfg(inst, lr=40.0, epochs=e, B=0.3, **kw), inst.pp, inst.fm, inst.ds)
            assert np.linalg.norm(rep.final_params.theta) <= 0.3


def test_full_batch_descent_with_smoothness_step(rng):
    for _ in range(10):
        inst = random_instance(rng, n=64)
        rep = train(_cfg(inst, lr=1.0, lr_mode="smoothness", epochs=60), inst.pp, inst.fm, inst.ds)
        tr = rep.loss_trace
        assert all(b <= a + 1e-12 for a, b in zip(tr, tr[1:]))


def test_method_reductions_in_training(rng):
    inst = random_instance(rng, n=40)
    base = _cfg(inst, lr=0.5, epochs=100)
    dpo = train(base, inst.pp, inst.fm, inst.ds)
    w = train(base.with_(method="wdpo", robust=RobustSpec(kind="wasserstein_approx", rho_o=0.0)), inst.pp, inst.fm, inst.ds)
    k = train(base.with_(method="kldpo", robust=RobustSpec(kind="kl_approx", tau=1e6)), inst.pp, inst.fm, inst.ds)
    assert w.loss_trace == dpo.loss_trace
    assert max(abs(a - b) for a, b in zip(dpo.loss_trace, k.loss_trace)) <= 1e-6


def test_determinism_bitwise(rng):
    inst = random_instance(rng, n=50)
    for kw in ({}, WDPO, KLDPO):
        for batch in ("full", 8):
            cfg = _cfg(inst, batch=batch, seed=3, **kw)
            assert train(cfg, inst.pp, inst.fm, inst.ds).to_json() == train(cfg, inst.pp, inst.fm, inst.ds).to_json()


def test_minibatch_seed_changes_trajectory(rng):
    inst = random_instance(rng, n=50)
    a = train(_cfg(inst, batch=8, seed=1), inst.pp, inst.fm, inst.ds)
    b = train(_cfg(inst, batch=8, seed=2), inst.pp, inst.fm, inst.ds)
    assert a.loss_trace != b.loss_trace


def test_stops_on_tolerance(instance):
    rep = train(_cfg(instance, lr=1.0, lr_mode="smoothness", epochs=5000, stop_tol=1e-6), instance.pp, instance.fm, instance.ds)
    assert rep.converged and rep.epochs_run < 5000 and rep.grad_norm_trace[-1] <= 1e-6


def test_non_finite_gradient_aborts(instance):
    with pytest.raises(TrainingError):
        train(_cfg(instance, lr=float("inf"), epochs=3), instance.pp, instance.fm, instance.ds)


def test_report_serialisation(instance):
    rep = train(_cfg(instance, epochs=3), instance.pp, instance.fm, instance.ds)
    assert TrainReport.from_json(rep.to_json()).to_json() == rep.to_json()
    lines = rep.to_csv().splitlines()
    assert lines[0] == "epoch,loss,grad_norm" and len(lines) == 4
    assert json.loads(rep.to_json())["epochs_run"] == 3


def test_long_run_matches_newton_minimiser():
    env, theta_true = rate_environment(11, dim=4, num_states=10, num_actions=4)
    reward = realizable_reward(theta_true, env.reference, env.beta, env.fm)
    ds = sample_dataset(env.fm, env.sampling(10_000, 5), reward)
    pp = env.pair(np.zeros(4), 3.0)
    cfg = TrainConfig(lr=1.0, lr_mode="smoothness", epochs=2000, stop_tol=0.0, beta=env.beta, B=3.0)
    rep = train(cfg, pp, env.fm, ds)
    assert rep.grad_norm_trace[-1] <= 1e-6
    x = feature_differences(ds, env.fm)
    theta_star = newton_dpo_minimizer(x, ds.labels, env.beta, env.reference.theta)
    assert np.linalg.norm(theta_star) < 3.0  # the ball constraint is inactive
    best = empirical_dpo_loss(pp.with_theta(theta_star), env.fm, ds)
    assert abs(rep.loss_trace[-1] - best) <= 1e-6
