import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_dpo.core import DomainError, PolicyParams, PreferenceDataset, empirical_covariance, min_eigenvalue
from robust_dpo.losses import empirical_dpo_loss, input_gradient_norm, pointwise_dpo_loss
from robust_dpo.oracles import binary_tilt_root, kl_dual_grid, wasserstein_grid_primal
from robust_dpo.policy import PolicyPair
from robust_dpo.robust import (RobustKind, RobustSpec, golden_section, regularity_report, kl_dual_value, kl_worst_case_exact,
                               kldpo_loss_approx, kldpo_worst_kernel, robust_loss, tilt_at_temperature,
                               wasserstein_dual_solve, wasserstein_dual_value, wasserstein_support, wdpo_loss_approx,
                               wdpo_pointwise_upper)
from robust_dpo.verify import random_instance

from conftest import dataset, make_pair


def test_spec_invariants():
    RobustSpec(kind="kl_exact", rho=0.1)
    for bad in (dict(lambda_lo=2.0, lambda_hi=1.0), dict(tol=0.0), dict(tau=0.0), dict(rho=-1.0), dict(p=1)):
        with pytest.raises(DomainError):
            RobustSpec(**bad)


def test_golden_section_endpoints_and_interior():
    assert golden_section(lambda t: (t - 0.3) ** 2, 0, 1).argmin == pytest.approx(0.3, abs=1e-8)
    assert golden_section(lambda t: t, 0, 1).argmin == 0.0
    assert golden_section(lambda t: -t, 0, 1).argmin == 1.0


# -- WDPO --------------------------------------------------------------------

def test_wdpo_zero_radius_is_bitwise_dpo(rng):
    for _ in range(20):
        inst = random_instance(rng)
        assert wdpo_loss_approx(inst.pp, inst.fm, inst.ds, 0.0) == empirical_dpo_loss(inst.pp, inst.fm, inst.ds)


def test_wdpo_at_reference_is_ln2(instance):
    pp = PolicyPair(instance.pp.reference, instance.pp.reference, instance.pp.beta)
    assert wdpo_loss_approx(pp, instance.fm, instance.ds, 3.0) == pytest.approx(math.log(2), abs=1e-15)


def test_wdpo_single_sample_regulariser(instance):
    one = instance.ds.subset([0])
    z = one[0]
    expected = pointwise_dpo_loss(instance.pp, instance.fm, z) + 0.7 * input_gradient_norm(instance.pp, instance.fm, z)
    assert wdpo_loss_approx(instance.pp, instance.fm, one, 0.7) == pytest.approx(expected, rel=1e-14)


def test_wdpo_dominates_dpo(rng):
    for _ in range(20):
        inst = random_instance(rng)
        assert wdpo_loss_approx(inst.pp, inst.fm, inst.ds, 0.2) > empirical_dpo_loss(inst.pp, inst.fm, inst.ds)
    with pytest.raises(DomainError):
        wdpo_loss_approx(inst.pp, inst.fm, PreferenceDataset.from_samples([]), 0.1)


def test_pointwise_upper_examples(instance):
    z = instance.ds[0]
    l = pointwise_dpo_loss(instance.pp, instance.fm, z)
    assert wdpo_pointwise_upper(instance.pp, instance.fm, z, 0.0) == l
    ref = PolicyPair(instance.pp.reference, instance.pp.reference, instance.pp.beta)
    assert wdpo_pointwise_upper(ref, instance.fm, z, 2.0) == pointwise_dpo_loss(ref, instance.fm, z)
    x = instance.fm.table[z.state, z.first] - instance.fm.table[z.state, z.second]
    h = float(instance.pp.delta @ x)
    sig = 1 / (1 + math.exp(-instance.pp.beta * h))
    g = instance.pp.beta * abs(z.label - sig) * np.linalg.norm(instance.pp.delta)
    assert wdpo_pointwise_upper(instance.pp, instance.fm, z, 0.4) == pytest.approx(l + 0.4 * g * g, rel=1e-12)


def test_pointwise_upper_mean_dominates_where_valid(rng):
    checked = 0
    for _ in range(200):
        inst = random_instance(rng, beta=3.0, B=4.0)
        sq = np.mean([input_gradient_norm(inst.pp, inst.fm, z) ** 2 for z in inst.ds])
        if sq < 1:
            continue
        checked += 1
        mean_upper = np.mean([wdpo_pointwise_upper(inst.pp, inst.fm, z, 0.3) for z in inst.ds])
        assert mean_upper >= wdpo_loss_approx(inst.pp, inst.fm, inst.ds, 0.3) - 1e-12
    assert checked > 0


# -- KLDPO kernel ------------------------------------------------------------

def test_kernel_examples():
    q = np.array([0.2, 0.3, 0.5])
    assert np.array_equal(kldpo_worst_kernel([0.4, 0.4, 0.4], q, 0.1), q)
    w = kldpo_worst_kernel([1.0, 2.0, 3.0], np.full(3, 1 / 3), 1.0)
    assert w == pytest.approx([0.09003057317038046, 0.24472847105479764, 0.6652409557748219], abs=1e-15)
    w = kldpo_worst_kernel(np.linspace(0, 1, 7), np.full(7, 1 / 7), 1e6)
    assert np.max(np.abs(w - 1 / 7)) <= 1e-6
    with pytest.raises(DomainError):
        kldpo_worst_kernel([1.0, 2.0], np.full(3, 1 / 3), 1.0)


def test_kernel_is_overflow_safe():
    w = kldpo_worst_kernel([0.0, 5000.0], [0.5, 0.5], 1e-3)
    assert np.array_equal(w, [0.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 20), min_size=2, max_size=12), st.floats(0.01, 100))
def test_kernel_likelihood_ratio_order(losses, tau):
    l = np.array(losses)
    q = np.full(l.size, 1.0 / l.size)
    w = kldpo_worst_kernel(l, q, tau)
    assert abs(w.sum() - 1) <= 1e-12 and np.all(w >= 0)
    for i in range(l.size):
        for j in range(l.size):
            if l[i] > l[j]:
                assert w[i] >= w[j]
                if (l[i] - l[j]) / tau > 1e-12 and w[j] > 0:
                    assert w[i] > w[j]


def test_kldpo_loss_examples(rng, square_fm):
    pp = PolicyPair(PolicyParams(np.array([0.8, -0.3]), 2.0), PolicyParams.zeros(2, 2.0), 1.0)
    same = dataset(*[(0, 0, 1, 1)] * 4)
    assert kldpo_loss_approx(pp, square_fm, same, 0.5) == pytest.approx(empirical_dpo_loss(pp, square_fm, same), abs=1e-15)
    three = dataset((0, 0, 1, 1), (0, 0, 1, 0), (1, 0, 1, 1))
    l = np.array([pointwise_dpo_loss(pp, square_fm, z) for z in three])
    assert len(set(l)) == 3
    tau = 0.7
    w = np.exp(l / tau) / np.exp(l / tau).sum()
    val = kldpo_loss_approx(pp, square_fm, three, tau)
    assert val == pytest.approx(float(w @ l), rel=1e-14)
    assert l.mean() < val < l.max()
    assert abs(kldpo_loss_approx(pp, square_fm, three, 1e6) - l.mean()) <= 1e-6


def test_kldpo_between_mean_and_max(rng):
    for _ in range(20):
        inst = random_instance(rng)
        v = kldpo_loss_approx(inst.pp, inst.fm, inst.ds, 0.5)
        l = [pointwise_dpo_loss(inst.pp, inst.fm, z) for z in inst.ds]
        assert np.mean(l) - 1e-15 <= v <= max(l) + 1e-15


# -- KL dual and exact tilt ---------------------------------------------------

def test_dual_examples():
    q = np.full(3, 1 / 3)
    assert kl_dual_value([2.0, 2.0, 2.0], q, 0.4, 0.5, 10.0) == pytest.approx(2.0 + 0.5 * 0.4, abs=1e-15)
    assert kl_dual_value([2.0, 2.0, 2.0], q, 0.0) == 2.0
    l = np.array([0.0, 1.0, 2.0])
    assert abs(kl_dual_value(l, q, 0.0) - 1.0) <= 1e-5
    assert abs(kl_dual_value(l, q, 0.1) - kl_dual_grid(l, q, 0.1)) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dual_monotone_and_above_mean(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 10))
    l, q = rng.random(m) * 3, rng.dirichlet(np.ones(m))
    vals = [kl_dual_value(l, q, r) for r in (0.0, 0.05, 0.2, 0.7, 1.5)]
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
    assert vals[0] >= float(q @ l) - 1e-9
    # lambda is bracketed below by 1e-6, so the dual can exceed max l by 1e-6 * rho
    assert vals[-1] <= l.max() + 1e-6 * 1.5 + 1e-12


def test_exact_tilt_small_radius_returns_base(rng):
    l, q = rng.random(5), rng.dirichlet(np.ones(5))
    t = kl_worst_case_exact(l, q, 1e-12, tol=1e-13)
    assert np.max(np.abs(t.weights - q)) <= 1e-5


def test_exact_tilt_two_atoms_matches_entropy_root():
    t = kl_worst_case_exact([0.0, 1.0], [0.5, 0.5], 0.05, tol=1e-13)
    # 40-digit root of p log 2p + (1-p) log 2(1-p) = 0.05 below 1/2
    assert t.weights[0] == pytest.approx(0.34321840163503318, abs=1e-9)
    assert binary_tilt_root(0.05) == pytest.approx(0.34321840163503318, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_exact_tilt_primal_dual(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 11))
    l, q = rng.random(m) * 2, rng.dirichlet(np.ones(m))
    rho = float(rng.uniform(0.01, 1.0))
    t = kl_worst_case_exact(l, q, rho)
    assert abs(t.weights.sum() - 1) <= 1e-12
    p = t.weights
    recomputed = float(np.sum(p[p > 0] * np.log(p[p > 0] / q[p > 0])))
    assert abs(recomputed - t.achieved_kl) <= 1e-10
    primal = float(p @ l)
    assert abs(primal - kl_dual_value(l, q, rho)) <= 1e-5
    if not t.boundary:
        assert abs(t.achieved_kl - rho) <= 1e-8
        assert -t.mu - t.lam <= -float(q @ l) + 1e-10


def test_exact_tilt_boundary_and_errors():
    with pytest.raises(DomainError):
        kl_worst_case_exact([1.0, 1.0], [0.5, 0.5], 0.1)
    t = kl_worst_case_exact([0.0, 1.0, 1.0], [0.5, 0.25, 0.25], 2.0)
    assert t.boundary and t.lam == 0.0
    assert np.array_equal(t.weights, [0.0, 0.5, 0.5])
    assert t.achieved_kl == pytest.approx(math.log(2), abs=1e-15)


def test_tilt_result_serialises():
    t = kl_worst_case_exact([0.0, 1.0, 3.0], np.full(3, 1 / 3), 0.2)
    d = t.to_dict()
    assert set(d) == {"lambda", "mu", "achieved_kl", "boundary", "iterations", "weights"}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_kernel_is_the_exact_tilt_at_lambda_tau(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 10))
    l, q = rng.random(m) * 2, np.full(m, 1.0 / m)
    tau = float(rng.uniform(0.05, 5))
    fixed = tilt_at_temperature(l, q, tau)
    assert np.max(np.abs(kldpo_worst_kernel(l, q, tau) - fixed.weights)) <= 1e-8
    # running the radius solver at the KL this temperature reaches recovers it
    solved = kl_worst_case_exact(l, q, fixed.achieved_kl, tol=1e-12)
    assert np.max(np.abs(solved.weights - fixed.weights)) <= 1e-5


# -- Wasserstein ---------------------------------------------------------------

def _winstance(rng, m_max=4):
    m = int(rng.integers(2, m_max + 1))
    coords = rng.standard_normal((m, 2))
    losses = rng.random(m)
    idx = rng.integers(0, m, size=int(rng.integers(1, 4)))
    diam = max(float(np.linalg.norm(a - b)) for a in coords for b in coords)
    return losses, coords, idx, diam


def test_wasserstein_boundary_identities(rng):
    for _ in range(20):
        losses, coords, idx, diam = _winstance(rng)
        assert abs(wasserstein_dual_value(losses, coords, idx, 0.0) - losses[idx].mean()) <= 1e-8
        assert abs(wasserstein_dual_value(losses, coords, idx, max(diam, diam ** 2)) - losses.max()) <= 1e-8


def test_wasserstein_matches_grid_primal_three_atoms():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    losses = np.array([0.1, 0.5, 0.9])
    for rho in (0.2, 0.6, 1.2):
        dual = wasserstein_dual_value(losses, coords, [0, 1], rho)
        primal = wasserstein_grid_primal(losses, coords, [0, 1], rho)
        assert abs(dual - primal) <= 1e-3
        assert dual >= primal - 1e-9


def test_grid_primal_against_linear_program(rng):
    from scipy.optimize import linprog
    for _ in range(10):
        losses, coords, idx, diam = _winstance(rng)
        n, m = len(idx), len(losses)
        d2 = np.sum((coords[idx][:, None] - coords[None]) ** 2, axis=2)
        rho = 0.4 * diam
        res = linprog(-np.tile(losses, n) / n, A_ub=[d2.ravel() / n], b_ub=[rho ** 2],
                      A_eq=np.kron(np.eye(n), np.ones(m)), b_eq=np.ones(n), bounds=(0, None))
        assert abs(-res.fun - wasserstein_grid_primal(losses, coords, idx, rho)) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_wasserstein_sandwich_and_monotone(seed):
    rng = np.random.default_rng(seed)
    losses, coords, idx, diam = _winstance(rng)
    prev = -math.inf
    for frac in (0.0, 0.15, 0.4, 0.8):
        dual = wasserstein_dual_value(losses, coords, idx, frac * diam)
        primal = wasserstein_grid_primal(losses, coords, idx, frac * diam, grid=2000)
        assert primal - 1e-9 <= dual <= primal + 1e-3
        assert dual >= losses[idx].mean() - 1e-12
        assert dual >= prev - 1e-9
        prev = dual


def test_wasserstein_label_restriction():
    coords = np.array([[0.0], [0.1], [0.2]])
    losses = np.array([0.0, 5.0, 1.0])
    labels = np.array([0, 1, 0])
    v = wasserstein_dual_value(losses, coords, [0], 10.0, atom_labels=labels)
    assert v == pytest.approx(1.0, abs=1e-8)
    assert wasserstein_grid_primal(losses, coords, [0], 10.0, atom_labels=labels) == pytest.approx(1.0, abs=1e-9)


def test_wasserstein_errors():
    with pytest.raises(DomainError):
        wasserstein_dual_value([], np.zeros((0, 2)), [0], 0.1)
    with pytest.raises(IndexError):
        wasserstein_dual_value([1.0], np.zeros((1, 2)), [3], 0.1)
    s = wasserstein_dual_solve([0.0, 1.0], [[0.0], [1.0]], [0], 0.5)
    assert s.eta_max == 2.0 and 0 <= s.eta <= s.eta_max


def test_support_and_exact_loss_dispatch(instance):
    losses, coords, labels, idx = wasserstein_support(instance.pp, instance.fm, instance.ds, 1, 0.3)
    assert coords.shape[1] == instance.fm.dim and len(idx) == len(instance.ds)
    dpo = empirical_dpo_loss(instance.pp, instance.fm, instance.ds)
    assert losses[idx].mean() == pytest.approx(dpo, rel=1e-12)
    w0 = robust_loss(RobustSpec(kind="wasserstein_exact", rho=0.0, grid_resolution=1, grid_radius=0.3),
                     instance.pp, instance.fm, instance.ds)
    w1 = robust_loss(RobustSpec(kind="wasserstein_exact", rho=0.2, grid_resolution=1, grid_radius=0.3),
                     instance.pp, instance.fm, instance.ds)
    assert w0 == pytest.approx(dpo, abs=1e-7) and w1 >= w0
    k = robust_loss(RobustSpec(kind="kl_exact", rho=0.1), instance.pp, instance.fm, instance.ds)
    assert k >= dpo
    assert robust_loss(RobustSpec(kind=RobustKind.KL_APPROX, tau=2.0), instance.pp, instance.fm, instance.ds) == \
        kldpo_loss_approx(instance.pp, instance.fm, instance.ds, 2.0)


def test_regularity_report_empirical_matches_covariance(instance):
    rep = regularity_report(instance.pp, instance.fm, instance.ds)
    assert rep["empirical"] == pytest.approx(min_eigenvalue(empirical_covariance(instance.ds, instance.fm)), abs=1e-14)
    assert [t["rho"] for t in rep["tilts"]] == [0.01, 0.1, 0.5]
    assert all(t["min_eigenvalue"] >= -1e-12 for t in rep["tilts"])


def test_regularity_report_tilt_can_lose_rank(square_fm):
    # two distinct difference directions; a large radius concentrates the tilt on the higher-loss one
    ds = dataset((0, 0, 1, 1), (0, 0, 1, 1), (1, 0, 1, 1))
    rep = regularity_report(make_pair([1.0, -1.0]), square_fm, ds, radii=(0.01, 5.0))
    assert rep["empirical"] > 1e-3
    assert rep["tilts"][1]["boundary"] and abs(rep["tilts"][1]["min_eigenvalue"]) < 1e-12
