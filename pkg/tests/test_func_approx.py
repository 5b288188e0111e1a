import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brl.func_approx import (FiniteStep, FunctionFamily, KernelStep, LinearStep, QFunction, SparseLinearStep,
                             completeness_gap, eval as f_eval, greedy_policy, least_squares_fit, value_reduce,
                             value_tables)
from brl.mdp import bellman_apply, optimal_q
from brl.seeding import stream
from conftest import small_instance


def test_eval_examples(instance):
    mdp, _ = instance
    q = optimal_q(mdp)
    fam = FunctionFamily.finite([q], bound=2.0, tied=True)
    f = fam.from_indices((0, 0))
    assert f_eval(f, 1, 2, 1) == q[1, 2, 1]
    phi = np.zeros((1, 1, 2))
    phi[0, 0] = (1, 0)
    step = LinearStep(phi, radius=1.0)
    assert step.member(np.zeros(2)).table[0, 0] == 0
    lin = FunctionFamily([step]).from_params([np.ones(2) / math.sqrt(2)])
    assert f_eval(lin, 0, 0, 0) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(IndexError):
        f_eval(lin, 1, 0, 0)


def test_value_reduce_examples():
    assert value_reduce(np.array([[[0.2, 0.9]]]), 0, 0) == 0.9
    single = np.array([[[0.3], [0.4]]])
    assert value_reduce(single, 0, 1) == f_eval(single, 0, 1, 0)
    assert value_reduce(np.full((2, 3, 2), 0.25), 1, 2) == 0.25
    assert value_reduce(single, 1, 0) == 0.0
    np.testing.assert_array_equal(value_tables(single), [[0.3, 0.4], [0, 0]])


def test_greedy_policy_examples():
    f = np.array([[[0.1, 0.5], [0.9, 0.2]]])
    np.testing.assert_array_equal(greedy_policy(f).actions, [[1, 0]])
    assert np.all(greedy_policy(np.zeros((2, 3, 2))).actions == 0)
    np.testing.assert_array_equal(greedy_policy(2 * f).actions, greedy_policy(f).actions)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100), st.floats(-5, 5))
def test_greedy_affine_invariant(seed, scale, shift):
    f = stream(seed, 0).random((2, 3, 3))
    np.testing.assert_array_equal(greedy_policy(scale * f + shift).actions, greedy_policy(f).actions)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_value_reduce_dominates(seed):
    f = stream(seed, 0).normal(size=(2, 3, 4))
    for h, s, a in itertools.product(range(2), range(3), range(4)):
        assert value_reduce(f, h, s) >= f_eval(f, h, s, a)


def test_least_squares_examples():
    single = FiniteStep(np.full((1, 2, 2), 0.3), bound=1.0)
    m = least_squares_fit(single, [((0, 0), 5.0), ((1, 1), -2.0)])
    assert m.param == 0
    step = LinearStep(np.ones((2, 1, 1)), radius=1.0)
    m = least_squares_fit(step, [((0, 0), 0.2), ((1, 0), 0.4)])
    assert m.param[0] == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        least_squares_fit(step, [])
    with pytest.raises(ValueError):
        least_squares_fit(step, [((0, 0), math.nan)])


def test_least_squares_interpolates_realizable():
    rng = stream(3, 0)
    phi = rng.normal(size=(4, 2, 3))
    phi /= np.linalg.norm(phi, axis=-1, keepdims=True)
    step = LinearStep(phi, radius=2.0)
    w = np.array([0.3, -0.4, 0.5])
    s = rng.integers(0, 4, 30)
    a = rng.integers(0, 2, 30)
    m = least_squares_fit(step, (s, a, phi[s, a] @ w))
    assert np.mean((m.table[s, a] - phi[s, a] @ w) ** 2) <= 1e-9
    members = rng.uniform(-1, 1, size=(5, 4, 2))
    fin = FiniteStep(members, 1.0)
    m = least_squares_fit(fin, (s, a, members[3, s, a]))
    assert m.param == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_finite_fit_is_exact_minimizer(seed):
    rng = stream(seed, 0)
    members = rng.uniform(-1, 1, size=(6, 3, 2))
    fin = FiniteStep(members, 1.0)
    s, a = rng.integers(0, 3, 10), rng.integers(0, 2, 10)
    y = rng.uniform(-1, 1, 10)
    m = least_squares_fit(fin, (s, a, y))
    res = [np.mean((members[k, s, a] - y) ** 2) for k in range(6)]
    assert res[m.param] <= min(res) + 1e-15
    assert m.param == int(np.argmin(res))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_linear_fit_matches_normal_equations(seed):
    rng = stream(seed, 0)
    phi = rng.normal(size=(5, 2, 3))
    phi /= 2 * np.linalg.norm(phi, axis=-1, keepdims=True)
    step = LinearStep(phi, radius=100.0, bound=100.0)
    s, a = rng.integers(0, 5, 20), rng.integers(0, 2, 20)
    y = rng.uniform(-1, 1, 20)
    X = phi[s, a]
    w_ne = np.linalg.solve(X.T @ X, X.T @ y)
    m = least_squares_fit(step, (s, a, y))
    r_fit = np.mean((m.table[s, a] - y) ** 2)
    r_ne = np.mean((X @ w_ne - y) ** 2)
    assert abs(r_fit - r_ne) <= 1e-8


def test_linear_fit_projects_and_clips():
    phi = np.ones((1, 1, 1))
    step = LinearStep(phi, radius=0.5, bound=0.4)
    m = step.fit(np.array([0]), np.array([0]), np.array([3.0]))
    assert m.param[0] == pytest.approx(0.5) and m.table[0, 0] == pytest.approx(0.4)


def test_sparse_fit_selects_true_support():
    rng = stream(4, 0)
    phi = rng.normal(size=(10, 3, 6))
    phi /= np.linalg.norm(phi, axis=-1, keepdims=True)
    step = SparseLinearStep(phi, radius=3.0, sparsity=2)
    w = np.zeros(6)
    w[[1, 4]] = [0.8, -0.6]
    s, a = rng.integers(0, 10, 40), rng.integers(0, 3, 40)
    m = step.fit(s, a, phi[s, a] @ w)
    np.testing.assert_allclose(m.param, w, atol=1e-9)
    assert np.count_nonzero(m.param) <= 2


def test_kernel_fit_interpolates():
    rng = stream(5, 0)
    X = rng.normal(size=(6, 2))
    K = np.exp(-((X[:, None] - X[None]) ** 2).sum(-1))
    step = KernelStep.from_gram(K, rkhs_bound=50.0, rho=np.full(6, 1 / 6), bound=50.0, grid_shape=(6, 1))
    beta = rng.normal(size=6) * 0.3
    target = K @ beta
    s = np.arange(6).repeat(3)
    m = step.fit(s, np.zeros_like(s), target[s])
    np.testing.assert_allclose(m.table.ravel(), target, atol=1e-6)
    assert step.eigenvalues.sum() == pytest.approx(np.trace(K) / 6)


def test_family_serialization_round_trip():
    rng = stream(6, 0)
    phi = rng.dirichlet(np.ones(3), size=(2, 2))
    fam = FunctionFamily([FiniteStep(rng.uniform(0, 1, (3, 2, 2)), 1.0), LinearStep(phi, 1.0)])
    back = FunctionFamily.from_dict(fam.to_dict())
    f = fam.from_params([2, np.array([0.1, 0.2, 0.3])])
    g = QFunction.from_dict(f.to_dict(), back)
    np.testing.assert_array_equal(f.tables(), g.tables())
    assert back.variant == "mixed"


def test_completeness_gap_examples(instance):
    mdp, mu = instance
    q = optimal_q(mdp)
    single = FunctionFamily.finite([[q[0]], [q[1]]], bound=2.0)
    assert completeness_gap(mdp, mu, single).gap == pytest.approx(0, abs=1e-15)
    # per-step constant shift: {Q*, Q* + delta} at step 0 covers T*(Q*_1 + delta)
    shifted = FunctionFamily([FiniteStep([q[0], q[0] + 0.1], 2.1), FiniteStep([q[1], q[1] + 0.1], 2.1)])
    # the image of Q*_1 + 0.1 is Q*_0 + 0.1; the last step's image is r = Q*_1
    rep = completeness_gap(mdp, mu, shifted)
    assert rep.gap == pytest.approx(0, abs=1e-15) and rep.is_exact


def test_completeness_gap_hand_computed():
    # two states, one action, H = 2, every transition to state 1
    P = np.zeros((2, 2, 1, 2))
    P[..., 1] = 1.0
    r = np.array([[[0.2], [0.4]], [[0.5], [0.1]]])
    from brl.mdp import BatchDistribution, TabularMdp
    mdp = TabularMdp(P, r)
    mu = BatchDistribution(np.array([[[0.25], [0.75]], [[0.5], [0.5]]]))
    F = FunctionFamily([FiniteStep([[[0.0], [0.0]]], 1.0), FiniteStep([[[0.3], [0.6]]], 1.0)])
    # step 0 image of F_1 member: r_0 + 0.6 = (0.8, 1.0) vs G_0 member 0 -> 0.25*0.64 + 0.75*1.0
    # step 1 image of zero: r_1 = (0.5, 0.1) vs (0.3, 0.6) -> 0.5*0.04 + 0.5*0.25
    expected = max(0.25 * 0.64 + 0.75 * 1.0, 0.5 * 0.04 + 0.5 * 0.25)
    assert completeness_gap(mdp, mu, F).gap == pytest.approx(expected, abs=1e-12)


def test_completeness_gap_zero_on_explicit_closure():
    mdp, mu = small_instance(9, S=3, A=2, H=3)
    rng = stream(9, 3)
    last = rng.uniform(0, 1, size=(3, 3, 2))
    steps = [None] * 3
    steps[2] = np.concatenate([last, mdp.rewards[2][None]])
    for h in (1, 0):
        steps[h] = np.stack([bellman_apply(mdp, h, m) for m in steps[h + 1]])
    fam = FunctionFamily([FiniteStep(m, 3.0) for m in steps])
    assert completeness_gap(mdp, mu, fam).gap <= 1e-15


def test_linear_completeness_is_probe_estimate():
    from brl.harness import closed_linear_instance
    mdp, mu, fam = closed_linear_instance(seed=1)
    rep = completeness_gap(mdp, mu, fam)
    assert not rep.is_exact and rep.gap <= 1e-12


def test_family_validation():
    with pytest.raises(ValueError):
        FiniteStep(np.full((1, 2, 2), 2.0), bound=1.0)
    with pytest.raises(ValueError):
        LinearStep(np.full((2, 2, 2), 1.0), radius=1.0)
    with pytest.raises(ValueError):
        FunctionFamily([FiniteStep(np.zeros((1, 2, 2)), 1), FiniteStep(np.zeros((1, 3, 2)), 1)])
    with pytest.raises(ValueError):
        FunctionFamily([FiniteStep(np.zeros((1, 2, 2)), 1), FiniteStep(np.zeros((2, 2, 2)), 1)], tied=True)
