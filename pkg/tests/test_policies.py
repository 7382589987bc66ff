import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlb import lowrank, policies
from mtlb.envs import draw_round, ellipsoid_argmax_batch, gen_finite, gen_infinite, instant_regret, pull
from mtlb.errors import InvalidArgumentError
from mtlb.numerics import Rng, sample_sphere, subspace_distance
from mtlb.policies import (
    E2TC,
    PEGE,
    IndependentGreedy,
    MLinGreedy,
    e2tc_budgets,
    epoch_schedule,
    moment_subspace,
)


def play(inst, policy, N, seed=0):
    """Minimal loop; returns the (N, T) instantaneous regret."""
    rng = Rng(seed)
    out = np.empty((N, inst.T))
    for n in range(1, N + 1):
        ctx = draw_round(inst, n, rng)
        a = policy.choose(ctx.public())
        fb = pull(inst, ctx, a, rng)
        out[n - 1] = instant_regret(inst, ctx, a)
        policy.observe(ctx.public(), a, fb)
    return out


# epoch schedule -----------------------------------------------------------

def test_epoch_schedule_reference_value():
    s = epoch_schedule(10_000)
    assert s.bounds == (0, 100, 1000, 3162, 10_000)
    assert s.M == 4


@pytest.mark.parametrize("N,bounds", [(4, (0, 4)), (16, (0, 4, 16)), (100, (0, 10, 31, 100))])
def test_epoch_schedule_small(N, bounds):
    assert epoch_schedule(N).bounds == bounds


def test_epoch_schedule_rejects_short_horizon():
    with pytest.raises(InvalidArgumentError):
        epoch_schedule(3)


@settings(max_examples=200, deadline=None)
@given(N=st.integers(4, 10**12))
def test_epoch_schedule_integer_exactness(N):
    s = epoch_schedule(N)
    assert s.bounds[0] == 0 and s.bounds[-1] == N
    assert all(a < b for a, b in zip(s.bounds, s.bounds[1:]))
    assert s.M == len(s.bounds) - 1 <= math.ceil(math.log2(math.log2(N)))
    for m, g in enumerate(s.bounds[1:-1], start=1):
        q = 2**m
        assert g**q <= N ** (q - 1) < (g + 1) ** q


# greedy policies --------------------------------------------------------

def test_greedy_ties_go_to_lowest_index():
    inst = gen_finite(d=4, k=1, T=3, K=5, seed=0)
    ctx = draw_round(inst, 1, Rng(0))
    assert list(MLinGreedy(3, 4, 1, 100, Rng(0)).choose(ctx)) == [0, 0, 0]
    assert list(IndependentGreedy(3, 4, 100).choose(ctx)) == [0, 0, 0]


def test_greedy_rejects_out_of_order_rounds():
    inst = gen_finite(d=4, k=1, T=2, K=3, seed=0)
    pol = IndependentGreedy(2, 4, 100)
    ctx = draw_round(inst, 2, Rng(0))
    with pytest.raises(InvalidArgumentError):
        pol.observe(ctx, pol.choose(ctx), pull(inst, ctx, [0, 0], Rng(0)))


def test_refits_use_only_the_current_epoch(monkeypatch):
    seen = []
    real = lowrank.fit_factored_erm

    def spy(batch, k, rng, **kw):
        seen.append(batch.designs.copy())
        return real(batch, k, rng, **kw)

    monkeypatch.setattr(policies, "fit_factored_erm", spy)
    inst = gen_finite(d=5, k=2, T=3, K=4, seed=1)
    N = 300
    bounds = epoch_schedule(N).bounds
    pol = MLinGreedy(3, 5, 2, N, Rng(0))
    rng = Rng(2)
    offered = []
    for n in range(1, N + 1):
        ctx = draw_round(inst, n, rng)
        a = pol.choose(ctx)
        offered.append(ctx.actions[np.arange(3), a])
        pol.observe(ctx, a, pull(inst, ctx, a, rng))
        if n == bounds[1]:
            assert pol.buffer_size == 0  # the refit at G_1 emptied it
        if n == bounds[1] + 5:
            assert pol.buffer_size == 3 * 5
    assert pol.refit_rounds == list(bounds[1:])
    assert [x.shape[1] for x in seen] == list(np.diff(bounds))
    offered = np.stack(offered, axis=1)  # (T, N, d)
    for m, designs in enumerate(seen):
        assert np.array_equal(designs, offered[:, bounds[m]:bounds[m + 1]])


def test_independent_refit_is_per_task_least_squares():
    inst = gen_finite(d=3, k=1, T=2, K=3, seed=4)
    pol = IndependentGreedy(2, 3, 16)
    rng = Rng(5)
    xs, rs = [], []
    for n in range(1, 5):
        ctx = draw_round(inst, n, rng)
        a = pol.choose(ctx)
        fb = pull(inst, ctx, a, rng)
        xs.append(ctx.actions[np.arange(2), a])
        rs.append(fb.rewards)
        pol.observe(ctx, a, fb)
    X, y = np.stack(xs, axis=1), np.stack(rs, axis=1)
    for t in range(2):
        assert np.allclose(pol.theta_hat[:, t], np.linalg.lstsq(X[t], y[t], rcond=None)[0])


def test_noiseless_mlin_greedy_is_exact_after_first_epoch():
    inst = gen_finite(d=20, k=2, T=5, K=5, seed=6).with_noise(0.0)
    pol = MLinGreedy(5, 20, 2, 10_000, Rng(0))
    regret = play(inst, pol, 1000)
    assert np.allclose(pol.theta_hat, inst.Theta, atol=1e-6)
    assert np.all(regret[100:] <= 1e-9)


def test_shared_representation_pools_data_when_tasks_are_data_poor():
    # 12 samples per task in the first epoch with d=20: independent least squares is
    # underdetermined, the pooled rank-2 fit is not
    inst = gen_finite(d=20, k=2, T=40, K=5, seed=7).with_noise(0.0)
    mlin = MLinGreedy(40, 20, 2, 144, Rng(0))
    indep = IndependentGreedy(40, 20, 144)
    play(inst, mlin, 12, seed=1)
    play(inst, indep, 12, seed=1)
    err = lambda th: np.linalg.norm(th - inst.Theta) / np.linalg.norm(inst.Theta)
    assert err(mlin.theta_hat) <= 1e-6
    assert err(indep.theta_hat) >= 0.3


# E2TC -------------------------------------------------------------------

def test_e2tc_budgets_reference():
    # 10^1.5 * 2 * sqrt(1000) = 2000 up to rounding
    N1, N2 = e2tc_budgets(10_000, 10, 10, 2, exponent_c=1.5)
    assert N1 in (1999, 2000) and N2 == 200
    N1, N2 = e2tc_budgets(10_000, 500, 10, 2, exponent_c=1.5)
    assert N1 == math.floor(10**1.5 * 2 * math.sqrt(20)) and N2 == 200
    assert e2tc_budgets(100, 1, 1, 1, c1=0.001)[0] == 1


def test_e2tc_budgets_errors_name_the_stage():
    with pytest.raises(InvalidArgumentError, match="N1"):
        e2tc_budgets(100, 1, 10, 2)
    with pytest.raises(InvalidArgumentError, match="N2"):
        e2tc_budgets(100, 1, 2, 1, c1=0.01, c2=20)
    with pytest.raises(InvalidArgumentError):
        e2tc_budgets(100, 0, 2, 1)


def test_e2tc_rejects_n2_not_multiple_of_k():
    with pytest.raises(InvalidArgumentError):
        E2TC(5, 4, 2, 100, 10, 5, Rng(0))


def test_moment_subspace_recovers_planted_direction():
    d = 6
    theta = np.zeros(d)
    theta[2] = 1.0
    xs = sample_sphere(d, 1.0, Rng(0), size=200_000)
    basis, M = moment_subspace(xs, xs @ theta, 1)
    expected = (np.eye(d) + 2 * np.outer(theta, theta)) / (d * (d + 2))
    assert np.abs(M - expected).max() <= 5e-4
    assert subspace_distance(basis, theta[:, None]) <= 0.05


def test_e2tc_stage_structure():
    inst = gen_infinite(d=6, k=2, T=8, seed=1, lam0=4.0)
    N1, N2, N = 40, 10, 80
    pol = E2TC(8, 6, 2, N, N1, N2, Rng(3))
    rng = Rng(4)
    actions = []
    for n in range(1, N + 1):
        ctx = draw_round(inst, n, rng)
        a = pol.choose(ctx.public())
        actions.append(a.copy())
        pol.observe(ctx.public(), a, pull(inst, ctx, a, rng))
        if n == N1:
            assert pol.stage == 2 and pol.B_hat.shape == (6, 2)
    assert pol.stage == 3
    acts = np.array(actions)
    assert np.allclose(np.linalg.norm(acts[:N1], axis=2), 2.0)
    assert list(pol.direction_counts) == [5, 5]
    for i, n in enumerate(range(N1 + 1, N1 + N2 + 1)):
        col = pol.B_hat[:, i // 5]
        assert np.allclose(acts[n - 1], 2.0 * col)
    commit, _ = ellipsoid_argmax_batch(pol.theta_hat.T, inst.Q)
    assert np.allclose(acts[N1 + N2:], commit)
    assert pol.w_hat.shape == (2, 8)


def test_e2tc_noiseless_commit_is_nearly_optimal():
    inst = gen_infinite(d=10, k=2, T=100, seed=2).with_noise(0.0)
    N1, N2 = e2tc_budgets(10_000, 100, 10, 2, exponent_c=1.5)
    pol = E2TC(100, 10, 2, N1 + N2 + 10, N1, N2, Rng(0))
    regret = play(inst, pol, N1 + N2 + 10)
    assert regret[-1].mean() <= 0.05


# PEGE -------------------------------------------------------------------

def test_pege_rounds_after():
    assert PEGE.rounds_after(1, 3) == 4
    assert PEGE.rounds_after(3, 3) == 3 * 3 + 6


def test_pege_schedule_and_noiseless_exactness():
    d, T = 4, 3
    inst = gen_infinite(d=d, k=2, T=T, seed=0, lam0=9.0).with_noise(0.0)
    pol = PEGE(T, d, 100)
    rng = Rng(1)
    explored = []
    for n in range(1, PEGE.rounds_after(3, d) + 1):
        ctx = draw_round(inst, n, rng)
        a = pol.choose(ctx)
        explored.append(np.count_nonzero(a[0]) == 1 and np.isclose(np.abs(a[0]).max(), 3.0))
        regret = instant_regret(inst, ctx, a)
        pol.observe(ctx, a, pull(inst, ctx, a, rng))
        if not explored[-1]:
            assert np.allclose(regret, 0, atol=1e-12)
    # cycle c: d exploration rounds followed by c exploitation rounds
    pattern = sum(([True] * d + [False] * c for c in (1, 2, 3)), [])
    assert explored == pattern
    assert np.allclose(pol.theta_hat, inst.Theta)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e6))
def test_greedy_choice_invariant_to_positive_scaling(seed, scale):
    inst = gen_finite(d=6, k=2, T=4, K=5, seed=seed % 1000)
    ctx = draw_round(inst, 1, Rng(seed))
    pol = IndependentGreedy(4, 6, 100)
    pol.theta_hat = Rng(seed).standard_normal((6, 4))
    before = pol.choose(ctx)
    pol.theta_hat = pol.theta_hat * scale
    assert np.array_equal(pol.choose(ctx), before)
