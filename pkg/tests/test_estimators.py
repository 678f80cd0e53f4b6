import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import enumerate_trajectories, retrace_by_trajectory_enumeration

from pengq import envs
from pengq.estimators import (
    Trajectory,
    batch_forward_sum,
    exact_operator_value,
    mc_operator_estimate,
    pql_target_recursive,
    pql_target_sum,
    read_jsonl,
    retrace_target_recursive,
    retrace_target_sum,
    sample_batch,
    sample_trajectory,
)
from pengq.mdp import TabularMdp, deterministic_policy, greedy
from pengq.operators import TraceConfig


def setup(seed, n_s=4, n_a=2, gamma=0.9, min_prob=0.1):
    mdp = envs.random_mdp(n_s, n_a, seed=seed, discount=gamma)
    mu = envs.random_policy(n_s, n_a, seed=seed + 1, min_prob=min_prob)
    q = np.random.default_rng(seed + 2).normal(size=(n_s, n_a))
    return mdp, mu, q


def cycle_mdp():
    """Deterministic 3-cycle; action 1 pays 1, action 0 pays 0."""
    p = np.zeros((3, 2, 3))
    for x in range(3):
        p[x, :, (x + 1) % 3] = 1.0
    return TabularMdp(p, np.tile([0.0, 1.0], (3, 1)), 0.9, np.array([1.0, 0.0, 0.0]))


# -- sampling -------------------------------------------------------------------


def test_deterministic_mdp_and_policy_give_unique_trajectory():
    mdp = cycle_mdp()
    pi = deterministic_policy([1, 0, 1], 2)
    a, b = sample_trajectory(mdp, pi, 5, seed=0), sample_trajectory(mdp, pi, 5, seed=99)
    np.testing.assert_array_equal(a.states, [0, 1, 2, 0, 1])
    np.testing.assert_array_equal(a.actions, [1, 0, 1, 1, 0])
    np.testing.assert_array_equal(a.rewards, [1, 0, 1, 1, 0])
    assert a.bootstrap_state == 2
    np.testing.assert_array_equal(a.states, b.states)


def test_same_seed_same_trajectory():
    mdp, mu, _ = setup(0)
    a, b = sample_batch(mdp, mu, 7, 20, seed=5), sample_batch(mdp, mu, 7, 20, seed=5)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)
    assert not np.array_equal(a.actions, sample_batch(mdp, mu, 7, 20, seed=6).actions)


def test_tree_first_action_frequency():
    mdp = envs.tree_mdp(envs.TreeSpec(3))
    mu = envs.behavior_policy(mdp.n_states, 0.3)
    batch = sample_batch(mdp, mu, 1, 100_000, seed=0)
    assert abs(np.mean(batch.actions[:, 0] == envs.LEFT) - 0.30) <= 0.005


def test_start_pair_and_errors():
    mdp, mu, _ = setup(1)
    batch = sample_batch(mdp, mu, 3, 10, seed=0, start=(2, 1))
    assert np.all(batch.states[:, 0] == 2) and np.all(batch.actions[:, 0] == 1)
    with pytest.raises(ValueError):
        sample_batch(mdp, mu, 0, 10)
    with pytest.raises(ValueError):
        sample_batch(mdp, mu, 3, 10, start=(9, 0))
    with pytest.raises(ValueError, match="zero behaviour"):
        sample_batch(mdp, deterministic_policy([0] * 4, 2), 3, 2, start=(0, 1))


def test_trajectory_validation_and_jsonl(tmp_path):
    with pytest.raises(ValueError):
        Trajectory([0, 1], [0], [0.0], [0.5], 1)
    with pytest.raises(ValueError):
        Trajectory([0], [0], [0.0], [0.0], 1)
    mdp, mu, _ = setup(2)
    trajs = [sample_trajectory(mdp, mu, 4, seed=s) for s in range(3)]
    from pengq.estimators import write_jsonl

    path = tmp_path / "t.jsonl"
    write_jsonl(trajs, path)
    back = read_jsonl(path)
    for a, b in zip(trajs, back):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.behavior_probs, b.behavior_probs)
        assert a.bootstrap_state == b.bootstrap_state


# -- forward sums -----------------------------------------------------------------


def test_retrace_sum_zero_discount_is_reward():
    mdp, mu, q = setup(3)
    traj = sample_trajectory(mdp, mu, 6, seed=0)
    est = retrace_target_sum(traj, q, greedy(q), np.ones_like(q), 1.0, 0.0)
    assert est.value == pytest.approx(traj.rewards[0], abs=1e-15)


def test_retrace_sum_zero_trace_keeps_first_td():
    mdp, mu, q = setup(4)
    pi = greedy(q)
    traj = sample_trajectory(mdp, mu, 6, seed=1)
    est = retrace_target_sum(traj, q, pi, np.zeros_like(q), 1.0, mdp.discount)
    x0, a0, x1 = traj.states[0], traj.actions[0], traj.next_states[0]
    delta0 = traj.rewards[0] + mdp.discount * pi[x1] @ q[x1] - q[x0, a0]
    assert est.value == pytest.approx(q[x0, a0] + delta0, abs=1e-12)


def test_batch_forward_sum_matches_per_trajectory():
    mdp, mu, q = setup(5)
    pi = greedy(q)
    c = np.minimum(1.0, pi / mu)
    batch = sample_batch(mdp, mu, 9, 30, seed=2)
    values = batch_forward_sum(batch, q, pi, c, 0.8, mdp.discount)
    single = [retrace_target_sum(batch.trajectory(i), q, pi, c, 0.8, mdp.discount).value for i in range(30)]
    np.testing.assert_allclose(values, single, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_forward_sum_expectation_matches_operator_by_enumeration(seed):
    """Expected forward sum over every ``H``-step trajectory versus the exact operator.

    The truncated tail is at most ``(gamma lam)^H max|delta| / (1 - gamma lam)``
    for traces bounded by 1.
    """
    mdp, mu, q = setup(10 + seed, n_s=2, n_a=2, gamma=0.6)
    lam, h = 0.5, 9
    pi = greedy(q)
    trace = TraceConfig("retrace", lam=lam)
    c = np.minimum(1.0, pi / mu)
    exact = exact_operator_value(mdp, mu, trace, q, (0, 1))
    enum = retrace_by_trajectory_enumeration(mdp, mu, pi, c, lam, q, 0, 1, h)
    v = np.sum(pi * q, axis=1)
    max_delta = np.max(np.abs(mdp.reward)) + mdp.discount * np.max(np.abs(v)) + np.max(np.abs(q))
    coef = mdp.discount * lam
    assert abs(enum - exact) <= coef**h * max_delta / (1 - coef)


# -- recursive targets --------------------------------------------------------------


def test_pql_recursive_lambda_zero_is_one_step():
    mdp, mu, q = setup(6)
    pi = greedy(q)
    traj = sample_trajectory(mdp, mu, 5, seed=0)
    x1 = traj.next_states[0]
    expected = traj.rewards[0] + mdp.discount * pi[x1] @ q[x1]
    assert pql_target_recursive(traj, q, pi, 0.0, mdp.discount).value == pytest.approx(expected, abs=1e-12)


def test_pql_recursive_lambda_one_is_uncorrected_return():
    mdp, mu, q = setup(7)
    pi = greedy(q)
    traj = sample_trajectory(mdp, mu, 6, seed=0)
    g = mdp.discount
    xh = traj.bootstrap_state
    expected = np.sum(g ** np.arange(6) * traj.rewards) + g**6 * pi[xh] @ q[xh]
    assert pql_target_recursive(traj, q, pi, 1.0, g).value == pytest.approx(expected, abs=1e-12)


def test_pql_recursive_differs_from_literal_c_one_forward_sum():
    """With target ``eval_policy`` and ``c = 1`` the forward sum carries the
    correction ``V(x_t) - Q(x_t, a_t)`` at every step, which the recursion
    replaces by ``lambda``-weighted sampled values; the two agree at
    ``lambda = 0`` but not in general."""
    mdp, mu, q = setup(8)
    pi = greedy(q)
    traj = sample_trajectory(mdp, mu, 6, seed=3)
    g = mdp.discount
    literal = lambda lam: retrace_target_sum(traj, q, pi, np.ones_like(q), lam, g).value  # noqa: E731
    recursive = lambda lam: pql_target_recursive(traj, q, pi, lam, g).value  # noqa: E731
    assert recursive(0.0) == pytest.approx(literal(0.0), abs=1e-12)
    assert abs(recursive(0.7) - literal(0.7)) > 1e-6


@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.integers(1, 15))
def test_pql_recursive_equals_sampled_mixture_forward_sum(seed, lam, h):
    mdp, mu, q = setup(seed % 50)
    pi = greedy(q)
    traj = sample_trajectory(mdp, mu, h, seed=seed)
    a = pql_target_recursive(traj, q, pi, lam, mdp.discount)
    b = pql_target_sum(traj, q, pi, lam, mdp.discount)
    assert abs(a.value - b.value) <= 1e-12
    np.testing.assert_allclose(a.per_step_td, b.per_step_td)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.sampled_from([0.5, 1.0, 2.0]), st.integers(1, 15))
def test_retrace_recursive_equals_forward_sum(seed, lam, cap, h):
    mdp, mu, q = setup(seed % 50)
    pi = envs.random_policy(*mdp.shape, seed=seed)
    traj = sample_trajectory(mdp, mu, h, seed=seed)
    c = np.minimum(pi / mu, cap)
    a = retrace_target_recursive(traj, q, pi, lam, cap, mdp.discount)
    b = retrace_target_sum(traj, q, pi, c, lam, mdp.discount)
    assert abs(a.value - b.value) <= 1e-12


def test_retrace_recursive_on_policy_matches_pql_recursive_in_expectation():
    """On-policy with ``cap = 1`` and ``lambda = 1`` every trace is 1.  The
    Retrace recursion corrects with ``Q(x, a)`` and the PQL recursion with
    ``V(x)``, so single trajectories differ; averaging over actions drawn from
    ``pi`` makes the corrections coincide and the expectations agree exactly."""
    mdp, _, q = setup(9, n_s=2, n_a=2)
    pi = envs.random_policy(*mdp.shape, seed=3, min_prob=0.1)
    g = mdp.discount
    mean_ret = mean_pql = 0.0
    gaps = []
    for p, traj in enumerate_trajectories(mdp, pi, 0, 1, 5):
        a = retrace_target_recursive(traj, q, pi, 1.0, 1.0, g)
        b = pql_target_recursive(traj, q, pi, 1.0, g)
        np.testing.assert_allclose(a.coefficients, 1.0)
        mean_ret += p * a.value
        mean_pql += p * b.value
        gaps.append(abs(a.value - b.value))
    assert mean_ret == pytest.approx(mean_pql, abs=1e-12)
    assert max(gaps) > 1e-3


def test_retrace_recursive_lambda_zero_is_one_step():
    mdp, mu, q = setup(10)
    pi = greedy(q)
    traj = sample_trajectory(mdp, mu, 5, seed=2)
    x1 = traj.next_states[0]
    expected = traj.rewards[0] + mdp.discount * pi[x1] @ q[x1]
    assert retrace_target_recursive(traj, q, pi, 0.0, 1.0, mdp.discount).value == pytest.approx(expected, abs=1e-12)


# -- Monte-Carlo ----------------------------------------------------------------------


def test_mc_single_sample_flags_stderr():
    mdp, mu, q = setup(11)
    est = mc_operator_estimate(mdp, mu, TraceConfig("retrace", lam=0.5), q, (0, 0), 1, 5, seed=0)
    assert est.n_samples == 1 and not est.stderr_defined and np.isnan(est.stderr)


def test_mc_deterministic_has_zero_stderr():
    mdp = cycle_mdp()
    pi = deterministic_policy([1, 1, 0], 2)
    q = np.arange(6.0).reshape(3, 2)
    est = mc_operator_estimate(mdp, pi, TraceConfig("retrace", lam=0.9), q, (0, 1), 50, 6, seed=0, target=pi)
    assert est.stderr == 0.0


@pytest.mark.parametrize("trace", [TraceConfig("retrace", lam=1.0), TraceConfig("pql", lam=0.6), TraceConfig("tree_backup", lam=0.8)])
def test_mc_retrace_is_unbiased(trace):
    mdp, mu, q = setup(12)
    coef = mdp.discount * trace.lam
    h = int(np.ceil(np.log(1e-6) / np.log(coef))) + 1
    est = mc_operator_estimate(mdp, mu, trace, q, (1, 0), 100_000, h, seed=4)
    exact = exact_operator_value(mdp, mu, trace, q, (1, 0))
    v_bound = np.max(np.abs(mdp.reward)) + 2 * np.max(np.abs(q))
    bias = coef**h * v_bound / (1 - coef)
    assert abs(est.mean - exact) <= 3 * est.stderr + bias
