import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import bellman_loop, lambda_return_series, mdp_and_policy, policies, q_values, small_mdps

from pengq import envs
from pengq.mdp import bellman, greedy, mix_policies, policy_q, sup_dist, uniform_policy
from pengq.operators import (
    ResolventSolveSpec,
    TraceConfig,
    ctrace_alpha,
    ctrace_contraction_rate,
    general_retrace_op,
    lambda_return_op,
    n_step_op,
    pql_forms,
    pql_op,
    pql_series,
    resolve_trace,
    resolvent,
    uncorrected_n_step_op,
    validate_conservative,
)
from pengq._linalg import SingularResolventError

SERIES = ResolventSolveSpec("series", tol=1e-13)


def instance(seed, n_s=4, n_a=2, gamma=0.9):
    mdp = envs.random_mdp(n_s, n_a, seed=seed, discount=gamma)
    mu = envs.random_policy(n_s, n_a, seed=seed + 1, min_prob=0.05)
    q = np.random.default_rng(seed + 2).normal(scale=3.0, size=(n_s, n_a))
    return mdp, mu, q


# -- resolvent -------------------------------------------------------------------


@given(mdp_and_policy(), st.floats(0.0, 1.0))
def test_resolvent_direct_matches_series(mp, lam):
    mdp, pi = mp
    x = np.random.default_rng(0).normal(size=mdp.shape)
    a = resolvent(mdp, pi, mdp.discount * lam, x)
    b = resolvent(mdp, pi, mdp.discount * lam, x, SERIES)
    np.testing.assert_allclose(a, b, atol=1e-9)
    # (I - coef P^pi) a = x
    back = a - mdp.discount * lam * mdp.transition @ np.sum(pi * a, axis=1)
    np.testing.assert_allclose(back, x, atol=1e-9)


def test_series_resolvent_refuses_divergent_weights():
    mdp, mu, q = instance(0)
    trace = TraceConfig("custom", lam=1.0, c=np.full(mdp.shape, 1.5))
    with pytest.raises(SingularResolventError):
        general_retrace_op(mdp, trace, mu, q, solve=SERIES)


# -- n-step and lambda-return -----------------------------------------------------


@given(mdp_and_policy(), st.data())
def test_n_step_small_n(mp, data):
    mdp, pi = mp
    q = data.draw(q_values(*mdp.shape))
    np.testing.assert_allclose(n_step_op(mdp, pi, 1, q), bellman(mdp, pi, q))
    np.testing.assert_allclose(n_step_op(mdp, pi, 2, q), bellman(mdp, pi, bellman(mdp, pi, q)))


def test_n_step_fifty_within_contraction_bound():
    mdp, pi, q0 = instance(3)
    q_pi = policy_q(mdp, pi)
    assert sup_dist(n_step_op(mdp, pi, 50, q0), q_pi) <= 0.9**50 * sup_dist(q0, q_pi) + 1e-12


def test_n_step_rejects_bad_n():
    mdp, pi, q = instance(0)
    for n in (0, 1.5):
        with pytest.raises(ValueError):
            n_step_op(mdp, pi, n, q)


@given(mdp_and_policy(), st.data())
def test_lambda_return_endpoints(mp, data):
    mdp, pi = mp
    q = data.draw(q_values(*mdp.shape))
    np.testing.assert_allclose(lambda_return_op(mdp, pi, 0.0, q), bellman(mdp, pi, q), atol=1e-12)
    np.testing.assert_allclose(lambda_return_op(mdp, pi, 1.0, q), policy_q(mdp, pi), atol=1e-9)


def test_lambda_return_matches_truncated_series():
    for seed in range(5):
        mdp, pi, q = instance(seed)
        np.testing.assert_allclose(
            lambda_return_op(mdp, pi, 0.5, q), lambda_return_series(mdp, pi, 0.5, q, 200), atol=1e-8
        )


# -- uncorrected n-step -------------------------------------------------------------


@given(mdp_and_policy(), st.data())
def test_uncorrected_n_step_reductions(mp, data):
    mdp, mu = mp
    pi = data.draw(policies(*mdp.shape))
    q = data.draw(q_values(*mdp.shape))
    np.testing.assert_allclose(uncorrected_n_step_op(mdp, mu, pi, 1, q), bellman(mdp, pi, q))
    np.testing.assert_allclose(uncorrected_n_step_op(mdp, pi, pi, 4, q), n_step_op(mdp, pi, 4, q), atol=1e-12)


def test_uncorrected_three_step_matches_loop_composition():
    mdp, mu, q = instance(7)
    pi = greedy(q)
    expected = bellman_loop(mdp, mu, bellman_loop(mdp, mu, bellman_loop(mdp, pi, q)))
    np.testing.assert_allclose(uncorrected_n_step_op(mdp, mu, pi, 3, q), expected, atol=1e-12)


# -- Peng's Q(lambda) -------------------------------------------------------------


@given(mdp_and_policy(), st.data())
def test_pql_endpoints(mp, data):
    mdp, mu = mp
    pi = data.draw(policies(*mdp.shape))
    q = data.draw(q_values(*mdp.shape))
    np.testing.assert_allclose(pql_op(mdp, mu, pi, 0.0, q), bellman(mdp, pi, q), atol=1e-12)
    np.testing.assert_allclose(pql_op(mdp, mu, pi, 1.0, q), policy_q(mdp, mu), atol=1e-9)


@given(mdp_and_policy(), st.sampled_from([0.1, 0.5, 0.9]), st.data())
def test_pql_three_forms_agree(mp, lam, data):
    mdp, mu = mp
    q = data.draw(q_values(*mdp.shape))
    _, spread = pql_forms(mdp, mu, greedy(q), lam, q)
    assert spread <= 1e-9


def test_pql_series_examples():
    mdp, mu, q = instance(2)
    pi = greedy(q)
    np.testing.assert_allclose(pql_series(mdp, mu, pi, 0.0, q), bellman(mdp, pi, q))
    for lam in (0.3, 0.7):
        np.testing.assert_allclose(pql_series(mdp, mu, pi, lam, q, tol=1e-10), pql_op(mdp, mu, pi, lam, q), atol=2e-10)
    zero = mdp.with_discount(0.0)
    np.testing.assert_allclose(pql_series(zero, mu, pi, 0.6, q), zero.reward, atol=1e-12)
    with pytest.raises(ValueError):
        pql_series(mdp, mu, pi, 1.0, q)


@given(mdp_and_policy(), st.floats(0.0, 0.95), st.data())
def test_pql_is_beta_contraction(mp, lam, data):
    """Fixed pi: ``|N Q1 - N Q2| <= beta |Q1 - Q2|`` with ``beta = gamma (1 - lam) / (1 - gamma lam)``."""
    mdp, mu = mp
    pi = data.draw(policies(*mdp.shape))
    q1, q2 = data.draw(q_values(*mdp.shape)), data.draw(q_values(*mdp.shape))
    g = mdp.discount
    beta = g * (1 - lam) / (1 - g * lam)
    lhs = sup_dist(pql_op(mdp, mu, pi, lam, q1), pql_op(mdp, mu, pi, lam, q2))
    assert lhs <= beta * sup_dist(q1, q2) + 1e-9


def test_pql_on_policy_uses_lambda_return():
    mdp, pi, q = instance(4)
    np.testing.assert_array_equal(pql_op(mdp, pi, pi, 0.6, q), lambda_return_op(mdp, pi, 0.6, q))


def test_pql_rejects_unknown_form():
    mdp, mu, q = instance(0)
    with pytest.raises(ValueError, match="form"):
        pql_op(mdp, mu, greedy(q), 0.5, q, form="forward")


# -- general Retrace and trace configs ------------------------------------------------


def test_retrace_on_policy_equals_lambda_return():
    mdp, _, q = instance(5)
    pi = envs.random_policy(*mdp.shape, seed=9, min_prob=0.05)
    res = general_retrace_op(mdp, TraceConfig("retrace", lam=0.7), pi, q, target=pi)
    np.testing.assert_allclose(res.c, 1.0)
    np.testing.assert_allclose(res.q, lambda_return_op(mdp, pi, 0.7, q), atol=1e-10)


def test_hql_matches_direct_formula():
    mdp, mu, q = instance(6)
    lam = 0.8
    res = general_retrace_op(mdp, TraceConfig("hql", lam=lam), mu, q)
    pi_q = greedy(q)
    n = mdp.n_states * mdp.n_actions
    # direct Q + (I - gamma lam P^mu)^{-1} (T^{pi_Q} Q - Q) on the flattened pair space
    p_mu = np.einsum("xay,yb->xayb", mdp.transition, mu).reshape(n, n)
    rhs = (bellman(mdp, pi_q, q) - q).reshape(-1)
    direct = q + np.linalg.solve(np.eye(n) - mdp.discount * lam * p_mu, rhs).reshape(q.shape)
    np.testing.assert_allclose(res.q, direct, atol=1e-10)


@given(mdp_and_policy(), st.sampled_from([0.0, 0.3, 0.9, 1.0]), st.data())
def test_pql_trace_row_equals_pql_op(mp, lam, data):
    mdp, mu = mp
    q = data.draw(q_values(*mdp.shape))
    res = general_retrace_op(mdp, TraceConfig("pql", lam=lam), mu, q)
    np.testing.assert_allclose(res.target, lam * mu + (1 - lam) * greedy(q))
    np.testing.assert_allclose(res.q, pql_op(mdp, mu, greedy(q), lam, q), atol=1e-10)


def test_trace_table_rows():
    mdp, mu, q = instance(8, n_a=3)
    pi_q = greedy(q)
    rho = pi_q / mu
    alpha = 0.4
    tilde = (1 - alpha) + alpha * rho
    cases = {
        "alpha": (np.minimum(1, tilde), alpha * pi_q + (1 - alpha) * mu),
        "hql": (np.ones_like(q), pi_q),
        "retrace": (np.minimum(1, rho), pi_q),
        "tree_backup": (pi_q, pi_q),
        "watkins": (np.minimum(1, rho), pi_q),
        "pql": (np.ones_like(q), 0.5 * mu + 0.5 * pi_q),
    }
    for kind, (c, tgt) in cases.items():
        trace = TraceConfig(kind, lam=0.5, alpha=alpha if kind == "alpha" else None)
        got = resolve_trace(trace, mu, q)
        np.testing.assert_allclose(got.c, c, err_msg=kind)
        np.testing.assert_allclose(got.target, tgt, err_msg=kind)


@given(mdp_and_policy(max_actions=3), st.data())
def test_conservative_classification(mp, data):
    """Judged against the greedy policy: Retrace, TBL and WQL are conservative;
    HQL, PQL and alpha-trace are not once mu puts mass off the greedy action."""
    mdp, mu = mp
    q = data.draw(q_values(*mdp.shape))
    pi_q = greedy(q)
    for kind in ("retrace", "tree_backup", "watkins"):
        c = resolve_trace(TraceConfig(kind, lam=0.9), mu, q).c
        assert validate_conservative(c, mu, pi_q).is_conservative, kind
    for kind in ("hql", "pql", "alpha"):
        trace = TraceConfig(kind, lam=0.5, alpha=0.5 if kind == "alpha" else None)
        report = validate_conservative(resolve_trace(trace, mu, q).c, mu, pi_q)
        assert report.is_conservative == (mdp.n_actions == 1), kind
        if mdp.n_actions > 1:
            off_greedy = {(x, a) for x in range(mdp.n_states) for a in range(mdp.n_actions) if pi_q[x, a] == 0}
            assert set(report.violations) == off_greedy
            assert report.max_excess > 0


def test_hql_violations_are_off_target_actions():
    mu = np.array([[0.5, 0.5], [0.2, 0.8]])
    pi = np.array([[1.0, 0.0], [0.0, 1.0]])
    report = validate_conservative(np.ones((2, 2)), mu, pi)
    assert not report.is_conservative
    assert report.violations == [(0, 1), (1, 0)]
    assert report.max_excess == pytest.approx(1.0)


def test_validate_conservative_requires_support():
    with pytest.raises(ValueError):
        validate_conservative(np.ones((1, 2)), np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))


@given(mdp_and_policy(), st.sampled_from(["retrace", "tree_backup", "custom"]), st.data())
def test_conservative_trace_with_fixed_target_has_fixed_point_q_pi(mp, kind, data):
    mdp, mu = mp
    pi = data.draw(policies(*mdp.shape))
    q_pi = policy_q(mdp, pi)
    c = None
    if kind == "custom":
        ratio = pi / mu
        c = data.draw(st.floats(0.0, 1.0)) * ratio
    trace = TraceConfig(kind, lam=0.8, c=c)
    res = general_retrace_op(mdp, trace, mu, q_pi, target=pi)
    assert validate_conservative(res.c, mu, pi).is_conservative
    np.testing.assert_allclose(res.q, q_pi, atol=1e-9)


def test_trace_config_round_trip_and_validation():
    for trace in (
        TraceConfig("pql", lam=0.5),
        TraceConfig("retrace", lam=1.0, cap=2.0),
        TraceConfig("alpha", lam=0.3, alpha=0.25),
        TraceConfig("ctrace", lam=1.0, target_contraction=0.7, horizon=5, n_rollouts=10, seed=3),
    ):
        assert TraceConfig.from_dict(trace.to_dict()) == trace
    custom = TraceConfig("custom", lam=0.5, c=np.ones((2, 2)))
    np.testing.assert_array_equal(TraceConfig.from_dict(custom.to_dict()).c, custom.c)
    for bad in (
        {"kind": "sarsa"},
        {"kind": "pql", "lambda": 1.2},
        {"kind": "alpha"},
        {"kind": "ctrace"},
        {"kind": "retrace", "cap": 0.0},
        {"kind": "custom", "c": [[-1.0]]},
        {"kind": "pql", "weight": 2},
        {"lambda": 0.5},
    ):
        with pytest.raises(ValueError):
            TraceConfig.from_dict(bad)


def test_importance_ratio_needs_support():
    q = np.array([[0.0, 1.0]])
    with pytest.raises(ValueError, match="importance ratio"):
        resolve_trace(TraceConfig("retrace"), np.array([[1.0, 0.0]]), q)


# -- C-trace ----------------------------------------------------------------------------


def test_ctrace_rate_examples():
    gamma, n = 0.9, 6
    ratios = np.random.default_rng(0).uniform(0, 3, size=(50, n))
    # alpha = 0: c = 1, the expected discounted trace mass is sum_t gamma^t
    assert ctrace_contraction_rate(gamma, n, ratios, 0.0) == pytest.approx(0.0, abs=1e-12)
    # ratios all 1 (on-policy): rate independent of alpha
    ones = np.ones((5, n))
    rates = [ctrace_contraction_rate(gamma, n, ones, a) for a in (0.0, 0.5, 1.0)]
    np.testing.assert_allclose(rates, rates[0])
    # rate non-decreasing in alpha
    grid = [ctrace_contraction_rate(gamma, n, ratios, a) for a in np.linspace(0, 1, 11)]
    assert np.all(np.diff(grid) >= -1e-12)


def test_ctrace_alpha_hits_target():
    mdp = envs.random_mdp(4, 3, seed=1, discount=0.9)
    mu = uniform_policy(4, 3)
    q = np.random.default_rng(0).normal(size=(4, 3))
    res = ctrace_alpha(mdp, mu, q, horizon=10, target_contraction=0.7, n_rollouts=500, seed=0)
    assert 0.0 <= res.alpha <= 1.0
    if res.attainable:
        assert abs(res.rate - 0.7) <= 1e-3
    again = ctrace_alpha(mdp, mu, q, horizon=10, target_contraction=0.7, n_rollouts=500, seed=0)
    assert again == res


def test_ctrace_alpha_on_policy_is_unattainable_boundary():
    mdp = envs.random_mdp(3, 2, seed=2, discount=0.9)
    q = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    res = ctrace_alpha(mdp, greedy(q), q, horizon=8, target_contraction=0.7, n_rollouts=50, seed=0)
    assert res.alpha in (0.0, 1.0)
    assert not res.attainable


def test_ctrace_config_resolves_alpha():
    mdp = envs.random_mdp(4, 2, seed=3, discount=0.9)
    mu = uniform_policy(4, 2)
    q = np.random.default_rng(1).normal(size=(4, 2))
    trace = TraceConfig("ctrace", lam=1.0, target_contraction=0.7, horizon=10, n_rollouts=200, seed=0)
    alpha = ctrace_alpha(mdp, mu, q, 10, 0.7, 200, seed=0).alpha
    got = resolve_trace(trace, mu, q, mdp=mdp)
    expected = resolve_trace(TraceConfig("alpha", lam=1.0, alpha=alpha), mu, q)
    np.testing.assert_allclose(got.c, expected.c)
    with pytest.raises(ValueError, match="MDP"):
        resolve_trace(trace, mu, q)


@given(small_mdps(), st.data())
def test_pql_mixture_policy_is_stochastic(mdp, data):
    mu = data.draw(policies(*mdp.shape))
    q = data.draw(q_values(*mdp.shape))
    rho = mix_policies(mu, greedy(q), 0.4)
    np.testing.assert_allclose(rho.sum(axis=1), 1.0)
