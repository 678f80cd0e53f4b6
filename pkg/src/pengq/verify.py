"""Per-instance checks of the convergence results, shared by the CLI ``verify`` suites and the tests.

Each ``check_*`` function runs one instance and returns a :class:`Claim`
holding the measured quantity, the bound it is compared with and whether the
comparison held.  The ``SUITES`` map bundles them over seeded instance grids.
"""
import math
from typing import NamedTuple

import numpy as np

from . import diagnostics, envs, estimators, operators, schedules
from .mdp import bellman, deterministic_policy, greedy, mix_policies, policy_q, sup_dist, value_iteration


class Claim(NamedTuple):
    suite: str
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""

    def to_dict(self):
        return {
            "suite": self.suite,
            "name": self.name,
            "passed": bool(self.passed),
            "measured": float(self.measured),
            "bound": float(self.bound),
            "detail": self.detail,
        }


GAMMAS = (0.8, 0.9, 0.99)
LAMBDAS = (0.1, 0.5, 0.9)


def random_instance(seed, max_states=6, max_actions=3, gammas=GAMMAS):
    """Seeded random MDP, behaviour policy and Q-function for the grid checks."""
    rng = np.random.default_rng(seed)
    n_states = int(rng.integers(1, max_states + 1))
    n_actions = int(rng.integers(1, max_actions + 1))
    gamma = gammas[seed % len(gammas)]
    mdp = envs.random_mdp(n_states, n_actions, seed=rng.integers(2**32), discount=gamma)
    mu = envs.random_policy(n_states, n_actions, seed=rng.integers(2**32), min_prob=0.05 / n_actions)
    q = rng.normal(scale=1.0 / (1.0 - gamma), size=(n_states, n_actions))
    return mdp, mu, q


# -- equivalent PQL forms -------------------------------------------------


def check_pql_forms(mdp, mu, q, lam, tol=1e-9, series_tol=1e-11, label=""):
    """The series, mixture-resolvent and closed forms of PQL agree within ``tol``."""
    pi = greedy(q)
    _, spread = operators.pql_forms(mdp, mu, pi, lam, q, series_tol=series_tol)
    return Claim("lemma1", f"pql forms agree {label}", spread <= tol, spread, tol)


# -- fixed-behaviour convergence ------------------------------------------


def iterations_for(rate, initial_gap, target):
    """Smallest ``K`` with ``rate^K initial_gap <= target``."""
    if rate <= 0.0 or initial_gap <= target:
        return 1
    return int(math.ceil(math.log(target / initial_gap) / math.log(rate)))


def check_fixed_behavior(mdp, mu, lam, q0=None, conv_tol=1e-8, ratio_slack=1e-8, min_distance=1e-13, label=""):
    """PQL with fixed ``mu`` converges to the mixed fixed point at rate ``beta``."""
    gamma = mdp.discount
    beta = diagnostics.beta_rate(gamma, lam)
    fp = diagnostics.fixed_point(mdp, mu, lam, tol=1e-12)
    q0 = np.zeros(mdp.shape) if q0 is None else q0
    gap = max(sup_dist(q0, fp.q_fix), 1e-300)
    K = iterations_for(beta, gap, conv_tol / 100.0) + 2
    report = schedules.pql_fixed_behavior(mdp, mu, lam, q0=q0, K=K, reference=fp.q_fix, track_regret=False)
    final = report.sup_dist[-1]
    rates = diagnostics.contraction_ratios(report, fp.q_fix, gamma=gamma, lam=lam, min_distance=min_distance)
    worst = float(np.max(rates.measured_ratios)) if rates.measured_ratios.size else 0.0
    return [
        Claim("theorem1", f"converges to fixed point {label}", final <= conv_tol, final, conv_tol, f"K={K}"),
        Claim("theorem1", f"contraction ratio <= beta {label}", worst <= beta + ratio_slack, worst, beta + ratio_slack),
    ]


def check_dagger(mdp, mu, lam, tol=1e-7, label=""):
    fp = diagnostics.fixed_point(mdp, mu, lam, tol=1e-12)
    rep = diagnostics.dagger_optimality_check(mdp, mu, lam, fp, tol=tol)
    return Claim("theorem1", f"dagger policy dominates {label}", rep.passed, rep.max_violation, tol, f"{rep.n_policies} policies")


# -- fixed-behaviour error envelope ---------------------------------------


def theorem2_curves(mdp, mu, lam, eps, K=200, q0=None, distribution="constant_sup", seed=0):
    """Measured loss ``|V^{rho_dagger} - V^{rho_K}|`` and its envelope for ``K = 0..K``."""
    gamma = mdp.discount
    beta = diagnostics.beta_rate(gamma, lam)
    fp = diagnostics.fixed_point(mdp, mu, lam, tol=1e-12)
    rho_dagger = mix_policies(mu, fp.pi_dagger, lam)
    v_dagger = np.einsum("xa,xa->x", rho_dagger, policy_q(mdp, rho_dagger))
    q0 = np.zeros(mdp.shape) if q0 is None else q0
    noise = schedules.NoiseSpec(eps, distribution, seed)
    report = schedules.pql_fixed_behavior(mdp, mu, lam, q0=q0, K=K, noise=noise, reference=None, track_regret=False)
    measured = np.empty(K + 1)
    for k, pi in enumerate(report.greedy):
        rho = mix_policies(mu, pi, lam)
        measured[k] = sup_dist(v_dagger, np.einsum("xa,xa->x", rho, policy_q(mdp, rho)))
    rho0 = mix_policies(mu, greedy(q0), lam)
    d0 = sup_dist(policy_q(mdp, rho_dagger), q0)
    b0 = sup_dist(q0, bellman(mdp, rho0, q0))
    bound = diagnostics.theorem2_bound(report.noise_sup[1:], beta, gamma, d0, b0)
    return measured, bound


def check_theorem2(mdp, mu, lam, eps, K=200, label=""):
    measured, bound = theorem2_curves(mdp, mu, lam, eps, K)
    slack = bound - measured
    i = int(np.argmin(slack))
    return Claim("theorem2", f"loss under envelope {label}", bool(np.all(measured <= bound)), measured[i], bound[i], f"tightest at K={i}")


# -- behaviour-mixing envelope --------------------------------------------


def theorem3_curves(mdp, lam, alpha, K=100, q0=None, mu_init=None, eps=0.0, seed=0, allow_unsupported_alpha=False):
    gamma = mdp.discount
    zeta = diagnostics.zeta_rate(gamma, alpha)
    q_star = value_iteration(mdp, tol=1e-12)
    q0 = np.zeros(mdp.shape) if q0 is None else q0
    mu_init = np.full(mdp.shape, 1.0 / mdp.n_actions) if mu_init is None else mu_init
    noise = schedules.NoiseSpec(eps, "uniform_pm", seed)
    report = schedules.pql_behavior_updates(
        mdp, lam, alpha, mu_init=mu_init, q0=q0, K=K, noise=noise, reference=q_star,
        allow_unsupported_alpha=allow_unsupported_alpha,
    )
    measured = np.asarray(report.regret_sup)
    pi0 = greedy(q0)
    mu0 = alpha * pi0 + (1.0 - alpha) * mu_init
    rho0 = mix_policies(mu0, pi0, lam)
    b0 = sup_dist(q0, bellman(mdp, rho0, q0))
    env = diagnostics.theorem3_bound(report.noise_sup[1:], zeta, gamma, sup_dist(q_star, q0), b0)
    return measured, env.bound, env.vacuous, report


def alpha_grid(lam):
    """``1 - lambda``, the midpoint of ``[1 - lambda, 1]`` and ``1``."""
    low = 1.0 - lam
    return (low, 0.5 * (low + 1.0), 1.0)


def check_theorem3(mdp, lam, alpha, K=100, label=""):
    measured, bound, vacuous, _ = theorem3_curves(mdp, lam, alpha, K)
    i = int(np.argmin(bound - measured))
    return Claim(
        "theorem3", f"regret under zeta envelope {label}", bool(np.all(measured <= bound)), measured[i], bound[i],
        "vacuous" if vacuous else f"tightest at K={i}",
    )


def check_alpha_one_matches_lambda_pi(mdp, lam, K=30, label=""):
    mu_init = np.full(mdp.shape, 1.0 / mdp.n_actions)
    a = schedules.pql_behavior_updates(mdp, lam, 1.0, mu_init=mu_init, K=K, track_regret=False, reference=None)
    b = schedules.lambda_pi(mdp, lam, K=K, track_regret=False, reference=None)
    mismatches = sum(not np.array_equal(x, y) for x, y in zip(a.q, b.q))
    return Claim("theorem3", f"alpha=1 bitwise equals lambda-PI {label}", mismatches == 0, mismatches, 0)


# -- HQL oscillation ------------------------------------------------------


def check_oscillation(gamma=0.9, K=40):
    mdp = envs.oscillation_mdp(gamma)
    go = deterministic_policy([envs.GO, envs.GO], 2)
    claims = []
    exact_delta = 2 * gamma / (1 - gamma) ** 2
    rep = schedules.hql_iterate(mdp, 1.0, envs.oscillation_initial_q(gamma, exact_delta), K=2, mu=go, track_regret=False)
    expected = -1 / (1 - gamma) + exact_delta
    err = abs(rep.q[2][0, envs.GO] - expected)
    claims.append(Claim("prop1", "Q_2(x, go) recurs", err <= 1e-6, rep.q[2][0, envs.GO], expected))
    rep = schedules.hql_iterate(mdp, 1.0, envs.oscillation_initial_q(gamma), K=K, mu=go, track_regret=False)
    acts = rep.greedy_actions(0)
    period2 = bool(np.all(acts[2:] == acts[:-2]) and np.all(acts[1:] != acts[:-1]))
    claims.append(Claim("prop1", "fixed-behaviour greedy action has period 2", period2, K, 20))
    rep = schedules.hql_iterate(mdp, 1.0, envs.oscillation_initial_q(gamma), K=K, behavior_mode="greedy_tracking", track_regret=False)
    moved = sup_dist(rep.q[-1], rep.q[-2])
    ok = moved <= 1e-10 and rep.greedy_actions(0)[-1] == envs.EXIT
    claims.append(Claim("prop1", "greedy tracking converges to exit", ok, moved, 1e-10))
    return claims


# -- double-loop PQL -------------------------------------------------------


def double_loop_curves(mdp, lam, K=50, inner_tol=1e-12):
    deltas = [0.5**k for k in range(K + 2)]
    report = schedules.double_loop_pql(mdp, lam, deltas, K=K, inner_tol=inner_tol)
    q_star = value_iteration(mdp, tol=1e-12)
    mus = report.behavior
    q_mu = [policy_q(mdp, mu) for mu in mus]
    eps = np.asarray(report.noise_sup[1:]) + np.asarray(report.params["inner_error"])
    delta_norms = np.asarray(report.params["deltas"])
    bound = diagnostics.double_loop_bound(eps, delta_norms, mdp.discount, sup_dist(q_star, q_mu[0]))
    excess = np.array([float(np.max(q_star - q_mu[k + 1] - bound[k])) for k in range(K)])
    final_gap = sup_dist(q_star, q_mu[-1])
    return excess, final_gap


def check_double_loop(mdp, lam, K=50, label=""):
    excess, final_gap = double_loop_curves(mdp, lam, K)
    return [
        Claim("doubleloop", f"pointwise bound holds {label}", bool(np.all(excess <= 0)), float(np.max(excess)), 0.0),
        Claim("doubleloop", f"Q^mu_k reaches Q* {label}", final_gap <= 1e-6, final_gap, 1e-6),
    ]


# -- estimators ------------------------------------------------------------


def check_estimator_identities(mdp, mu, q, lam, cap=1.0, n_traj=50, h=12, seed=0, tol=1e-12, label=""):
    pi = greedy(q)
    ratio = np.where(mu > 0, pi / np.where(mu > 0, mu, 1.0), 0.0)
    c = np.minimum(ratio, cap)
    worst_pql = worst_ret = 0.0
    batch = estimators.sample_batch(mdp, mu, h, n_traj, seed=seed)
    for i in range(n_traj):
        traj = batch.trajectory(i)
        a = estimators.pql_target_recursive(traj, q, pi, lam, mdp.discount).value
        b = estimators.pql_target_sum(traj, q, pi, lam, mdp.discount).value
        worst_pql = max(worst_pql, abs(a - b))
        a = estimators.retrace_target_recursive(traj, q, pi, lam, cap, mdp.discount).value
        b = estimators.retrace_target_sum(traj, q, pi, c, lam, mdp.discount).value
        worst_ret = max(worst_ret, abs(a - b))
    return [
        Claim("estimators", f"recursive PQL equals forward sum {label}", worst_pql <= tol, worst_pql, tol),
        Claim("estimators", f"recursive Retrace equals forward sum {label}", worst_ret <= tol, worst_ret, tol),
    ]


def horizon_for(gamma, lam, bias=1e-6):
    """Smallest ``H`` with ``(gamma lambda)^H < bias``."""
    coef = gamma * lam
    if coef == 0.0:
        return 1
    return int(math.floor(math.log(bias) / math.log(coef))) + 1


def check_unbiased(mdp, mu, q, trace, state_action, n_samples=100_000, seed=0, n_sigma=3.0, label=""):
    h = horizon_for(mdp.discount, trace.lam)
    est = estimators.mc_operator_estimate(mdp, mu, trace, q, state_action, n_samples, h, seed=seed)
    exact = estimators.exact_operator_value(mdp, mu, trace, q, state_action)
    err = abs(est.mean - exact)
    return Claim("estimators", f"{trace.kind} estimator unbiased {label}", err <= n_sigma * est.stderr, err, n_sigma * est.stderr, f"H={h}")


# -- suites ----------------------------------------------------------------


def suite_lemma1(n_mdps=50):
    claims = []
    for seed in range(n_mdps):
        mdp, mu, q = random_instance(seed)
        for lam in LAMBDAS:
            claims.append(check_pql_forms(mdp, mu, q, lam, label=f"seed={seed} lam={lam}"))
    return claims


def suite_theorem1(n_mdps=6):
    claims = []
    for seed in range(n_mdps):
        for gamma in GAMMAS:
            mdp, mu, _ = random_instance(seed, gammas=(gamma,))
            for lam in (0.0, 0.5, 0.9, 1.0):
                claims += check_fixed_behavior(mdp, mu, lam, label=f"seed={seed} gamma={gamma} lam={lam}")
    for seed in range(3):
        mdp, mu, _ = random_instance(100 + seed, max_states=4, max_actions=2)
        claims.append(check_dagger(mdp, mu, 0.5, label=f"seed={100 + seed}"))
    return claims


def suite_theorem2(n_mdps=4):
    claims = []
    for seed in range(n_mdps):
        mdp, mu, _ = random_instance(200 + seed)
        for eps in (0.01, 0.1):
            claims.append(check_theorem2(mdp, mu, 0.5, eps, K=200, label=f"seed={200 + seed} eps={eps}"))
    return claims


def suite_theorem3(n_mdps=4):
    claims = []
    for seed in range(n_mdps):
        mdp, _, _ = random_instance(300 + seed)
        for lam in LAMBDAS:
            for alpha in alpha_grid(lam):
                claims.append(check_theorem3(mdp, lam, alpha, label=f"seed={300 + seed} lam={lam} alpha={alpha:.3g}"))
            claims.append(check_alpha_one_matches_lambda_pi(mdp, lam, label=f"seed={300 + seed} lam={lam}"))
    return claims


def suite_prop1():
    return check_oscillation()


def suite_doubleloop(n_mdps=3):
    claims = []
    for seed in range(n_mdps):
        mdp = envs.random_mdp(4, 2, seed=400 + seed, discount=0.9)
        claims += check_double_loop(mdp, 0.5, label=f"seed={400 + seed}")
    return claims


def suite_estimators(n_samples=100_000):
    mdp = envs.random_mdp(4, 2, seed=500, discount=0.9)
    mu = envs.random_policy(4, 2, seed=501, min_prob=0.1)
    q = np.random.default_rng(502).normal(size=(4, 2))
    claims = check_estimator_identities(mdp, mu, q, 0.7)
    for trace in (operators.TraceConfig("pql", lam=0.7), operators.TraceConfig("retrace", lam=1.0)):
        claims.append(check_unbiased(mdp, mu, q, trace, (0, 0), n_samples=n_samples))
    return claims


SUITES = {
    "lemma1": suite_lemma1,
    "theorem1": suite_theorem1,
    "theorem2": suite_theorem2,
    "theorem3": suite_theorem3,
    "prop1": suite_prop1,
    "doubleloop": suite_doubleloop,
    "estimators": suite_estimators,
}


# -- tree learning curves --------------------------------------------------

TREE_METHODS = {
    "one_step": operators.TraceConfig("retrace", lam=0.0),
    "retrace": operators.TraceConfig("retrace", lam=1.0, cap=1.0),
    "pql_0.5": operators.TraceConfig("pql", lam=0.5),
    "pql_1": operators.TraceConfig("pql", lam=1.0),
}


def tree_final_returns(depth, method, seeds, iterations=2000, lr=0.1, left_prob=0.3, reward_timing="exit"):
    """Final discounted return of the learned soft policy for each seed.

    Returns ``(returns, spec)`` where ``returns`` has one entry per seed.
    """
    spec = envs.TreeSpec(depth, reward_timing=reward_timing)
    mdp = envs.tree_mdp(spec)
    mu = envs.behavior_policy(mdp.n_states, left_prob)
    out = np.empty(len(seeds))
    for i, seed in enumerate(seeds):
        report = schedules.tabular_learner(
            mdp, TREE_METHODS[method], mu, lr=lr, iterations=iterations, horizon=depth, seed=seed
        )
        out[i] = report.value_init[-1]
    return out, spec
