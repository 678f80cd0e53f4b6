"""Fixed-point solvers, contraction-rate measurement and convergence-bound checkers."""
import itertools
from typing import NamedTuple

import numpy as np

from .mdp import (
    bellman,
    bellman_opt,
    deterministic_policy,
    greedy,
    mix_policies,
    policy_q,
    sup_dist,
    value_iteration,
)
from .validation import check_policy, check_q, check_unit_interval

ENUMERATION_LIMIT = 100_000


class FixedPointResult(NamedTuple):
    """Certified fixed point of ``lambda T^mu + (1 - lambda) T``.

    ``residual`` is ``|q_fix - F q_fix|``; since ``F`` is a gamma-contraction
    the distance to the true fixed point is at most ``residual / (1 - gamma)``.
    """

    q_fix: np.ndarray
    pi_dagger: np.ndarray
    residual: float
    iterations_used: int


class RateSummary(NamedTuple):
    beta: float
    zeta: float
    measured_ratios: np.ndarray


class DaggerReport(NamedTuple):
    max_violation: float
    n_policies: int
    worst_policy: np.ndarray
    passed: bool


def beta_rate(gamma, lam):
    """``gamma (1 - lambda) / (1 - gamma lambda)``."""
    return gamma * (1.0 - lam) / (1.0 - gamma * lam)


def zeta_rate(gamma, alpha):
    """``1 - alpha + alpha gamma``."""
    return 1.0 - alpha + alpha * gamma


def mixed_operator(mdp, mu, lam, q):
    """``(lambda T^mu + (1 - lambda) T) Q``."""
    return lam * bellman(mdp, mu, q) + (1.0 - lam) * bellman_opt(mdp, q)


def fixed_point(mdp, mu, lam, tol=1e-10, max_iter=1_000_000, polish_every=25):
    """Fixed point ``Q^{lambda mu + (1 - lambda) pi_dagger}`` of the mixed operator.

    Iterates ``Q <- lambda T^mu Q + (1 - lambda) T Q`` from zero until the
    change drops below ``tol (1 - gamma)``.  Every ``polish_every`` iterations
    the mixture policy induced by the current greedy action is evaluated
    exactly.  That candidate is accepted once its own residual passes the same
    test, or once the greedy policy of the candidate is the one that produced
    it: then ``F Q = T^rho Q = Q`` holds exactly for ``rho`` the mixture, so
    the candidate is the fixed point up to the accuracy of the linear solve.
    The second test matters at discounts near one, where ``tol (1 - gamma)``
    can sit below the rounding error of the iterates.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    lam = check_unit_interval(lam, "lam")
    mu = check_policy(mu, *mdp.shape, name="mu")
    threshold = tol * (1.0 - mdp.discount)
    q = np.zeros(mdp.shape)

    def polished(q):
        pi = greedy(q)
        cand = policy_q(mdp, mix_policies(pi, mu, 1.0 - lam), check_residual=False)
        stable = np.array_equal(greedy(cand), pi)
        return cand, sup_dist(cand, mixed_operator(mdp, mu, lam, cand)), stable

    for it in range(1, max_iter + 1):
        new = mixed_operator(mdp, mu, lam, q)
        change = sup_dist(new, q)
        q = new
        if change < threshold:
            cand, res, _ = polished(q)
            if res <= sup_dist(q, mixed_operator(mdp, mu, lam, q)):
                q = cand
            return FixedPointResult(q, greedy(q), sup_dist(q, mixed_operator(mdp, mu, lam, q)), it)
        if polish_every and it % polish_every == 0:
            cand, res, stable = polished(q)
            if stable or res < threshold:
                return FixedPointResult(cand, greedy(cand), res, it)
    raise RuntimeError(f"fixed_point did not converge within {max_iter} iterations")


def _enumerate_deterministic(n_states, n_actions):
    count = n_actions**n_states
    if count > ENUMERATION_LIMIT:
        raise ValueError(
            f"{n_actions}^{n_states} = {count} deterministic policies exceeds the enumeration limit {ENUMERATION_LIMIT}"
        )
    for actions in itertools.product(range(n_actions), repeat=n_states):
        yield deterministic_policy(actions, n_actions)


def enumerate_optimal_q(mdp):
    """Pointwise maximum of ``Q^pi`` over every deterministic policy."""
    best = None
    for pi in _enumerate_deterministic(*mdp.shape):
        q = policy_q(mdp, pi)
        best = q if best is None else np.maximum(best, q)
    return best


def dagger_optimality_check(mdp, mu, lam, result, tol=1e-7):
    """Check ``Q^{lambda mu + (1 - lambda) pi_dagger} >= Q^{lambda mu + (1 - lambda) pi}`` for every deterministic ``pi``.

    Randomised ``pi`` need no separate check: ``Q^{lambda mu + (1 - lambda) pi}``
    is maximised by a deterministic policy in the MDP whose actions are
    mixed with ``mu``.
    """
    mu = check_policy(mu, *mdp.shape, name="mu")
    q_dagger = check_q(result.q_fix, *mdp.shape)
    worst, worst_pi, count = -np.inf, None, 0
    for pi in _enumerate_deterministic(*mdp.shape):
        q = policy_q(mdp, mix_policies(mu, pi, lam))
        gap = float(np.max(q - q_dagger))
        count += 1
        if gap > worst:
            worst, worst_pi = gap, pi
    violation = max(0.0, worst)
    return DaggerReport(violation, count, worst_pi, violation <= tol)


def _distances(report_or_qs, reference):
    qs = getattr(report_or_qs, "q", report_or_qs)
    return np.array([sup_dist(q, reference) for q in qs])


def contraction_ratios(report, reference, gamma=None, lam=None, alpha=None, min_distance=1e-13):
    """Ratios ``d_{k+1} / d_k`` of sup distances to ``reference``.

    ``report`` is an :class:`~pengq.schedules.IterationReport` (rates are then
    read from its ``params``) or a plain sequence of Q-functions.  Ratios with
    ``d_k < min_distance`` are dropped.
    """
    params = getattr(report, "params", {})
    gamma = params.get("gamma") if gamma is None else gamma
    lam = params.get("lam") if lam is None else lam
    alpha = params.get("alpha") if alpha is None else alpha
    d = _distances(report, reference)
    if d.size < 2:
        raise ValueError("contraction_ratios needs at least two iterates")
    keep = d[:-1] >= min_distance
    ratios = d[1:][keep] / d[:-1][keep]
    beta = beta_rate(gamma, lam) if gamma is not None and lam is not None else float("nan")
    zeta = zeta_rate(gamma, alpha) if gamma is not None and alpha is not None else float("nan")
    return RateSummary(beta, zeta, ratios)


def theorem2_bound(eps_history, beta, gamma, d0_norm, b0_norm):
    """Loss envelope for PQL with a fixed behaviour policy.

    ``bound[K] = beta^K (|d_0| + |b_0| / (1 - gamma)) + 2 / (1 - gamma) sum_{k<K} beta^(K-k-1) |eps_k|``
    for ``K = 0 .. len(eps_history)``, where ``d_0 = Q^{rho_dagger} - Q_0``
    and ``b_0 = Q_0 - T^{rho_0} Q_0``.
    """
    eps = np.asarray(eps_history, dtype=float)
    out = np.empty(eps.size + 1)
    acc = 0.0
    for k in range(eps.size + 1):
        if k > 0:
            acc = beta * acc + eps[k - 1]
        out[k] = beta**k * (d0_norm + b0_norm / (1.0 - gamma)) + 2.0 / (1.0 - gamma) * acc
    return out


class EnvelopeResult(NamedTuple):
    bound: np.ndarray
    vacuous: bool


def theorem3_bound(eps_history, zeta, gamma, q0_gap, b0_norm):
    """Regret envelope for PQL with behaviour-mixture updates.

    ``bound[K] = zeta^K |Q* - Q_0| + zeta^K |b_0| / (1 - gamma) + sum_{l<K} 2 zeta^(K-l-1) / (1 - gamma) |eps_l|``
    with ``b_0 = Q_0 - T^{rho_0} Q_0``.  ``vacuous`` flags ``zeta >= 1``, where
    the envelope never decays.
    """
    eps = np.asarray(eps_history, dtype=float)
    out = np.empty(eps.size + 1)
    acc = 0.0
    for k in range(eps.size + 1):
        if k > 0:
            acc = zeta * acc + eps[k - 1]
        out[k] = zeta**k * (q0_gap + b0_norm / (1.0 - gamma)) + 2.0 / (1.0 - gamma) * acc
    return EnvelopeResult(out, bool(zeta >= 1.0))


def double_loop_bound(eps_history, delta_history, gamma, initial_gap):
    """Envelope on ``Q* - Q^{mu_{k+1}}`` for double-loop PQL, for ``k = 0 .. len(eps_history) - 1``.

    ``bound[k] = 2 gamma / (1 - gamma) sum_{j<=k} gamma^(k-j) |eps_j|
    + gamma (1 + gamma) / (1 - gamma) sum_{j<=k} gamma^(k-j) |delta_{j+1}|
    + gamma^(k+1) |Q* - Q^{mu_0}|``.  ``delta_history[j]`` is ``|delta_j|``
    and must extend one step past ``eps_history``.
    """
    eps = np.asarray(eps_history, dtype=float)
    delta = np.asarray(delta_history, dtype=float)
    if delta.size < eps.size + 1:
        raise ValueError("delta_history must contain delta_0 .. delta_K")
    out = np.empty(eps.size)
    acc_e = acc_d = 0.0
    for k in range(eps.size):
        acc_e = gamma * acc_e + eps[k]
        acc_d = gamma * acc_d + delta[k + 1]
        out[k] = (
            2 * gamma / (1 - gamma) * acc_e
            + gamma * (1 + gamma) / (1 - gamma) * acc_d
            + gamma ** (k + 1) * initial_gap
        )
    return out


class Regret(NamedTuple):
    sup: float
    initial: float


def optimal_v(mdp):
    return value_iteration(mdp, tol=1e-12).max(axis=1)


def regret(mdp, pi, v_star=None):
    """``|V* - V^pi|_inf`` and the ``initial_dist``-weighted gap."""
    pi = check_policy(pi, *mdp.shape)
    if v_star is None:
        v_star = optimal_v(mdp)
    v = np.einsum("xa,xa->x", pi, policy_q(mdp, pi))
    gap = v_star - v
    return Regret(float(np.max(np.abs(gap))), float(mdp.initial_dist @ gap))
