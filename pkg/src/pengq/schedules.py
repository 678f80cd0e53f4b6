"""Iteration drivers for exact and noisy multi-step control, and a sampled tabular learner.

Every driver returns an :class:`IterationReport` holding ``K + 1`` records
(``k = 0`` is the initial Q-function).  Record ``k`` stores ``Q_k``, its
greedy policy ``pi_k``, the behaviour policy in force when ``Q_{k+1}`` was
computed, and the sup norm of the noise ``eps_{k-1}`` that was added to
produce ``Q_k`` (zero at ``k = 0``).
"""
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import _linalg, diagnostics
from .estimators import pql_target_recursive, retrace_target_recursive
from .mdp import bellman, greedy, greedy_tie_split, policy_q, sup_dist, uniform_policy, value_iteration
from .operators import TraceConfig, lambda_return_op, pql_op, resolvent
from .validation import check_policy, check_q, check_unit_interval

CSV_COLUMNS = (
    "k",
    "sup_dist",
    "regret_sup",
    "regret_init",
    "noise_sup",
    "greedy_hash",
    "value_init",
    "return_undiscounted",
)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive value-update error ``eps_k``.

    ``uniform_pm`` draws every entry i.i.d. from ``U[-magnitude, magnitude]``;
    ``constant_sup`` sets every entry to ``(-1)^k magnitude``.
    """

    magnitude: float = 0.0
    distribution: str = "uniform_pm"
    seed: int = 0

    def __post_init__(self):
        if not self.magnitude >= 0:
            raise ValueError(f"noise magnitude must be non-negative, got {self.magnitude}")
        if self.distribution not in ("uniform_pm", "constant_sup"):
            raise ValueError(f"unknown noise distribution {self.distribution!r}")

    def sampler(self, shape):
        """Callable ``k -> eps_k`` with a private random stream."""
        rng = np.random.default_rng(self.seed)
        eps = self.magnitude

        def draw(k):
            if eps == 0.0:
                return np.zeros(shape)
            if self.distribution == "constant_sup":
                return np.full(shape, eps if k % 2 == 0 else -eps)
            return rng.uniform(-eps, eps, size=shape)

        return draw

    def to_dict(self):
        return {"magnitude": self.magnitude, "distribution": self.distribution, "seed": self.seed}


NO_NOISE = NoiseSpec()


def policy_hash(pi):
    """Short stable digest of a policy's rounded probabilities."""
    data = np.round(np.asarray(pi, dtype=float), 12).tobytes()
    return hashlib.sha1(data).hexdigest()[:12]


@dataclass
class IterationReport:
    """Per-iteration history of a driver run."""

    q: list = field(default_factory=list)
    greedy: list = field(default_factory=list)
    behavior: list = field(default_factory=list)
    noise_sup: list = field(default_factory=list)
    sup_dist: list = field(default_factory=list)
    regret_sup: list = field(default_factory=list)
    regret_init: list = field(default_factory=list)
    value_init: list = field(default_factory=list)
    return_undiscounted: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.q)

    def greedy_hash(self, k):
        return policy_hash(self.greedy[k])

    def greedy_actions(self, state):
        """Greedy action at ``state`` for every record."""
        return np.array([int(np.argmax(pi[state])) for pi in self.greedy])

    def rows(self):
        for i in range(len(self.q)):
            yield {
                "k": self.steps[i],
                "sup_dist": self.sup_dist[i],
                "regret_sup": self.regret_sup[i],
                "regret_init": self.regret_init[i],
                "noise_sup": self.noise_sup[i],
                "greedy_hash": self.greedy_hash(i),
                "value_init": self.value_init[i],
                "return_undiscounted": self.return_undiscounted[i],
            }

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None, include_q=False):
        doc = {"params": self.params, "records": list(self.rows())}
        if include_q:
            for rec, q, pi, mu in zip(doc["records"], self.q, self.greedy, self.behavior):
                rec["q"] = q.tolist()
                rec["greedy"] = pi.tolist()
                rec["behavior"] = mu.tolist()
        text = json.dumps(doc, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class _Recorder:
    """Fills an :class:`IterationReport`, computing regrets against a cached ``V*``."""

    def __init__(self, mdp, reference, params, track_regret=True, horizon=None):
        self.mdp = mdp
        self.horizon = horizon
        self.reference = reference
        self.track_regret = track_regret
        self.v_star = diagnostics.optimal_v(mdp) if track_regret else None
        self.report = IterationReport(params=params)

    def add(self, k, q, behavior, noise_sup, pi=None):
        r = self.report
        pi_greedy = greedy(q)
        r.steps.append(int(k))
        r.q.append(np.array(q))
        r.greedy.append(pi_greedy)
        r.behavior.append(np.array(behavior))
        r.noise_sup.append(float(noise_sup))
        r.sup_dist.append(sup_dist(q, self.reference) if self.reference is not None else float("nan"))
        if self.track_regret:
            evaluated = pi_greedy if pi is None else pi
            v = np.einsum("xa,xa->x", evaluated, policy_q(self.mdp, evaluated))
            gap = self.v_star - v
            r.regret_sup.append(float(np.max(np.abs(gap))))
            r.regret_init.append(float(self.mdp.initial_dist @ gap))
            r.value_init.append(float(self.mdp.initial_dist @ v))
            r.return_undiscounted.append(
                undiscounted_return(self.mdp, evaluated, self.horizon) if self.horizon else float("nan")
            )
        else:
            r.return_undiscounted.append(float("nan"))
            r.regret_sup.append(float("nan"))
            r.regret_init.append(float("nan"))
            r.value_init.append(float("nan"))


def undiscounted_return(mdp, pi, horizon):
    """Expected undiscounted reward of ``pi`` over ``horizon`` steps from ``initial_dist``."""
    p_pi = np.einsum("xa,xay->xy", pi, mdp.transition)
    r_pi = np.einsum("xa,xa->x", pi, mdp.reward)
    dist, total = mdp.initial_dist.copy(), 0.0
    for _ in range(int(horizon)):
        total += float(dist @ r_pi)
        dist = dist @ p_pi
    return total


def _check_k(K):
    if int(K) != K or K < 0:
        raise ValueError(f"K must be a non-negative integer, got {K}")
    return int(K)


def _initial_q(mdp, q0):
    return np.zeros(mdp.shape) if q0 is None else check_q(q0, *mdp.shape).astype(float, copy=True)


def pql_fixed_behavior(mdp, mu, lam, q0=None, K=100, noise=NO_NOISE, reference="fixed_point", track_regret=True):
    """``Q_{k+1} = N_lambda^{mu, pi_k} Q_k + eps_k`` with ``pi_k = greedy(Q_k)`` and fixed ``mu``.

    ``reference="fixed_point"`` measures distances to the fixed point of
    ``lambda T^mu + (1 - lambda) T``; pass an array to use another reference
    or ``None`` to skip distances.
    """
    K = _check_k(K)
    lam = check_unit_interval(lam, "lam")
    mu = check_policy(mu, *mdp.shape, name="mu")
    if isinstance(reference, str) and reference == "fixed_point":
        reference = diagnostics.fixed_point(mdp, mu, lam, tol=1e-12).q_fix
    params = {"driver": "pql_fixed_behavior", "gamma": mdp.discount, "lam": lam, "K": K, "noise": noise.to_dict()}
    rec = _Recorder(mdp, reference, params, track_regret)
    draw = noise.sampler(mdp.shape)
    q = _initial_q(mdp, q0)
    gamma = mdp.discount
    resolve = _linalg.FactoredResolvent(mdp.transition, mu, gamma * lam)
    noise_sup = 0.0
    for k in range(K + 1):
        rec.add(k, q, mu, noise_sup)
        if k == K:
            break
        eps = draw(k)
        # closed form of N_lambda^{mu, pi_k}; the greedy value pi_k Q_k is max_a Q_k
        v_pi = np.max(q, axis=1)
        q = resolve(mdp.reward + gamma * (1.0 - lam) * (mdp.transition @ v_pi)) + eps
        noise_sup = float(np.max(np.abs(eps))) if eps.size else 0.0
    return rec.report


def lambda_pi(mdp, lam, q0=None, K=100, noise=NO_NOISE, reference="optimal", track_regret=True):
    """Lambda-policy iteration ``Q_{k+1} = T_lambda^{pi_k} Q_k + eps_k``, ``pi_k = greedy(Q_k)``."""
    K = _check_k(K)
    lam = check_unit_interval(lam, "lam")
    if isinstance(reference, str) and reference == "optimal":
        reference = value_iteration(mdp, tol=1e-12)
    params = {"driver": "lambda_pi", "gamma": mdp.discount, "lam": lam, "K": K, "noise": noise.to_dict()}
    rec = _Recorder(mdp, reference, params, track_regret)
    draw = noise.sampler(mdp.shape)
    q = _initial_q(mdp, q0)
    noise_sup = 0.0
    for k in range(K + 1):
        pi = greedy(q)
        rec.add(k, q, pi, noise_sup)
        if k == K:
            break
        eps = draw(k)
        q = lambda_return_op(mdp, pi, lam, q) + eps
        noise_sup = float(np.max(np.abs(eps))) if eps.size else 0.0
    return rec.report


def pql_behavior_updates(
    mdp,
    lam,
    alpha,
    mu_init=None,
    q0=None,
    K=100,
    noise=NO_NOISE,
    allow_unsupported_alpha=False,
    reference="optimal",
    track_regret=True,
):
    """PQL with behaviour mixing ``mu_k = alpha pi_k + (1 - alpha) mu_{k-1}``.

    ``Q_{k+1} = N_lambda^{mu_k, pi_k} Q_k + eps_k``.  Convergence to ``Q*`` is
    only guaranteed for ``alpha >= 1 - lambda``; smaller values raise unless
    ``allow_unsupported_alpha`` is set, in which case ``params`` records the
    run as outside the theory.  ``mu_init`` (``mu_{-1}``) defaults to uniform.
    """
    K = _check_k(K)
    lam = check_unit_interval(lam, "lam")
    alpha = check_unit_interval(alpha, "alpha")
    supported = alpha >= 1.0 - lam - 1e-15
    if not supported and not allow_unsupported_alpha:
        raise ValueError(
            f"alpha={alpha} is below 1 - lambda = {1 - lam}; pass allow_unsupported_alpha=True to run anyway"
        )
    mu = uniform_policy(*mdp.shape) if mu_init is None else check_policy(mu_init, *mdp.shape, name="mu_init")
    if isinstance(reference, str) and reference == "optimal":
        reference = value_iteration(mdp, tol=1e-12)
    params = {
        "driver": "pql_behavior_updates",
        "gamma": mdp.discount,
        "lam": lam,
        "alpha": alpha,
        "K": K,
        "noise": noise.to_dict(),
        "supported_by_theory": bool(supported),
    }
    rec = _Recorder(mdp, reference, params, track_regret)
    draw = noise.sampler(mdp.shape)
    q = _initial_q(mdp, q0)
    noise_sup = 0.0
    for k in range(K + 1):
        pi = greedy(q)
        mu = alpha * pi + (1.0 - alpha) * mu
        rec.add(k, q, mu, noise_sup)
        if k == K:
            break
        eps = draw(k)
        q = pql_op(mdp, mu, pi, lam, q) + eps
        noise_sup = float(np.max(np.abs(eps))) if eps.size else 0.0
    return rec.report


def delta_greedy(q, delta):
    """``(1 - w) greedy(q) + w uniform`` with per-state ``w`` making the value shortfall ``min(delta, max - mean)``."""
    q = check_q(q)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (q.shape[0],))
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    gap = q.max(axis=1) - q.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(gap > 0, np.minimum(1.0, delta / np.where(gap > 0, gap, 1.0)), 0.0)
    uniform = uniform_policy(*q.shape)
    return (1.0 - w)[:, None] * greedy(q) + w[:, None] * uniform


def double_loop_pql(
    mdp,
    lam,
    delta_schedule,
    q0=None,
    K=50,
    inner_tol=1e-12,
    noise=NO_NOISE,
    max_inner=100_000,
    track_regret=True,
):
    """Double-loop PQL: ``mu_k`` is ``delta_k``-greedy for ``Q_k`` and ``Q_{k+1} = (N_lambda^{mu_k})^inf Q_k + eps_k``.

    The inner loop applies ``Q <- N_lambda^{mu_k, greedy(Q)} Q`` until the sup
    change drops below ``inner_tol`` (or ``max_inner`` steps).  Since the inner
    map is a beta-contraction, the truncated limit is within
    ``inner_tol * beta / (1 - beta)`` of the exact one; ``params["inner_error"]``
    records that certificate per outer step so it can be counted in ``eps_k``.
    ``delta_schedule`` is a sequence indexed by ``k`` or a callable ``k -> delta_k``.
    """
    K = _check_k(K)
    lam = check_unit_interval(lam, "lam")
    if not inner_tol > 0:
        raise ValueError("inner_tol must be positive")
    delta_of = delta_schedule if callable(delta_schedule) else (lambda k: delta_schedule[k])
    beta = diagnostics.beta_rate(mdp.discount, lam)
    q_star = value_iteration(mdp, tol=1e-12)
    params = {"driver": "double_loop_pql", "gamma": mdp.discount, "lam": lam, "K": K, "noise": noise.to_dict()}
    rec = _Recorder(mdp, q_star, params, track_regret)
    draw = noise.sampler(mdp.shape)
    q = _initial_q(mdp, q0)
    noise_sup = 0.0
    deltas, inner_error, inner_steps, behavior_gap = [], [], [], []
    for k in range(K + 1):
        delta_k = float(delta_of(k))
        deltas.append(delta_k)
        mu = delta_greedy(q, delta_k)
        behavior_gap.append(sup_dist(policy_q(mdp, mu), q_star))
        rec.add(k, q, mu, noise_sup, pi=mu)
        if k == K:
            break
        inner = q
        for step in range(1, max_inner + 1):
            new = pql_op(mdp, mu, greedy(inner), lam, inner)
            change = sup_dist(new, inner)
            inner = new
            if change < inner_tol:
                break
        inner_steps.append(step)
        inner_error.append(change * beta / (1.0 - beta) if beta < 1 else float("inf"))
        eps = draw(k)
        q = inner + eps
        noise_sup = float(np.max(np.abs(eps))) if eps.size else 0.0
    params.update(deltas=deltas, inner_error=inner_error, inner_steps=inner_steps, behavior_gap=behavior_gap)
    return rec.report


def hql_iterate(mdp, lam, q0=None, K=50, behavior_mode="fixed", mu=None, track_regret=True):
    """Harutyunyan's Q(lambda): ``Q_{k+1} = Q_k + (I - gamma lambda P^mu)^{-1} (T^{pi_k} Q_k - Q_k)``.

    ``behavior_mode="fixed"`` uses the supplied ``mu`` throughout;
    ``"greedy_tracking"`` sets ``mu_k = pi_k = greedy(Q_k)``.
    """
    K = _check_k(K)
    lam = check_unit_interval(lam, "lam")
    if behavior_mode not in ("fixed", "greedy_tracking"):
        raise ValueError(f"unknown behavior_mode {behavior_mode!r}")
    if behavior_mode == "fixed":
        if mu is None:
            raise ValueError("behavior_mode='fixed' needs mu")
        mu = check_policy(mu, *mdp.shape, name="mu")
    q_star = value_iteration(mdp, tol=1e-12)
    params = {"driver": "hql_iterate", "gamma": mdp.discount, "lam": lam, "K": K, "behavior_mode": behavior_mode}
    rec = _Recorder(mdp, q_star, params, track_regret)
    q = _initial_q(mdp, q0)
    for k in range(K + 1):
        pi = greedy(q)
        behavior = pi if behavior_mode == "greedy_tracking" else mu
        rec.add(k, q, behavior, 0.0)
        if k == K:
            break
        q = q + resolvent(mdp, behavior, mdp.discount * lam, bellman(mdp, pi, q) - q)
    return rec.report


@dataclass(frozen=True)
class NStepTarget:
    """Uncorrected n-step target ``sum_{i<n} gamma^i r_i + gamma^n (pi Q)(x_n)``, truncated at the trajectory end."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")

    def to_dict(self):
        return {"kind": "nstep", "n": self.n}


def _sample_episode(rng, mdp, mu_cdf, p_cdf, h):
    x = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    states, actions = np.empty(h, dtype=int), np.empty(h, dtype=int)
    for t in range(h):
        a = int(np.searchsorted(mu_cdf[x], rng.random(), side="right"))
        a = min(a, mdp.n_actions - 1)
        states[t], actions[t] = x, a
        x = int(np.searchsorted(p_cdf[x, a], rng.random(), side="right"))
        x = min(x, mdp.n_states - 1)
    return states, actions, x


def _episode_targets(target, states, actions, rewards, probs, bootstrap, q, pi, gamma):
    from .estimators import Trajectory

    traj = Trajectory(states, actions, rewards, probs, bootstrap)
    if isinstance(target, NStepTarget):
        v = np.einsum("xa,xa->x", pi, q)
        h = states.size
        out = np.empty(h)
        nxt = traj.next_states
        for i in range(h):
            end = min(h, i + target.n)
            disc = gamma ** np.arange(end - i)
            out[i] = disc @ rewards[i:end] + gamma ** (end - i) * v[nxt[end - 1]]
        return out
    if target.kind == "pql":
        return pql_target_recursive(traj, q, pi, target.lam, gamma).targets
    if target.kind == "retrace":
        return retrace_target_recursive(traj, q, pi, target.lam, target.cap, gamma).targets
    raise ValueError(f"tabular_learner supports pql, retrace and nstep targets, not {target.kind!r}")


def tabular_learner(
    mdp,
    target,
    mu,
    lr=0.1,
    iterations=1000,
    episodes_per_iter=1,
    horizon=None,
    seed=None,
    q0=None,
    record_every=None,
    track_regret=True,
):
    """Soft tabular control from behaviour episodes.

    Each iteration samples ``episodes_per_iter`` episodes of length
    ``horizon`` under ``mu``, builds a target ``Q_hat(x_i, a_i)`` for every
    pair on them (first occurrence wins when a pair repeats), sets
    ``Q <- (1 - lr) Q + lr Q_hat`` on those pairs and then moves the target
    policy ``pi <- (1 - lr) pi + lr greedy(Q)``.  The target policy ``pi``
    (uniform initially) is the one used in the targets and the one whose value
    is recorded.

    ``target`` is a :class:`TraceConfig` of kind ``pql`` or ``retrace`` (a
    ``retrace`` config with ``lam = 0`` is the one-step target) or an
    :class:`NStepTarget`.  Records are taken every ``record_every``
    iterations (default: only the first and last).
    """
    lr = check_unit_interval(lr, "lr", low_open=True)
    iterations = _check_k(iterations)
    if horizon is None or int(horizon) != horizon or horizon < 1:
        raise ValueError("horizon must be a positive integer")
    if int(episodes_per_iter) != episodes_per_iter or episodes_per_iter < 1:
        raise ValueError("episodes_per_iter must be a positive integer")
    if not isinstance(target, (TraceConfig, NStepTarget)):
        raise TypeError("target must be a TraceConfig or NStepTarget")
    mu = check_policy(mu, *mdp.shape, name="mu")
    rng = np.random.default_rng(seed)
    mu_cdf = np.cumsum(mu, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    gamma = mdp.discount
    params = {
        "driver": "tabular_learner",
        "gamma": gamma,
        "lr": lr,
        "iterations": iterations,
        "episodes_per_iter": int(episodes_per_iter),
        "horizon": int(horizon),
        "target": target.to_dict(),
        "seed": seed,
    }
    rec = _Recorder(mdp, None, params, track_regret, horizon=int(horizon))
    q = _initial_q(mdp, q0)
    pi = uniform_policy(*mdp.shape)
    record_every = iterations if not record_every else int(record_every)

    for it in range(iterations + 1):
        if it % record_every == 0 or it == iterations:
            rec.add(it, q, mu, 0.0, pi=pi)
        if it == iterations:
            break
        updates = {}
        for _ in range(int(episodes_per_iter)):
            states, actions, bootstrap = _sample_episode(rng, mdp, mu_cdf, p_cdf, int(horizon))
            targets = _episode_targets(
                target, states, actions, mdp.reward[states, actions], mu[states, actions], bootstrap, q, pi, gamma
            )
            for x, a, tgt in zip(states, actions, targets):
                updates.setdefault((int(x), int(a)), tgt)
        if updates:
            xs, acts = np.array(list(updates)).T
            vals = np.fromiter(updates.values(), dtype=float)
            q[xs, acts] = (1.0 - lr) * q[xs, acts] + lr * vals
        pi = (1.0 - lr) * pi + lr * greedy_tie_split(q)
    return rec.report
