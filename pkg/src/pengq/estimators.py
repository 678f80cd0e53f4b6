"""Sample-based multi-step targets computed from behaviour trajectories.

A trajectory of length ``H`` holds ``(x_t, a_t, r_t, mu(a_t|x_t))`` for
``t < H`` and a bootstrap state ``x_H``.  The infinite-horizon estimators are
truncated at ``H`` by bootstrapping with ``(pi Q)(x_H)``, which introduces a
bias of order ``(gamma lambda)^H``.
"""
import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .operators import general_retrace_op, resolve_trace
from .validation import check_policy, check_q

# bound on the int64/float64 scratch used by the vectorised sampler
_SAMPLER_CHUNK_CELLS = 4_000_000


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One behaviour trajectory with the behaviour probabilities recorded at sampling time."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray
    bootstrap_state: int

    def __post_init__(self):
        states = np.asarray(self.states, dtype=int)
        actions = np.asarray(self.actions, dtype=int)
        rewards = np.asarray(self.rewards, dtype=float)
        probs = np.asarray(self.behavior_probs, dtype=float)
        h = states.size
        if h < 1:
            raise ValueError("a trajectory needs at least one step")
        if not (states.ndim == actions.ndim == rewards.ndim == probs.ndim == 1):
            raise ValueError("trajectory fields must be 1-d")
        if not (actions.size == rewards.size == probs.size == h):
            raise ValueError("trajectory fields must share the same length")
        if np.any(probs <= 0) or np.any(probs > 1):
            raise ValueError("behaviour probabilities must lie in (0, 1]")
        if np.any(states < 0) or np.any(actions < 0) or int(self.bootstrap_state) < 0:
            raise ValueError("state and action indices must be non-negative")
        for name, arr in (("states", states), ("actions", actions), ("rewards", rewards), ("behavior_probs", probs)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "bootstrap_state", int(self.bootstrap_state))

    @property
    def length(self):
        return self.states.size

    @property
    def next_states(self):
        """``x_1, ..., x_H`` (the last one is the bootstrap state)."""
        return np.append(self.states[1:], self.bootstrap_state)

    def check_bounds(self, n_states, n_actions):
        if self.states.max() >= n_states or self.bootstrap_state >= n_states:
            raise ValueError("trajectory state index out of range for this MDP")
        if self.actions.max() >= n_actions:
            raise ValueError("trajectory action index out of range for this MDP")

    def to_record(self):
        return {
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "behavior_probs": self.behavior_probs.tolist(),
            "bootstrap_state": self.bootstrap_state,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            record["states"],
            record["actions"],
            record["rewards"],
            record["behavior_probs"],
            record["bootstrap_state"],
        )


def write_jsonl(trajectories, path):
    """Write one JSON record per trajectory."""
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_record()) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [Trajectory.from_record(json.loads(line)) for line in fh if line.strip()]


class TargetEstimate(NamedTuple):
    """A scalar target plus its per-step ingredients.

    ``per_step_td[t]`` is the TD error entering the forward sum at step ``t``
    and ``per_step_trace_product[t]`` the product of trace coefficients
    ``c_1 ... c_t`` (1 at ``t = 0``).  Recursive estimators also fill
    ``targets`` with every intermediate ``Q_hat_i`` and ``coefficients`` with the
    traces they used.
    """

    value: float
    per_step_td: np.ndarray
    per_step_trace_product: np.ndarray
    targets: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None


class TrajectoryBatch(NamedTuple):
    """``n`` trajectories of equal length as stacked arrays.

    ``states`` has shape ``(n, H + 1)``; its last column holds bootstrap states.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray

    def trajectory(self, i):
        return Trajectory(
            self.states[i, :-1], self.actions[i], self.rewards[i], self.behavior_probs[i], self.states[i, -1]
        )


class MonteCarloEstimate(NamedTuple):
    mean: float
    stderr: float
    n_samples: int
    stderr_defined: bool


def _draw(rng, cdf_rows):
    """One categorical draw per row of cumulative probabilities."""
    u = rng.random(cdf_rows.shape[0])
    idx = (cdf_rows[:, :-1] <= u[:, None]).sum(axis=1)
    return idx


def sample_batch(mdp, mu, h, n, seed=None, start=None):
    """Sample ``n`` length-``h`` trajectories under ``mu``.

    ``start`` is either ``None`` (initial state from ``mdp.initial_dist``,
    first action from ``mu``) or a ``(state, action)`` pair fixing both.
    Accepts an integer seed or a ``numpy`` Generator.
    """
    if int(h) != h or h < 1:
        raise ValueError(f"horizon must be a positive integer, got {h}")
    if int(n) != n or n < 1:
        raise ValueError(f"number of trajectories must be a positive integer, got {n}")
    h, n = int(h), int(n)
    mu = check_policy(mu, *mdp.shape, name="mu")
    rng = np.random.default_rng(seed)
    n_states, n_actions = mdp.shape
    mu_cdf = np.cumsum(mu, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)

    states = np.empty((n, h + 1), dtype=int)
    actions = np.empty((n, h), dtype=int)
    if start is None:
        states[:, 0] = rng.choice(n_states, size=n, p=mdp.initial_dist)
    else:
        x0, a0 = (int(v) for v in start)
        if not (0 <= x0 < n_states and 0 <= a0 < n_actions):
            raise ValueError(f"start pair {start} out of range")
        states[:, 0] = x0
    chunk = max(1, _SAMPLER_CHUNK_CELLS // max(n_states, n_actions))
    for t in range(h):
        for lo in range(0, n, chunk):
            sl = slice(lo, min(n, lo + chunk))
            xs = states[sl, t]
            if t == 0 and start is not None:
                actions[sl, 0] = a0
            else:
                actions[sl, t] = _draw(rng, mu_cdf[xs])
            states[sl, t + 1] = _draw(rng, p_cdf[xs, actions[sl, t]])
    x, a = states[:, :-1], actions
    probs = mu[x, a]
    if np.any(probs <= 0):
        # only reachable when start fixes an action mu never takes
        raise ValueError("start action has zero behaviour probability")
    return TrajectoryBatch(states, actions, mdp.reward[x, a], probs)


def sample_trajectory(mdp, mu, h, seed=None, start=None):
    """A single trajectory; see :func:`sample_batch`."""
    return sample_batch(mdp, mu, h, 1, seed=seed, start=start).trajectory(0)


def _forward_sum(q, states, actions, rewards, next_values, c_steps, coef):
    """``Q(x_0, a_0) + sum_t coef^t (prod_{u<=t} c_u) delta_t`` along the last axis.

    ``next_values[..., t]`` is the backed-up value at ``x_{t+1}`` and
    ``c_steps[..., t]`` the trace at step ``t + 1``.
    """
    q_sa = q[states, actions]
    td = rewards + next_values - q_sa
    prods = np.concatenate([np.ones(td.shape[:-1] + (1,)), np.cumprod(c_steps, axis=-1)], axis=-1)
    weights = coef ** np.arange(td.shape[-1])
    value = q_sa[..., 0] + np.sum(weights * prods * td, axis=-1)
    return value, td, prods


def retrace_target_sum(traj, q, target_pi, c, lam, gamma):
    """Forward-sum estimate of the general Retrace operator at ``(x_0, a_0)``.

    ``Q(x_0, a_0) + sum_{t<H} (gamma lambda)^t (prod_{u=1..t} c(x_u, a_u)) delta_t``
    with ``delta_t = r_t + gamma (pi Q)(x_{t+1}) - Q(x_t, a_t)`` and ``x_H`` the
    bootstrap state.
    """
    q = check_q(q)
    target_pi = check_policy(target_pi, *q.shape, name="target_pi")
    c = np.asarray(c, dtype=float)
    traj.check_bounds(*q.shape)
    v = np.einsum("xa,xa->x", target_pi, q)
    next_values = gamma * v[traj.next_states]
    c_steps = c[traj.states[1:], traj.actions[1:]]
    value, td, prods = _forward_sum(q, traj.states, traj.actions, traj.rewards, next_values, c_steps, gamma * lam)
    return TargetEstimate(float(value), td, prods)


def pql_target_sum(traj, q, eval_policy, lam, gamma):
    """Forward sum with ``c = 1`` whose per-step backup uses the sampled mixture.

    The value backed up at ``x_{t+1}`` is ``lambda Q(x_{t+1}, a_{t+1}) +
    (1 - lambda) (pi Q)(x_{t+1})``: the next behaviour action stands in for
    ``mu``.  At the bootstrap state only ``(pi Q)(x_H)`` is available.  This
    form equals :func:`pql_target_recursive` on every trajectory; taking the
    expectation over ``a_{t+1} ~ mu`` recovers the forward sum with target
    ``lambda mu + (1 - lambda) pi``.
    """
    q = check_q(q)
    eval_policy = check_policy(eval_policy, *q.shape, name="eval_policy")
    traj.check_bounds(*q.shape)
    v = np.einsum("xa,xa->x", eval_policy, q)
    nxt = traj.next_states
    mixed = v[nxt].copy()
    mixed[:-1] = lam * q[traj.states[1:], traj.actions[1:]] + (1.0 - lam) * v[nxt[:-1]]
    value, td, prods = _forward_sum(
        q, traj.states, traj.actions, traj.rewards, gamma * mixed, np.ones(traj.length - 1), gamma * lam
    )
    return TargetEstimate(float(value), td, prods)


def pql_target_recursive(traj, q, eval_policy, lam, gamma):
    """Backward recursion ``Q_i = r_i + gamma V(x_{i+1}) + gamma lambda (Q_{i+1} - V(x_{i+1}))``.

    ``V = eval_policy Q`` and ``Q_H = V(x_H)``.  ``targets`` holds
    ``Q_0, ..., Q_{H-1}``.
    """
    q = check_q(q)
    eval_policy = check_policy(eval_policy, *q.shape, name="eval_policy")
    traj.check_bounds(*q.shape)
    v = np.einsum("xa,xa->x", eval_policy, q)
    h = traj.length
    nxt = traj.next_states
    targets = np.empty(h)
    ahead = v[traj.bootstrap_state]
    for i in range(h - 1, -1, -1):
        v_next = v[nxt[i]]
        ahead = traj.rewards[i] + gamma * v_next + gamma * lam * (ahead - v_next)
        targets[i] = ahead
    td = pql_target_sum(traj, q, eval_policy, lam, gamma).per_step_td
    return TargetEstimate(float(targets[0]), td, np.ones(h), targets, np.ones(h))


def retrace_target_recursive(traj, q, target_pi, lam, cap, gamma):
    """Backward recursion ``Q_i = r_i + gamma (pi Q)(x_{i+1}) + gamma c_{i+1} (Q_{i+1} - Q(x_{i+1}, a_{i+1}))``.

    The trace ``c_j = lambda min(pi(a_j|x_j) / mu(a_j|x_j), cap)`` is the one of
    the step whose TD error is being carried back, so ``Q_{H-1} = r_{H-1} +
    gamma (pi Q)(x_H)``.  ``coefficients[j]`` reports ``c_j`` (``c_0`` is
    computed but never used).
    """
    q = check_q(q)
    target_pi = check_policy(target_pi, *q.shape, name="target_pi")
    traj.check_bounds(*q.shape)
    if not cap > 0:
        raise ValueError("cap must be positive")
    v = np.einsum("xa,xa->x", target_pi, q)
    h = traj.length
    nxt = traj.next_states
    ratios = target_pi[traj.states, traj.actions] / traj.behavior_probs
    coeffs = lam * np.minimum(ratios, cap)
    targets = np.empty(h)
    targets[h - 1] = traj.rewards[h - 1] + gamma * v[nxt[h - 1]]
    for i in range(h - 2, -1, -1):
        correction = targets[i + 1] - q[traj.states[i + 1], traj.actions[i + 1]]
        targets[i] = traj.rewards[i] + gamma * v[nxt[i]] + gamma * coeffs[i + 1] * correction
    q_sa = q[traj.states, traj.actions]
    td = traj.rewards + gamma * v[nxt] - q_sa
    prods = np.concatenate([[1.0], np.cumprod(coeffs[1:])])
    return TargetEstimate(float(targets[0]), td, prods, targets, coeffs)


def batch_forward_sum(batch, q, target_pi, c, lam, gamma):
    """Vectorised :func:`retrace_target_sum` over a :class:`TrajectoryBatch`."""
    v = np.einsum("xa,xa->x", target_pi, q)
    states = batch.states
    next_values = gamma * v[states[:, 1:]]
    c_steps = c[states[:, 1:-1], batch.actions[:, 1:]]
    value, _, _ = _forward_sum(
        q, states[:, :-1], batch.actions, batch.rewards, next_values, c_steps, gamma * lam
    )
    return value


def mc_operator_estimate(mdp, mu, trace, q, state_action, n_samples, h, seed=None, target=None):
    """Monte-Carlo mean and standard error of the forward-sum estimator.

    The trace coefficients and target policy are resolved from ``trace`` at
    ``q`` exactly as :func:`general_retrace_op` does, so the mean estimates
    that operator's value at ``state_action`` up to an ``O((gamma lambda)^h)``
    truncation bias.  With ``n_samples = 1`` the standard error is reported as
    ``nan`` and ``stderr_defined`` is False.
    """
    if int(n_samples) != n_samples or n_samples < 1:
        raise ValueError(f"n_samples must be a positive integer, got {n_samples}")
    q = check_q(q, *mdp.shape)
    mu = check_policy(mu, *mdp.shape, name="mu")
    c, tgt = resolve_trace(trace, mu, q, target=target, mdp=mdp)
    batch = sample_batch(mdp, mu, h, n_samples, seed=seed, start=state_action)
    values = batch_forward_sum(batch, q, tgt, c, trace.lam, mdp.discount)
    n = values.size
    if n == 1:
        return MonteCarloEstimate(float(values[0]), float("nan"), 1, False)
    return MonteCarloEstimate(float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)), n, True)


def exact_operator_value(mdp, mu, trace, q, state_action, target=None):
    """The exact operator value the Monte-Carlo estimator targets."""
    x, a = state_action
    return float(general_retrace_op(mdp, trace, mu, q, target=target).q[x, a])
