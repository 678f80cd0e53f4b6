"""Finite MDPs and single-step Bellman machinery.

Q-functions are ``(n_states, n_actions)`` arrays, value functions are
``(n_states,)`` arrays and policies are row-stochastic ``(n_states, n_actions)``
arrays.  Every function here is pure.
"""
import json
from dataclasses import dataclass

import numpy as np

from . import _linalg
from .validation import STOCHASTIC_ATOL, check_policy, check_q, check_unit_interval, check_v

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with expected rewards.

    Parameters
    ----------
    transition : array of shape (n_states, n_actions, n_states)
        ``transition[x, a, y] = P(y | x, a)``.
    reward : array of shape (n_states, n_actions)
        Expected reward ``r(x, a)``.
    discount : float in [0, 1)
    initial_dist : array of shape (n_states,), optional
        Defaults to uniform.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray = None
    atol: float = STOCHASTIC_ATOL

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {transition.shape}")
        n_states, n_actions = transition.shape[:2]
        if n_states < 1 or n_actions < 1:
            raise ValueError("an MDP needs at least one state and one action")
        if not np.all(np.isfinite(transition)) or np.any(transition < 0):
            raise ValueError("transition probabilities must be finite and non-negative")
        err = np.max(np.abs(transition.sum(axis=2) - 1.0))
        if err > self.atol:
            raise ValueError(f"transition rows must sum to 1 (max deviation {err:.3g})")
        reward = check_q(self.reward, n_states, n_actions, name="reward").copy()
        discount = float(self.discount)
        if not 0.0 <= discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {discount}")
        if self.initial_dist is None:
            initial = np.full(n_states, 1.0 / n_states)
        else:
            initial = check_v(self.initial_dist, n_states, name="initial_dist").copy()
            if np.any(initial < 0) or abs(initial.sum() - 1.0) > self.atol:
                raise ValueError("initial_dist must be a probability vector")
        for arr in (transition, reward, initial):
            arr.flags.writeable = False
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "discount", discount)
        object.__setattr__(self, "initial_dist", initial)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def shape(self):
        return self.transition.shape[:2]

    def with_discount(self, discount):
        return TabularMdp(self.transition, self.reward, discount, self.initial_dist)

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        missing = {"transition", "reward", "discount", "initial_dist"} - set(data)
        if missing:
            raise ValueError(f"MDP document is missing fields: {sorted(missing)}")
        mdp = cls(
            np.asarray(data["transition"], dtype=float),
            np.asarray(data["reward"], dtype=float),
            data["discount"],
            np.asarray(data["initial_dist"], dtype=float),
        )
        for key, actual in (("n_states", mdp.n_states), ("n_actions", mdp.n_actions)):
            if key in data and int(data[key]) != actual:
                raise ValueError(f"{key}={data[key]} disagrees with array shapes ({actual})")
        return mdp

    def to_json(self, path=None, indent=None):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, source):
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, str) and source.lstrip().startswith("{"):
            return cls.from_dict(json.loads(source))
        with open(source) as fh:
            return cls.from_dict(json.load(fh))


def uniform_policy(n_states, n_actions):
    return np.full((n_states, n_actions), 1.0 / n_actions)


def deterministic_policy(actions, n_actions):
    """One-hot policy selecting ``actions[x]`` in state ``x``."""
    actions = np.asarray(actions, dtype=int)
    probs = np.zeros((actions.size, n_actions))
    probs[np.arange(actions.size), actions] = 1.0
    return probs


def policy_backup(pi, q):
    """``(pi Q)(x) = sum_a pi(a|x) Q(x, a)``."""
    q = check_q(q)
    pi = check_policy(pi, *q.shape)
    return np.einsum("xa,xa->x", pi, q)


def kernel_backup(mdp, v):
    """``(P V)(x, a) = sum_y P(y|x, a) V(y)``."""
    v = check_v(v, mdp.n_states)
    return mdp.transition @ v


def bellman(mdp, pi, q):
    """One application of ``T^pi Q = r + gamma P^pi Q``."""
    q = check_q(q, *mdp.shape)
    pi = check_policy(pi, *mdp.shape)
    return mdp.reward + mdp.discount * (mdp.transition @ np.einsum("xa,xa->x", pi, q))


def bellman_opt(mdp, q):
    """``T Q = r + gamma P max_a Q``; independent of how greedy ties are broken."""
    q = check_q(q, *mdp.shape)
    return mdp.reward + mdp.discount * (mdp.transition @ q.max(axis=1))


def greedy_actions(q):
    """Argmax action per state, lowest index on ties."""
    return np.argmax(check_q(q), axis=1)


def greedy(q):
    """Deterministic greedy policy with lowest-index tie-breaking."""
    q = check_q(q)
    return deterministic_policy(np.argmax(q, axis=1), q.shape[1])


def greedy_tie_split(q, tol=0.0):
    """Greedy policy spreading probability evenly over actions within ``tol`` of the maximum.

    Unlike :func:`greedy` this does not favour low action indices, which
    matters when many states still have all-equal values.
    """
    q = check_q(q)
    if tol < 0:
        raise ValueError("tol must be non-negative")
    best = q >= q.max(axis=1, keepdims=True) - tol
    return best / best.sum(axis=1, keepdims=True)


def greedy_set(q, tol=0.0):
    """Per-state arrays of actions within ``tol`` of the state maximum."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    q = check_q(q)
    best = q.max(axis=1, keepdims=True)
    return [np.flatnonzero(row) for row in q >= best - tol]


def mix_policies(p1, p2, w):
    """Rowwise convex combination ``w * p1 + (1 - w) * p2``."""
    w = check_unit_interval(w, "w")
    p1 = check_policy(p1, name="p1")
    p2 = check_policy(p2, *p1.shape, name="p2")
    return w * p1 + (1.0 - w) * p2


def policy_q(mdp, pi, check_residual=True):
    """Exact ``Q^pi`` from ``(I - gamma P^pi) Q = r`` by a dense solve."""
    pi = check_policy(pi, *mdp.shape)
    try:
        q = _linalg.resolvent_direct(mdp.transition, pi, mdp.discount, np.array(mdp.reward))
    except _linalg.SingularResolventError as exc:
        raise ValueError(f"policy evaluation failed; malformed MDP? ({exc})") from exc
    if check_residual:
        scale = max(1.0, float(np.max(np.abs(q))))
        residual = sup_dist(q, bellman(mdp, pi, q))
        if residual >= RESIDUAL_TOL * scale:
            raise ValueError(f"policy evaluation residual {residual:.3g} exceeds tolerance")
    return q


def policy_v(mdp, pi):
    """``V^pi = pi Q^pi``."""
    return np.einsum("xa,xa->x", pi, policy_q(mdp, pi))


def value_iteration(mdp, tol=1e-12, q0=None, max_iter=1_000_000):
    """Iterate ``T`` from ``q0`` until the sup change falls below ``tol * (1 - gamma)``.

    The result is then polished by evaluating its greedy policy exactly, which
    is kept when it is at least as close to a fixed point.
    """
    q = np.zeros(mdp.shape) if q0 is None else check_q(q0, *mdp.shape).copy()
    threshold = tol * (1.0 - mdp.discount)
    for _ in range(max_iter):
        new = bellman_opt(mdp, q)
        change = sup_dist(new, q)
        q = new
        if change < threshold:
            break
    else:
        raise RuntimeError(f"value iteration did not converge in {max_iter} iterations")
    polished = policy_q(mdp, greedy(q), check_residual=False)
    if sup_dist(polished, bellman_opt(mdp, polished)) <= sup_dist(q, bellman_opt(mdp, q)):
        return polished
    return q


def optimal_q(mdp, tol=1e-12):
    return value_iteration(mdp, tol=tol)


def sup_dist(a, b):
    """``max |a - b|`` over all entries."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))
