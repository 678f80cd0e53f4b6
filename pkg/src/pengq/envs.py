"""Constructors for the tree MDPs, the HQL oscillation MDP and random MDPs."""
from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp

LEFT, RIGHT = 0, 1
GO, EXIT = 0, 1


@dataclass(frozen=True)
class TreeSpec:
    """Binary tree MDP of depth ``depth`` with two rewarding leaves.

    ``reward_timing`` chooses where the leaf rewards sit:

    ``"enter"``
        leaves at depth ``depth``; the reward is paid on the transition into
        the leftmost / rightmost leaf, and every leaf then moves to an
        absorbing zero-reward terminal.
    ``"exit"``
        leaves at depth ``depth - 1``; acting at a leaf pays its reward and
        moves to the terminal, so an episode still spans ``depth`` steps.
        Requires ``depth >= 2``.
    """

    depth: int
    left_reward: float = 1.0
    right_reward: float = 0.5
    discount: float = 0.99
    reward_timing: str = "enter"

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"tree depth must be a positive integer, got {self.depth}")
        if self.reward_timing not in ("enter", "exit"):
            raise ValueError(f"reward_timing must be 'enter' or 'exit', got {self.reward_timing!r}")
        if self.reward_timing == "exit" and self.depth < 2:
            raise ValueError("reward_timing='exit' needs depth >= 2")

    @property
    def leaf_depth(self):
        return self.depth if self.reward_timing == "enter" else self.depth - 1

    @property
    def n_nodes(self):
        return 2 ** (self.leaf_depth + 1) - 1

    @property
    def terminal(self):
        return self.n_nodes

    @property
    def leftmost_leaf(self):
        return 2**self.leaf_depth - 1

    @property
    def rightmost_leaf(self):
        return 2 ** (self.leaf_depth + 1) - 2

    def optimal_return(self, discounted=True):
        return self.left_reward * (self.discount ** (self.depth - 1) if discounted else 1.0)

    def suboptimal_return(self, discounted=True):
        return self.right_reward * (self.discount ** (self.depth - 1) if discounted else 1.0)


def tree_mdp(spec):
    """Heap-indexed tree: node ``i`` has children ``2i + 1`` (L) and ``2i + 2`` (R).

    The last state is the absorbing terminal.  The initial distribution is a
    point mass on the root (state 0).
    """
    n_nodes = spec.n_nodes
    n_states = n_nodes + 1
    terminal = spec.terminal
    first_leaf = 2**spec.leaf_depth - 1
    transition = np.zeros((n_states, 2, n_states))
    reward = np.zeros((n_states, 2))

    inner = np.arange(first_leaf)
    transition[inner, LEFT, 2 * inner + 1] = 1.0
    transition[inner, RIGHT, 2 * inner + 2] = 1.0
    transition[first_leaf:n_nodes, :, terminal] = 1.0
    transition[terminal, :, terminal] = 1.0

    if spec.reward_timing == "enter":
        # parents of the two extreme leaves
        reward[(spec.leftmost_leaf - 1) // 2, LEFT] = spec.left_reward
        reward[(spec.rightmost_leaf - 2) // 2, RIGHT] += spec.right_reward
    else:
        reward[spec.leftmost_leaf, :] = spec.left_reward
        reward[spec.rightmost_leaf, :] += spec.right_reward

    initial = np.zeros(n_states)
    initial[0] = 1.0
    return TabularMdp(transition, reward, spec.discount, initial)


def oscillation_mdp(gamma):
    """Two-state MDP on which exact HQL with a fixed ``go`` policy oscillates.

    The infinite chain ``x = 1, 2, ...`` is collapsed onto the single state 0:
    every chain state has identical outgoing structure, so all Q-values and
    operator iterates coincide with the chain's.  State 1 is the absorbing
    ``x'`` which pays +1 per step.  Actions: ``GO = 0`` (reward -1, stay on the
    chain), ``EXIT = 1`` (reward +1, move to ``x'``).
    """
    gamma = float(gamma)
    if not 0.5 < gamma < 1.0:
        raise ValueError(f"the oscillation construction needs 0.5 < gamma < 1, got {gamma}")
    transition = np.zeros((2, 2, 2))
    transition[0, GO, 0] = 1.0
    transition[0, EXIT, 1] = 1.0
    transition[1, :, 1] = 1.0
    reward = np.array([[-1.0, 1.0], [1.0, 1.0]])
    return TabularMdp(transition, reward, gamma, np.array([1.0, 0.0]))


def oscillation_initial_q(gamma, delta=None):
    """``Q_0 = Q^mu`` except ``Q_0(x, go) = Q^mu(x, go) + delta``.

    ``delta`` defaults to ``2 gamma / (1 - gamma)^2 + 1``, above the
    ``2 / (1 - gamma)`` needed for ``go`` to be greedy at ``k = 0``.
    """
    if delta is None:
        delta = 2.0 * gamma / (1.0 - gamma) ** 2 + 1.0
    v = 1.0 / (1.0 - gamma)
    return np.array([[-v + delta, v], [v, v]])


def random_mdp(n_states, n_actions, seed=None, reward_range=(0.0, 1.0), discount=0.9):
    """Flat-Dirichlet transition rows and uniform rewards, deterministic per seed."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    # renormalise so rows sum to 1 to the last ulp
    transition /= transition.sum(axis=2, keepdims=True)
    low, high = reward_range
    reward = rng.uniform(low, high, size=(n_states, n_actions))
    return TabularMdp(transition, reward, discount, np.full(n_states, 1.0 / n_states))


def random_policy(n_states, n_actions, seed=None, min_prob=0.0):
    """Random stochastic policy with every entry at least ``min_prob``."""
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    if min_prob > 0:
        if min_prob * n_actions >= 1:
            raise ValueError("min_prob too large for the number of actions")
        probs = min_prob + (1.0 - min_prob * n_actions) * probs
    return probs / probs.sum(axis=1, keepdims=True)


def behavior_policy(n_states, left_prob=0.3):
    """State-independent two-action policy ``mu(L) = left_prob``."""
    return np.tile([left_prob, 1.0 - left_prob], (n_states, 1))


ENVIRONMENTS = {
    "tree": lambda **kw: tree_mdp(TreeSpec(**kw)),
    "oscillation": lambda gamma=0.9: oscillation_mdp(gamma),
    "random": random_mdp,
}


def make_env(name, **params):
    """Build an environment by name, as used by the CLI config."""
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return factory(**params)
