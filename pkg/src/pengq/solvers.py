"""Estimator-style wrappers: ``fit(mdp)`` runs a driver, ``predict(states)`` returns greedy actions.

The wrappers follow scikit-learn conventions (constructor stores
hyper-parameters only, learned attributes end in ``_``, ``get_params`` and
``set_params`` come from ``BaseEstimator``) so they compose with parameter
grids and ``clone``.
"""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import schedules
from .mdp import TabularMdp, greedy_actions, uniform_policy
from .operators import TraceConfig


def _check_mdp(mdp):
    if not isinstance(mdp, TabularMdp):
        raise TypeError(f"fit expects a TabularMdp, got {type(mdp).__name__}")
    return mdp


class _PolicyMixin:
    def predict(self, states=None):
        """Greedy action for each state index (all states when ``states`` is None)."""
        check_is_fitted(self, "q_")
        actions = greedy_actions(self.q_)
        if states is None:
            return actions
        states = np.asarray(states, dtype=int)
        if np.any(states < 0) or np.any(states >= actions.size):
            raise ValueError("state index out of range")
        return actions[states]

    def predict_q(self, states=None):
        check_is_fitted(self, "q_")
        return self.q_ if states is None else self.q_[np.asarray(states, dtype=int)]


class PengQSolver(_PolicyMixin, BaseEstimator):
    """Exact Peng's Q(lambda) iteration.

    Parameters
    ----------
    lam : float
        Trace decay.
    alpha : float or None
        ``None`` keeps the behaviour policy fixed at ``behavior``; a value in
        ``[1 - lam, 1]`` mixes the behaviour towards the greedy policy each
        iteration.
    behavior : array or None
        Behaviour policy (fixed mode) or ``mu_{-1}`` (mixing mode); uniform when None.
    n_iter : int
    """

    def __init__(self, lam=0.5, alpha=None, behavior=None, n_iter=200):
        self.lam = lam
        self.alpha = alpha
        self.behavior = behavior
        self.n_iter = n_iter

    def fit(self, mdp, q0=None):
        mdp = _check_mdp(mdp)
        mu = uniform_policy(*mdp.shape) if self.behavior is None else self.behavior
        if self.alpha is None:
            report = schedules.pql_fixed_behavior(mdp, mu, self.lam, q0=q0, K=self.n_iter)
        else:
            report = schedules.pql_behavior_updates(
                mdp, self.lam, self.alpha, mu_init=mu, q0=q0, K=self.n_iter
            )
        self.report_ = report
        self.q_ = report.q[-1]
        self.policy_ = report.greedy[-1]
        self.n_states_, self.n_actions_ = mdp.shape
        return self


class HarutyunyanQSolver(_PolicyMixin, BaseEstimator):
    """Exact Harutyunyan's Q(lambda) iteration (fixed or greedy-tracking behaviour)."""

    def __init__(self, lam=1.0, behavior_mode="fixed", behavior=None, n_iter=50):
        self.lam = lam
        self.behavior_mode = behavior_mode
        self.behavior = behavior
        self.n_iter = n_iter

    def fit(self, mdp, q0=None):
        mdp = _check_mdp(mdp)
        mu = self.behavior
        if self.behavior_mode == "fixed" and mu is None:
            mu = uniform_policy(*mdp.shape)
        report = schedules.hql_iterate(mdp, self.lam, q0=q0, K=self.n_iter, behavior_mode=self.behavior_mode, mu=mu)
        self.report_ = report
        self.q_ = report.q[-1]
        self.policy_ = report.greedy[-1]
        self.n_states_, self.n_actions_ = mdp.shape
        return self


class TabularLearner(_PolicyMixin, BaseEstimator):
    """Sampled soft tabular control; see :func:`pengq.schedules.tabular_learner`.

    ``target`` is ``"one_step"``, ``"retrace"``, ``"pql"`` or ``"nstep"``;
    ``lam`` and ``n`` parameterise it.
    """

    def __init__(self, target="pql", lam=1.0, n=5, cap=1.0, behavior=None, lr=0.1, n_iter=1000, horizon=None, random_state=None):
        self.target = target
        self.lam = lam
        self.n = n
        self.cap = cap
        self.behavior = behavior
        self.lr = lr
        self.n_iter = n_iter
        self.horizon = horizon
        self.random_state = random_state

    def _target(self):
        if self.target == "one_step":
            return TraceConfig("retrace", lam=0.0)
        if self.target == "retrace":
            return TraceConfig("retrace", lam=self.lam, cap=self.cap)
        if self.target == "pql":
            return TraceConfig("pql", lam=self.lam)
        if self.target == "nstep":
            return schedules.NStepTarget(self.n)
        raise ValueError(f"unknown target {self.target!r}")

    def fit(self, mdp):
        mdp = _check_mdp(mdp)
        mu = uniform_policy(*mdp.shape) if self.behavior is None else self.behavior
        report = schedules.tabular_learner(
            mdp,
            self._target(),
            mu,
            lr=self.lr,
            iterations=self.n_iter,
            horizon=self.horizon,
            seed=self.random_state,
        )
        self.report_ = report
        self.q_ = report.q[-1]
        self.return_ = report.value_init[-1]
        self.n_states_, self.n_actions_ = mdp.shape
        return self
