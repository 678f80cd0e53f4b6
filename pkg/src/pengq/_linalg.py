"""Resolvent products ``(I - coef * P W)^{-1} x`` over state-action space.

``P`` maps state values to state-action values through the transition kernel
and ``W`` maps state-action values back to state values through non-negative
per-state weights (a policy, or a trace-weighted policy ``c * mu``).  The
push-through identity

    (I - c P W)^{-1} = I + c P (I - c W P)^{-1} W

reduces every solve to an ``|X| x |X|`` system, which keeps the depth-10 tree
(2^11 states) cheap.
"""
import numpy as np


class SingularResolventError(ValueError):
    """Raised when ``I - coef * P W`` cannot be inverted."""


def state_kernel(transition, weights):
    """``(W P)[y, z] = sum_b W(y, b) P(z | y, b)``."""
    return np.einsum("yb,ybz->yz", weights, transition)


def contraction_proxy(weights, coef):
    """Upper bound on the spectral radius of ``coef * P W``."""
    return coef * float(np.max(weights.sum(axis=1)))


def resolvent_direct(transition, weights, coef, x):
    if coef == 0.0:
        return x.copy()
    n = transition.shape[0]
    system = np.eye(n) - coef * state_kernel(transition, weights)
    rhs = np.einsum("yb,yb...->y...", weights, x)
    try:
        z = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularResolventError(str(exc)) from exc
    if not np.all(np.isfinite(z)):
        raise SingularResolventError("resolvent solve produced non-finite values")
    return x + coef * np.einsum("xay,y...->xa...", transition, z)


class FactoredResolvent:
    """``(I - coef * P W)^{-1}`` with the ``|X| x |X|`` system inverted once.

    For drivers that apply the same resolvent at every iteration, such as PQL
    with a fixed behaviour policy.
    """

    def __init__(self, transition, weights, coef):
        self.transition = transition
        self.weights = weights
        self.coef = coef
        n = transition.shape[0]
        system = np.eye(n) - coef * state_kernel(transition, weights)
        try:
            self.inverse = np.linalg.inv(system)
        except np.linalg.LinAlgError as exc:
            raise SingularResolventError(str(exc)) from exc
        if not np.all(np.isfinite(self.inverse)):
            raise SingularResolventError("resolvent inverse has non-finite entries")

    def __call__(self, x):
        if self.coef == 0.0:
            return x.copy()
        z = self.inverse @ np.einsum("yb,yb->y", self.weights, x)
        return x + self.coef * (self.transition @ z)


def resolvent_series(transition, weights, coef, x, tol, max_terms):
    """Neumann series; only valid when ``contraction_proxy(weights, coef) < 1``.

    Stops once the geometric tail bound ``|term| * k / (1 - k)`` drops below
    ``tol``, where ``k`` is the contraction proxy.
    """
    kappa = contraction_proxy(weights, coef)
    if kappa >= 1.0:
        raise SingularResolventError(
            f"series resolvent requires coef * max row sum < 1, got {kappa:.6g}"
        )
    total = x.copy()
    term = x
    for _ in range(max_terms):
        term = coef * np.einsum("xay,y->xa", transition, np.einsum("yb,yb->y", weights, term))
        total = total + term
        if np.max(np.abs(term)) * kappa / (1.0 - kappa) <= tol:
            return total
    raise RuntimeError(f"resolvent series did not reach tol={tol} within {max_terms} terms")
