"""Exact multi-step operators for control.

Each operator is evaluated in closed form through resolvents
``(I - gamma * lambda * P W)^{-1}``; geometric-series evaluation is kept as an
independent route for cross-checks.  Trace choices (c, target) follow the
standard table of alpha-trace, C-trace, HQL, Retrace, tree-backup, Watkins'
Q(lambda) and Peng's Q(lambda).
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _linalg
from .mdp import bellman, greedy, sup_dist
from .validation import check_policy, check_q, check_unit_interval

TRACE_KINDS = ("alpha", "ctrace", "hql", "retrace", "tree_backup", "watkins", "pql", "custom")


@dataclass(frozen=True)
class ResolventSolveSpec:
    """How ``(I - gamma lambda P^{c mu})^{-1}`` is applied.

    ``method="direct"`` solves a dense linear system; ``method="series"`` sums
    the Neumann series and is only allowed when the trace-weighted behaviour
    has ``gamma * lambda * max_x sum_a c(x, a) mu(a|x) < 1``.
    """

    method: str = "direct"
    tol: float = 1e-12
    max_terms: int = 1_000_000

    def __post_init__(self):
        if self.method not in ("direct", "series"):
            raise ValueError(f"unknown resolvent method {self.method!r}")
        if self.method == "series" and (self.tol <= 0 or self.max_terms < 1):
            raise ValueError("series resolvent needs tol > 0 and max_terms >= 1")


DIRECT = ResolventSolveSpec()


def resolvent(mdp, weights, coef, x, solve=DIRECT):
    """Apply ``(I - coef * P W)^{-1}`` to the state-action array ``x``."""
    weights = np.asarray(weights, dtype=float)
    if solve.method == "direct":
        return _linalg.resolvent_direct(mdp.transition, weights, coef, x)
    return _linalg.resolvent_series(mdp.transition, weights, coef, x, solve.tol, solve.max_terms)


@dataclass(frozen=True)
class TraceConfig:
    """One row of the trace table plus the trace-decay ``lam``.

    ``kind`` is one of ``alpha``, ``ctrace``, ``hql``, ``retrace``,
    ``tree_backup``, ``watkins``, ``pql`` or ``custom``.  Kind-specific
    parameters: ``alpha`` (alpha-trace), ``target_contraction``, ``horizon``,
    ``n_rollouts`` and ``seed`` (C-trace), ``cap`` (Retrace truncation level)
    and ``c`` (custom trace matrix).
    """

    kind: str
    lam: float = 1.0
    alpha: Optional[float] = None
    target_contraction: Optional[float] = None
    horizon: int = 10
    n_rollouts: int = 1000
    seed: Optional[int] = 0
    cap: float = 1.0
    c: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {self.kind!r}; choose from {TRACE_KINDS}")
        check_unit_interval(self.lam, "lam")
        if self.kind == "alpha":
            if self.alpha is None:
                raise ValueError("alpha-trace needs alpha")
            check_unit_interval(self.alpha, "alpha")
        if self.kind == "ctrace":
            if self.target_contraction is None:
                raise ValueError("C-trace needs target_contraction")
            check_unit_interval(self.target_contraction, "target_contraction", low_open=True, high_open=True)
            if self.horizon < 1 or self.n_rollouts < 1:
                raise ValueError("C-trace needs horizon >= 1 and n_rollouts >= 1")
        if self.kind == "retrace" and not self.cap > 0:
            raise ValueError(f"Retrace cap must be positive, got {self.cap}")
        if self.kind == "custom":
            if self.c is None:
                raise ValueError("custom trace needs a c matrix")
            c = np.array(self.c, dtype=float)
            if c.ndim != 2 or not np.all(np.isfinite(c)) or np.any(c < 0):
                raise ValueError("custom c must be a finite non-negative matrix")
            c.flags.writeable = False
            object.__setattr__(self, "c", c)

    def to_dict(self):
        out = {"kind": self.kind, "lambda": self.lam}
        if self.kind == "alpha":
            out["alpha"] = self.alpha
        elif self.kind == "ctrace":
            out.update(
                target_contraction=self.target_contraction,
                horizon=self.horizon,
                n_rollouts=self.n_rollouts,
                seed=self.seed,
            )
            if self.alpha is not None:
                out["alpha"] = self.alpha
        elif self.kind == "retrace":
            out["cap"] = self.cap
        elif self.kind == "custom":
            out["c"] = self.c.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            kind = data.pop("kind")
        except KeyError:
            raise ValueError("trace config needs a 'kind' field") from None
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        allowed = {"lam", "alpha", "target_contraction", "horizon", "n_rollouts", "seed", "cap", "c"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown trace config fields: {sorted(unknown)}")
        if "c" in data:
            data["c"] = np.asarray(data["c"], dtype=float)
        return cls(kind=kind, **data)


class ResolvedTrace(NamedTuple):
    c: np.ndarray
    target: np.ndarray


class RetraceResult(NamedTuple):
    q: np.ndarray
    c: np.ndarray
    target: np.ndarray


class ConservativeReport(NamedTuple):
    is_conservative: bool
    violations: list
    max_excess: float


class CTraceAlpha(NamedTuple):
    alpha: float
    rate: float
    attainable: bool


def _ratio(pi, mu):
    """``pi / mu``, with 0/0 taken as 0; raises where ``pi > 0`` but ``mu == 0``."""
    if np.any((mu <= 0) & (pi > 0)):
        raise ValueError("importance ratio undefined: mu(a|x) = 0 where the target puts mass")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mu > 0, pi / np.where(mu > 0, mu, 1.0), 0.0)


def resolve_trace(trace, mu, q, target=None, mdp=None):
    """Trace coefficients ``c`` and target policy chosen by ``trace`` at ``q``.

    ``target`` overrides the default target for kinds whose table entry is
    "any" (Retrace, tree-backup, custom); it defaults to ``greedy(q)``.  The
    PQL target is the mixture ``lam * mu + (1 - lam) * greedy(q)``.  C-trace
    needs ``mdp`` to adapt alpha unless ``trace.alpha`` is already set.
    """
    q = check_q(q)
    mu = check_policy(mu, *q.shape, name="mu")
    pi_q = greedy(q)
    lam = trace.lam
    kind = trace.kind
    if kind in ("alpha", "ctrace"):
        alpha = trace.alpha
        if alpha is None:
            if mdp is None:
                raise ValueError("C-trace without a fixed alpha needs the MDP to adapt alpha")
            alpha = ctrace_alpha(
                mdp, mu, q, trace.horizon, trace.target_contraction, trace.n_rollouts, trace.seed
            ).alpha
        tgt = alpha * pi_q + (1.0 - alpha) * mu
        c = np.minimum(1.0, (1.0 - alpha) + alpha * _ratio(pi_q, mu))
    elif kind == "hql":
        tgt = pi_q
        c = np.ones_like(q)
    elif kind == "pql":
        tgt = lam * mu + (1.0 - lam) * pi_q
        c = np.ones_like(q)
    elif kind == "watkins":
        tgt = pi_q
        c = np.minimum(1.0, _ratio(tgt, mu))
    else:
        tgt = pi_q if target is None else check_policy(target, *q.shape, name="target")
        if kind == "retrace":
            c = np.minimum(trace.cap, _ratio(tgt, mu))
        elif kind == "tree_backup":
            c = tgt.copy()
        else:
            if trace.c.shape != q.shape:
                raise ValueError(f"custom c has shape {trace.c.shape}, expected {q.shape}")
            c = np.array(trace.c)
    return ResolvedTrace(c, tgt)


def n_step_op(mdp, pi, n, q):
    """``(T^pi)^n Q``."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    for _ in range(int(n)):
        q = bellman(mdp, pi, q)
    return q


def lambda_return_op(mdp, pi, lam, q, solve=DIRECT):
    """``T_lambda^pi Q = Q + (I - gamma lambda P^pi)^{-1} (T^pi Q - Q)``."""
    lam = check_unit_interval(lam, "lam")
    q = check_q(q, *mdp.shape)
    pi = check_policy(pi, *mdp.shape)
    return q + resolvent(mdp, pi, mdp.discount * lam, bellman(mdp, pi, q) - q, solve)


def uncorrected_n_step_op(mdp, mu, pi, n, q):
    """``(T^mu)^{n-1} T^pi Q``."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    q = bellman(mdp, pi, q)
    for _ in range(int(n) - 1):
        q = bellman(mdp, mu, q)
    return q


def pql_op(mdp, mu, pi, lam, q, solve=DIRECT, form="closed"):
    """Peng's Q(lambda) operator ``N_lambda^{mu, pi} Q``.

    ``form="closed"`` evaluates ``(I - gamma lambda P^mu)^{-1} (r + gamma (1 - lambda) P^pi Q)``;
    ``form="mixture"`` evaluates ``Q + (I - gamma lambda P^mu)^{-1} (T^rho Q - Q)``
    with ``rho = lambda mu + (1 - lambda) pi``.  When ``mu`` and ``pi`` are the
    same array the operator is the lambda-return operator and is computed as
    such, so on-policy PQL reproduces lambda-PI exactly.
    """
    lam = check_unit_interval(lam, "lam")
    q = check_q(q, *mdp.shape)
    mu = check_policy(mu, *mdp.shape, name="mu")
    pi = check_policy(pi, *mdp.shape, name="pi")
    if np.array_equal(mu, pi):
        return lambda_return_op(mdp, pi, lam, q, solve)
    gamma = mdp.discount
    if form == "closed":
        rhs = mdp.reward + gamma * (1.0 - lam) * (mdp.transition @ np.einsum("xa,xa->x", pi, q))
        return resolvent(mdp, mu, gamma * lam, rhs, solve)
    if form == "mixture":
        rho = lam * mu + (1.0 - lam) * pi
        return q + resolvent(mdp, mu, gamma * lam, bellman(mdp, rho, q) - q, solve)
    raise ValueError(f"unknown PQL form {form!r}")


def pql_series(mdp, mu, pi, lam, q, tol=1e-12, max_terms=10_000_000):
    """``(1 - lambda) sum_{n >= 1} lambda^{n-1} N_n^{mu, pi} Q``, truncated.

    Every ``N_n Q`` is bounded by ``B = |Q| + |r| / (1 - gamma)``, so the
    discarded tail after ``N`` terms is at most ``lambda^N B``; summation stops
    as soon as that bound drops below ``tol``.
    """
    lam = check_unit_interval(lam, "lam")
    if lam == 1.0:
        raise ValueError("the series does not terminate at lambda = 1; use pql_op")
    q = check_q(q, *mdp.shape)
    bound = float(np.max(np.abs(q))) + float(np.max(np.abs(mdp.reward))) / (1.0 - mdp.discount)
    term = bellman(mdp, pi, q)
    total = (1.0 - lam) * term
    weight = 1.0
    for _ in range(max_terms):
        weight *= lam
        if weight * bound < tol:
            return total
        term = bellman(mdp, mu, term)
        total = total + (1.0 - lam) * weight * term
    raise RuntimeError(f"pql_series did not reach tol={tol} in {max_terms} terms")


def general_retrace_op(mdp, trace, mu, q, target=None, solve=DIRECT):
    """``R_lambda^{c mu, pi} Q = Q + (I - gamma lambda P^{c mu})^{-1} (T^pi Q - Q)``.

    Returns the operator value together with the resolved ``c`` and target.
    """
    q = check_q(q, *mdp.shape)
    mu = check_policy(mu, *mdp.shape, name="mu")
    c, tgt = resolve_trace(trace, mu, q, target=target, mdp=mdp)
    weights = c * mu
    coef = mdp.discount * trace.lam
    if solve.method == "series" and _linalg.contraction_proxy(weights, coef) >= 1.0:
        raise _linalg.SingularResolventError(
            "gamma * lambda * max row sum of c * mu >= 1; the series resolvent diverges"
        )
    value = q + resolvent(mdp, weights, coef, bellman(mdp, tgt, q) - q, solve)
    return RetraceResult(value, c, tgt)


def validate_conservative(c, mu, pi, tol=1e-12):
    """Check ``0 <= c(x, a) <= pi(a|x) / mu(a|x)`` everywhere.

    Pairs with ``mu(a|x) = 0`` never enter the trace and are not checked.
    """
    c = np.asarray(c, dtype=float)
    mu = check_policy(mu, *c.shape, name="mu")
    pi = check_policy(pi, *c.shape, name="pi")
    if np.any((mu <= 0) & (pi > 0)):
        raise ValueError("mu must be positive wherever pi is")
    ratio = _ratio(pi, mu)
    active = mu > 0
    excess = np.where(active, np.maximum(c - ratio, -c), -np.inf)
    bad = excess > tol
    violations = [(int(x), int(a)) for x, a in zip(*np.nonzero(bad))]
    max_excess = float(np.max(excess)) if np.any(active) else 0.0
    return ConservativeReport(not violations, violations, max(max_excess, 0.0))


def ctrace_contraction_rate(gamma, horizon, ratios, alpha):
    """``1 - (1 - gamma)/(1 - gamma^n) * mean_i sum_t gamma^t prod_{s=1..t} c_s``.

    ``ratios`` has shape ``(n_rollouts, horizon)``; ``c_s = min(1, 1 - alpha +
    alpha * ratio_s)``, the alpha-trace coefficient.  Column 0 is unused.
    """
    n = ratios.shape[1]
    c = np.minimum(1.0, (1.0 - alpha) + alpha * ratios[:, 1:])
    prods = np.concatenate([np.ones((ratios.shape[0], 1)), np.cumprod(c, axis=1)], axis=1)
    disc = gamma ** np.arange(n)
    expected = float(np.mean(prods @ disc))
    if gamma == 0.0:
        return 1.0 - expected
    return 1.0 - (1.0 - gamma) / (1.0 - gamma**n) * expected


def ctrace_alpha(mdp, mu, q, horizon, target_contraction, n_rollouts, seed=None, atol=1e-3):
    """Bisect alpha in [0, 1] so the estimated contraction rate hits ``target_contraction``.

    Rollouts of length ``horizon`` start from ``mdp.initial_dist`` under ``mu``;
    the same rollouts are reused for every alpha, which makes the estimated
    rate a deterministic non-decreasing function of alpha.  When the target is
    outside the attainable range the nearest boundary alpha is returned with
    ``attainable=False``.
    """
    from .estimators import sample_batch

    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    target_contraction = check_unit_interval(target_contraction, "target_contraction", True, True)
    pi_q = greedy(q)
    batch = sample_batch(mdp, mu, horizon, n_rollouts, seed=seed)
    ratios = pi_q[batch.states[:, :horizon], batch.actions] / batch.behavior_probs
    rate = lambda a: ctrace_contraction_rate(mdp.discount, horizon, ratios, a)  # noqa: E731
    lo, hi = 0.0, 1.0
    r_lo, r_hi = rate(lo), rate(hi)
    if target_contraction <= r_lo + atol:
        return CTraceAlpha(lo, r_lo, abs(r_lo - target_contraction) <= atol)
    if target_contraction >= r_hi - atol:
        return CTraceAlpha(hi, r_hi, abs(r_hi - target_contraction) <= atol)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r_mid = rate(mid)
        if abs(r_mid - target_contraction) <= atol:
            return CTraceAlpha(mid, r_mid, True)
        if r_mid < target_contraction:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    return CTraceAlpha(mid, rate(mid), abs(rate(mid) - target_contraction) <= atol)


def pql_forms(mdp, mu, pi, lam, q, series_tol=1e-11):
    """All three PQL evaluations (series, mixture resolvent, closed form) and their spread."""
    values = {
        "series": pql_series(mdp, mu, pi, lam, q, tol=series_tol),
        "mixture": pql_op(mdp, mu, pi, lam, q, form="mixture"),
        "closed": pql_op(mdp, mu, pi, lam, q, form="closed"),
    }
    names = list(values)
    spread = max(
        sup_dist(values[a], values[b]) for i, a in enumerate(names) for b in names[i + 1 :]
    )
    return values, spread
