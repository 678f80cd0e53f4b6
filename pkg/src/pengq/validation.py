"""Input validation helpers shared by every module.

Policies, Q-functions and value functions are plain ``numpy`` arrays; these
helpers coerce and check them the way ``sklearn.utils.check_array`` does for
feature matrices.
"""
import numpy as np

STOCHASTIC_ATOL = 1e-12


def check_policy(probs, n_states=None, n_actions=None, atol=STOCHASTIC_ATOL, name="policy"):
    """Return ``probs`` as a float array after checking it is row-stochastic."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {probs.shape}")
    _check_shape(probs, (n_states, n_actions), name)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ValueError(f"{name} entries must be finite and non-negative")
    err = np.max(np.abs(probs.sum(axis=1) - 1.0))
    if err > atol:
        raise ValueError(f"{name} rows must sum to 1 (max deviation {err:.3g})")
    return probs


def check_q(q, n_states=None, n_actions=None, name="q"):
    q = np.asarray(q, dtype=float)
    if q.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {q.shape}")
    _check_shape(q, (n_states, n_actions), name)
    if not np.all(np.isfinite(q)):
        raise ValueError(f"{name} has non-finite entries")
    return q


def check_v(v, n_states=None, name="v"):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d array, got shape {v.shape}")
    _check_shape(v, (n_states,), name)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def check_unit_interval(value, name, low_open=False, high_open=False):
    value = float(value)
    low_ok = value > 0 if low_open else value >= 0
    high_ok = value < 1 if high_open else value <= 1
    if not (low_ok and high_ok):
        lb = "(" if low_open else "["
        rb = ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lb}0, 1{rb}, got {value}")
    return value


def _check_shape(arr, expected, name):
    for axis, size in enumerate(expected):
        if size is not None and arr.shape[axis] != size:
            raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(s if s is not None else '?' for s in expected)}")
