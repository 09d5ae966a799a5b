"""Small deterministic numerics layer: validated float64 arrays, keyed RNG
streams and a central-difference gradient oracle."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from .errors import NumericError, RejectedInput

DTYPE = np.float64


def as_matrix(values, *, name: str = "matrix") -> np.ndarray:
    m = np.asarray(values, dtype=DTYPE)
    if m.ndim != 2:
        raise RejectedInput(f"{name} must be 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def as_vector(values, *, name: str = "vector") -> np.ndarray:
    v = np.asarray(values, dtype=DTYPE)
    if v.ndim != 1:
        raise RejectedInput(f"{name} must be 1-D, got shape {v.shape}")
    check_finite(v, name)
    return v


def check_finite(a: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(a)))[0])
        raise NumericError(f"non-finite entry in {what} at flat index {bad}", coordinate=bad)
    return a


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=DTYPE)


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with rows accumulated left to right."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise RejectedInput(f"dimension mismatch: {m.shape} x ({v.shape[0]},)")
    out = np.zeros(m.shape[0], dtype=DTYPE)
    for j in range(m.shape[1]):
        out += m[:, j] * v[j]
    return check_finite(out, "matvec result")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``."""
    if not h > 0:
        raise RejectedInput(f"step size must be positive, got {h}")
    x = np.array(x, dtype=DTYPE).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        saved = x[i]
        x[i] = saved + h
        fp = float(f(x.copy()))
        x[i] = saved - h
        fm = float(f(x.copy()))
        x[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite around coordinate {i}", coordinate=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _key_word(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool, np.bool_)):
        raise RejectedInput("boolean RNG keys are ambiguous")
    k = int(key)
    if k < 0:
        # negative ids (e.g. the pooled pseudo-client) map into a disjoint range
        return (1 << 63) + (-k)
    return k


def _flatten(keys):
    for k in keys:
        if isinstance(k, (tuple, list)):
            yield from _flatten(k)
        else:
            yield k


class Rng:
    """Counter-based, splittable random source.

    Every stream is a Philox generator keyed by ``(seed, *keys)``, so the
    numbers a client draws depend only on its labels and never on the order
    in which clients happen to run.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise RejectedInput(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed

    def stream(self, *keys) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_key_word(k) for k in _flatten(keys)))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"Rng(seed={self.seed})"
