"""Dense numerical primitives: activations, tempered softmax, Adam and a seeded RNG.

Vectors and matrices are plain ``numpy.float64`` arrays. Everything here is
deterministic: the same inputs (and the same seed) give bitwise-identical
outputs on a given machine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DEFAULT_SLOPE = 0.01


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def softmax_t(z, T: float) -> np.ndarray:
    """Softmax of ``z / T`` along the last axis.

    Works on a single logit vector or a batch (one row per sample).
    """
    if not T > 0 or not math.isfinite(T):
        raise ContractError(f"temperature must be positive and finite, got {T!r}")
    z = _as_f64(z)
    if np.isnan(z).any():
        raise ContractError("logits contain NaN")
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(z, T: float) -> np.ndarray:
    if not T > 0 or not math.isfinite(T):
        raise ContractError(f"temperature must be positive and finite, got {T!r}")
    s = _as_f64(z) / T
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def leaky_relu(v, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    if slope < 0:
        raise ContractError(f"negative slope must be >= 0, got {slope}")
    v = _as_f64(v)
    return np.where(v > 0, v, slope * v)


def leaky_relu_grad(v, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    """Derivative of :func:`leaky_relu` (the kink at 0 takes the negative branch)."""
    return np.where(_as_f64(v) > 0, 1.0, slope)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape {a.shape} does not match {b.shape}")


def matvec(A, v) -> np.ndarray:
    A, v = _as_f64(A), _as_f64(v)
    if A.ndim != 2 or v.ndim != 1 or A.shape[1] != v.shape[0]:
        raise ContractError(f"matvec: cannot multiply {A.shape} by {v.shape}")
    return A @ v


def matmul(A, B) -> np.ndarray:
    A, B = _as_f64(A), _as_f64(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ContractError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    return A @ B


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a * x + y``."""
    x, y = _as_f64(x), _as_f64(y)
    _check_shapes(x, y, "axpy")
    return a * x + y


@dataclass
class AdamState:
    """Moment buffers and step counter for :func:`adam_step`.

    Buffers are created lazily on the first step, keyed like the parameter dict.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if params.keys() != grads.keys():
        raise ContractError("parameter and gradient sets differ")
    for k in params:
        _check_shapes(params[k], grads[k], f"gradient for {k!r}")
        if k in state.m:
            _check_shapes(params[k], state.m[k], f"Adam state for {k!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- random numbers -------------------------------------------------------
#
# SplitMix64 (Steele, Lea & Flood 2014): output i of a stream seeded with s is
# mix(s + (i + 1) * GAMMA) mod 2**64. Because each output depends only on its
# position, blocks of draws vectorize exactly and the stream is identical on
# every platform.

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_array(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(_M1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_M2)
    x ^= x >> np.uint64(31)
    return x


def mix64(x: int) -> int:
    x &= _MASK
    x = ((x ^ (x >> 30)) * _M1) & _MASK
    x = ((x ^ (x >> 27)) * _M2) & _MASK
    return x ^ (x >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Hash a seed and integer keys into an independent 64-bit seed."""
    h = mix64(seed + _GAMMA)
    for k in keys:
        h = mix64(h ^ mix64((k & _MASK) + _GAMMA))
    return h


class Rng:
    """Seeded SplitMix64 generator with vectorized draws."""

    def __init__(self, seed: int):
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise ContractError(f"seed must be an integer, got {seed!r}")
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        start = self.counter + 1
        self.counter += n
        idx = np.arange(start, start + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return _mix_array(np.uint64(self.seed) + idx * np.uint64(_GAMMA))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        m = (n + 1) // 2
        u = self.next_u64(2 * m) >> np.uint64(11)
        u1 = (u[:m].astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        u2 = u[m:].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from range(n), in random order."""
        if k > n:
            raise ContractError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]
