"""Minimal dense numerics shared by every trainable module.

Everything here is double precision and deterministic: the three
nonlinearities used by the decoder equations, a central-difference
gradient checker, and a seeded splitmix64 random generator whose draw
sequence is bit-identical across runs and platforms.
"""

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int, exact 64-bit wraparound."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 stream: state advances by a fixed odd gamma, outputs are
    the mixed state.  The algorithm is frozen; never swap in the platform
    default generator, reproducibility of the experiment protocols depends
    on this exact stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    def child(self, *tags: int) -> "Rng":
        """Derive an independent sub-stream from immutable tags.

        Pure function of (seed, tags): does not advance this generator,
        so harness cells can be seeded in any evaluation order.
        """
        s = self.seed
        for t in tags:
            s = _mix64(s ^ ((int(t) + _GOLDEN) & _MASK64))
        return Rng(s)

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix64(self._state)

    def _block_u64(self, n: int) -> np.ndarray:
        """Vectorized batch of n raw draws (advances state by n)."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self._state) + idx * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & _MASK64
        return z

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws in (0, 1), strictly interior."""
        if size is None:
            return ((self.next_u64() >> 11) + 0.5) * 2.0**-53
        n = int(np.prod(size))
        u = ((self._block_u64(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(size)

    def normal(self, size=None, scale: float = 1.0):
        """Standard normal via the inverse CDF; deterministic, no rejection."""
        return ndtri(self.uniform(size)) * scale

    def integers(self, low: int, high: int, size=None):
        """Uniform ints in [low, high). Modulo bias is negligible for the
        desk-scale ranges used here and keeps the draw count fixed."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        if size is None:
            return low + self.next_u64() % span
        n = int(np.prod(size))
        draws = self._block_u64(n) % np.uint64(span)
        return (low + draws.astype(np.int64)).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n)."""
        out = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def shuffle(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ValueError(f"cannot choose {k} from {n}")
        return self.permutation(n)[:k]


def sigmoid(x):
    """Logistic function, saturating without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; rows sum to 1 within 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def squash(v: np.ndarray) -> np.ndarray:
    """Soft normalization: squash(s) = (|s|^2 / (1+|s|^2)) * s/|s|.

    Output is parallel to the input with norm |s|^2/(1+|s|^2) in [0, 1).
    The zero vector maps to zero by definition (the formula's limit).
    """
    v = np.asarray(v, dtype=np.float64)
    sq = float(np.dot(v, v))
    if sq == 0.0:
        return np.zeros_like(v)
    n = np.sqrt(sq)
    return (n / (1.0 + sq)) * v


def squash_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise squash of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    sq = np.sum(m * m, axis=1, keepdims=True)
    n = np.sqrt(sq)
    factor = np.where(sq > 0.0, n / (1.0 + sq), 0.0)
    return factor * m


def grad_check(loss_fn, params: np.ndarray, analytic_grad: np.ndarray,
               epsilon: float = 1e-5):
    """Compare an analytic gradient against central differences.

    Returns (max_rel_error, worst_index) where the relative error of
    parameter i is |a_i - n_i| / max(|a_i|, |n_i|, 1e-8).  loss_fn must be
    deterministic; any internal randomness has to be frozen by the caller.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = np.asarray(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if params.shape != analytic_grad.shape:
        raise ValueError("params and analytic_grad shapes differ")
    worst = 0.0
    worst_idx = -1
    theta = params.copy()
    for i in range(theta.size):
        orig = theta.flat[i]
        theta.flat[i] = orig + epsilon
        f_plus = float(loss_fn(theta))
        theta.flat[i] = orig - epsilon
        f_minus = float(loss_fn(theta))
        theta.flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = analytic_grad.flat[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
            worst_idx = i
    return worst, worst_idx


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {what}")
