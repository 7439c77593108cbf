"""Small dense-math layer: activations, affine maps, seeded RNG, initializers.

Everything is float64. The RNG is SplitMix64, chosen because each output is
a pure function of (seed, draw index), so a block of draws can be generated
with vectorized uint64 arithmetic and still match a scalar loop bit for bit.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

# exp() overflows float64 a little past 709
_EXP_CLAMP = 500.0
# largest double below 1; keeps saturated activations inside the open interval
_BELOW_ONE = 1.0 - 2.0**-53


class DimensionMismatch(ValueError):
    pass


class NonPositiveScale(ValueError):
    pass


def _splitmix_mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream.

    ``state`` advances by the golden-ratio increment once per 64-bit draw;
    draw k (1-based) is ``mix(seed + k * golden)`` modulo 2**64.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        if count < 0:
            raise ValueError("negative draw count")
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _splitmix_mix(z)
        self.state = (self.state + count * int(_GOLDEN)) & _MASK64
        return int(out[0]) if n is None else out

    def uniform(self, n: int | None = None):
        """Uniform draws in [0, 1) from the top 53 bits of each u64."""
        raw = self.next_u64(1 if n is None else n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def permutation(self, n: int) -> np.ndarray:
        """Seeded permutation of range(n): stable argsort of n uniform keys."""
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self) -> "Rng":
        """Independent child stream seeded from the next draw."""
        return Rng(self.next_u64())


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b. ``x`` may carry leading batch axes (shape (..., cols))."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionMismatch(
            f"affine: W{W.shape} x{x.shape} b{b.shape} are incompatible"
        )
    return x @ W.T + b


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Join along the last axis, ``a`` first."""
    return np.concatenate(
        [np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)], axis=-1
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.maximum(np.minimum(np.asarray(x, dtype=np.float64), _EXP_CLAMP), -_EXP_CLAMP)
    return np.minimum(1.0 / (1.0 + np.exp(-x)), _BELOW_ONE)


def tanh_v(x: np.ndarray) -> np.ndarray:
    t = np.tanh(np.asarray(x, dtype=np.float64))
    return np.maximum(np.minimum(t, _BELOW_ONE), -_BELOW_ONE)


def init_uniform(rng: Rng, rows: int, cols: int, scale: float) -> np.ndarray:
    """rows x cols matrix of i.i.d. U[-scale, scale], filled row-major."""
    if not scale > 0:
        raise NonPositiveScale(f"scale must be positive, got {scale}")
    u = rng.uniform(rows * cols)
    return ((2.0 * u - 1.0) * scale).reshape(rows, cols)


def glorot_scale(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))
