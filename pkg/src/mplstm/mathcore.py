"""Dense primitives, activations, the library RNG and weight initialisation.

Matrices and vectors are plain float64 numpy arrays. Every function accepts
leading batch dimensions on the vector argument, so the same code path serves
single samples and mini-batches.
"""

import numpy as np

DTYPE = np.float64

# largest double below 1 and smallest positive double; activations are clamped
# to these so their open ranges survive float64 saturation
_ONE_BELOW = 1.0 - 2.0**-53
_TINY = 5e-324

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


def affine(W, x, b):
    """Return ``W @ x + b`` (``x`` may carry leading batch axes)."""
    W = np.asarray(W, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or x.shape[-1:] != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(
            f"affine: W has shape {W.shape}, x has shape {x.shape}, b has shape {b.shape}"
        )
    return x @ W.T + b


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return np.clip(out, _TINY, _ONE_BELOW, out=out)


def tanh_act(x):
    return np.clip(np.tanh(np.asarray(x, dtype=DTYPE)), -_ONE_BELOW, _ONE_BELOW)


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[axis] < 1:
        raise ShapeError("softmax of an empty vector")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return np.maximum(z / np.sum(z, axis=axis, keepdims=True), _TINY)


def _splitmix(z):
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(_MIX1))
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(_MIX2))
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 generator.

    Draw ``k`` (0-based) of a stream seeded with ``s`` is
    ``mix(s + (k + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix`` is the
    SplitMix64 finaliser. A uniform double keeps the top 53 bits of the draw,
    so ``uniform = (z >> 11) * 2**-53`` lies in [0, 1). The stream is defined
    by 64-bit integer arithmetic only and does not depend on the platform.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def bits(self, size):
        """Next ``size`` raw 64-bit words as a uint64 array."""
        size = int(size)
        k = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(_GAMMA)
            return _splitmix(z)

    def uniform(self, shape=None):
        """Uniform doubles in [0, 1); a Python float when ``shape`` is None."""
        n = 1 if shape is None else int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(DTYPE) * (1.0 / 9007199254740992.0)
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def normal(self, shape):
        """Standard normal draws by Box-Muller (two uniforms per output)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2, n))
        r = np.sqrt(-2.0 * np.log(1.0 - u[0]))
        return (r * np.cos(2.0 * np.pi * u[1])).reshape(shape)

    def integers(self, high, size):
        """Integers in [0, high); bias is below 2**-50 for small ``high``."""
        return np.floor(self.uniform(size) * high).astype(np.int64)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for j, i in enumerate(range(n - 1, 0, -1)):
            k = int(u[j] * (i + 1))
            perm[i], perm[k] = perm[k], perm[i]
        return perm

    def spawn(self, offset):
        """Independent stream derived from this seed (used for per-model seeds)."""
        return Rng(self.seed + offset)


def rng_uniform(rng):
    return rng.uniform()


def init_glorot(rng, rows, cols):
    """Glorot-uniform ``rows x cols`` matrix, entries in [-L, L], L = sqrt(6/(rows+cols))."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"init_glorot: bad shape ({rows}, {cols})")
    limit = np.sqrt(6.0 / (rows + cols))
    return limit * (2.0 * rng.uniform((rows, cols)) - 1.0)
