"""Dense float32 arrays and the handful of primitives the rest of the package needs.

Tensors are plain ``numpy.ndarray`` objects (float32, row-major, rank 1..4).
Nothing here broadcasts: shapes must agree exactly or a ``DimensionError``
is raised.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    """Shapes that do not fit together."""


class ParameterError(ValueError):
    """A scalar argument outside its allowed range."""


class DataError(ValueError):
    """Empty or inconsistent datasets."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    t = np.asarray(x, dtype=dtype)
    if not 1 <= t.ndim <= 4:
        raise DimensionError(f"tensor rank must be 1..4, got shape {t.shape}")
    if 0 in t.shape:
        raise DimensionError(f"tensor dimensions must be positive, got shape {t.shape}")
    return np.ascontiguousarray(t)


def require_shape(t, shape, what="tensor"):
    if tuple(t.shape) != tuple(shape):
        raise DimensionError(f"{what}: expected shape {tuple(shape)}, got {tuple(t.shape)}")


def tensor_map(t, f) -> np.ndarray:
    """Apply a scalar function element by element."""
    t = np.asarray(t)
    flat = [f(float(v)) for v in t.ravel()]
    return np.asarray(flat, dtype=t.dtype if t.dtype.kind == "f" else DTYPE).reshape(t.shape)


def tensor_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


_REDUCERS = {
    "sum": np.sum,
    "mean": np.mean,
    "max": np.max,
    "argmax": np.argmax,
}


def tensor_reduce(t, axis: int, kind: str) -> np.ndarray:
    t = np.asarray(t)
    if not 0 <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for rank-{t.ndim} tensor {t.shape}")
    try:
        fn = _REDUCERS[kind]
    except KeyError:
        raise ParameterError(f"unknown reduction {kind!r}; expected one of {sorted(_REDUCERS)}") from None
    return np.asarray(fn(t, axis=axis))


def reshape(t, shape) -> np.ndarray:
    t = np.asarray(t)
    if int(np.prod(shape)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} to {tuple(shape)}")
    return t.reshape(shape)


class SeededRng:
    """PCG64 stream with deterministic child streams.

    ``spawn(i)`` yields the stream for sub-key ``i`` (e.g. a layer index); the
    same (seed, key path) always produces the same draws on any platform.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(_key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def spawn(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + (int(index),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, key={self.key})"


def rng_uniform(rng: SeededRng, low: float, high: float, shape) -> np.ndarray:
    if not low < high:
        raise ParameterError(f"rng_uniform needs low < high, got low={low}, high={high}")
    u = rng.generator.random(size=shape, dtype=np.float64)
    out = (low + (high - low) * u).astype(DTYPE)
    # float32 rounding can land exactly on `high`
    top = DTYPE(high)
    while float(top) >= high:
        top = np.nextafter(top, DTYPE(-np.inf))
    lo = DTYPE(low)
    while float(lo) < low:
        lo = np.nextafter(lo, DTYPE(np.inf))
    if lo > top:
        raise ParameterError(f"no float32 value lies in [{low}, {high})")
    return np.clip(out, lo, top)
