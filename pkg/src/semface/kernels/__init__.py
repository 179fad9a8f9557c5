"""Hot inner loops: im2col/col2im, ceil-mode max-pooling, separable Gaussian filtering.

Two interchangeable implementations exist. The numba one is used when numba
imports cleanly; set ``SEMFACE_BACKEND=numpy`` to force the pure-numpy path
(read once, at import time). ``use_backend`` switches at runtime, mainly for
tests and the benchmark.
"""

import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

_BACKENDS = {"numpy": _numpy}

try:
    from . import _numba

    _BACKENDS["numba"] = _numba
except Exception as exc:  # pragma: no cover - depends on the environment
    logger.info("numba kernels unavailable (%s); using numpy", exc)

_requested = os.environ.get("SEMFACE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"SEMFACE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = _requested if _requested in _BACKENDS else "numpy"
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel implementation; returns the previous backend name."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    prev = BACKEND
    BACKEND, _impl = name, _BACKENDS[name]
    return prev


def im2col(x, kh, kw, stride):
    return _impl.im2col(x, kh, kw, stride)


def col2im(cols, x_shape, kh, kw, stride):
    return _impl.col2im(cols, tuple(x_shape), kh, kw, stride)


def maxpool_forward(x, k, s):
    return _impl.maxpool_forward(x, k, s)


def maxpool_backward(argmax, grad_out, input_shape):
    return _impl.maxpool_backward(argmax, grad_out, tuple(input_shape))


def gauss_same(x, g):
    return _impl.gauss_same(x, g)
