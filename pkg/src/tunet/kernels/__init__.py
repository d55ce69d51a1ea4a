"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension (tunet.kernels._native) is preferred when present;
otherwise the pure numpy reference implementation is used. Set
TUNET_KERNELS=reference|native to force a backend (forcing an unavailable
one raises at import).
"""

import os

from tunet.errors import ConfigError
from tunet.kernels import reference

_backends = {"reference": reference}
try:
    from tunet.kernels import _native

    _backends["native"] = _native
except ImportError:
    _native = None

_requested = os.environ.get("TUNET_KERNELS", "").strip().lower()
if _requested:
    if _requested not in _backends:
        raise ImportError(
            f"TUNET_KERNELS={_requested!r} is not available; "
            f"choose from {sorted(_backends)}"
        )
    _active_name = _requested
else:
    _active_name = "native" if "native" in _backends else "reference"
_active = _backends[_active_name]


def active_backend():
    return _active_name


def available_backends():
    return tuple(sorted(_backends))


def set_backend(name):
    """Switch the process-wide kernel backend (used by tests and benchmarks)."""
    global _active, _active_name
    if name not in _backends:
        raise ConfigError(f"unknown kernel backend {name!r}; have {sorted(_backends)}")
    _active_name = name
    _active = _backends[name]


def get_backend_module(name):
    if name not in _backends:
        raise ConfigError(f"unknown kernel backend {name!r}; have {sorted(_backends)}")
    return _backends[name]


def im2col(x, k, stride, padding):
    return _active.im2col(x, k, stride, padding)


def col2im(cols, c, h, w, k, stride, padding):
    return _active.col2im(cols, c, h, w, k, stride, padding)


def upsample_bilinear(x, out_h, out_w):
    return _active.upsample_bilinear(x, out_h, out_w)


def upsample_bilinear_grad(g, in_h, in_w):
    return _active.upsample_bilinear_grad(g, in_h, in_w)
