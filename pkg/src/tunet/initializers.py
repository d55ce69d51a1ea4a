"""Weight initializers. Models train from scratch, so these matter:
He-normal for conv/linear weights, truncated normal for embeddings,
unit gain / zero bias for norms.
"""

import numpy as np

from tunet.tensor import Tensor, get_default_dtype


def he_normal(rng, shape, fan_in):
    std = np.sqrt(2.0 / float(fan_in))
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with samples beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return Tensor(out, requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


def ones(shape):
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=True)
