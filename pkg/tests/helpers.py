"""Shared test oracles.

The gradient oracle is central finite differences, evaluated by re-running the
forward function with perturbed leaf data; it never touches the tape's
backward rules, so it is independent of the path it checks.
"""

import numpy as np

from tunet import tensor as T


def numeric_grad(make_loss, leaf, h=1e-5, indices=None):
    """Central-difference gradient of make_loss() w.r.t. the given leaf tensor.

    indices: optional list of flat indices to probe (default: all elements).
    Returns an array shaped like the probed set.
    """
    flat = leaf.data.reshape(-1)
    indices = list(range(flat.size)) if indices is None else list(indices)
    out = np.empty(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        with T.no_grad():
            fp = float(make_loss().item())
        flat[i] = old - h
        with T.no_grad():
            fm = float(make_loss().item())
        flat[i] = old
        out[n] = (fp - fm) / (2.0 * h)
    return out


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(make_loss, leaves, h=1e-5, tol=1e-4, rng=None, sample=None):
    """Assert analytic gradients match central differences for every leaf.

    Runs in whatever dtype the leaves carry; callers use float64 for
    verification. With `sample`, only that many randomly chosen coordinates
    per leaf are probed (for large models).
    """
    for leaf in leaves:
        leaf.grad = None
    loss = make_loss()
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        flat_grad = leaf.grad.reshape(-1)
        if sample is None or leaf.data.size <= sample:
            idx = list(range(leaf.data.size))
        else:
            idx = sorted(rng.choice(leaf.data.size, size=sample, replace=False).tolist())
        num = numeric_grad(make_loss, leaf, h=h, indices=idx)
        err = max_rel_error(flat_grad[idx], num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} (tol {tol:.1e})"
    return worst


def dice_oracle(a, b):
    """Literal set-counting Dice on two boolean masks."""
    sa = {tuple(p) for p in np.argwhere(a)}
    sb = {tuple(p) for p in np.argwhere(b)}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def boundary_oracle(mask):
    """Voxels of the mask with at least one face-neighbor outside it."""
    pts = []
    d, h, w = mask.shape
    for z, y, x in np.argwhere(mask):
        on_edge = False
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w) or not mask[nz, ny, nx]:
                on_edge = True
                break
        if on_edge:
            pts.append((z, y, x))
    return pts


def hausdorff_oracle(a, b, spacing):
    """All-pairs boundary Hausdorff distance in mm; O(n^2) by construction."""
    sx, sy, sz = spacing
    diag = float(np.sqrt((a.shape[0] * sz) ** 2 + (a.shape[1] * sy) ** 2 + (a.shape[2] * sx) ** 2))
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return diag
    pa = boundary_oracle(a)
    pb = boundary_oracle(b)

    def directed(src, dst):
        worst = 0.0
        for z, y, x in src:
            best = np.inf
            for z2, y2, x2 in dst:
                d2 = ((z - z2) * sz) ** 2 + ((y - y2) * sy) ** 2 + ((x - x2) * sx) ** 2
                if d2 < best:
                    best = d2
            if best > worst:
                worst = best
        return worst

    return float(np.sqrt(max(directed(pa, pb), directed(pb, pa))))
