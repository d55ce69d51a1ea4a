"""Benchmark the compiled kernels against the numpy reference backend.

Run:  python3 benchmarks/bench_kernels.py

Times the hot gather/scatter kernels at training-representative shapes, plus
an end-to-end conv2d forward+backward through the tensor engine under each
backend.
"""

import time

import numpy as np

from tunet import kernels, tensor as T
from tunet.kernels import reference
from tunet.tensor import Tensor

try:
    from tunet.kernels import _native as native
except ImportError:
    native = None


def timeit(fn, repeats=20):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0  # ms


def bench_kernels():
    rng = np.random.default_rng(0)
    shapes = [
        ("conv 16ch 64x64 k3", dict(c=16, h=64, w=64, k=3, stride=1, pad=1)),
        ("conv 64ch 32x32 k3", dict(c=64, h=32, w=32, k=3, stride=1, pad=1)),
        ("conv 128ch 16x16 k3", dict(c=128, h=16, w=16, k=3, stride=1, pad=1)),
    ]
    rows = []
    for label, s in shapes:
        x = rng.standard_normal((s["c"], s["h"], s["w"])).astype(np.float32)
        ho = (s["h"] + 2 * s["pad"] - s["k"]) // s["stride"] + 1
        wo = (s["w"] + 2 * s["pad"] - s["k"]) // s["stride"] + 1
        cols = rng.standard_normal((s["c"] * s["k"] ** 2, ho * wo)).astype(np.float32)
        args = (s["k"], s["stride"], s["pad"])
        rows.append((f"im2col  {label}",
                     timeit(lambda: reference.im2col(x, *args)),
                     timeit(lambda: native.im2col(x, *args)) if native else None))
        rows.append((f"col2im  {label}",
                     timeit(lambda: reference.col2im(cols, s["c"], s["h"], s["w"], *args)),
                     timeit(lambda: native.col2im(cols, s["c"], s["h"], s["w"], *args)) if native else None))
    for label, (c, h, w, oh, ow) in [
        ("16ch 32->64", (16, 32, 32, 64, 64)),
        ("64ch 8->16", (64, 8, 8, 16, 16)),
        ("9ch 14->224", (9, 14, 14, 224, 224)),
    ]:
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        g = rng.standard_normal((c, oh, ow)).astype(np.float32)
        rows.append((f"bilin fw {label}",
                     timeit(lambda: reference.upsample_bilinear(x, oh, ow)),
                     timeit(lambda: native.upsample_bilinear(x, oh, ow)) if native else None))
        rows.append((f"bilin bw {label}",
                     timeit(lambda: reference.upsample_bilinear_grad(g, h, w)),
                     timeit(lambda: native.upsample_bilinear_grad(g, h, w)) if native else None))
    return rows


def bench_end_to_end():
    """conv2d forward+backward through the tensor engine, per backend."""
    rng = np.random.default_rng(1)
    x_np = rng.standard_normal((32, 64, 64)).astype(np.float32)
    w_np = rng.standard_normal((32, 32, 3, 3)).astype(np.float32)

    def step():
        x = Tensor(x_np, requires_grad=True)
        w = Tensor(w_np, requires_grad=True)
        y = T.conv2d(x, w, stride=1, padding=1)
        T.backward(T.tsum(T.mul(y, y)))

    rows = []
    previous = kernels.active_backend()
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)
            rows.append((name, timeit(step, repeats=10)))
    finally:
        kernels.set_backend(previous)
    return rows


def main():
    print(f"available backends: {', '.join(kernels.available_backends())}")
    if native is None:
        print("compiled backend missing; build with: python setup.py build_ext --inplace\n")
    print(f"\n{'kernel':<28} {'reference':>12} {'native':>12} {'speedup':>9}")
    for label, ref_ms, nat_ms in bench_kernels():
        if nat_ms is None:
            print(f"{label:<28} {ref_ms:>10.3f}ms {'-':>12} {'-':>9}")
        else:
            print(f"{label:<28} {ref_ms:>10.3f}ms {nat_ms:>10.3f}ms {ref_ms / nat_ms:>8.1f}x")
    print(f"\n{'conv2d fwd+bwd (tensor op)':<28} {'time':>12}")
    for name, ms in bench_end_to_end():
        print(f"{name:<28} {ms:>10.3f}ms")


if __name__ == "__main__":
    main()
