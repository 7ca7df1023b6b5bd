"""Compare the numba kernels against the numpy fallback on training shapes.

Run: python benchmarks/bench_backends.py [--repeats N]
The same comparison is toggled in production through SEMCOND_BACKEND.
"""

import argparse
import time

import numpy as np

from semcond import autodiff as ad
from semcond import backend
from semcond import diffusion as df

CONV_SHAPES = [
    # (batch, channels, height, width, stride) as they occur in the denoiser
    (8, 16, 32, 32, 1),
    (8, 16, 32, 32, 2),
    (8, 32, 16, 16, 1),
    (8, 32, 16, 16, 2),
    (8, 64, 8, 8, 1),
    (64, 32, 16, 16, 1),
]


def time_call(fn, repeats):
    fn()  # warm (jit compile / page in)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'shape':>24s} {'kernel':>8s} {'numba ms':>10s} {'numpy ms':>10s} {'ratio':>7s}")
    for b, c, h, w, s in CONV_SHAPES:
        x = rng.normal(size=(b, c, h, w)).astype(np.float32)
        oh = (h + 2 - 3) // s + 1
        ow = (w + 2 - 3) // s + 1
        cols = rng.normal(size=(b, c * 9, oh * ow)).astype(np.float32)
        rows = {}
        for name in ("numba", "numpy"):
            with backend.use_backend(name):
                rows[name, "im2col"] = time_call(lambda: backend.im2col(x, 3, 3, s, 1), repeats)
                rows[name, "col2im"] = time_call(
                    lambda: backend.col2im(cols, x.shape, 3, 3, s, 1), repeats)
        for kernel in ("im2col", "col2im"):
            nb, np_ = rows["numba", kernel], rows["numpy", kernel]
            print(f"{f'{b}x{c}x{h}x{w}/s{s}':>24s} {kernel:>8s} {nb:10.3f} {np_:10.3f} "
                  f"{np_ / nb:6.2f}x")


def bench_denoiser_step(repeats):
    rng = np.random.default_rng(1)
    den = df.init_denoiser(df.DenoiserConfig(), seed=0)
    x = rng.normal(size=(8, 3, 32, 32)).astype(np.float32)
    ts = np.arange(8) % 100
    cond = rng.normal(size=(8, 16, 64)).astype(np.float32)
    target = ad.constant(rng.normal(size=(8, 3, 32, 32)).astype(np.float32))

    def step():
        ad.zero_grads(den.params)
        loss = ad.mse_loss(df.denoiser_forward(den, x, ts, cond), target)
        loss.backward()

    def fwd():
        df.denoiser_forward(den, x, ts, cond)

    print(f"\n{'denoiser (batch 8)':>24s} {'numba ms':>10s} {'numpy ms':>10s} {'ratio':>7s}")
    results = {}
    for name in ("numba", "numpy"):
        with backend.use_backend(name):
            results[name, "forward"] = time_call(fwd, repeats)
            results[name, "fwd+bwd"] = time_call(step, max(repeats // 2, 3))
    for phase in ("forward", "fwd+bwd"):
        nb, np_ = results["numba", phase], results["numpy", phase]
        print(f"{phase:>24s} {nb:10.1f} {np_:10.1f} {np_ / nb:6.2f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()
    if not backend.HAS_NUMBA:
        raise SystemExit("numba not importable; nothing to compare")
    print(f"active backend: {backend.active_backend()}")
    bench_kernels(args.repeats)
    bench_denoiser_step(args.repeats)


if __name__ == "__main__":
    main()
