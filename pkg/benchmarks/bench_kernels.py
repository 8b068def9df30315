"""Compare the compiled and numpy convolution backends.

Times im2col / col2im on the layer shapes of the default network and one
full teacher training step under each backend, and checks that both
backends return bit-identical arrays.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from capdistill import data as D
from capdistill import kernels
from capdistill import network as N
from capdistill import training as T

# (batch, channels, spatial, kernel) as seen by the default network, batch 16
SHAPES = [(16, 3, 32, 3), (16, 16, 32, 3), (16, 32, 16, 3), (16, 64, 8, 3), (16, 64, 8, 1)]


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n, c, s, k in SHAPES:
        pad = k // 2
        xp = np.ascontiguousarray(rng.standard_normal((n, c, s + 2 * pad, s + 2 * pad)))
        cols = np.ascontiguousarray(rng.standard_normal((n * s * s, c * k * k)))
        args_fwd = (xp, k, 1, s, s)
        args_bwd = (cols, n, c, s + 2 * pad, s + 2 * pad, k, 1, s, s)
        same = np.array_equal(kernels.compiled_im2col(*args_fwd), kernels.fallback_im2col(*args_fwd)) and np.array_equal(
            kernels.compiled_col2im(*args_bwd), kernels.fallback_col2im(*args_bwd)
        )
        t = {}
        for name, fn, a in (
            ("im2col_cy", kernels.compiled_im2col, args_fwd),
            ("im2col_np", kernels.fallback_im2col, args_fwd),
            ("col2im_cy", kernels.compiled_col2im, args_bwd),
            ("col2im_np", kernels.fallback_col2im, args_bwd),
        ):
            t[name] = min(timeit.repeat(lambda: fn(*a), number=1, repeat=repeat)) * 1e3
        rows.append(((n, c, s, k), t, same))
    return rows


def bench_step(repeat):
    ds = D.generate(D.DatasetSpec())
    cfg = T.TrainConfig(mode="teacher", epochs=1)
    batch = D.pk_batches(ds, cfg.P, cfg.S, cfg.seed, 0)[0]
    out = {}
    for backend in ("cython", "numpy"):
        kernels.use_backend(backend)
        model = N.build_model(N.ModelConfig(with_compactors=False), 0)
        trainer = T.Trainer(cfg, ds, model)
        x, y = trainer._batch(0, 0, batch)
        trainer.train_step(x, y, 1)  # warm-up
        out[backend] = min(timeit.repeat(lambda: trainer.train_step(x, y, 1), number=1, repeat=repeat)) * 1e3
    kernels.use_backend("cython")
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=10)
    args = ap.parse_args(argv)
    if kernels.compiled_im2col is None:
        raise SystemExit("compiled kernels are not available; build the extension first")
    print(f"{'shape (n,c,hw,k)':<20}{'im2col cy':>11}{'im2col np':>11}{'col2im cy':>11}{'col2im np':>11}  identical")
    for shape, t, same in bench_kernels(args.repeat):
        print(
            f"{str(shape):<20}{t['im2col_cy']:>9.2f}ms{t['im2col_np']:>9.2f}ms"
            f"{t['col2im_cy']:>9.2f}ms{t['col2im_np']:>9.2f}ms  {same}"
        )
    step = bench_step(max(3, args.repeat // 3))
    print(f"teacher train step: cython {step['cython']:.1f} ms, numpy {step['numpy']:.1f} ms "
          f"(speedup {step['numpy'] / step['cython']:.2f}x)")


if __name__ == "__main__":
    main()
