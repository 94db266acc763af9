"""Wall-clock comparison of the numba kernels against the numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once per backend before timing so numba compilation is
excluded. The end-to-end rows time one RIR, one local MWF and one
estimator forward pass at the default sizes.
"""
import argparse
import timeit

import numpy as np

from adhocse import _accel, kernels
from adhocse.danse import local_mwf
from adhocse.dsp import ComplexSpectrogram
from adhocse.neural import NetConfig, forward, init_params
from adhocse.scene import make_scene, sample_scene, simulate_rir


def cases(rng):
    x = rng.normal(size=(16, 32, 21, 257)).astype(np.float32)
    pooled, arg = kernels.maxpool_freq(x, 4)
    dpool = rng.normal(size=pooled.shape).astype(np.float32)
    cols = kernels.im2col(x)
    Y = rng.normal(size=(10, 250, 257)) + 1j * rng.normal(size=(10, 250, 257))
    w = rng.uniform(size=(250, 257))
    d, a = rng.uniform(50, 6000, 2000), rng.normal(size=2000)
    spec = sample_scene(0)
    y = ComplexSpectrogram(Y[:4])
    est = init_params(NetConfig(in_channels=7), seed=0)
    feats = rng.normal(size=(16, 7, 21, 257)).astype(np.float32)
    return {
        "rir_accumulate": lambda: kernels.rir_accumulate(d, a, 8000),
        "weighted_outer_sum": lambda: kernels.weighted_outer_sum(Y, w),
        "maxpool_freq": lambda: kernels.maxpool_freq(x, 4),
        "maxpool_freq_backward": lambda: kernels.maxpool_freq_backward(dpool, arg, 4, 257),
        "im2col": lambda: kernels.im2col(x),
        "col2im": lambda: kernels.col2im(cols, x.shape),
        "simulate_rir (order 10)": lambda: simulate_rir(spec, spec.source_positions[0], spec.node_positions[0][0]),
        "local_mwf (4 mics)": lambda: local_mwf(y, w, 0),
        "forward (7 ch, batch 16)": lambda: forward(est, feats),
        "make_scene (1 s)": lambda: make_scene(0, 1.0, max_order=6),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    fns = cases(np.random.default_rng(0))
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    prev = _accel.numba_enabled()
    try:
        for name, fn in fns.items():
            t = {}
            for flag in (True, False):
                _accel.use_numba(flag)
                fn()
                t[flag] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            print(f"{name:28s} {t[True]:10.2f} {t[False]:10.2f} {t[False] / t[True]:7.1f}x")
    finally:
        _accel.use_numba(prev)


if __name__ == "__main__":
    main()
