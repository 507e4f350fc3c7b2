"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --pipeline   # also time a full run under each backend

Shapes match what the pipeline feeds the kernels at default settings.
"""
import argparse
import os
import subprocess
import sys
import tempfile
import time
import timeit

import numpy as np

from latent_augment import kernels


def _cases():
    gen = np.random.default_rng(0)
    n_params = 128 * 128 + 64 * 128  # a predictor layer or two
    p, g = gen.normal(size=n_params), gen.normal(size=n_params)
    m, v = np.zeros(n_params), np.zeros(n_params)
    adam = (p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)

    logits = gen.normal(size=(128, 10))
    labels = gen.integers(0, 10, 128)
    weights = np.full(128, 1 / 128)

    z, e, noise = (gen.normal(size=(27, 16)) for _ in range(3))
    ddim = (z, e, 0.9, 0.43, 0.91, 0.4, 0.05, noise)

    x = gen.normal(size=(400, 16))
    cov = np.cov(x.T)

    return {
        "adam_update": (kernels.adam_update_np, kernels.adam_update_nb, adam),
        "softmax_xent": (kernels.softmax_xent_np, kernels.softmax_xent_nb, (logits, labels, weights)),
        "ddim_update": (kernels.ddim_update_np, kernels.ddim_update_nb, ddim),
        "jacobi_eigh": (kernels.jacobi_eigh_np, kernels.jacobi_eigh_nb, (cov,)),
    }


def bench_kernels(repeat: int) -> None:
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':<14}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn, args) in _cases().items():
        nb_fn(*args)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: np_fn(*args), number=50, repeat=repeat)) / 50
        t_nb = min(timeit.repeat(lambda: nb_fn(*args), number=50, repeat=repeat)) / 50
        print(f"{name:<14}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}x")


def bench_pipeline() -> None:
    for flag in ("1", "0"):
        env = dict(os.environ, LATENT_AUGMENT_NUMBA=flag)
        with tempfile.TemporaryDirectory() as out:
            t0 = time.perf_counter()
            subprocess.run([sys.executable, "-m", "latent_augment.cli", "pipeline", "--out", out],
                           env=env, check=True, stdout=subprocess.DEVNULL)
            elapsed = time.perf_counter() - t0
        print(f"pipeline LATENT_AUGMENT_NUMBA={flag}: {elapsed:.2f}s")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--pipeline", action="store_true", help="also time a default pipeline run per backend")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    if args.pipeline:
        bench_pipeline()


if __name__ == "__main__":
    main()
