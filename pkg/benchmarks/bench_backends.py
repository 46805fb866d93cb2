"""Compare the numba kernels against the numpy fallbacks.

Both implementations are imported directly, so the env flag does not matter
here. Prints one line per kernel: best-of-N wall time for each backend, the
speed-up, and the max disagreement between the two outputs.

    python3 benchmarks/bench_backends.py [--n 200000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from sphereprod import _accel
from sphereprod.special import (
    _bessel_ratio_numba,
    _bessel_ratio_numpy,
    _log_bessel_i_numba,
    _log_bessel_i_numpy,
)
from sphereprod.vmf import _wood_eps_numba, _wood_eps_numpy


def best_time(fn, repeat):
    out = fn()  # warm-up (also triggers compilation)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    n = args.n
    v = rng.integers(0, 100, n) / 2.0
    x = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), n))
    nu = v + 1.0
    kappa = np.exp(rng.uniform(np.log(0.1), np.log(500.0), n))

    cases = [
        ("log_bessel_i", lambda: _log_bessel_i_numba(v, x)[0], lambda: _log_bessel_i_numpy(v, x)[0]),
        ("bessel_ratio", lambda: _bessel_ratio_numba(nu, x), lambda: _bessel_ratio_numpy(nu, x)),
        (
            "wood_eps m=11",
            lambda: _wood_eps_numba(11.0, kappa, np.random.default_rng(1))[0],
            lambda: _wood_eps_numpy(11.0, kappa, np.random.default_rng(1))[0],
        ),
    ]
    print(f"{'kernel':<16}{'numba s':>10}{'numpy s':>10}{'speed-up':>10}  agreement")
    for name, fast, slow in cases:
        t_nb, a = best_time(fast, args.repeat)
        t_np, b = best_time(slow, args.repeat)
        if name.startswith("wood"):
            # different random streams: compare the sample means instead
            agree = f"mean eps {a.mean():.4f} vs {b.mean():.4f}"
        else:
            agree = f"max |diff| {np.max(np.abs(a - b)):.2e}"
        print(f"{name:<16}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
