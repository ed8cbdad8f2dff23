"""Compare the numba and numpy tensor-algebra kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--quick]

Both backends are called explicitly, so the SIGSTREAM_DISABLE_NUMBA flag does
not matter here. Outputs of the two backends are checked against each other
before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sigstream import _accel, _kernels
from sigstream.signature import _layout

CASES = [
    # (channels, depth, batch, points)
    (2, 3, 64, 5),
    (4, 3, 192, 5),
    (10, 3, 64, 5),
    (4, 4, 64, 11),
    (8, 3, 256, 5),
]
QUICK = CASES[:2]


def _best(fn, repeat: int) -> float:
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def run(cases, repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for c, depth, batch, points in cases:
        offsets, sizes = _layout(c, depth)
        incs = rng.normal(0, 0.3, size=(batch, points - 1, c))
        out, state_np = _kernels.expanding(incs, depth, offsets, sizes, "numpy")
        _, state_nb = _kernels.expanding(incs, depth, offsets, sizes, "numba")
        states = {"numpy": state_np, "numba": state_nb}
        g = rng.normal(size=out.shape)
        a = np.concatenate([np.ones((batch, 1)), out[:, -1]], axis=1)
        b = np.concatenate([np.ones((batch, 1)), out[:, -2]], axis=1)
        gm = rng.normal(size=a.shape)
        # agreement check before timing
        ref = _kernels.expanding_backward(state_np, g, depth, offsets, sizes)
        got = _kernels.expanding_backward(state_nb, g, depth, offsets, sizes)
        assert np.allclose(ref, got, rtol=1e-10, atol=1e-12)
        assert np.allclose(_kernels.tmul(a, b, depth, offsets, sizes, "numpy"), _kernels.tmul(a, b, depth, offsets, sizes, "numba"))
        ops = {
            "tmul": lambda be: _kernels.tmul(a, b, depth, offsets, sizes, be),
            "tmul_backward": lambda be: _kernels.tmul_backward(a, b, gm, depth, offsets, sizes, be),
            "expanding": lambda be: _kernels.expanding(incs, depth, offsets, sizes, be),
            "expanding_backward": lambda be: _kernels.expanding_backward(states[be], g, depth, offsets, sizes),
        }
        for name, op in ops.items():
            t_np = _best(lambda: op("numpy"), repeat)
            t_nb = _best(lambda: op("numba"), repeat)
            rows.append({"kernel": name, "c": c, "depth": depth, "batch": batch, "points": points, "numpy_ms": t_np * 1e3, "numba_ms": t_nb * 1e3})
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--quick", action="store_true", help="two small cases only")
    args = parser.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is unavailable or disabled; nothing to compare")
    rows = run(QUICK if args.quick else CASES, args.repeat)
    header = f"{'kernel':<20}{'c':>3}{'N':>3}{'batch':>7}{'m':>4}{'numpy ms':>11}{'numba ms':>11}{'speed-up':>10}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(
            f"{r['kernel']:<20}{r['c']:>3}{r['depth']:>3}{r['batch']:>7}{r['points']:>4}"
            f"{r['numpy_ms']:>11.3f}{r['numba_ms']:>11.3f}{r['numpy_ms'] / r['numba_ms']:>9.1f}x"
        )


if __name__ == "__main__":
    main()
