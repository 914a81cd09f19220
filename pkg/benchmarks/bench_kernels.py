"""Time each hot kernel under both backends.

The library picks one backend at import time (set GRAPHMEM_DISABLE_NUMBA=1 to
force numpy); this script calls both namespaces directly so one run compares
them side by side. Compilation happens in a warm-up call and is not timed.

    python3 benchmarks/bench_kernels.py --repeats 200
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from graphmem import _kernels


def cases(rng: np.random.Generator, d: int, n_edges: int, batch: int):
    U = rng.normal(size=(n_edges, d))
    W = rng.normal(size=(d, d))
    v = rng.normal(size=d)
    s = rng.normal(size=n_edges)
    F = rng.normal(size=(batch * n_edges, d))
    offsets = np.arange(batch + 1, dtype=np.int64) * n_edges
    G = rng.normal(size=(batch, d))
    gold = np.zeros(batch * n_edges, dtype=np.int64)
    gold[offsets[:-1]] = 1
    gold[offsets[:-1] + 1] = 2
    A, Q = np.eye(d), np.eye(d)
    a = rng.integers(0, 50, 200).astype(np.int64)
    b = rng.integers(0, 50, 200).astype(np.int64)
    return {
        "scores": ("scores", (U, W, v)),
        "topk": ("topk", (s, 30)),
        "softmax": ("softmax", (s, 0.5)),
        "surrogate_grads": ("surrogate_grads", (F, offsets, G, gold, A, W, Q, 0.5, 1e-9)),
        "lcs": ("lcs", (a, b)),
    }


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--edges", type=int, default=150)
    p.add_argument("--batch", type=int, default=16)
    args = p.parse_args()
    if _kernels.numba_backend is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    backends = (_kernels.numpy_backend, _kernels.numba_backend)
    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (attr, call_args) in cases(rng, args.d, args.edges, args.batch).items():
        times = []
        for be in backends:
            fn = getattr(be, attr)
            fn(*call_args)  # warm-up / compile
            t = min(timeit.repeat(lambda: fn(*call_args), number=args.repeats, repeat=3)) / args.repeats
            times.append(t * 1e6)
        print(f"{name:<16}{times[0]:>12.2f}{times[1]:>12.2f}{times[0] / times[1]:>10.2f}")


if __name__ == "__main__":
    main()
