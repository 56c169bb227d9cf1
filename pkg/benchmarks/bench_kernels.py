"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Each kernel is called once untimed (JIT compile), then timed with
``timeit``; outputs of the two backends are cross-checked.
"""
import argparse
import json
import timeit

import numpy as np

from gdig import _kernels


def cases(gen):
    for n in (16, 33, 64):
        m = gen.standard_normal((n, n))
        yield "jacobi_eigh", f"n={n}", (m + m.T,)
    for n, d in ((500, 64), (2000, 400)):
        yield "pairwise_sqdist", f"{n}x{d}", (gen.standard_normal((n, d)),)
    for n, k, d in ((2000, 64, 32), (5000, 512, 400)):
        yield "assign", f"n={n} k={k} d={d}", (gen.standard_normal((n, d)), gen.standard_normal((k, d)))


def agree(name, a, b):
    if name == "jacobi_eigh":
        return np.allclose(a[0], b[0], atol=1e-9)
    if name == "assign":
        return np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1])
    return np.allclose(a, b, atol=1e-8)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    gen = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':16s} {'size':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  match")
    for name, size, inputs in cases(gen):
        fns = {b.name: getattr(b, name) for b in (_kernels.numpy_impl, _kernels.numba_impl)}
        outs = {b: f(*inputs) for b, f in fns.items()}
        times = {b: min(timeit.repeat(lambda: f(*inputs), number=1, repeat=args.repeat)) * 1e3
                 for b, f in fns.items()}
        ok = agree(name, outs["numpy"], outs["numba"])
        rows.append({"kernel": name, "size": size, "numpy_ms": times["numpy"], "numba_ms": times["numba"],
                     "match": bool(ok)})
        print(f"{name:16s} {size:22s} {times['numpy']:10.3f} {times['numba']:10.3f} "
              f"{times['numpy'] / times['numba']:8.2f}  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
