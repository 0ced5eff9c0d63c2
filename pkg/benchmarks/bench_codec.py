#!/usr/bin/env python3
"""Benchmark the compiled codec kernels against the pure-Python fallback.

Usage: python benchmarks/bench_codec.py [--rows N] [--repeat K]
"""

import argparse
import random
import time

# Importing streamshuffle.rows configures both kernel modules.
from streamshuffle import rows as R
from streamshuffle import _pykernels
from streamshuffle.rows import _ckernels


def build_rowset(row_count: int) -> R.Rowset:
    rng = random.Random(99)
    nt = R.NameTable(["user", "cluster", "ts", "ok", "note"])
    rows = []
    for i in range(row_count):
        rows.append(
            R.Row(
                [
                    R.string("user-%d" % rng.randrange(1_000_000)),
                    R.uint64(rng.randrange(1 << 40)),
                    R.double(rng.random() * 1e9),
                    R.boolean(i % 3 == 0),
                    R.string(bytes(rng.randrange(256) for _ in range(16))),
                ]
            )
        )
    return R.Rowset(nt, rows)


def bench(label, fn, repeat):
    best = min(timeit_once(fn) for _ in range(repeat))
    print("  %-14s %8.2f ms" % (label, best * 1e3))
    return best


def timeit_once(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=20_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rs = build_rowset(args.rows)
    backends = [("pure", _pykernels)]
    if _ckernels is not None:
        backends.append(("compiled", _ckernels))
    else:
        print("compiled backend unavailable; benchmarking pure only")

    results = {}
    for name, mod in backends:
        print("%s:" % name)
        encoded = mod.encode_rowset(rs)
        keys = [(row.values[0],) for row in rs.rows]
        results[name] = {
            "encode": bench("encode_rowset", lambda: mod.encode_rowset(rs), args.repeat),
            "decode": bench("decode_rowset", lambda: mod.decode_rowset(encoded), args.repeat),
            "hash": bench(
                "hash_values",
                lambda: [mod.hash_values(k) for k in keys],
                args.repeat,
            ),
        }
        print("  encoded bytes: %d" % len(encoded))

    if "compiled" in results:
        print("speedup (pure / compiled):")
        for op in ("encode", "decode", "hash"):
            print(
                "  %-14s %5.1fx"
                % (op, results["pure"][op] / results["compiled"][op])
            )


if __name__ == "__main__":
    main()
