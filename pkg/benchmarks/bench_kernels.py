"""Benchmark the compiled kernels against the pure-Python fallback.

Run:  python3 benchmarks/bench_kernels.py [--pow-bits N] [--reps N]

Both backends are timed in the same process and cross-checked for
bit-identical output before any timing is reported.
"""

import argparse
import hashlib
import time

from datchain.kernels import available_backends


def _check_identical(backends: dict) -> None:
    """The fallback must be indistinguishable from the extension."""
    def probe(mod):
        rng = mod.Xoshiro256(42)
        stream = [rng.next_u64() for _ in range(10_000)]
        zeros = [
            mod.leading_zero_bits(hashlib.sha256(bytes([i] * 32)).digest())
            for i in range(256)
        ]
        nonce = mod.pow_search(b"bench-head", b"bench-tail", 12, 0, 1 << 24)
        return stream, zeros, nonce

    results = {name: probe(mod) for name, mod in backends.items()}
    reference = next(iter(results.values()))
    for name, result in results.items():
        assert result == reference, f"backend outputs differ: {name}"


def bench_prng(mod, draws: int) -> float:
    rng = mod.Xoshiro256(7)
    t0 = time.perf_counter()
    for _ in range(draws):
        rng.next_u64()
    return time.perf_counter() - t0


def bench_pow(mod, bits: int, reps: int) -> float:
    t0 = time.perf_counter()
    for rep in range(reps):
        prefix = b"bench-block-%d" % rep
        nonce = mod.pow_search(prefix, b"", bits, 0, 1 << 32)
        assert nonce >= 0
    return time.perf_counter() - t0


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pow-bits", type=int, default=14)
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--draws", type=int, default=2_000_000)
    args = parser.parse_args()

    backends = available_backends()
    _check_identical(backends)
    print(f"backends: {', '.join(backends)} (outputs verified identical)\n")

    rows = []
    for name, mod in backends.items():
        prng_s = bench_prng(mod, args.draws)
        pow_s = bench_pow(mod, args.pow_bits, args.reps)
        rows.append((name, prng_s, pow_s))
        print(
            f"{name:10s}  prng: {args.draws / prng_s / 1e6:8.2f} Mdraw/s   "
            f"pow({args.pow_bits} bits x{args.reps}): {pow_s:7.3f} s"
        )

    if len(rows) == 2:
        fast, slow = sorted(rows, key=lambda r: r[2])
        print(
            f"\n{fast[0]} vs {slow[0]}: "
            f"prng x{slow[1] / fast[1]:.1f}, pow x{slow[2] / fast[2]:.1f}"
        )


if __name__ == "__main__":
    main()
