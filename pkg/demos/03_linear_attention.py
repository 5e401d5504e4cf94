"""Linear-time attention via random features.

Demonstrates the factored multiplication order (never materializing the
L x L matrix), its agreement with the naive path, the accuracy/budget
tradeoff against exact attention, and the runtime scaling of both paths.
"""

import time

import numpy as np
from threadpoolctl import threadpool_limits

from rfattn import RfMap, exact_attention, naive_rf_attention, rf_attention
from rfattn.rng import SeededRng, gaussian_sample


def main():
    rng = SeededRng(7)
    d, length = 8, 64
    q = gaussian_sample(rng.derive(0), length, d) * 0.5
    k = gaussian_sample(rng.derive(1), length, d) * 0.5
    v = gaussian_sample(rng.derive(2), length, d)

    print("== factored path == naive path (algebraic identity) ==")
    rfmap = RfMap("prf", 64)
    fast = rf_attention(q, k, v, rfmap, SeededRng(1))
    slow = naive_rf_attention(q, k, v, rfmap, SeededRng(1))
    rel = np.linalg.norm(fast.values - slow.values) / np.linalg.norm(slow.values)
    print(f"  relative Frobenius difference: {rel:.2e}")

    print("\n== approximation error vs feature budget ==")
    exact = exact_attention(q, k, v)
    for m in (16, 64, 256, 1024, 4096):
        out = rf_attention(q, k, v, RfMap("prf", m), rng.derive(3))
        err = np.linalg.norm(out.values - exact.values) / np.linalg.norm(exact.values)
        print(f"  m = {m:<5d} relative error {err:.4f}")

    print("\n== baselines for scale ==")
    from rfattn import baseline_attention

    for kind in ("constant", "uniform_random"):
        out = baseline_attention(kind, v, SeededRng(11))
        err = np.linalg.norm(out.values - exact.values) / np.linalg.norm(exact.values)
        print(f"  {kind:<15s} relative error {err:.4f}")

    print("\n== runtime scaling (single BLAS thread) ==")
    print("  rf attention is O(L m d); exact attention is O(L^2 d)")
    with threadpool_limits(limits=1):
        for n in (512, 2048, 8192):
            qq = gaussian_sample(rng.derive(10), n, 32)
            kk = gaussian_sample(rng.derive(11), n, 32)
            vv = gaussian_sample(rng.derive(12), n, 32)

            def best_of(fn, reps=3):
                times = []
                fn()  # warmup
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                return min(times)

            t_rf = best_of(lambda: rf_attention(qq, kk, vv, RfMap("prf", 64), rng.derive(13)))
            t_ex = best_of(lambda: exact_attention(qq, kk, vv))
            print(f"  L = {n:<5d} rf {1e3 * t_rf:8.2f} ms   exact {1e3 * t_ex:8.2f} ms")


if __name__ == "__main__":
    main()
