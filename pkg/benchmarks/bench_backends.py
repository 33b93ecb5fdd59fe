"""Compare the compiled and pure-numpy kernel backends.

Times forward and forward+backward passes of the NetFV and NetVLAD
kernels on a training-sized batch and prints a small table.

    python3 benchmarks/bench_backends.py [--batch 128] [--length 600]
"""

import argparse
import time

import numpy as np

from uttenc.backend import get_kernels
from uttenc.rng import Rng


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--length", type=int, default=600)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--clusters", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = Rng(0)
    B, L, D, K = args.batch, args.length, args.dim, args.clusters
    x = rng.normal((B, L, D))
    fv_w = 1.0 + 0.2 * rng.normal((K, D))
    fv_b = rng.normal((K, D))
    fv_g = rng.normal((B, 2 * K * D))
    vl_mu = rng.normal((K, D))
    vl_w = rng.normal((K, D))
    vl_b = rng.normal(K)
    vl_g = rng.normal((B, K, D))

    backends = {}
    for name in ("python", "compiled"):
        try:
            backends[name] = get_kernels(name)
        except ImportError:
            print(f"{name}: unavailable, skipped")

    cases = {
        "netfv fwd": lambda k: k.netfv_forward(x, fv_w, fv_b),
        "netfv fwd+bwd": lambda k: (k.netfv_forward(x, fv_w, fv_b),
                                    k.netfv_backward(x, fv_w, fv_b, fv_g)),
        "netvlad fwd": lambda k: k.netvlad_forward(x, vl_mu, vl_w, vl_b),
        "netvlad fwd+bwd": lambda k: (k.netvlad_forward(x, vl_mu, vl_w, vl_b),
                                      k.netvlad_backward(x, vl_mu, vl_w,
                                                         vl_b, vl_g)),
    }

    print(f"batch={B} length={L} dim={D} clusters={K}")
    print(f"{'case':<18}" + "".join(f"{n:>14}" for n in backends)
          + ("{:>10}".format("speedup") if len(backends) == 2 else ""))
    for case, fn in cases.items():
        times = [timeit(lambda k=k: fn(k), args.repeats)
                 for k in backends.values()]
        row = f"{case:<18}" + "".join(f"{t * 1000:>11.1f} ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
