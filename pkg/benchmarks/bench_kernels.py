"""Time the numba kernels against their pure-numpy twins and check agreement.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 64,256]
"""
import argparse
import timeit

import numpy as np

from loramerge import _numpy_kernels

try:
    from loramerge import _numba_kernels
except ImportError:  # numba missing: only the numpy column is reported
    _numba_kernels = None


def cases(n, rng):
    r = max(4, n // 16)
    A = rng.normal(size=(r, n)).astype(np.float32)
    B = rng.normal(size=(n, r)).astype(np.float32)
    tall = rng.normal(size=(n, 2 * r))
    core = rng.normal(size=(2 * r, 2 * r))
    p = int(0.9 * A.size)
    null = 1e-26 * float(np.sum(core * core))
    return {
        f"matmul {n}x{r} @ {r}x{n}": lambda k: k.matmul(B, A),
        f"magnitude_mask {r}x{n} k=0.9": lambda k: k.magnitude_mask(A, p),
        f"row_l1 {r}x{n}": lambda k: k.row_l1(A),
        f"householder_qr {n}x{2 * r}": lambda k: k.householder_qr(tall),
        f"one_sided_jacobi {2 * r}x{2 * r}": lambda k: k.one_sided_jacobi(core, 1e-12, 100, null),
    }


def agree(x, y):
    if np.array_equal(x, y):
        return "bit-identical"
    if x.dtype == bool:
        return "MISMATCH"
    return f"max abs diff {float(np.max(np.abs(x.astype(np.float64) - y))):.1e}"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--sizes", default="64,256,1024")
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'kernel':<36}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  agreement")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, call in cases(n, rng).items():
            t_np = min(timeit.repeat(lambda: call(_numpy_kernels), number=1, repeat=args.repeat))
            if _numba_kernels is None:
                print(f"{name:<36}{t_np * 1e3:>10.3f}{'-':>10}{'-':>9}")
                continue
            call(_numba_kernels)  # compile outside the timing
            t_nb = min(timeit.repeat(lambda: call(_numba_kernels), number=1, repeat=args.repeat))
            a, b = call(_numpy_kernels), call(_numba_kernels)
            if name.startswith("one_sided_jacobi"):
                # rotation order differs between backends, so compare the spectra
                a = np.sort(np.linalg.norm(a[0], axis=0))
                b = np.sort(np.linalg.norm(b[0], axis=0))
                note = f"sigma {agree(a, b)}"
            elif isinstance(a, tuple):
                note = "; ".join(str(agree(x, y)) for x, y in zip(a, b) if isinstance(x, np.ndarray))
            else:
                note = agree(a, b)
            print(f"{name:<36}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x  {note}")


if __name__ == "__main__":
    main()
