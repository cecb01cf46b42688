"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes match one training episode of the default configuration (155 images
of 32x32, 32 channels, 5x5 final maps).
"""

import argparse
import timeit

import numpy as np

from fsuda.kernels import fallback

try:
    from fsuda.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x1 = rng.normal(size=(155, 32, 32, 1)).astype(np.float32)
    x2 = rng.normal(size=(155, 15, 15, 32)).astype(np.float32)
    act = rng.normal(size=(155, 30, 30, 32)).astype(np.float32)
    cols = rng.normal(size=(155, 13, 13, 3, 3, 32)).astype(np.float32)
    sims = rng.normal(size=(1875, 750)).astype(np.float32)
    _, idx = fallback.maxpool_forward(act, 2, 2, True)
    dout = rng.normal(size=idx.shape).astype(np.float32)
    return {
        "im2col first block": lambda m: m.im2col(x1, 3, 3, 1, 0),
        "im2col second block": lambda m: m.im2col(x2, 3, 3, 1, 0),
        "col2im second block": lambda m: m.col2im(cols, 15, 15, 1, 0),
        "maxpool forward": lambda m: m.maxpool_forward(act, 2, 2, True),
        "maxpool backward": lambda m: m.maxpool_backward(dout, idx, 30, 30),
        "top-3 of 750": lambda m: m.topk_indices(sims, 3),
        "top-10 of 750": lambda m: m.topk_indices(sims, 10),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("numpy", fallback)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':24s}" + "".join(f"{n:>12s}" for n, _ in backends) + ("     speedup" if _ckernels else ""))
    for name, fn in cases(rng).items():
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3 for _, mod in backends]
        line = f"{name:24s}" + "".join(f"{t:10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:11.1f}x"
        print(line)
    if not _ckernels:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
