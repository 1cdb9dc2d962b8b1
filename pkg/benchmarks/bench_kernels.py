"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the equivariant network on a batch of 32 MNIST-sized inputs.
"""
import argparse
import json
import timeit

import numpy as np

from scalevec import kernels
from scalevec.layers import ScaleSpec, se_conv_scalar


def cases(rng, dtype):
    x = rng.standard_normal((32, 12, 14, 14)).astype(dtype)
    cols = kernels.BACKENDS["numpy"].im2col(x, 7, 3)
    planes = rng.standard_normal((32 * 12, 28, 28)).astype(dtype)
    up = rng.standard_normal((32 * 12, 55, 55)).astype(dtype)
    pooled_idx = kernels.BACKENDS["numpy"].pool2x2(planes)[1]
    g = rng.standard_normal((32 * 12, 14, 14)).astype(dtype)
    stack = rng.standard_normal((8, 32 * 12 * 28 * 28)).astype(dtype)
    return {
        "im2col 32x12x14x14 k7": lambda b: b.im2col(x, 7, 3),
        "col2im 32x12x14x14 k7": lambda b: b.col2im(cols, 32, 12, 14, 14, 7, 3),
        "resize 28->55": lambda b: b.resize(planes, 55, 55),
        "resize 55->28": lambda b: b.resize(up, 28, 28),
        "resize_backward 28<-55": lambda b: b.resize_backward(up, 28, 28),
        "pool2x2 28x28": lambda b: b.pool2x2(planes),
        "unpool2x2 14->28": lambda b: b.unpool2x2(g, pooled_idx, 28, 28),
        "scale_argmax 8 scales": lambda b: b.scale_argmax(stack),
    }


def layer_case(rng, dtype):
    x = rng.random((32, 1, 28, 28)).astype(dtype)
    w = (rng.standard_normal((12, 1, 7, 7)) * 0.2).astype(dtype)
    b = np.zeros(12, dtype)
    return lambda: se_conv_scalar(x, w, b, ScaleSpec())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--dtype", default="float32")
    ap.add_argument("--json")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)
    rng = np.random.default_rng(0)
    names = sorted(kernels.BACKENDS)
    if len(names) < 2:
        print("only the numpy backend is available; build the extension to compare")
    rows = []
    for label, fn in cases(rng, dtype).items():
        row = {"kernel": label}
        for name in names:
            impl = kernels.BACKENDS[name]
            fn(impl)
            row[name] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) * 1e3
        rows.append(row)
    row = {"kernel": "se_conv_scalar layer (32 images)"}
    run = layer_case(rng, dtype)
    for name in names:
        kernels.use(name)
        run()
        row[name] = min(timeit.repeat(run, number=1, repeat=max(3, args.repeat // 3))) * 1e3
    rows.append(row)

    head = f"{'kernel':<34}" + "".join(f"{n + ' ms':>14}" for n in names)
    if len(names) > 1:
        head += f"{'speed-up':>10}"
    print(head)
    for row in rows:
        line = f"{row['kernel']:<34}" + "".join(f"{row[n]:>14.2f}" for n in names)
        if "cython" in row and "numpy" in row:
            line += f"{row['numpy'] / row['cython']:>9.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"dtype": str(dtype), "rows": rows}, fh, indent=1)


if __name__ == "__main__":
    main()
