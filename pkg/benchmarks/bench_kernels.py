"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times im2col, col2im and a full conv forward+backward on CIFAR-like shapes
for every available backend, and checks the backends agree bit for bit.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from fedhm import kernels, tensor_nn

CASES = [
    # (batch, channels, size, kernel, stride)
    (64, 16, 8, 3, 1),
    (32, 64, 32, 3, 1),
    (32, 128, 16, 3, 2),
    (32, 64, 32, 1, 1),
]


def _conv_step(x, W, stride, backend):
    kernels._impl, saved = kernels._pick(backend), kernels._impl
    try:
        out, cols = tensor_nn.conv2d_forward(x, W, stride, W.shape[-1] // 2, return_cols=True)
        tensor_nn.conv2d_backward(np.ones_like(out), cols, x.shape, W, stride, W.shape[-1] // 2)
    finally:
        kernels._impl = saved


def run(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    backends = kernels.available_backends()
    for B, C, S, k, s in CASES:
        xp = rng.standard_normal((B, C, S + k - 1, S + k - 1)).astype(np.float32)
        cols = {b: kernels.im2col(xp, k, k, s, s, backend=b) for b in backends}
        back = {b: kernels.col2im(cols[b], xp.shape, s, s, backend=b) for b in backends}
        agree = all(cols[b].tobytes() == cols["python"].tobytes() and back[b].tobytes() == back["python"].tobytes()
                    for b in backends)
        x = rng.standard_normal((B, C, S, S)).astype(np.float32)
        W = rng.standard_normal((C, C, k, k)).astype(np.float32)
        for b in backends:
            t_i = min(timeit.repeat(lambda: kernels.im2col(xp, k, k, s, s, backend=b), number=1, repeat=repeat))
            c = cols[b]
            t_c = min(timeit.repeat(lambda: kernels.col2im(c, xp.shape, s, s, backend=b), number=1, repeat=repeat))
            t_conv = min(timeit.repeat(lambda: _conv_step(x, W, s, b), number=1, repeat=max(3, repeat // 4)))
            rows.append({"case": f"B{B} C{C} {S}x{S} k{k} s{s}", "backend": b, "im2col_ms": 1e3 * t_i,
                         "col2im_ms": 1e3 * t_c, "conv_fwd_bwd_ms": 1e3 * t_conv, "bit_identical": agree})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'case':<24}{'backend':<9}{'im2col ms':>11}{'col2im ms':>11}{'conv f+b ms':>13}  identical")
    for r in rows:
        print(f"{r['case']:<24}{r['backend']:<9}{r['im2col_ms']:>11.3f}{r['col2im_ms']:>11.3f}"
              f"{r['conv_fwd_bwd_ms']:>13.2f}  {r['bit_identical']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
