"""Compare the compiled and pure-Python conv kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times im2col, col2im and a full conv2d forward+backward on shapes taken
from the model (flow subnets at the three level grids, encoder convs).
"""

import argparse
import json
import sys
import timeit

import numpy as np

from llsrflow.ndtensor import Tensor, conv2d, grad, tsum
from llsrflow.ndtensor import kernels

# (name, N, C_in, C_out, H, k, stride, groups)
CASES = [
    ("flow-L0 3x3", 4, 18, 64, 16, 3, 1, 1),
    ("flow-L1 3x3", 4, 36, 64, 8, 3, 1, 1),
    ("flow-L2 3x3", 4, 72, 64, 4, 3, 1, 1),
    ("enc stem", 4, 10, 48, 16, 3, 1, 1),
    ("enc dw 3x3", 4, 96, 96, 16, 3, 1, 96),
    ("enc down s2", 4, 48, 48, 16, 3, 2, 1),
]


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_case(case, backend, repeat):
    name, n, cin, cout, h, k, stride, groups = case
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, cin, h, h)).astype(np.float32)
    w = Tensor(rng.normal(size=(cout, cin // groups, k, k)).astype(np.float32), requires_grad=True)
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    with kernels.use_backend(backend):
        cols = kernels.im2col(x, k, stride, pad, ho, ho)
        t_im2col = _best(lambda: kernels.im2col(x, k, stride, pad, ho, ho), repeat)
        t_col2im = _best(lambda: kernels.col2im(cols, h, h, stride, pad), repeat)
        xt = Tensor(x, requires_grad=True)

        def fwd_bwd():
            out = conv2d(xt, w, None, stride=stride, pad=pad, groups=groups)
            grad(tsum(out), [xt, w])

        t_conv = _best(fwd_bwd, repeat)
    return {"im2col": t_im2col, "col2im": t_col2im, "conv_fwd_bwd": t_conv}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write raw timings here")
    args = ap.parse_args(argv)

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the Python backend is available", file=sys.stderr)
    results = {}
    print(f"{'case':<14}{'op':<14}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for case in CASES:
        per = {b: bench_case(case, b, args.repeat) for b in backends}
        results[case[0]] = per
        for op in ("im2col", "col2im", "conv_fwd_bwd"):
            row = f"{case[0]:<14}{op:<14}" + "".join(f"{per[b][op] * 1e3:>12.3f}" for b in backends)
            if len(backends) == 2:
                row += f"{per['python'][op] / per['cython'][op]:>9.2f}x"
            print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
