"""Compare the compiled and numpy im2col/col2im backends.

Times the raw kernels at the default backbone's layer shapes, a conv2d
forward+backward, and one full adaptation episode with each backend swapped
in. Run with ``python benchmarks/bench_kernels.py [--repeat N] [--rounds R]``.
"""

import argparse
import time

import numpy as np

from isa_fss import _kernels_py, kernels
from isa_fss.bench.synth import TEXTURE, generate_episode
from isa_fss.model import default_backbone
from isa_fss.psa import AdaptationConfig, run_isa
from isa_fss.tensor import Tensor, backward, conv2d, tsum

try:
    from isa_fss import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

# (batch, channels, padded size) for 3x3 / stride 1 / pad 1 convs of the backbone
SHAPES = [(7, 3, 34), (7, 8, 34), (7, 16, 18), (7, 32, 10)]


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def use(module):
    kernels.im2col, kernels.col2im = module.im2col, module.col2im


def bench_raw(module, repeat):
    rng = np.random.default_rng(0)
    total_i = total_c = 0.0
    for n, c, hp in SHAPES:
        xp = rng.standard_normal((n, c, hp, hp))
        out = hp - 2
        cols = module.im2col(xp, 3, 3, 1, out, out)
        total_i += best_of(lambda: module.im2col(xp, 3, 3, 1, out, out), repeat)
        total_c += best_of(lambda: module.col2im(cols, c, hp, hp, 3, 3, 1, out, out), repeat)
    return total_i, total_c


def bench_conv(repeat):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((7, 8, 32, 32)), requires_grad=True)
    w = Tensor(rng.standard_normal((8, 8, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(8), requires_grad=True)

    def step():
        x.grad = w.grad = b.grad = None
        backward(tsum(conv2d(x, w, b, 1, 1)))

    return best_of(step, repeat)


def bench_episode(repeat):
    model = default_backbone(0)
    ep = generate_episode(TEXTURE, 5, 2, 0)
    cfg = AdaptationConfig(lr=0.01)
    return best_of(lambda: run_isa(model, ep, cfg), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rounds", type=int, default=3)
    args = ap.parse_args()
    backends = [("python", _kernels_py)]
    if _kernels_c is not None:
        backends.insert(0, ("cython", _kernels_c))
    else:
        print("compiled extension not built; timing the numpy backend only")
    saved = kernels.im2col, kernels.col2im
    # interleave backends over several rounds so neither pays first-touch costs alone
    best = {}
    try:
        for _ in range(args.rounds):
            for name, module in backends:
                use(module)
                i, c = bench_raw(module, args.repeat)
                m = (i, c, bench_conv(args.repeat), bench_episode(max(1, args.repeat // 5)))
                best[name] = tuple(map(min, zip(best.get(name, m), m)))
    finally:
        kernels.im2col, kernels.col2im = saved
    rows = [(name, *best[name]) for name, _ in backends]
    print(f"{'backend':8s} {'im2col ms':>10s} {'col2im ms':>10s} {'conv f+b ms':>12s} {'episode s':>10s}")
    for name, i, c, conv, ep in rows:
        print(f"{name:8s} {1e3 * i:10.2f} {1e3 * c:10.2f} {1e3 * conv:12.2f} {ep:10.3f}")
    if len(rows) == 2:
        (_, i0, c0, v0, e0), (_, i1, c1, v1, e1) = rows
        print(f"{'speedup':8s} {i1 / i0:9.2f}x {c1 / c0:9.2f}x {v1 / v0:11.2f}x {e1 / e0:9.2f}x")


if __name__ == "__main__":
    main()
