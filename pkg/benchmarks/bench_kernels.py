"""Compare the compiled and numpy convolution backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times im2col, col2im and a full conv2d forward+backward for the layer
shapes used by the default model, and checks the two backends agree bit
for bit.
"""
import argparse
import timeit

import numpy as np

from irrm import kernels
from irrm import tensor as T
from irrm.tensor import Tensor

CASES = [
    # (batch, channels, height, width, out_channels, kernel)
    (4, 9, 32, 32, 32, 3),
    (4, 32, 32, 32, 32, 3),
    (4, 3, 32, 32, 32, 3),
    (1, 32, 128, 128, 32, 3),
]


def conv_step(x, w, b):
    xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
    out = T.conv2d(xt, wt, bt, padding=w.shape[-1] // 2)
    T.sum(out).backward()
    return out.data, xt.grad, wt.grad


def bench(repeat):
    # numpy first so the speedup column reads fallback / compiled
    backends = sorted(kernels.available_backends(), key=lambda name: name != "python")
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(backends)}")
    print("case\top\t" + "\t".join(f"{b}_ms" for b in backends) + "\tspeedup\tidentical")
    prev = kernels.active_backend()
    try:
        for n, c, h, w, o, k in CASES:
            x = rng.standard_normal((n, c, h, w)).astype(np.float32)
            wt = rng.standard_normal((o, c, k, k)).astype(np.float32)
            b = rng.standard_normal(o).astype(np.float32)
            pad = k // 2
            xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=np.float32)
            xp[:, pad:pad + h, pad:pad + w] = x.transpose(0, 2, 3, 1)
            cols = kernels._BACKENDS["python"].im2col(xp, k, k, 1)
            ops = {
                "im2col": lambda mod: mod.im2col(xp, k, k, 1),
                "col2im": lambda mod: mod.col2im(cols, xp.shape, k, k, 1),
            }
            label = f"{n}x{c}x{h}x{w}->{o}"
            for op, fn in ops.items():
                times, outs = [], []
                for name in backends:
                    mod = kernels._BACKENDS[name]
                    times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat)) * 1e3)
                    outs.append(fn(mod).tobytes())
                _row(label, op, times, outs)
            times, outs = [], []
            for name in backends:
                kernels.set_backend(name)
                times.append(min(timeit.repeat(lambda: conv_step(x, wt, b), number=1, repeat=repeat)) * 1e3)
                outs.append(b"".join(a.tobytes() for a in conv_step(x, wt, b)))
            _row(label, "conv_fwd_bwd", times, outs)
    finally:
        kernels.set_backend(prev)


def _row(label, op, times, outs):
    speed = times[0] / times[-1] if len(times) > 1 else 1.0
    same = all(o == outs[0] for o in outs)
    print(f"{label}\t{op}\t" + "\t".join(f"{t:.2f}" for t in times) + f"\t{speed:.2f}x\t{same}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    bench(ap.parse_args().repeat)


if __name__ == "__main__":
    main()
