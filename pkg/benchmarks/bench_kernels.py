"""Time the numba and numpy kernel backends on realistic shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run once per backend to warm up (numba compiles on first
call), then ``--repeat`` rounds alternating the two backends; the best wall
time per backend is reported.  Outputs of
the two backends are compared for exact equality before timing.
"""

import argparse
import json
import time

import numpy as np

from pfseg import kernels
from pfseg.kernels import use_backend
from pfseg.models import ModelSpec, build_model, forward
from pfseg.tensor import Tape, Tensor, softmax_cross_entropy


def _cases(rng):
    x = rng.standard_normal((4, 16, 68, 68)).astype(np.float32)  # 64x64 map padded for k=5
    k, ho, wo = 5, 64, 64
    cols = kernels.im2col(x, k, 1, ho, wo)
    p = rng.standard_normal((4, 64, 64, 64)).astype(np.float32)
    vals, idx = kernels.maxpool2x2(p)
    return {
        "im2col 4x16x68x68 k5": lambda: kernels.im2col(x, k, 1, ho, wo),
        "col2im 4x16x68x68 k5": lambda: kernels.col2im(cols, 16, 68, 68, k, 1, ho, wo),
        "maxpool 4x64x64x64": lambda: kernels.maxpool2x2(p),
        "unpool scatter": lambda: kernels.scatter_plane(vals, idx, 64, 64),
        "pool grad gather": lambda: kernels.gather_plane(p, idx),
    }


def _train_step():
    spec = ModelSpec("decoder", encoder_widths=(16, 32, 64, 128), decoder_widths=(64, 32, 16, 16), backbone_kernel=5)
    model = build_model(spec, 0)
    rng = np.random.default_rng(1)
    x0 = Tensor.wrap(rng.random((4, 3, 64, 64), dtype=np.float32))
    x1 = Tensor.wrap(rng.random((4, 3, 64, 64), dtype=np.float32))
    labels = rng.integers(0, 11, (4, 64, 64))

    def step():
        with Tape() as tape:
            loss = softmax_cross_entropy(forward(model, x0, x1), labels)
        tape.backward(loss)

    return step


def _best_interleaved(fn, repeat):
    """Best wall time per backend, alternating backends each round.

    Alternating keeps slow drifts of a shared machine from favouring
    whichever backend happens to run second.
    """
    best = {}
    for backend in ("numpy", "numba"):
        with use_backend(backend):
            fn()
    for _ in range(repeat):
        for backend in ("numpy", "numba"):
            with use_backend(backend):
                t = time.perf_counter()
                fn()
                dt = time.perf_counter() - t
            best[backend] = min(best.get(backend, dt), dt)
    return best


def _outputs_equal(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results here as well")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = _cases(rng)
    cases["decoder train step 4x64x64"] = _train_step()
    rows = []
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  same")
    for name, fn in cases.items():
        outs = {}
        for backend in ("numpy", "numba"):
            with use_backend(backend):
                outs[backend] = fn()
        timings = _best_interleaved(fn, args.repeat)
        same = "n/a" if outs["numpy"] is None else str(_outputs_equal(outs["numpy"], outs["numba"]))
        speedup = timings["numpy"] / timings["numba"]
        print(f"{name:<30} {timings['numpy'] * 1e3:>10.2f} {timings['numba'] * 1e3:>10.2f} {speedup:>7.2f}x  {same}")
        rows.append({"kernel": name, "numpy_s": timings["numpy"], "numba_s": timings["numba"], "same": same})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
