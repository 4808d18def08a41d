"""Central-difference verification of tape gradients."""

from typing import Callable

import numpy as np

from pfseg.tensor import Tape, Tensor


def grad_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-5) -> float:
    """Worst per-coordinate relative error between tape and numerical gradients.

    ``f`` maps a tensor to a scalar tensor.  The relative error at each
    coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    analytic = tape.backward(out).get(probe)
    if analytic is None:
        analytic = np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(Tensor(base)).item()
        flat[i] = orig - epsilon
        lo = f(Tensor(base)).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# per-op checks on random small tensors


def _projection(rng, shape):
    """Fixed random weights so every output coordinate contributes to the scalar."""
    return Tensor(rng.standard_normal(shape))


def _small_nchw(rng, even=False):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5))
    if even:
        h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    else:
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    return n, c, h, w


def _check_tanh(rng):
    from pfseg.tensor import sum_all, tanh

    shape = _small_nchw(rng)
    return [(lambda t: sum_all(tanh(t)), rng.uniform(-2.0, 2.0, shape))]


def _check_relu(rng):
    from pfseg.tensor import mul, relu, sum_all

    shape = _small_nchw(rng)
    x = rng.uniform(0.05, 2.0, shape) * rng.choice([-1.0, 1.0], shape)  # away from the kink
    r = _projection(rng, shape)
    return [(lambda t: sum_all(mul(relu(t), r)), x)]


def _check_add(rng):
    from pfseg.tensor import add, mul, sum_all

    shape = _small_nchw(rng)
    other = Tensor(rng.standard_normal(shape))
    r = _projection(rng, shape)
    return [(lambda t: sum_all(mul(add(t, other), r)), rng.standard_normal(shape))]


def _check_concat(rng):
    from pfseg.tensor import concat_channels, mul, sum_all

    n, c, h, w = _small_nchw(rng)
    cb = int(rng.integers(1, 4))
    other = Tensor(rng.standard_normal((n, cb, h, w)))
    r = _projection(rng, (n, c + cb, h, w))
    return [
        (lambda t: sum_all(mul(concat_channels(t, other), r)), rng.standard_normal((n, c, h, w))),
        (lambda t: sum_all(mul(concat_channels(other, t), r)), rng.standard_normal((n, c, h, w))),
    ]


def _check_conv2d(rng):
    from pfseg.tensor import conv2d, conv_output_size, mul, sum_all

    n, cin, h, w = _small_nchw(rng)
    k = int(rng.integers(1, min(h, w) + 1))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    cout = int(rng.integers(1, 5))
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    r = _projection(rng, (n, cout, conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)))
    X, W, B = Tensor(x), Tensor(wt), Tensor(b)
    return [
        (lambda t: sum_all(mul(conv2d(t, W, B, stride, pad), r)), x),
        (lambda t: sum_all(mul(conv2d(X, t, B, stride, pad), r)), wt),
        (lambda t: sum_all(mul(conv2d(X, W, t, stride, pad), r)), b),
    ]


def _distinct(rng, shape):
    # values at least 0.5 apart so a 1e-5 nudge never flips an argmax
    return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.5 + rng.uniform(-0.1, 0.1, shape)


def _check_max_pool2d(rng):
    from pfseg.tensor import max_pool2d, mul, sum_all

    n, c, h, w = _small_nchw(rng, even=True)
    r = _projection(rng, (n, c, h // 2, w // 2))
    return [(lambda t: sum_all(mul(max_pool2d(t)[0], r)), _distinct(rng, (n, c, h, w)))]


def _check_max_unpool2d(rng):
    from pfseg.tensor import max_pool2d, max_unpool2d, mul, sum_all

    n, c, h, w = _small_nchw(rng, even=True)
    _, idx = max_pool2d(Tensor(rng.standard_normal((n, c, h, w))))
    r = _projection(rng, (n, c, h, w))
    return [(lambda t: sum_all(mul(max_unpool2d(t, idx), r)), rng.standard_normal((n, c, h // 2, w // 2)))]


def _check_cross_entropy(rng):
    from pfseg.tensor import softmax_cross_entropy

    n, c, h, w = _small_nchw(rng)
    c = max(c, 2)
    labels = rng.integers(0, c, (n, h, w))
    labels[rng.random((n, h, w)) < 0.2] = 255
    return [(lambda t: softmax_cross_entropy(t, labels, 255), rng.standard_normal((n, c, h, w)))]


def _check_fusion(rng):
    from pfseg.models import FusionModuleParams, fusion_forward
    from pfseg.tensor import mul, sum_all

    n, c, h, w = _small_nchw(rng)
    k = 3 if min(h, w) >= 3 else 1
    e0, e1 = rng.standard_normal((2, n, c, h, w))
    ws = [rng.standard_normal((c, c, k, k)) * 0.5 for _ in range(3)]
    r = _projection(rng, (n, c, h, w))

    def run(e_prior, e_image, w0, w1, w2):
        return sum_all(mul(fusion_forward(FusionModuleParams(w0, w1, w2), e_prior, e_image), r))

    T = Tensor
    args = [T(e0), T(e1), T(ws[0]), T(ws[1]), T(ws[2])]
    raw = [e0, e1] + ws
    checks = []
    for i in range(5):
        def f(t, i=i):
            a = list(args)
            a[i] = t
            return run(*a)

        checks.append((f, raw[i]))
    return checks


def _check_composed(rng):
    """conv -> tanh -> cross-entropy, differentiated w.r.t. the conv weight."""
    from pfseg.tensor import conv2d, softmax_cross_entropy, tanh

    n, cin, h, w = _small_nchw(rng)
    cout = int(rng.integers(2, 5))
    x = Tensor(rng.standard_normal((n, cin, h, w)))
    labels = rng.integers(0, cout, (n, h, w))
    wt = rng.standard_normal((cout, cin, 3, 3)) * 0.5
    return [(lambda t: softmax_cross_entropy(tanh(conv2d(x, t, None, 1, 1)), labels), wt)]


CHECKS = {
    "tanh": _check_tanh,
    "relu": _check_relu,
    "add": _check_add,
    "concat": _check_concat,
    "conv2d": _check_conv2d,
    "max_pool2d": _check_max_pool2d,
    "max_unpool2d": _check_max_unpool2d,
    "cross_entropy": _check_cross_entropy,
    "fusion": _check_fusion,
    "composed": _check_composed,
}


def run_op_check(op: str, trials: int = 20, seed: int = 0, epsilon: float = 1e-5) -> float:
    """Worst relative error of ``op`` over ``trials`` random f64 instances."""
    if op not in CHECKS:
        raise KeyError(f"unknown op {op!r}; choose from {', '.join(CHECKS)}")
    rng = np.random.default_rng([seed, sorted(CHECKS).index(op)])
    worst = 0.0
    for _ in range(trials):
        for f, x in CHECKS[op](rng):
            worst = max(worst, grad_check(f, x, epsilon))
    return worst
