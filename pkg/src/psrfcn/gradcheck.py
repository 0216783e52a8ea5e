"""Central finite-difference checks of every differentiable layer.

Each case builds random float64 inputs, contracts the layer output with a
fixed random cotangent to get a scalar, and compares the analytic gradient
of every input against central differences. The error measure is

    ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-12)

taken over all inputs of one instance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .detection import PSHeadConfig, RoI, ps_roi_pool, ps_roi_pool_reg, ps_vote_classify
from .errors import ConfigError
from .resnet import BlockVariant, forward_block
from .tensor import (
    BNParams,
    Tensor,
    backward,
    batch_norm,
    conv2d,
    dropout,
    get_default_dtype,
    max_pool2d,
    relu,
    set_default_dtype,
    softmax,
)

DEFAULT_TOL = 1e-4
DEFAULT_INSTANCES = 20
FD_STEP = 1e-6

# a case maps a list of leaf tensors to an output tensor; the arrays are the leaf values
Case = tuple[Callable[[list[Tensor]], Tensor], list[np.ndarray]]


@dataclass
class CheckResult:
    layer: str
    instances: int
    max_rel_err: float
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.layer} instances={self.instances} max_rel_err={self.max_rel_err:.3e}"


def _away_from_zero(rng, shape, gap=0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape) -> np.ndarray:
    # well separated values so no pooling window has a near tie
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.1 - 0.05 * n).reshape(shape)


def _conv_case(rng) -> Case:
    cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h, w = (int(v) for v in rng.integers(k, k + 4, size=2))
    arrays = [rng.standard_normal((2, cin, h, w)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)]
    return (lambda t: conv2d(t[0], t[1], t[2], stride=stride, pad=pad)), arrays


def _bn_case(rng) -> Case:
    c = int(rng.integers(1, 4))
    training = bool(rng.integers(0, 2))
    arrays = [rng.standard_normal((2, c, 3, 3)) * 2 + 1, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def f(t):
        p = BNParams(t[1], t[2], Tensor(mean), Tensor(var))
        return batch_norm(t[0], p, training)

    return f, arrays


def _relu_case(rng) -> Case:
    return (lambda t: relu(t[0])), [_away_from_zero(rng, (2, 3, 4))]


def _pool_case(rng) -> Case:
    win = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(win, win + 4, size=2))
    return (lambda t: max_pool2d(t[0], win, stride)), [_distinct(rng, (2, 2, h, w))]


def _dropout_eval_case(rng) -> Case:
    p = float(rng.uniform(0.0, 0.9))
    return (lambda t: dropout(t[0], p, training=False, rng=None)), [rng.standard_normal((2, 3, 4))]


def _softmax_case(rng) -> Case:
    k = int(rng.integers(1, 6))
    return (lambda t: softmax(t[0])), [rng.standard_normal((3, k)) * 2]


def _block_case(variant: BlockVariant):
    def make(rng) -> Case:
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(cin, cin + 2))
        stride = int(rng.integers(1, 3))
        h = w = 4
        shapes = {
            "conv1/w": (cout, cin, 3, 3),
            "conv2/w": (cout, cout, 3, 3),
            "bn1/gamma": (cout,),
            "bn1/beta": (cout,),
            "bn2/gamma": (cout,),
            "bn2/beta": (cout,),
        }
        if cin != cout or stride != 1:
            shapes.update({"proj/w": (cout, cin, 1, 1), "proj_bn/gamma": (cout,), "proj_bn/beta": (cout,)})
        names = list(shapes)
        arrays = [rng.standard_normal((2, cin, h, w))]
        for n in names:
            a = rng.standard_normal(shapes[n]) * 0.5
            arrays.append(a + 1.0 if n.endswith("gamma") else a)

        def f(t):
            params = {f"b/{n}": v for n, v in zip(names, t[1:])}
            for bn in ("bn1", "bn2", "proj_bn"):
                if f"b/{bn}/gamma" in params:
                    params[f"b/{bn}/running_mean"] = Tensor(np.zeros(cout))
                    params[f"b/{bn}/running_var"] = Tensor(np.ones(cout))
            return forward_block(t[0], variant, params, "b", training=True, stride=stride)

        return f, arrays

    return make


def _ps_geometry(rng, k: int, hf: int, wf: int, stride: int) -> RoI:
    x1 = rng.uniform(0, wf * stride * 0.5)
    y1 = rng.uniform(0, hf * stride * 0.5)
    x2 = rng.uniform(x1 + stride * k, wf * stride + stride)
    y2 = rng.uniform(y1 + stride * k, hf * stride + stride)
    return RoI((x1, y1, x2, y2))


def _ps_pool_case(rng) -> Case:
    k = int(rng.choice([1, 2, 3]))
    c = int(rng.integers(1, 4))
    stride = int(rng.choice([1, 2, 4]))
    hf, wf = (int(v) for v in rng.integers(k + 1, 8, size=2))
    ps = PSHeadConfig(k, c, stride)
    roi = _ps_geometry(rng, k, hf, wf, stride)
    arrays = [rng.standard_normal((1, k * k * (c + 1), hf, wf))]
    # raw bins, so the random cotangent tells every bin apart
    return (lambda t: ps_roi_pool(t[0], roi, ps)), arrays


def _ps_vote_case(rng) -> Case:
    k = int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    return (lambda t: ps_vote_classify(t[0])), [rng.standard_normal((c + 1, k, k))]


def _ps_reg_case(rng) -> Case:
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    hf, wf = (int(v) for v in rng.integers(k + 1, 8, size=2))
    ps = PSHeadConfig(k, 1, stride)
    roi = _ps_geometry(rng, k, hf, wf, stride)
    return (lambda t: ps_roi_pool_reg(t[0], roi, ps)), [rng.standard_normal((1, 4 * k * k, hf, wf))]


def _loss_case(rng) -> Case:
    from .trainer import detection_loss

    n = int(rng.integers(2, 7))
    c = int(rng.integers(2, 5))
    targets = rng.integers(0, c, size=n)
    targets[0] = 1
    reg_t = rng.standard_normal((n, 4))
    # keep smooth-L1 arguments off the |x| = 1 kink
    offs = _away_from_zero(rng, (n, 4), gap=0.05)
    offs = np.where(np.abs(np.abs(offs) - 1) < 0.05, offs * 1.2, offs)
    arrays = [rng.standard_normal((n, c)), reg_t + offs]
    lam = float(rng.uniform(0.5, 2.0))

    def f(t):
        return detection_loss(softmax(t[0]), targets, t[1], reg_t, lam).total

    return f, arrays


LAYERS: dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": _conv_case,
    "batch_norm": _bn_case,
    "relu": _relu_case,
    "max_pool2d": _pool_case,
    "dropout_eval": _dropout_eval_case,
    "softmax": _softmax_case,
    "block_original": _block_case(BlockVariant.ORIGINAL),
    "block_bn_after_add": _block_case(BlockVariant.BN_AFTER_ADD),
    "block_no_second_relu": _block_case(BlockVariant.NO_SECOND_RELU),
    "ps_roi_pool": _ps_pool_case,
    "ps_roi_pool_reg": _ps_reg_case,
    "ps_vote_classify": _ps_vote_case,
    "detection_loss": _loss_case,
}


def _scalar(fn, arrays, cot, requires_grad: bool):
    leaves = [Tensor(a, requires_grad=requires_grad) for a in arrays]
    out = fn(leaves)
    if out.ndim == 0:
        return out * float(cot), leaves
    return (out * Tensor(cot)).sum(), leaves


def check_case(fn, arrays: Sequence[np.ndarray], rng: np.random.Generator, eps: float = FD_STEP) -> float:
    """Relative error between analytic and central-difference gradients of one case."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn([Tensor(a) for a in arrays])
    cot = rng.standard_normal(probe.shape) if probe.ndim else np.float64(1.0)
    loss, leaves = _scalar(fn, arrays, cot, True)
    backward(loss)
    num_max = ana_max = diff_max = 0.0
    for a, leaf in zip(arrays, leaves):
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + eps
            fp = _scalar(fn, arrays, cot, False)[0].item()
            a[idx] = orig - eps
            fm = _scalar(fn, arrays, cot, False)[0].item()
            a[idx] = orig
            num[idx] = (fp - fm) / (2 * eps)
        num_max = max(num_max, float(np.abs(num).max(initial=0.0)))
        ana_max = max(ana_max, float(np.abs(ana).max(initial=0.0)))
        diff_max = max(diff_max, float(np.abs(ana - num).max(initial=0.0)))
    return diff_max / max(num_max, ana_max, 1e-12)


def run_gradcheck(
    layers: Sequence[str] | None = None,
    instances: int = DEFAULT_INSTANCES,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
) -> list[CheckResult]:
    names = list(LAYERS) if not layers else list(layers)
    unknown = [n for n in names if n not in LAYERS]
    if unknown:
        raise ConfigError(f"unknown layer(s) {', '.join(unknown)}; known: {', '.join(LAYERS)}")
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    results = []
    try:
        order = list(LAYERS)
        for name in names:
            # keyed by registry position so a layer sees the same instances under any filter
            key = order.index(name)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))
            start = time.perf_counter()
            worst = 0.0
            for _ in range(instances):
                fn, arrays = LAYERS[name](rng)
                worst = max(worst, check_case(fn, arrays, rng))
            results.append(CheckResult(name, instances, worst, worst < tol, time.perf_counter() - start))
    finally:
        set_default_dtype(previous)
    return results
