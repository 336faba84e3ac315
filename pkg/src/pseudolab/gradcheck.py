"""Finite-difference gradient checking for the numeric kernels.

The checker compares analytic gradients against central differences with
h = 1e-5 and reports the max relative error |a - n| / max(1e-8, |a| + |n|).
Callers assert against their own tolerance (1e-4 throughout the test suite).
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import ops
from .rng import RngState
from .tensor import ConvParams, Tensor

STEP = 1e-5


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray,
                       h: float = STEP) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. each element of ``array``.

    ``array`` is perturbed in place and restored; ``loss_fn`` must read it on
    every call.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = array[ix]
        array[ix] = orig + h
        f_plus = loss_fn()
        array[ix] = orig - h
        f_minus = loss_fn()
        array[ix] = orig
        grad[ix] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(loss_fn: Callable[[], float], analytic: Mapping[str, np.ndarray],
               arrays: Mapping[str, np.ndarray], h: float = STEP) -> float:
    """Max relative error between analytic gradients and finite differences.

    ``arrays`` maps names to the buffers ``loss_fn`` reads; ``analytic`` maps
    the same names to the gradients under test.
    """
    worst = 0.0
    for name, arr in arrays.items():
        numeric = numerical_gradient(loss_fn, arr, h)
        worst = max(worst, max_relative_error(analytic[name], numeric))
    return worst


# ---------------------------------------------------------------------------
# canned checks used by the test suite and the `gradcheck` CLI command.
# Inputs are sampled away from relu/pool kinks so finite differences are valid.


def _projection_loss(y: np.ndarray, r: np.ndarray) -> float:
    return float(np.sum(y * r))


def check_conv2d(rng: RngState) -> float:
    gen = rng.generator()
    x = gen.normal(size=(1, 2, 5, 5))
    params = ConvParams(Tensor(gen.normal(size=(3, 2, 3, 3))), Tensor(gen.normal(size=3)),
                        stride=1, padding=1)
    r = gen.normal(size=ops.conv2d(x, params).shape)

    def loss() -> float:
        return _projection_loss(ops.conv2d(x, params), r)

    gx, gk, gb = ops.conv2d_backward(r, x, params)
    return grad_check(loss, {"x": gx, "k": gk, "b": gb},
                      {"x": x, "k": params.kernel.data, "b": params.bias.data})


def check_dense(rng: RngState) -> float:
    gen = rng.generator()
    x = gen.normal(size=(4, 6))
    w = gen.normal(size=(6, 3))
    b = gen.normal(size=3)
    r = gen.normal(size=(4, 3))

    def loss() -> float:
        return _projection_loss(ops.dense(x, w, b), r)

    gx, gw, gb = ops.dense_backward(r, x, w)
    return grad_check(loss, {"x": gx, "w": gw, "b": gb}, {"x": x, "w": w, "b": b})


def check_relu(rng: RngState) -> float:
    gen = rng.generator()
    x = gen.normal(size=(3, 7))
    x += np.sign(x) * 0.1  # keep entries away from the kink at 0
    r = gen.normal(size=x.shape)

    def loss() -> float:
        return _projection_loss(ops.relu(x), r)

    return grad_check(loss, {"x": ops.relu_backward(r, x)}, {"x": x})


def check_maxpool2(rng: RngState) -> float:
    gen = rng.generator()
    x = gen.permuted(np.arange(1 * 2 * 4 * 4, dtype=np.float64)).reshape(1, 2, 4, 4)
    x += gen.normal(size=x.shape) * 0.01  # distinct window entries, no near-ties
    r = gen.normal(size=ops.maxpool2(x).shape)

    def loss() -> float:
        return _projection_loss(ops.maxpool2(x), r)

    return grad_check(loss, {"x": ops.maxpool2_backward(r, x)}, {"x": x})


def check_softmax_crossentropy(rng: RngState) -> float:
    gen = rng.generator()
    logits = gen.normal(size=(3, 10))
    labels = gen.integers(0, 10, size=3)

    def loss() -> float:
        return ops.softmax_crossentropy(logits, labels)[0]

    _, probs = ops.softmax_crossentropy(logits, labels)
    analytic = ops.softmax_crossentropy_backward(probs, labels)
    return grad_check(loss, {"logits": analytic}, {"logits": logits})


def check_tiny_cnn(rng: RngState) -> float:
    """End-to-end check of the composed network on an 8x8x1, 2-class instance."""
    from .model import CnnArch, build_cnn  # local import to avoid a cycle

    gen = rng.generator()
    model = build_cnn((1, 8, 8), 2, CnnArch(conv_channels=(3,), kernel_size=3,
                                            padding=0, dense_width=4), rng)
    x = gen.normal(size=(2, 1, 8, 8))
    labels = gen.integers(0, 2, size=2)

    def loss() -> float:
        return ops.softmax_crossentropy(model.forward_logits(x), labels)[0]

    logits, caches = model.forward_with_caches(x)
    _, probs = ops.softmax_crossentropy(logits, labels)
    grad_x = model.backward_from_logits(ops.softmax_crossentropy_backward(probs, labels), caches)
    arrays = {"x": x}
    analytic = {"x": grad_x}
    for name, param in model.parameters():
        arrays[name] = param.data
        analytic[name] = param.grad
    return grad_check(loss, analytic, arrays)


ALL_CHECKS: dict[str, Callable[[RngState], float]] = {
    "conv2d": check_conv2d,
    "dense": check_dense,
    "relu": check_relu,
    "maxpool2": check_maxpool2,
    "softmax_crossentropy": check_softmax_crossentropy,
    "tiny_cnn": check_tiny_cnn,
}


def run_all_checks(seed: int = 0, repeats: int = 20) -> dict[str, float]:
    """Worst max-relative-error per kernel over ``repeats`` seeded instances."""
    base = RngState(seed)
    results: dict[str, float] = {}
    for name, checker in ALL_CHECKS.items():
        worst = 0.0
        for i in range(repeats):
            worst = max(worst, checker(base.split(f"{name}-{i}")))
        results[name] = worst
    return results
