"""Differentiable operations.

Every op accepts Tensors or array-likes, returns a Tensor, and (when a tape is
active) records a node whose backward maps the output gradient to one gradient
per input.  Leading dimensions broadcast numpy-style; gradients are summed back
to each input's shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractViolation, NumericFailure, Tensor, active_tape, as_tensor

NORM_EPS = 1e-5


def _emit(op: str, value: np.ndarray, inputs: tuple, backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericFailure(f"non-finite value produced by {op}")
    out = Tensor(value)
    tape = active_tape()
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` where ``b`` is a 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ContractViolation("matmul expects a 2-D right operand")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def total(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _emit(
        "mean",
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", a.data[index], (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_time(a, steps: int) -> Tensor:
    """(..., C) -> (..., steps, C) by repetition along a new time axis."""
    a = as_tensor(a)
    shape = a.shape[:-1] + (steps, a.shape[-1])
    value = np.broadcast_to(a.data[..., None, :], shape).copy()
    return _emit("broadcast_time", value, (a,), lambda g: (g.sum(axis=-2),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    y = a.data * sig
    return _emit("silu", y, (a,), lambda g: (g * (sig + y * (1.0 - sig)),))


def conv1d(x, kernel, dilation: int, bias=None) -> Tensor:
    """Causal dilated 1-D convolution.

    ``x`` is (..., T, C_in) and ``kernel`` (k, C_in, C_out).  Tap ``j`` reads
    time ``t - (k - 1 - j) * dilation``, so the last tap is the current step;
    positions before the sequence start read zeros.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if int(dilation) != dilation or dilation < 1:
        raise ContractViolation(f"dilation must be a positive integer, got {dilation}")
    k, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ContractViolation(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    steps = x.shape[-2]
    lead = x.shape[:-2]
    # Taps whose lag reaches past the sequence start only see zeros; skip them.
    taps = [j for j in range(k) if (k - 1 - j) * dilation < steps]
    shifted = []
    for j in taps:
        lag = (k - 1 - j) * dilation
        if lag == 0:
            shifted.append(x.data)
        else:
            xs = np.zeros_like(x.data)
            xs[..., lag:, :] = x.data[..., : steps - lag, :]
            shifted.append(xs)
    width = len(taps) * cin
    cols = (np.concatenate(shifted, axis=-1) if len(shifted) > 1 else shifted[0]).reshape(-1, width)
    wmat = kernel.data[taps].reshape(width, cout)
    value = (cols @ wmat).reshape(lead + (steps, cout))

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = np.zeros_like(kernel.data)
        gk[taps] = (cols.T @ g2).reshape(len(taps), cin, cout)
        gcols = (g2 @ wmat.T).reshape(lead + (steps, width))
        gx = np.zeros_like(x.data)
        for i, j in enumerate(taps):
            lag = (k - 1 - j) * dilation
            gx[..., : steps - lag, :] += gcols[..., lag:, i * cin : (i + 1) * cin]
        return gx, gk

    out = _emit("conv1d", value, (x, kernel), backward)
    return out if bias is None else add(out, bias)


def group_norm(x, groups: int, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Group normalization of (..., T, C) over time and the channels of each group."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ContractViolation(f"{c} channels not divisible into {groups} groups")
    shape = x.shape
    xg = x.data.reshape(shape[:-1] + (groups, c // groups))
    axes = (-3, -1)
    n = shape[-2] * (c // groups)
    mu = xg.sum(axis=axes, keepdims=True) / n
    centered = xg - mu
    inv = 1.0 / np.sqrt((centered * centered).sum(axis=axes, keepdims=True) / n + eps)
    xhat_g = centered * inv
    xhat = xhat_g.reshape(shape)
    value = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxh = (g * gamma.data).reshape(xg.shape)
        m1 = dxh.sum(axis=axes, keepdims=True) / n
        m2 = (dxh * xhat_g).sum(axis=axes, keepdims=True) / n
        gx = (inv * (dxh - m1 - xhat_g * m2)).reshape(shape)
        return gx, ggamma, gbeta

    return _emit("group_norm", value, (x, gamma, beta), backward)


def mse(pred, target) -> Tensor:
    """Mean over all entries of (pred - target)^2."""
    return mean(square(sub(pred, target)))
