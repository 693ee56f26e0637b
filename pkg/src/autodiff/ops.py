"""
Differentiable operations.

Broadcasting is limited to bias-add (a 1-D operand matching the last axis)
and scalar scaling; every other binary op requires equal shapes.
conv2d is im2col followed by a batched matmul, so it shares the matmul
gradient path.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.autodiff.engine import DiffNode, constant, make_node
from src.constants import LAYER_NORM_EPSILON, NORM_EPSILON
from src.exceptions import DegenerateInputError, NumericalError, ShapeError

Scalar = Union[float, int, DiffNode]


def _require_shape(node: DiffNode, ndim: int, op: str) -> None:
    if node.value.ndim != ndim:
        raise ShapeError(f"{op} expects a {ndim}-D input, got shape {node.shape}")


def _same_shape(a: DiffNode, b: DiffNode, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    _require_shape(a, 2, "matmul")
    _require_shape(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def rule(g):
        return g @ bv.T, av.T @ g

    return make_node("matmul", av @ bv, (a, b), rule)


def transpose(x: DiffNode) -> DiffNode:
    _require_shape(x, 2, "transpose")

    def rule(g):
        return (g.T,)

    return make_node("transpose", x.value.T.copy(), (x,), rule)


def dense(x: DiffNode, weight: DiffNode, bias: DiffNode) -> DiffNode:
    """Affine map x @ W + b for x of shape (n, in), W (in, out), b (out,)."""
    _require_shape(x, 2, "dense")
    _require_shape(weight, 2, "dense")
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense shape mismatch: x{x.shape} W{weight.shape} b{bias.shape}")
    xv, wv = x.value, weight.value

    def rule(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return make_node("dense", xv @ wv + bias.value, (x, weight, bias), rule)


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> Tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, out_h, out_w), dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    return cols.reshape(n, c * kernel * kernel, out_h * out_w), out_h, out_w


def _col2im(
    cols: np.ndarray,
    x_shape: Tuple[int, ...],
    kernel: int,
    stride: int,
    padding: int,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, kernel, kernel, out_h, out_w)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return padded[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: DiffNode, weight: DiffNode, bias: DiffNode, stride: int = 1, padding: int = 0) -> DiffNode:
    """
    2-D cross-correlation.

    Args:
        x: Input of shape (n, c, h, w)
        weight: Filters of shape (f, c, k, k)
        bias: Shape (f,)
        stride: Step between windows
        padding: Zero padding on each spatial border

    Returns:
        Output of shape (n, f, out_h, out_w)
    """
    _require_shape(x, 4, "conv2d")
    _require_shape(weight, 4, "conv2d")
    f, c, k, k2 = weight.shape
    if k != k2 or x.shape[1] != c or bias.shape != (f,):
        raise ShapeError(f"conv2d shape mismatch: x{x.shape} W{weight.shape} b{bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {x.shape[2:]}")

    n = x.shape[0]
    cols, out_h, out_w = _im2col(x.value, k, stride, padding)
    w_mat = weight.value.reshape(f, c * k * k)
    out = np.matmul(w_mat, cols) + bias.value[None, :, None]
    x_shape = x.shape

    def rule(g):
        g = g.reshape(n, f, out_h * out_w)
        d_weight = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        d_bias = g.sum(axis=(0, 2))
        d_cols = np.matmul(w_mat.T, g)
        d_x = _col2im(d_cols, x_shape, k, stride, padding, out_h, out_w)
        return d_x, d_weight, d_bias

    return make_node("conv2d", out.reshape(n, f, out_h, out_w), (x, weight, bias), rule)


def max_pool2d(x: DiffNode, size: int = 2) -> DiffNode:
    """Non-overlapping max pooling with window and stride equal to size."""
    _require_shape(x, 4, "max_pool2d")
    n, c, h, w = x.shape
    if size < 1 or h % size or w % size:
        raise ShapeError(f"max_pool2d size {size} does not divide spatial shape {(h, w)}")
    out_h, out_w = h // size, w // size
    windows = (
        x.value.reshape(n, c, out_h, size, out_w, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, out_h, out_w, size * size)
    )
    # first maximum wins ties
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        d_windows = np.zeros((n, c, out_h, out_w, size * size), dtype=np.float64)
        np.put_along_axis(d_windows, arg[..., None], g[..., None], axis=-1)
        d_x = (
            d_windows.reshape(n, c, out_h, out_w, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (d_x,)

    return make_node("max_pool2d", out, (x,), rule)


def global_avg_pool(x: DiffNode) -> DiffNode:
    """Mean over the spatial axes: (n, c, h, w) -> (n, c)."""
    _require_shape(x, 4, "global_avg_pool")
    n, c, h, w = x.shape

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return make_node("global_avg_pool", x.value.mean(axis=(2, 3)), (x,), rule)


# ---------------------------------------------------------------- elementwise

def relu(x: DiffNode) -> DiffNode:
    mask = x.value > 0

    def rule(g):
        return (g * mask,)

    return make_node("relu", np.where(mask, x.value, 0.0), (x,), rule)


def exp(x: DiffNode) -> DiffNode:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)

    def rule(g):
        return (g * out,)

    return make_node("exp", out, (x,), rule)


def log(x: DiffNode) -> DiffNode:
    if np.any(x.value <= 0):
        raise NumericalError("log of a non-positive value")
    xv = x.value

    def rule(g):
        return (g / xv,)

    return make_node("log", np.log(xv), (x,), rule)


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise sum; b may also be a 1-D bias matching a's last axis."""
    if a.shape == b.shape:
        def rule(g):
            return g, g

        return make_node("add", a.value + b.value, (a, b), rule)

    if b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.value.ndim - 1))

        def bias_rule(g):
            return g, g.sum(axis=lead)

        return make_node("add", a.value + b.value, (a, b), bias_rule)

    raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    return add(a, scale(b, -1.0))


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def rule(g):
        return g * bv, g * av

    return make_node("mul", av * bv, (a, b), rule)


def scale(x: DiffNode, factor: Scalar) -> DiffNode:
    """Multiply by a python scalar or a single-element node."""
    if isinstance(factor, DiffNode):
        if factor.value.size != 1:
            raise ShapeError(f"scale factor must be a scalar, got shape {factor.shape}")
        s = float(factor.value.reshape(()))
        xv = x.value
        factor_shape = factor.shape

        def node_rule(g):
            return g * s, np.array(np.sum(g * xv)).reshape(factor_shape)

        return make_node("scale", xv * s, (x, factor), node_rule)

    s = float(factor)

    def rule(g):
        return (g * s,)

    return make_node("scale", x.value * s, (x,), rule)


# ---------------------------------------------------------------- reductions and shape

def sum(x: DiffNode, axis: Optional[int] = None) -> DiffNode:  # noqa: A001
    shape = x.shape
    if axis is None:
        def rule(g):
            return (np.full(shape, float(g)),)

        return make_node("sum", np.array(x.value.sum()), (x,), rule)

    axis = axis % x.value.ndim

    def axis_rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node("sum", x.value.sum(axis=axis), (x,), axis_rule)


def mean(x: DiffNode, axis: Optional[int] = None) -> DiffNode:
    count = x.value.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError("mean of an empty array")
    return scale(sum(x, axis), 1.0 / count)


def reshape(x: DiffNode, shape: Tuple[int, ...]) -> DiffNode:
    original = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {original} to {shape}") from e

    def rule(g):
        return (g.reshape(original),)

    return make_node("reshape", out.copy(), (x,), rule)


def concat(nodes: Sequence[DiffNode], axis: int = 0) -> DiffNode:
    if not nodes:
        raise ShapeError("concat of an empty list")
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch: {[v.shape for v in values]}") from e
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node("concat", out, tuple(nodes), rule)


def take_rows(table: DiffNode, indices: Sequence[int]) -> DiffNode:
    """Gather rows of a 2-D table (embedding lookup)."""
    _require_shape(table, 2, "take_rows")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("take_rows needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(f"take_rows index out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def rule(g):
        d_table = np.zeros(shape, dtype=np.float64)
        np.add.at(d_table, idx, g)
        return (d_table,)

    return make_node("take_rows", table.value[idx], (table,), rule)


def pick(x: DiffNode, indices: Sequence[int]) -> DiffNode:
    """Select one column per row: (n, k) -> (n,)."""
    _require_shape(x, 2, "pick")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"pick needs {x.shape[0]} indices, got shape {idx.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def rule(g):
        d_x = np.zeros(shape, dtype=np.float64)
        d_x[rows, idx] = g
        return (d_x,)

    return make_node("pick", x.value[rows, idx], (x,), rule)


# ---------------------------------------------------------------- normalization

def softmax(x: DiffNode) -> DiffNode:
    """Softmax along the last axis."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return make_node("softmax", out, (x,), rule)


def log_softmax(x: DiffNode) -> DiffNode:
    """Log-softmax along the last axis."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return make_node("log_softmax", out, (x,), rule)


def layer_norm(x: DiffNode, gamma: DiffNode, beta: DiffNode, eps: float = LAYER_NORM_EPSILON) -> DiffNode:
    """Normalize over the last axis, then apply per-feature gain and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm parameters must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.value.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.value.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.value - mu) * inv_std
    gv = gamma.value
    lead = tuple(range(x.value.ndim - 1))

    def rule(g):
        d_hat = g * gv
        d_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * np.mean(d_hat * x_hat, axis=-1, keepdims=True)
        )
        return d_x, np.sum(g * x_hat, axis=lead), g.sum(axis=lead)

    return make_node("layer_norm", x_hat * gv + beta.value, (x, gamma, beta), rule)


def l2_normalize(x: DiffNode) -> DiffNode:
    """
    Scale each vector along the last axis to unit length.

    Raises:
        DegenerateInputError: If any vector has (near) zero norm
    """
    norms = np.sqrt(np.sum(x.value * x.value, axis=-1, keepdims=True))
    if np.any(norms < NORM_EPSILON):
        raise DegenerateInputError("l2_normalize of a zero vector")
    out = x.value / norms

    def rule(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norms,)

    return make_node("l2_normalize", out, (x,), rule)


def cosine_similarity(a: DiffNode, b: DiffNode) -> DiffNode:
    """Cosine similarity of matching vectors along the last axis."""
    _same_shape(a, b, "cosine_similarity")
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def as_node(value) -> DiffNode:
    return constant(value)
