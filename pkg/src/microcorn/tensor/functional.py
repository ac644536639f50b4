"""Differentiable operations over :class:`Tensor`."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse

from . import kernels
from .core import ContractError, ShapeError, Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after NumPy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(
        a.values + b.values, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(
        a.values - b.values, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return make_result(
        av * bv, "mul", (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return make_result(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


_GEMM_BLOCK = 8


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS picks edge kernels (and gemv for one row) by shape, and their
    # rounding differs; padding both sides to multiples of 8 keeps every row's
    # result independent of how many rows are in the batch.
    m, n = a.shape[0], b.shape[1]
    mp, np_ = -(-m // _GEMM_BLOCK) * _GEMM_BLOCK, -(-n // _GEMM_BLOCK) * _GEMM_BLOCK
    if mp != m:
        a = np.concatenate([a, np.zeros((mp - m, a.shape[1]))], axis=0)
    if np_ != n:
        b = np.concatenate([b, np.zeros((b.shape[0], np_ - n))], axis=1)
    return (a @ b)[:m, :n]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    if bv.ndim == 2:
        lead = av.shape[:-1]
        a2 = av.reshape(-1, av.shape[-1])
        out = _gemm(a2, bv).reshape(*lead, bv.shape[1])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_result(out, "matmul", (a, b), back)
    if av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}")
    out = np.matmul(av, bv)
    return make_result(
        out, "matmul", (a, b),
        lambda g: (np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)),
    )


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(a.values.transpose(axes)), "transpose", (a,),
        lambda g: (g.transpose(inv),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_result(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return make_result(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), "sum", (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.values
    return make_result(np.log(av), "log", (a,), lambda g: (g / av,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.values))
    return make_result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    xv = np.ascontiguousarray(x.values)
    flat = xv.reshape(-1)
    out = kernels.gelu_fwd(flat).reshape(xv.shape)
    return make_result(
        out, "gelu", (x,),
        lambda g: (kernels.gelu_bwd(flat, np.ascontiguousarray(g).reshape(-1)).reshape(xv.shape),),
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}, {bias.shape} do not match last dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x2 = np.ascontiguousarray(x.values).reshape(-1, d)
    y, xhat, rstd = kernels.layernorm_fwd(x2, gain.values, bias.values, float(eps))

    def back(g):
        gx, gg, gb = kernels.layernorm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gain.values)
        return gx.reshape(x.shape), gg, gb

    return make_result(y.reshape(x.shape), "layer_norm", (x, gain, bias), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), back)


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean over positions of ``-log softmax(logits)[target]``.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {n} rows")
    if ignore_index is not None:
        t = np.where(t == ignore_index, -1, t)
    live = t[t >= 0]
    if live.size and live.max() >= v:
        raise IndexError(f"softmax_cross_entropy: target id {int(live.max())} outside vocabulary of {v}")
    if ignore_index is None and (t < 0).any():
        raise IndexError("softmax_cross_entropy: negative target id")
    t = np.ascontiguousarray(t)
    total, count, probs = kernels.xent_fwd(np.ascontiguousarray(logits.values), t)
    if count == 0:
        raise ContractError("softmax_cross_entropy: every position is ignored")
    scale = 1.0 / count
    return make_result(
        np.asarray(total * scale), "softmax_cross_entropy", (logits,),
        lambda g: (kernels.xent_bwd(probs, t, float(g) * scale),),
    )


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm rows; an all-zero row maps to zero with zero gradient."""
    xv = x.values
    norm = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    peak = np.abs(xv).max(axis=axis, keepdims=True)
    extreme = ((peak > 0) & (peak < 1e-150)) | (peak > 1e150)
    if extreme.any():
        # rescale rows whose squares would underflow or overflow
        unit = np.where(extreme, peak, 1.0)
        norm = np.where(extreme, peak * np.sqrt(((xv / unit) ** 2).sum(axis=axis, keepdims=True)), norm)
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, xv / safe, 0.0)

    def back(g):
        gx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(norm > 0, gx, 0.0),)

    return make_result(out, "l2_normalize", (x,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: id outside [0, {table.shape[0]})")
    rows = table.shape[0]

    def back(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        # sparse one-hot product: much faster than np.add.at for repeated ids
        onehot = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(rows, flat.size))
        return (np.asarray(onehot @ g2).reshape((rows,) + g.shape[idx.ndim:]),)

    return make_result(table.values[idx], "embedding", (table,), back)


def index(x: Tensor, idx) -> Tensor:
    src = x.shape

    basic = isinstance(idx, (int, np.integer, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, np.integer, slice)) for i in idx)
    )

    def back(g):
        gx = np.zeros(src, dtype=np.float64)
        if basic:
            gx[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_result(np.array(x.values[idx]), "index", (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make_result(np.concatenate([t.values for t in tensors], axis=ax), "concat", tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Masked scaled dot-product attention over (N, T, dh) inputs."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"causal_attention: shapes {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    qv, kv, vv = (np.ascontiguousarray(t.values) for t in (q, k, v))
    out, p = kernels.causal_attn_fwd(qv, kv, vv, scale)
    return make_result(
        out, "causal_attention", (q, k, v),
        lambda g: kernels.causal_attn_bwd(np.ascontiguousarray(g), qv, kv, vv, p, scale),
    )
