"""Differentiable ops over :class:`Tensor`, each with its reverse-mode rule.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
suffix-aligned operand (leading-axis batch), everything else goes through the
explicit :func:`expand` op. Reductions with data-dependent selection (max,
gather, bilinear) break ties toward the lowest index so repeated runs are
bitwise identical.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractViolation, NumericDomainError
from .tensor import Array, Tape, TapeNode, Tensor, merge_tape

# name -> (callable, smooth) where smooth ops must pass finite-difference
# checks at 1e-6 relative error and piecewise ops at 1e-4.
OP_REGISTRY: dict[str, tuple[Callable, bool]] = {}


def register(name: str, smooth: bool):
    def deco(fn):
        OP_REGISTRY[name] = (fn, smooth)
        return fn
    return deco


def forward_op(name: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply a registered op by name to a list of tensors."""
    if name not in OP_REGISTRY:
        raise ContractViolation(f"unknown op '{name}'")
    fn, _ = OP_REGISTRY[name]
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _apply(op: str, inputs: Sequence[Tensor], out_values: Array,
           grad_fn: Callable[[Array, tuple[bool, ...]], list[Array | None]]) -> Tensor:
    tape = merge_tape(inputs)
    if tape is not None:
        tape.check_values(op, out_values)
    requires = any(t.requires_grad or t._producer is not None for t in inputs)
    out = Tensor(out_values, tape=tape, dtype=out_values.dtype)
    if requires and tape is not None and tape.recording:
        tape.record(TapeNode(op, inputs, out, grad_fn))
    return out


def _check_suffix_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ContractViolation(
            f"{op}: shapes {sa} and {sb} are neither equal nor leading-axis broadcastable")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original (suffix) shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


@register("add", smooth=True)
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix_broadcast("add", a, b)
    out = a.values + b.values

    def grad_fn(g, needs):
        return [_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None]

    return _apply("add", [a, b], out, grad_fn)


@register("mul", smooth=True)
def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix_broadcast("mul", a, b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def grad_fn(g, needs):
        return [_unbroadcast(g * bv, a.shape) if needs[0] else None,
                _unbroadcast(g * av, b.shape) if needs[1] else None]

    return _apply("mul", [a, b], out, grad_fn)


@register("neg", smooth=True)
def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("neg", [a], -a.values, lambda g, needs: [-g])


@register("sub", smooth=True)
def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix_broadcast("sub", a, b)
    out = a.values - b.values

    def grad_fn(g, needs):
        return [_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None]

    return _apply("sub", [a, b], out, grad_fn)


@register("div", smooth=True)
def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix_broadcast("div", a, b)
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def grad_fn(g, needs):
        return [_unbroadcast(g / bv, a.shape) if needs[0] else None,
                _unbroadcast(-g * av / (bv * bv), b.shape) if needs[1] else None]

    return _apply("div", [a, b], out, grad_fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


@register("tanh", smooth=True)
def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.values)
    return _apply("tanh", [a], out, lambda g, needs: [g * (1.0 - out * out)])


@register("relu", smooth=False)
def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.values, 0.0)
    pos = a.values > 0.0
    return _apply("relu", [a], out, lambda g, needs: [g * pos])


@register("exp", smooth=True)
def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces via the finite check
        out = np.exp(a.values)
    return _apply("exp", [a], out, lambda g, needs: [g * out])


@register("log", smooth=True)
def log(a) -> Tensor:
    a = _as_tensor(a)
    tape = merge_tape([a])
    if tape is not None and tape.check_finite and np.any(a.values <= 0.0):
        raise NumericDomainError("log of non-positive value")
    out = np.log(a.values)
    av = a.values
    return _apply("log", [a], out, lambda g, needs: [g / av])


@register("sqrt", smooth=True)
def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    tape = merge_tape([a])
    if tape is not None and tape.check_finite and np.any(a.values < 0.0):
        raise NumericDomainError("sqrt of negative value")
    out = np.sqrt(a.values)
    return _apply("sqrt", [a], out, lambda g, needs: [g / (2.0 * out)])


@register("clamp", smooth=False)
def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; one-sided (interior) derivative at the boundaries."""
    a = _as_tensor(a)
    out = np.clip(a.values, lo, hi)
    inside = (a.values >= lo) & (a.values <= hi)
    return _apply("clamp", [a], out, lambda g, needs: [g * inside])


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


@register("matmul", smooth=True)
def matmul(a, b) -> Tensor:
    """Matrix product; either side may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul expects rank >= 2 on both sides")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def grad_fn(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ bv.swapaxes(-1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(av.swapaxes(-1, -2) @ g, b.shape)
        return [ga, gb]

    return _apply("matmul", [a, b], out, grad_fn)


@register("reshape", smooth=True)
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.values.reshape(shape)
    orig = a.shape
    return _apply("reshape", [a], out, lambda g, needs: [g.reshape(orig)])


@register("transpose", smooth=True)
def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.values.transpose(axes)
    return _apply("transpose", [a], out, lambda g, needs: [g.transpose(inv)])


@register("expand", smooth=True)
def expand(a, shape) -> Tensor:
    """Broadcast to a larger shape (explicit counterpart of numpy broadcasting)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.values, shape).copy()
    orig = a.shape

    def grad_fn(g, needs):
        extra = len(shape) - len(orig)
        axes = tuple(range(extra)) + tuple(
            extra + i for i, d in enumerate(orig) if d == 1 and shape[extra + i] != 1)
        return [g.sum(axis=axes).reshape(orig)]

    return _apply("expand", [a], out, grad_fn)


@register("concat", smooth=True)
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of empty list")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g, needs):
        pieces = np.split(g, splits, axis=axis)
        return [p if n else None for p, n in zip(pieces, needs)]

    return _apply("concat", tensors, out, grad_fn)


@register("slice", smooth=True)
def slice_(a, key) -> Tensor:
    """Basic indexing (ints and slices only); gradient scatters back."""
    a = _as_tensor(a)
    out = a.values[key]
    if out.base is not None or np.shares_memory(out, a.values):
        out = out.copy()
    shape = a.shape
    dtype = a.values.dtype

    def grad_fn(g, needs):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return [full]

    return _apply("slice", [a], out, grad_fn)


@register("gather", smooth=True)
def gather(a, indices, axis: int = 0) -> Tensor:
    """Take rows along an axis; integer indices may repeat (grads accumulate)."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation("gather indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ContractViolation("gather index out of range")
    out = np.take(a.values, idx, axis=axis)
    shape = a.shape
    dtype = a.values.dtype

    def grad_fn(g, needs):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)),
                         tuple(range(idx.ndim)))
        np.add.at(moved, idx.ravel(), gm.reshape((-1,) + moved.shape[1:]))
        return [full]

    return _apply("gather", [a], out, grad_fn)


@register("take_rowwise", smooth=True)
def take_rowwise(a, indices) -> Tensor:
    """out[..., i] = a[..., i, idx[..., i]] (per-row column pick)."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.shape != a.shape[:-1]:
        raise ContractViolation("take_rowwise index shape must match row shape")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ContractViolation("take_rowwise index out of range")
    out = np.take_along_axis(a.values, idx[..., None], axis=-1)[..., 0]
    shape = a.shape
    dtype = a.values.dtype

    def grad_fn(g, needs):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return [full]

    return _apply("take_rowwise", [a], out, grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@register("sum", smooth=True)
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, shape).copy()]

    return _apply("sum", [a], out, grad_fn)


@register("mean", smooth=True)
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes) if a.ndim else 1
    out = a.values.mean(axis=axes, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, shape).copy() / count]

    return _apply("mean", [a], out, grad_fn)


def max_with_indices(a, axis: int) -> tuple[Tensor, Array]:
    """Max over one axis plus the argmax indices (ties: lowest index)."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.values, axis=axis)  # first occurrence == lowest index
    out = np.take_along_axis(a.values, np.expand_dims(idx, axis), axis=axis)
    out = np.squeeze(out, axis=axis)
    shape = a.shape
    dtype = a.values.dtype

    def grad_fn(g, needs):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return [full]

    return _apply("max_over_axis", [a], out, grad_fn), idx


@register("max_over_axis", smooth=False)
def max_over_axis(a, axis: int) -> Tensor:
    out, _ = max_with_indices(a, axis)
    return out


@register("logsumexp", smooth=True)
def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Shift-stable log(sum(exp(x))) along one axis."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    m = np.max(a.values, axis=axis, keepdims=True)
    z = np.exp(a.values - m)
    s = z.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = z / s

    def grad_fn(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [g * soft]

    return _apply("logsumexp", [a], out, grad_fn)


@register("softmax_logsumexp", smooth=True)
def softmax_logsumexp(a, axis: int = -1) -> Tensor:
    """Softmax along one axis, computed via the log-sum-exp shift for stability."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    m = np.max(a.values, axis=axis, keepdims=True)
    z = np.exp(a.values - m)
    out = z / z.sum(axis=axis, keepdims=True)

    def grad_fn(g, needs):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return _apply("softmax_logsumexp", [a], out, grad_fn)


@register("l2_normalize", smooth=True)
def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit Euclidean norm; rows below eps norm are left near zero."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    norm = np.sqrt((a.values * a.values).sum(axis=axis, keepdims=True))
    n = np.maximum(norm, eps)
    out = a.values / n
    active = norm > eps
    av = a.values

    def grad_fn(g, needs):
        dot = (g * av).sum(axis=axis, keepdims=True)
        return [g / n - active * av * dot / (n * n * n)]

    return _apply("l2_normalize", [a], out, grad_fn)


# ---------------------------------------------------------------------------
# structured ops


@register("pair_dot", smooth=True)
def pair_dot(zi, zt) -> Tensor:
    """All cross-pair token dot products: [b,N,d] x [b,K,d] -> [b,b,N,K]."""
    zi, zt = _as_tensor(zi), _as_tensor(zt)
    if zi.ndim != 3 or zt.ndim != 3 or zi.shape[-1] != zt.shape[-1]:
        raise ContractViolation(f"pair_dot expects [b,N,d] and [b,K,d], got {zi.shape} {zt.shape}")
    ziv, ztv = zi.values, zt.values
    out = np.einsum("ind,jkd->ijnk", ziv, ztv)

    def grad_fn(g, needs):
        gi = np.einsum("ijnk,jkd->ind", g, ztv) if needs[0] else None
        gt = np.einsum("ijnk,ind->jkd", g, ziv) if needs[1] else None
        return [gi, gt]

    return _apply("pair_dot", [zi, zt], out, grad_fn)


@register("bilinear", smooth=False)
def bilinear(grid, points) -> Tensor:
    """Bilinear interpolation of a feature grid at normalized (x, y) points.

    grid: [H, W, C] or [B, H, W, C]; points: [P, 2] or [B, P, 2] in image
    units where cell (r, c) has center ((c+0.5)/W, (r+0.5)/H). Coordinates
    are clamped to the border cell centers (replication outside), and the
    derivative w.r.t. a clamped coordinate is one-sided.
    """
    grid, points = _as_tensor(grid), _as_tensor(points)
    batched = grid.ndim == 4
    if not batched and grid.ndim != 3:
        raise ContractViolation(f"bilinear grid must be rank 3 or 4, got {grid.shape}")
    if points.shape[-1] != 2 or points.ndim != (3 if batched else 2):
        raise ContractViolation(f"bilinear points shape {points.shape} does not match grid")
    gv = grid.values if batched else grid.values[None]
    pv = points.values if batched else points.values[None]
    B, H, W, C = gv.shape
    P = pv.shape[1]

    u_raw = pv[..., 0] * W - 0.5  # continuous column coordinate
    v_raw = pv[..., 1] * H - 0.5
    u = np.clip(u_raw, 0.0, W - 1.0)
    v = np.clip(v_raw, 0.0, H - 1.0)
    c0 = np.minimum(np.floor(u), W - 2 if W > 1 else 0).astype(np.int64)
    r0 = np.minimum(np.floor(v), H - 2 if H > 1 else 0).astype(np.int64)
    c0 = np.maximum(c0, 0)
    r0 = np.maximum(r0, 0)
    c1 = np.minimum(c0 + 1, W - 1)
    r1 = np.minimum(r0 + 1, H - 1)
    fu = (u - c0)[..., None]
    fv = (v - r0)[..., None]

    bi = np.arange(B)[:, None]
    g00 = gv[bi, r0, c0]
    g01 = gv[bi, r0, c1]
    g10 = gv[bi, r1, c0]
    g11 = gv[bi, r1, c1]
    out = ((1 - fv) * ((1 - fu) * g00 + fu * g01)
           + fv * ((1 - fu) * g10 + fu * g11))
    if not batched:
        out = out[0]

    act_u = ((u_raw >= 0.0) & (u_raw <= W - 1.0))[..., None]
    act_v = ((v_raw >= 0.0) & (v_raw <= H - 1.0))[..., None]
    gshape, pshape = grid.shape, points.shape
    dtype = gv.dtype

    def grad_fn(g, needs):
        gb = g if batched else g[None]
        grad_grid = grad_pts = None
        if needs[0]:
            gg = np.zeros((B, H, W, C), dtype=dtype)
            w00 = (1 - fv) * (1 - fu)
            w01 = (1 - fv) * fu
            w10 = fv * (1 - fu)
            w11 = fv * fu
            bflat = np.broadcast_to(bi, r0.shape).ravel()
            np.add.at(gg, (bflat, r0.ravel(), c0.ravel()), (w00 * gb).reshape(-1, C))
            np.add.at(gg, (bflat, r0.ravel(), c1.ravel()), (w01 * gb).reshape(-1, C))
            np.add.at(gg, (bflat, r1.ravel(), c0.ravel()), (w10 * gb).reshape(-1, C))
            np.add.at(gg, (bflat, r1.ravel(), c1.ravel()), (w11 * gb).reshape(-1, C))
            grad_grid = gg.reshape(gshape)
        if needs[1]:
            dout_du = (1 - fv) * (g01 - g00) + fv * (g11 - g10)
            dout_dv = (1 - fu) * (g10 - g00) + fu * (g11 - g01)
            gu = (gb * dout_du).sum(axis=-1, keepdims=True) * act_u * W
            gv_ = (gb * dout_dv).sum(axis=-1, keepdims=True) * act_v * H
            grad_pts = np.concatenate([gu, gv_], axis=-1).reshape(pshape)
        return [grad_grid, grad_pts]

    return _apply("bilinear", [grid, points], out, grad_fn)


@register("scaled_dot_attention", smooth=True)
def scaled_dot_attention(q, k, v, key_pad_mask: Array | None = None,
                         causal: bool = False) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v with optional key padding and causal masks.

    Composite of primitive ops, so its gradient comes for free. Masked keys
    receive a -1e9 score bias: padded positions are never attended to.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    scores = matmul(q, transpose(k, _swap_last(k.ndim)))
    scores = mul(scores, 1.0 / math.sqrt(d))
    bias = _attention_bias(scores.shape, key_pad_mask, causal, scores.values.dtype)
    if bias is not None:
        scores = add(scores, Tensor(bias))
    attn = softmax_logsumexp(scores, axis=-1)
    return matmul(attn, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _attention_bias(shape, key_pad_mask, causal, dtype) -> Array | None:
    n, m = shape[-2], shape[-1]
    bias = None
    if key_pad_mask is not None:
        pad = np.asarray(key_pad_mask, dtype=bool)
        bias = np.where(pad[..., None, :], -1e9, 0.0).astype(dtype)
        bias = np.broadcast_to(bias, shape).copy()
    if causal:
        tri = np.triu(np.full((n, m), -1e9, dtype=dtype), k=1)
        bias = tri if bias is None else bias + tri
    return bias


# ---------------------------------------------------------------------------
# composite helpers (recorded through their primitives)


def affine(x: Tensor, weight: Tensor, bias_: Tensor) -> Tensor:
    """x @ W + b for x of shape [..., din]."""
    if x.ndim == 1:
        return add(matmul(reshape(x, (1, -1)), weight)[0, :], bias_)
    return add(matmul(x, weight), bias_)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, expand(mu, x.shape))
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    denom = sqrt(add(var, eps))
    xn = div(xc, expand(denom, x.shape))
    return add(mul(xn, gamma), beta)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two same-shape tensors."""
    return sum_(mul(a, b))
