"""Differentiable operators on :class:`~cesst.tensor.Tensor`.

Layout convention is row-major ``[B, C, H, W]`` throughout.  Convolution is
cross-correlation (no kernel flip).
"""
from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _record_macs, make_result


class ShapeError(ValueError):
    pass


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return a, b


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return make_result(out, (a,), bw, "gelu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return make_result(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clamp")


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([shape[i] for i in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return make_result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bw, "mean")


# ---------------------------------------------------------------- shape ops
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(a.data[idx], (a,), bw, "getitem")


def take(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(g, axis, 0)
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, index, gm)
        return (full,)

    return make_result(np.take(a.data, index, axis=axis), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(g[tuple(sl)])
        return tuple(out)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    out, start = [], 0
    axis = axis % a.ndim
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(sl)))
        start += n
    return out


def pad2d(x: Tensor, pad: Sequence[int], mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``(top, bottom, left, right)``.

    ``mode`` is ``"zero"`` or ``"reflect"``.  Reflection is done by index
    gathering, so pads wider than the extent reflect repeatedly.
    """
    top, bottom, left, right = pad
    if not any(pad):
        return x
    if mode == "zero":
        data = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)])
        H, W = x.shape[-2:]
        return make_result(data, (x,), lambda g: (g[..., top:top + H, left:left + W],), "pad_zero")
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    H, W = x.shape[-2:]
    out = x
    if top or bottom:
        out = take(out, _reflect_index(H, top, bottom), axis=-2)
    if left or right:
        out = take(out, _reflect_index(W, left, right), axis=-1)
    return out


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    if n == 1:
        return np.zeros(n + before + after, dtype=np.intp)
    return np.pad(np.arange(n), (before, after), mode="reflect")


# ---------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {ad.shape} @ {bd.shape}") from exc
    _record_macs("matmul", out.size * ad.shape[-1])

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def _affine_shape(ndim: int, axis: int, n: int) -> tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = n
    return tuple(shape)


def layer_norm(x: Tensor, axis: int, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Normalize along one axis then apply a per-element affine along it."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma is not None and gamma.shape != (n,):
        raise ShapeError(f"gamma shape {gamma.shape} does not match normalized extent {n}")
    if beta is not None and beta.shape != (n,):
        raise ShapeError(f"beta shape {beta.shape} does not match normalized extent {n}")
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = _affine_shape(x.ndim, axis, n)
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        dxhat = g * gd if gd is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=other))
        if beta is not None:
            grads.append(g.sum(axis=other))
        return tuple(grads)

    return make_result(out, parents, bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True) + eps)
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- convolution
PadSpec = Union[int, str, Sequence[int]]


def resolve_padding(padding: PadSpec, k: int) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right). ``"same"`` is asymmetric for even k."""
    if padding == "same":
        lo, hi = (k - 1) // 2, k // 2
        return lo, hi, lo, hi
    if isinstance(padding, int):
        return padding, padding, padding, padding
    p = tuple(int(v) for v in padding)
    if len(p) != 4:
        raise ValueError(f"padding must be int, 'same' or 4-tuple, got {padding!r}")
    return p  # type: ignore[return-value]


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: PadSpec = 0, groups: int = 1, padding_mode: str = "zero") -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin/groups,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, Cin, _, _ = x.shape
    Cout, cpg, kh, kw = w.shape
    if Cin % groups or Cout % groups:
        raise ShapeError(f"channels ({Cin} in, {Cout} out) not divisible by groups={groups}")
    if cpg != Cin // groups:
        raise ShapeError(f"weight expects {cpg} input channels per group, input gives {Cin // groups}")
    pads = resolve_padding(padding, kh)
    xp = pad2d(x, pads, padding_mode) if any(pads) and padding_mode == "reflect" else x
    pads_zero = (0, 0, 0, 0) if padding_mode == "reflect" else pads
    xd = xp.data
    if any(pads_zero):
        t, b_, l_, r_ = pads_zero
        xd = np.pad(xd, ((0, 0), (0, 0), (t, b_), (l_, r_)))
    Hp, Wp = xd.shape[-2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kh}x{kw}")
    wd = w.data
    G, Og = groups, Cout // groups
    _record_macs("conv2d", B * Cout * Ho * Wo * cpg * kh * kw)

    if kh == 1 and kw == 1:
        xs = xd[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        if G == 1:
            out = np.matmul(wd[:, :, 0, 0], xs.reshape(B, Cin, Ho * Wo)).reshape(B, Cout, Ho, Wo)
        else:
            out = np.einsum("gok,bgkhw->bgohw", wd[:, :, 0, 0].reshape(G, Og, cpg),
                            xs.reshape(B, G, cpg, Ho, Wo), optimize=True).reshape(B, Cout, Ho, Wo)
        cols = None
    else:
        cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # cols: [B, Cin, Ho, Wo, kh, kw]
        if G == 1:
            out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        elif cpg == 1 and Og == 1:
            out = np.zeros((B, Cout, Ho, Wo), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    out += cols[..., i, j] * wd[None, :, 0, i, j, None, None]
        else:
            out = np.einsum("bgkhwij,gokij->bgohw", cols.reshape(B, G, cpg, Ho, Wo, kh, kw),
                            wd.reshape(G, Og, cpg, kh, kw), optimize=True).reshape(B, Cout, Ho, Wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)
    parents = (xp, w) if bias is None else (xp, w, bias)

    def bw(g):
        gx = gw = None
        if xp.requires_grad:
            gx = np.zeros(xd.shape, dtype=xd.dtype)
            if cols is None:
                if G == 1:
                    gsub = np.matmul(wd[:, :, 0, 0].T, g.reshape(B, Cout, Ho * Wo)).reshape(B, Cin, Ho, Wo)
                else:
                    gsub = np.einsum("gok,bgohw->bgkhw", wd[:, :, 0, 0].reshape(G, Og, cpg),
                                     g.reshape(B, G, Og, Ho, Wo), optimize=True).reshape(B, Cin, Ho, Wo)
                gx[:, :, :Ho * stride:stride, :Wo * stride:stride] += gsub
            else:
                if G == 1:
                    gcols = np.tensordot(g, wd, axes=([1], [0]))  # [B,Ho,Wo,Cin,kh,kw]
                    gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
                elif cpg == 1 and Og == 1:
                    gcols = None
                    for i in range(kh):
                        for j in range(kw):
                            gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                                g * wd[None, :, 0, i, j, None, None]
                else:
                    gcols = np.einsum("bgohw,gokij->bgkhwij", g.reshape(B, G, Og, Ho, Wo),
                                      wd.reshape(G, Og, cpg, kh, kw),
                                      optimize=True).reshape(B, Cin, Ho, Wo, kh, kw)
                if gcols is not None:
                    for i in range(kh):
                        for j in range(kw):
                            gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[..., i, j]
            if any(pads_zero):
                t, _, l_, _ = pads_zero
                gx = gx[:, :, t:t + xp.shape[2], l_:l_ + xp.shape[3]]
        if w.requires_grad:
            if cols is None:
                xs = xd[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
                if G == 1:
                    gw = np.matmul(g.reshape(B, Cout, Ho * Wo),
                                   xs.reshape(B, Cin, Ho * Wo).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
                else:
                    gw = np.einsum("bgohw,bgkhw->gok", g.reshape(B, G, Og, Ho, Wo),
                                   xs.reshape(B, G, cpg, Ho, Wo), optimize=True).reshape(Cout, cpg, 1, 1)
            elif G == 1:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            elif cpg == 1 and Og == 1:
                gw = np.empty(wd.shape, dtype=wd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (g * cols[..., i, j]).sum(axis=(0, 2, 3))
            else:
                gw = np.einsum("bgohw,bgkhwij->gokij", g.reshape(B, G, Og, Ho, Wo),
                               cols.reshape(B, G, cpg, Ho, Wo, kh, kw),
                               optimize=True).reshape(Cout, cpg, kh, kw)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- resampling
def _interp_matrix(n_in: int, n_out: int, mode: str, dtype) -> np.ndarray:
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    if mode == "nearest":
        src = np.minimum(np.floor(np.arange(n_out) * scale).astype(int), n_in - 1)
        A[np.arange(n_out), src] = 1
        return A
    # bilinear with half-pixel centers, edge-clamped
    pos = (np.arange(n_out) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    np.add.at(A, (np.arange(n_out), lo), 1 - frac)
    np.add.at(A, (np.arange(n_out), hi), frac)
    return A


def resize(x: Tensor, scale: Optional[float] = None, mode: str = "bilinear",
           size: Optional[tuple[int, int]] = None) -> Tensor:
    """Resize the last two axes by ``scale`` (or to ``size``) using nearest or bilinear."""
    H, W = x.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("resize needs a positive scale or an explicit size")
        size = (int(math.floor(H * scale)), int(math.floor(W * scale)))
    Ho, Wo = size
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"resize output extent < 1 for input {x.shape} at scale {scale}")
    Ah = _interp_matrix(H, Ho, mode, x.dtype)
    Aw = _interp_matrix(W, Wo, mode, x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)

    def bw(g):
        return (np.matmul(np.matmul(Ah.T, g), Aw),)

    return make_result(out, (x,), bw, f"resize_{mode}")


def resize_nearest(x: Tensor, scale: float) -> Tensor:
    return resize(x, scale, "nearest")


def resize_bilinear(x: Tensor, scale: float) -> Tensor:
    return resize(x, scale, "bilinear")
