"""Differentiable primitives.

Every function takes Tensors (or raw arrays, wrapped as constants), computes
the forward value with numpy, and registers the cotangent rule on the tape.
Broadcasting is numpy's trailing-dimension alignment; cotangents are summed
back over broadcast axes.

Convolutions use cross-correlation semantics (no kernel flip) and are
implemented as loops over kernel taps around BLAS contractions, so no
im2col buffer larger than the input is ever materialized.
"""

import numpy as np

from ..errors import DomainError, ShapeError
from .tensor import Tensor, as_tensor

# Test-only hook: selfcheck fault injection scales one backward rule.
fault_hooks = {}


def _fault(name):
    return fault_hooks.get(name, 1.0)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b, name):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(fwd(a.data, b.data), dtype=a.data.dtype)
    out._attach(
        (a, b),
        lambda g: (
            _unbroadcast(bwd_a(g, a.data, b.data, out.data), a.shape),
            _unbroadcast(bwd_b(g, a.data, b.data, out.data), b.shape),
        ),
        name,
    )
    return out


def _unary(x, fwd, bwd, name):
    x = as_tensor(x)
    out = Tensor(fwd(x.data), dtype=x.data.dtype)
    out._attach((x,), lambda g: (bwd(g, x.data, out.data),), name)
    return out


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    return _binary(a, b, np.add, lambda g, a_, b_, y: g, lambda g, a_, b_, y: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, a_, b_, y: g, lambda g, a_, b_, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, a_, b_, y: g * b_, lambda g, a_, b_, y: g * a_, "mul")


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, a_, b_, y: g / b_,
        lambda g, a_, b_, y: -g * a_ / (b_ * b_),
        "div",
    )


def neg(x):
    return _unary(x, np.negative, lambda g, x_, y: -g, "neg")


def exp(x):
    return _unary(x, np.exp, lambda g, x_, y: g * y, "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    return _unary(x, np.log, lambda g, x_, y: g / x_, "log")


def sqrt(x):
    # Subgradient 0 at the origin so exact zeros do not poison training.
    def bwd(g, x_, y):
        with np.errstate(divide="ignore"):
            d = np.where(y > 0.0, 0.5 / np.where(y > 0.0, y, 1.0), 0.0)
        return g * d

    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt requires nonnegative input")
    return _unary(x, np.sqrt, bwd, "sqrt")


def power(x, exponent):
    """Elementwise x**p for a fixed float exponent."""
    p = float(exponent)
    x = as_tensor(x)
    if p != int(p) and np.any(x.data < 0.0):
        raise DomainError("fractional power requires nonnegative base")

    def bwd(g, x_, y):
        # Subgradient 0 at x=0 when p<1 (derivative diverges there).
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(np.where(x_ == 0.0, 1.0, x_), p - 1.0)
        d = np.where(x_ == 0.0, 0.0 if p < 1.0 else d, d)
        return g * d

    return _unary(x, lambda v: np.power(v, p), bwd, "power")


def absolute(x):
    return _unary(x, np.abs, lambda g, x_, y: g * np.sign(x_), "abs")


def tanh(x):
    return _unary(
        x, np.tanh,
        lambda g, x_, y: g * (1.0 - y * y) * _fault("tanh_backward"),
        "tanh",
    )


def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary(x, fwd, lambda g, x_, y: g * y * (1.0 - y), "sigmoid")


def silu(x):
    x = as_tensor(x)
    s = sigmoid(x).data

    def bwd(g, x_, y):
        return g * (s + x_ * s * (1.0 - s))

    return _unary(x, lambda v: v * s, bwd, "silu")


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, x_, y: g * (x_ > 0.0), "relu")


def softplus(x):
    # log(1 + e^x), computed stably; derivative is the sigmoid.
    def fwd(v):
        return np.logaddexp(0.0, v)

    def bwd(g, x_, y):
        return g / (1.0 + np.exp(-x_))

    return _unary(x, fwd, bwd, "softplus")


def sin(x):
    return _unary(x, np.sin, lambda g, x_, y: g * np.cos(x_), "sin")


def cos(x):
    return _unary(x, np.cos, lambda g, x_, y: -g * np.sin(x_), "cos")


def atan2(y, x):
    """Four-quadrant arctangent; gradient is 0 at the origin by convention."""

    def denom(y_, x_):
        d = x_ * x_ + y_ * y_
        return np.where(d == 0.0, np.inf, d)

    return _binary(
        y, x, np.arctan2,
        lambda g, y_, x_, out: g * x_ / denom(y_, x_),
        lambda g, y_, x_, out: -g * y_ / denom(y_, x_),
        "atan2",
    )


def anti_wrap(x):
    """|x - 2*pi*round(x / 2*pi)|: phase distance invariant to 2*pi jumps."""
    two_pi = 2.0 * np.pi
    x = as_tensor(x)
    w = x.data - two_pi * np.round(x.data / two_pi)
    out = Tensor(np.abs(w), dtype=x.data.dtype)
    out._attach((x,), lambda g: (g * np.sign(w),), "anti_wrap")
    return out


# -- reductions ---------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)
        g_ = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % x.ndim for a in axes):
                g_ = np.expand_dims(g_, ax)
        return (np.broadcast_to(g_, x.shape).astype(x.data.dtype, copy=False),)

    out._attach((x,), bwd, "sum")
    return out


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.shape[ax % x.ndim]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes (operands must be >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, dtype=a.data.dtype)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out._attach((a, b), bwd, "matmul")
    return out


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, dtype=x.data.dtype)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    out._attach((x,), bwd, "softmax")
    return out


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y, dtype=x.data.dtype)

    def bwd(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    out._attach((x,), bwd, "log_softmax")
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last dimension, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes must be ({n},)")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, dtype=x.data.dtype)

    def bwd(g):
        dxhat = g * gamma.data
        dvar_term = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dmu_term = np.mean(dxhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - dmu_term - xhat * dvar_term)
        axes = tuple(range(x.ndim - 1))
        return dx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    out._attach((x, gamma, beta), bwd, "layer_norm")
    return out


# -- shape manipulation -------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), dtype=x.data.dtype)
    out._attach((x,), lambda g: (g.reshape(x.shape),), "reshape")
    return out


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), dtype=x.data.dtype)
    out._attach((x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")
    return out


def flip(x, axis):
    x = as_tensor(x)
    out = Tensor(np.flip(x.data, axis=axis).copy(), dtype=x.data.dtype)
    out._attach((x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")
    return out


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) exceeds extent {x.shape[axis]}")
    idx = tuple(slice(None) if a != axis else slice(start, start + length) for a in range(x.ndim))
    out = Tensor(x.data[idx].copy(), dtype=x.data.dtype)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        gx[idx] = g
        return (gx,)

    out._attach((x,), bwd, "narrow")
    return out


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=tensors[0].data.dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    out._attach(tuple(tensors), bwd, "concat")
    return out


# -- convolutions -------------------------------------------------------------


def _conv_out_len(L, K, stride, dilation, padding):
    keff = (K - 1) * dilation + 1
    out = (L + 2 * padding - keff) // stride + 1
    if out < 1:
        raise ShapeError(
            f"convolution output would be empty: L={L}, K={K}, stride={stride}, "
            f"dilation={dilation}, padding={padding}"
        )
    return out


def conv1d(x, w, stride=1, dilation=1, padding=0, groups=1):
    """Cross-correlation over [B, Cin, L] with kernel [Cout, Cin/groups, K].

    groups must be 1 (dense) or Cin (depthwise, Cout == Cin).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input/kernel, got {x.shape} and {w.shape}")
    if stride < 1 or dilation < 1:
        raise ShapeError("conv1d stride and dilation must be >= 1")
    B, Ci, L = x.shape
    Co, Cig, K = w.shape
    depthwise = groups != 1
    if depthwise:
        if not (groups == Ci == Co and Cig == 1):
            raise ShapeError(f"depthwise conv1d needs groups == Cin == Cout, kernel [C,1,K]; got {w.shape}")
    elif Cig != Ci:
        raise ShapeError(f"conv1d channel mismatch: input Cin={Ci}, kernel Cin={Cig}")
    Lout = _conv_out_len(L, K, stride, dilation, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    y = np.zeros((B, Co, Lout), dtype=x.data.dtype)
    span = stride * (Lout - 1) + 1
    for k in range(K):
        xs = xp[:, :, k * dilation : k * dilation + span : stride]
        if depthwise:
            y += xs * w.data[:, 0, k][None, :, None]
        else:
            y += np.einsum("bil,oi->bol", xs, w.data[:, :, k], optimize=True)

    out = Tensor(y, dtype=x.data.dtype)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(K):
            sl = slice(k * dilation, k * dilation + span, stride)
            xs = xp[:, :, sl]
            if depthwise:
                gw[:, 0, k] = np.einsum("bcl,bcl->c", xs, g, optimize=True)
                gxp[:, :, sl] += g * w.data[:, 0, k][None, :, None]
            else:
                gw[:, :, k] = np.einsum("bol,bil->oi", g, xs, optimize=True)
                gxp[:, :, sl] += np.einsum("bol,oi->bil", g, w.data[:, :, k], optimize=True)
        gx = gxp[:, :, padding : padding + L] if padding else gxp
        return gx, gw

    out._attach((x, w), bwd, "conv1d")
    return out


def conv2d(x, w, stride=(1, 1), dilation=(1, 1), padding=(0, 0)):
    """Cross-correlation over [B, Cin, T, F] with kernel [Cout, Cin, Kt, Kf]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape} and {w.shape}")
    B, Ci, T, F = x.shape
    Co, Ciw, Kt, Kf = w.shape
    if Ciw != Ci:
        raise ShapeError(f"conv2d channel mismatch: input Cin={Ci}, kernel Cin={Ciw}")
    st, sf = stride
    dt, df = dilation
    pt, pf = padding
    To = _conv_out_len(T, Kt, st, dt, pt)
    Fo = _conv_out_len(F, Kf, sf, df, pf)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (pf, pf))) if (pt or pf) else x.data
    y = np.zeros((B, Co, To, Fo), dtype=x.data.dtype)
    span_t = st * (To - 1) + 1
    span_f = sf * (Fo - 1) + 1
    for kt in range(Kt):
        for kf in range(Kf):
            xs = xp[:, :, kt * dt : kt * dt + span_t : st, kf * df : kf * df + span_f : sf]
            y += np.einsum("bitf,oi->botf", xs, w.data[:, :, kt, kf], optimize=True)

    out = Tensor(y, dtype=x.data.dtype)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for kt in range(Kt):
            for kf in range(Kf):
                slt = slice(kt * dt, kt * dt + span_t, st)
                slf = slice(kf * df, kf * df + span_f, sf)
                xs = xp[:, :, slt, slf]
                gw[:, :, kt, kf] = np.einsum("botf,bitf->oi", g, xs, optimize=True)
                gxp[:, :, slt, slf] += np.einsum("botf,oi->bitf", g, w.data[:, :, kt, kf], optimize=True)
        gx = gxp[:, :, pt : pt + T, pf : pf + F] if (pt or pf) else gxp
        return gx, gw

    out._attach((x, w), bwd, "conv2d")
    return out


def conv_transpose2d(x, w, stride=(1, 1)):
    """Adjoint of conv2d: input [B, Cin, T, F], kernel [Cin, Cout, Kt, Kf].

    Output extents are (T-1)*st + Kt by (F-1)*sf + Kf (no padding).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input/kernel, got {x.shape} and {w.shape}")
    B, Ci, T, F = x.shape
    Ciw, Co, Kt, Kf = w.shape
    if Ciw != Ci:
        raise ShapeError(f"conv_transpose2d channel mismatch: input Cin={Ci}, kernel Cin={Ciw}")
    st, sf = stride
    To = (T - 1) * st + Kt
    Fo = (F - 1) * sf + Kf

    y = np.zeros((B, Co, To, Fo), dtype=x.data.dtype)
    span_t = st * (T - 1) + 1
    span_f = sf * (F - 1) + 1
    for kt in range(Kt):
        for kf in range(Kf):
            y[:, :, kt : kt + span_t : st, kf : kf + span_f : sf] += np.einsum(
                "bitf,io->botf", x.data, w.data[:, :, kt, kf], optimize=True
            )

    out = Tensor(y, dtype=x.data.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for kt in range(Kt):
            for kf in range(Kf):
                gs = g[:, :, kt : kt + span_t : st, kf : kf + span_f : sf]
                gx += np.einsum("botf,io->bitf", gs, w.data[:, :, kt, kf], optimize=True)
                gw[:, :, kt, kf] = np.einsum("bitf,botf->io", x.data, gs, optimize=True)
        return gx, gw

    out._attach((x, w), bwd, "conv_transpose2d")
    return out


# -- signal assembly ----------------------------------------------------------


def overlap_add(frames, hop, length):
    """Sum frames [..., T, N] into a signal [..., length] at ``hop`` spacing."""
    frames = as_tensor(frames)
    if frames.ndim < 2:
        raise ShapeError("overlap_add expects [..., T, N] frames")
    T, N = frames.shape[-2], frames.shape[-1]
    need = (T - 1) * hop + N
    if length < need - N + 1:
        raise ShapeError(f"overlap_add target length {length} inconsistent with {T} frames")
    lead = frames.shape[:-2]
    y = np.zeros(lead + (max(length, need),), dtype=frames.data.dtype)
    for t in range(T):
        y[..., t * hop : t * hop + N] += frames.data[..., t, :]
    y = y[..., :length]

    out = Tensor(y, dtype=frames.data.dtype)

    def bwd(g):
        gpad = g
        if length < need:
            pad = [(0, 0)] * (g.ndim - 1) + [(0, need - length)]
            gpad = np.pad(g, pad)
        gf = np.empty(lead + (T, N), dtype=g.dtype)
        for t in range(T):
            gf[..., t, :] = gpad[..., t * hop : t * hop + N]
        return (gf,)

    out._attach((frames,), bwd, "overlap_add")
    return out
