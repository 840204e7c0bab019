"""Parameterized layers on top of the primitive ops.

Modules register parameters and submodules by plain attribute assignment;
``named_parameters`` walks the attribute tree (lists included) in insertion
order, which makes parameter order deterministic for a fixed construction
order. All random init draws from an explicit numpy Generator.
"""

import numpy as np

from .tensor import Tensor, get_default_dtype
from . import ops


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix=name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(array):
    return Tensor(np.asarray(array), requires_grad=True, dtype=get_default_dtype())


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ W + b with W of shape [d_in, d_out]."""

    def __init__(self, d_in, d_out, rng, bias=True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = parameter(_uniform(rng, (d_in, d_out), bound))
        self.bias = parameter(_uniform(rng, (d_out,), bound)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of [B, C, T, F] maps."""

    def __init__(self, channels, eps=1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        xt = ops.transpose(x, (0, 2, 3, 1))
        yt = ops.layer_norm(xt, self.gamma, self.beta, eps=self.eps)
        return ops.transpose(yt, (0, 3, 1, 2))


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1, padding=0,
                 groups=1, bias=True):
        fan_in = (c_in // groups) * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = parameter(_uniform(rng, (c_out, c_in // groups, kernel), bound))
        self.bias = parameter(_uniform(rng, (c_out, 1), bound)) if bias else None
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups

    def forward(self, x):
        y = ops.conv1d(x, self.weight, stride=self.stride, dilation=self.dilation,
                       padding=self.padding, groups=self.groups)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1), dilation=(1, 1),
                 padding=(0, 0), bias=True):
        kt, kf = kernel
        fan_in = c_in * kt * kf
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = parameter(_uniform(rng, (c_out, c_in, kt, kf), bound))
        self.bias = parameter(_uniform(rng, (c_out, 1, 1), bound)) if bias else None
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x):
        y = ops.conv2d(x, self.weight, stride=self.stride, dilation=self.dilation,
                       padding=self.padding)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1), bias=True):
        kt, kf = kernel
        fan_in = c_in * kt * kf
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = parameter(_uniform(rng, (c_in, c_out, kt, kf), bound))
        self.bias = parameter(_uniform(rng, (c_out, 1, 1), bound)) if bias else None
        self.stride = stride

    def forward(self, x):
        y = ops.conv_transpose2d(x, self.weight, stride=self.stride)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class LstmCell(Module):
    """Single-step LSTM cell; gates in (i, f, g, o) order."""

    def __init__(self, d_in, d_hidden, rng):
        bound = 1.0 / np.sqrt(d_hidden)
        self.w_ih = parameter(_uniform(rng, (d_in, 4 * d_hidden), bound))
        self.w_hh = parameter(_uniform(rng, (d_hidden, 4 * d_hidden), bound))
        self.bias = parameter(_uniform(rng, (4 * d_hidden,), bound))
        self.d_hidden = d_hidden

    def forward(self, x, h, c):
        d = self.d_hidden
        z = ops.add(ops.add(ops.matmul(x, self.w_ih), ops.matmul(h, self.w_hh)), self.bias)
        i = ops.sigmoid(ops.narrow(z, -1, 0, d))
        f = ops.sigmoid(ops.narrow(z, -1, d, d))
        g = ops.tanh(ops.narrow(z, -1, 2 * d, d))
        o = ops.sigmoid(ops.narrow(z, -1, 3 * d, d))
        c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
        h_new = ops.mul(o, ops.tanh(c_new))
        return h_new, c_new
