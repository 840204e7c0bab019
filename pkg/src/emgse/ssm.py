"""Selective state-space sequence modeling.

selective_scan runs the diagonal SSM recurrence

    h_t = exp(dt_t * A) * h_{t-1} + (dt_t * B_t) * u_t,   h_0 = 0
    y_t = C_t . h_t + D * u_t

as a single taped primitive backed by the compiled (or numpy) kernel, so the
autodiff graph never materializes the [B, d, N, L] state history. On top of it:
the gated Mamba block, the flip-based bidirectional wrapper, and the
two-axis time/frequency block used by the enhancement network.
"""

import numpy as np

from . import _kernels
from .autodiff import Tensor, as_tensor, ops, nn
from .errors import ContractError, ShapeError


def selective_scan(u, dt, A, B_in, C_out, D):
    """u, dt: [B, d, L]; A: [d, N]; B_in, C_out: [B, N, L]; D: [d] -> [B, d, L]."""
    u, dt = as_tensor(u), as_tensor(dt)
    A, B_in, C_out, D = as_tensor(A), as_tensor(B_in), as_tensor(C_out), as_tensor(D)
    if u.ndim != 3 or dt.shape != u.shape:
        raise ShapeError(f"u and dt must both be [B, d, L]; got {u.shape} and {dt.shape}")
    Bb, d, L = u.shape
    N = A.shape[1] if A.ndim == 2 else -1
    if A.shape != (d, N):
        raise ShapeError(f"A must be [d, N] with d={d}; got {A.shape}")
    if B_in.shape != (Bb, N, L) or C_out.shape != (Bb, N, L):
        raise ShapeError(
            f"B_in and C_out must be [B, N, L] = {(Bb, N, L)}; got {B_in.shape}, {C_out.shape}"
        )
    if D.shape != (d,):
        raise ShapeError(f"D must be [d] = ({d},); got {D.shape}")
    if np.any(dt.data <= 0.0):
        raise ContractError("selective_scan requires dt > 0 elementwise")

    wat = u.data.dtype
    args = [np.ascontiguousarray(t.data, dtype=wat) for t in (u, dt, A, B_in, C_out, D)]
    y, chk = _kernels.scan_forward(*args)
    out = Tensor(y, dtype=wat)

    def bwd(g):
        g = np.ascontiguousarray(g, dtype=wat)
        return _kernels.scan_backward(*args, chk, g)

    out._attach((u, dt, A, B_in, C_out, D), bwd, "selective_scan")
    return out


class MambaParams(nn.Module):
    """One uni-directional gated SSM block (causal), d_model in -> d_model out.

    dt is produced by a full-rank linear map with bias followed by softplus,
    so dt > 0 always holds. A = -exp(A_log) keeps every decay rate strictly
    negative.
    """

    def __init__(self, d_model, rng, expansion=2, state_dim=16, conv_width=4):
        self.d_model = d_model
        self.d_inner = expansion * d_model
        self.state_dim = state_dim
        self.conv_width = conv_width
        di = self.d_inner
        self.in_proj = nn.Linear(d_model, 2 * di, rng, bias=False)
        # Left pad of k-1 plus truncation back to L makes the conv causal.
        self.conv = nn.Conv1d(di, di, conv_width, rng, groups=di, bias=True,
                              padding=conv_width - 1)
        self.b_proj = nn.Linear(di, state_dim, rng, bias=False)
        self.c_proj = nn.Linear(di, state_dim, rng, bias=False)
        self.dt_proj = nn.Linear(di, di, rng, bias=True)
        # dt starts near softplus(-1) ~= 0.31, a moderate step size.
        self.dt_proj.bias.data[:] = -1.0
        self.A_log = nn.parameter(np.log(np.arange(1, state_dim + 1, dtype=np.float64))
                                  [None, :].repeat(di, axis=0))
        self.D = nn.parameter(np.ones(di))
        self.out_proj = nn.Linear(di, d_model, rng, bias=False)

    def forward(self, x):
        return mamba_block(x, self)


def mamba_block(x, p):
    """Gated selective-SSM block over x: [B, L, d_model], with residual."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != p.d_model:
        raise ShapeError(f"mamba_block expects [B, L, {p.d_model}]; got {x.shape}")
    B, L, _ = x.shape
    di = p.d_inner

    xz = p.in_proj(x)                                  # [B, L, 2*di]
    xs = ops.narrow(xz, 2, 0, di)
    z = ops.narrow(xz, 2, di, di)

    # Symmetric pad of k-1 then truncation to the first L samples = causal conv.
    xc = ops.narrow(p.conv(ops.transpose(xs, (0, 2, 1))), 2, 0, L)
    u = ops.silu(xc)                                   # [B, di, L]

    ut = ops.transpose(u, (0, 2, 1))                   # [B, L, di]
    dt = ops.softplus(p.dt_proj(ut))                   # [B, L, di]
    b_in = ops.transpose(p.b_proj(ut), (0, 2, 1))      # [B, N, L]
    c_out = ops.transpose(p.c_proj(ut), (0, 2, 1))     # [B, N, L]
    A = ops.neg(ops.exp(p.A_log))                      # [di, N]

    y = selective_scan(u, ops.transpose(dt, (0, 2, 1)), A, b_in, c_out, p.D)
    y = ops.mul(y, ops.transpose(ops.silu(z), (0, 2, 1)))
    y = p.out_proj(ops.transpose(y, (0, 2, 1)))        # [B, L, d_model]
    return ops.add(x, y)


class BidirectionalMamba(nn.Module):
    """y = Conv1x1( M_fwd(x) (+)channel flip(M_bwd(flip(x))) ), shape-preserving."""

    def __init__(self, d_model, rng, **kw):
        self.fwd = MambaParams(d_model, rng, **kw)
        self.bwd = MambaParams(d_model, rng, **kw)
        self.merge = nn.Conv1d(2 * d_model, d_model, 1, rng, bias=True)

    def forward(self, x):
        a = self.fwd(x)
        b = ops.flip(self.bwd(ops.flip(x, axis=1)), axis=1)
        y = ops.concat([a, b], axis=2)                 # [B, L, 2d]
        y = self.merge(ops.transpose(y, (0, 2, 1)))    # [B, d, L]
        return ops.transpose(y, (0, 2, 1))


class TfMambaBlock(nn.Module):
    """Sequential time-axis then frequency-axis bidirectional passes on [B, C, T, F]."""

    def __init__(self, channels, rng, **kw):
        self.channels = channels
        self.norm_t = nn.LayerNorm(channels)
        self.time_bi = BidirectionalMamba(channels, rng, **kw)
        self.norm_f = nn.LayerNorm(channels)
        self.freq_bi = BidirectionalMamba(channels, rng, **kw)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"tf block expects [B, {self.channels}, T, F]; got {x.shape}")
        B, C, T, F = x.shape

        xt = ops.reshape(ops.transpose(x, (0, 3, 2, 1)), (B * F, T, C))
        xt = ops.add(xt, self.time_bi(self.norm_t(xt)))
        x = ops.transpose(ops.reshape(xt, (B, F, T, C)), (0, 3, 2, 1))

        xf = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B * T, F, C))
        xf = ops.add(xf, self.freq_bi(self.norm_f(xf)))
        return ops.transpose(ops.reshape(xf, (B, T, F, C)), (0, 3, 1, 2))
