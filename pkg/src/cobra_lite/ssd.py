"""Minimal state-space-dual (SSD) sequence layer.

One layer is a selective linear recurrence with a scalar decay per head:

    dt_t   = softplus(W_dt x_t + b_dt)          per-head step size, > 0
    B_t    = W_B x_t,  C_t = W_C x_t            per-head state projections
    abar_t = exp(dt_t * A),  A = -exp(A_log)    decay in (0, 1)
    h_t    = abar_t * h_{t-1} + dt_t * B_t (x) x_t
    y_t    = C_t . h_t + D * x_t
    out    = W_out y

with h_0 = 0, where ``(x)`` is the outer product of the state projection
with the head's input channels. The recurrence multiplies the input by a
lower-triangular semiseparable matrix; ``dense_mixing_matrix`` /
``ssd_forward_dense`` materialize that matrix explicitly as an independent
reference path for equivalence tests.

No depthwise convolution, no extra gating branch, no chunked scan: the
plain sequential recurrence at desk-scale sequence lengths.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DEFAULT_D_STATE = 64
DEFAULT_N_HEADS = 8
DT_BIAS_INIT = 0.5
A_LOG_INIT_RANGE = (math.log(1.0), math.log(16.0))


class SsdLayer(nn.Module):
    """Scalar-decay-per-head selective SSM with skip and output projection."""

    def __init__(self, d_model: int, n_heads: int = DEFAULT_N_HEADS,
                 d_state: int = DEFAULT_D_STATE):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_state = d_state
        self.head_dim = d_model // n_heads

        self.dt_proj = nn.Linear(d_model, n_heads)
        nn.init.constant_(self.dt_proj.bias, DT_BIAS_INIT)
        self.bc_proj = nn.Linear(d_model, 2 * n_heads * d_state, bias=False)
        lo, hi = A_LOG_INIT_RANGE
        self.a_log = nn.Parameter(torch.empty(n_heads).uniform_(lo, hi))
        self.skip = nn.Parameter(torch.ones(d_model))
        self.out_proj = nn.Linear(d_model, d_model, bias=False)

    def _coeffs(self, x: torch.Tensor):
        """Per-timestep (dt, abar, b, c) from input x of shape (B, L, d_model)."""
        bsz, length, _ = x.shape
        dt = F.softplus(self.dt_proj(x))  # (B, L, H)
        bc = self.bc_proj(x).view(bsz, length, self.n_heads, 2, self.d_state)
        b, c = bc[..., 0, :], bc[..., 1, :]  # (B, L, H, N)
        a = -torch.exp(self.a_log)  # (H,), strictly negative
        abar = torch.exp(dt * a)  # (B, L, H), in (0, 1)
        return dt, abar, b, c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Causal scan. x: (L, d_model) or (B, L, d_model), same shape out."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ValueError(f"expected (..., L, {self.d_model}), got {tuple(x.shape)}")
        if x.shape[1] < 1:
            raise ValueError("sequence length must be >= 1")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to SSD layer")

        bsz, length, _ = x.shape
        dt, abar, b, c = self._coeffs(x)
        xh = x.view(bsz, length, self.n_heads, self.head_dim)

        h = x.new_zeros(bsz, self.n_heads, self.d_state, self.head_dim)
        ys = []
        for t in range(length):
            u = (dt[:, t, :, None] * b[:, t]).unsqueeze(-1) * xh[:, t, :, None, :]
            h = abar[:, t, :, None, None] * h + u
            ys.append(torch.einsum("bhn,bhnp->bhp", c[:, t], h))
        y = torch.stack(ys, dim=1).reshape(bsz, length, self.d_model)
        y = y + self.skip * x
        y = self.out_proj(y)
        return y.squeeze(0) if squeeze else y


class SsdBlock(nn.Module):
    """Pre-norm SSD application; the residual addition belongs to the caller."""

    def __init__(self, d_model: int, n_heads: int = DEFAULT_N_HEADS,
                 d_state: int = DEFAULT_D_STATE):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.ssd = SsdLayer(d_model, n_heads=n_heads, d_state=d_state)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ssd(self.norm(x))


# ---------------------------------------------------------------------------
# Dense semiseparable reference path
# ---------------------------------------------------------------------------


def _layer_coeffs_numpy(layer: SsdLayer, x: np.ndarray):
    """Recompute (dt, abar, b, c) in float64 numpy from the layer's weights."""
    w_dt = layer.dt_proj.weight.detach().cpu().numpy().astype(np.float64)
    b_dt = layer.dt_proj.bias.detach().cpu().numpy().astype(np.float64)
    w_bc = layer.bc_proj.weight.detach().cpu().numpy().astype(np.float64)
    a_log = layer.a_log.detach().cpu().numpy().astype(np.float64)

    z = x @ w_dt.T + b_dt  # (L, H)
    dt = np.logaddexp(0.0, z)  # softplus
    bc = (x @ w_bc.T).reshape(x.shape[0], layer.n_heads, 2, layer.d_state)
    b, c = bc[:, :, 0, :], bc[:, :, 1, :]
    abar = np.exp(dt * (-np.exp(a_log)))
    return dt, abar, b, c


def dense_mixing_matrix(abar: np.ndarray, dt: np.ndarray,
                        b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Explicit L x L lower-triangular matrix of one head.

    M[t, s] = (prod_{r=s+1..t} abar[r]) * dt[s] * <c[t], b[s]> for s <= t.
    """
    length = abar.shape[0]
    m = np.zeros((length, length), dtype=np.float64)
    for t in range(length):
        decay = 1.0
        for s in range(t, -1, -1):
            if s < t:
                decay *= abar[s + 1]
            m[t, s] = decay * dt[s] * float(c[t] @ b[s])
    return m


def ssd_forward_dense(layer: SsdLayer, x: np.ndarray) -> np.ndarray:
    """Reference forward via explicit semiseparable matrices, float64.

    x: (L, d_model) float64. Returns (L, d_model).
    """
    if x.ndim != 2:
        raise ValueError(f"expected (L, d_model), got {x.shape}")
    x = x.astype(np.float64)
    dt, abar, b, c = _layer_coeffs_numpy(layer, x)
    xh = x.reshape(x.shape[0], layer.n_heads, layer.head_dim)

    y = np.empty_like(xh)
    for head in range(layer.n_heads):
        m = dense_mixing_matrix(abar[:, head], dt[:, head], b[:, head], c[:, head])
        y[:, head, :] = m @ xh[:, head, :]
    y = y.reshape(x.shape)

    skip = layer.skip.detach().cpu().numpy().astype(np.float64)
    w_out = layer.out_proj.weight.detach().cpu().numpy().astype(np.float64)
    return (y + skip * x) @ w_out.T


def state_norm_bound(layer: SsdLayer, x: torch.Tensor) -> float:
    """Geometric-series bound on ||h_t||_F along a given input sequence.

    With abar <= abar_max < 1 and per-step injection norm <= u_max,
    ||h_t|| <= u_max / (1 - abar_max).
    """
    with torch.no_grad():
        if x.dim() == 2:
            x = x.unsqueeze(0)
        dt, abar, b, _ = layer._coeffs(x)
        xh = x.view(x.shape[0], x.shape[1], layer.n_heads, layer.head_dim)
        u = (dt[..., None] * b).unsqueeze(-1) * xh[..., None, :]  # (B,L,H,N,P)
        u_max = u.flatten(3).norm(dim=-1).max().item()
        abar_max = abar.max().item()
    if abar_max >= 1.0:
        raise ValueError("decay not strictly below 1")
    return u_max / (1.0 - abar_max)
