"""Time-aware cross-view attention fusion.

The fusion block lets each view's features attend to the other view before
denoising continues.  Per direction it computes a temperature-scaled cross
attention over layer-normalized features, runs the result through two
normalization+convolution paths (one of which mixes in a projected time
embedding), and adds the outcome back to the destination view scaled by a
learnable gain.  Gains start at zero so an untrained block is an exact
identity on both views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
from torch import nn


class FusionError(ValueError):
    """Shape mismatch or invalid temperature."""


@dataclass(frozen=True)
class TimeEmbedding:
    """Embedding vector of the diffusion step, shape (time_dim,) or (B, time_dim)."""

    v_t: torch.Tensor


TimeLike = Union[TimeEmbedding, torch.Tensor]


def _unwrap_time(v_t: TimeLike) -> torch.Tensor:
    return v_t.v_t if isinstance(v_t, TimeEmbedding) else v_t


def norm_groups(channels: int) -> int:
    """Largest group count in {8, 4, 2, 1} dividing ``channels``."""
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def channel_layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-position layer norm across the channel dim, no learned affine.

    ``x`` is (B, C, H, W); statistics are taken over C at each (b, h, w).
    """
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def temperature_attention(
    Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, tau: float | torch.Tensor
) -> torch.Tensor:
    """softmax(tau * Q K^T / sqrt(C)) V over rows; rows sum to one.

    Accepts (N, C) or batched (B, N, C) arguments.
    """
    if Q.shape != K.shape or Q.shape[:-1] != V.shape[:-1]:
        raise FusionError(
            f"attention shape mismatch: Q {tuple(Q.shape)}, K {tuple(K.shape)}, "
            f"V {tuple(V.shape)}"
        )
    if isinstance(tau, torch.Tensor):
        # Keep the autograd path intact when tau itself carries gradients.
        tau_t = tau if tau.requires_grad else tau.to(Q.dtype)
    else:
        tau_t = torch.tensor(float(tau), dtype=Q.dtype)
    if float(tau_t.detach()) <= 0.0:
        raise FusionError(f"temperature must be positive, got {float(tau_t.detach())}")
    c = Q.shape[-1]
    scores = tau_t * (Q @ K.transpose(-1, -2)) / math.sqrt(c)
    return torch.softmax(scores, dim=-1) @ V


class GroupNormConv(nn.Module):
    """Group normalization followed by a 3x3 convolution."""

    def __init__(self, channels: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(channels), channels, dtype=dtype)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.norm(x))

    def zero_(self) -> None:
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)


class TimeAwareFusion(nn.Module):
    """Bidirectional cross-view attention adapter with a time branch.

    One instance carries both directions: per-view query/key projections
    (w1_l, w1_r), per-view value projections (w2_l, w2_r), a shared time
    projection, three norm+conv blocks shared across directions, and scalar
    residual gains initialized to zero.  The temperature is a fixed
    hyperparameter, not trained.
    """

    def __init__(
        self,
        channels: int,
        time_dim: int,
        tau: float = 1.0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if tau <= 0:
            raise FusionError(f"temperature must be positive, got {tau}")
        self.channels = channels
        self.w1_l = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w1_r = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w2_l = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w2_r = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w_time = nn.Linear(time_dim, channels, dtype=dtype)
        self.gc_in = GroupNormConv(channels, dtype=dtype)
        self.gc_time = GroupNormConv(channels, dtype=dtype)
        self.gc_skip = GroupNormConv(channels, dtype=dtype)
        self.gamma_l = nn.Parameter(torch.zeros((), dtype=dtype))
        self.gamma_r = nn.Parameter(torch.zeros((), dtype=dtype))
        self.register_buffer("tau", torch.as_tensor(float(tau), dtype=dtype))

    def tie_directions_(self) -> None:
        """Copy left-role projections onto the right-role ones (mirror init)."""
        with torch.no_grad():
            self.w1_r.weight.copy_(self.w1_l.weight)
            self.w2_r.weight.copy_(self.w2_l.weight)
            self.gamma_r.copy_(self.gamma_l)

    def zero_gc_(self) -> None:
        for gc in (self.gc_in, self.gc_time, self.gc_skip):
            gc.zero_()

    def forward(
        self, z_l: torch.Tensor, z_r: torch.Tensor, v_t: TimeLike
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return fuse_views(z_l, z_r, v_t, self)


def _project(linear: nn.Linear, feat: torch.Tensor) -> torch.Tensor:
    """Apply a channel projection to (B, C, H, W) features, returning (B, N, C)."""
    b, c, h, w = feat.shape
    tokens = feat.reshape(b, c, h * w).transpose(1, 2)
    return linear(tokens)


def tasca(
    z_l: torch.Tensor,
    z_r: torch.Tensor,
    v_t: TimeLike,
    params: TimeAwareFusion,
    direction: str,
) -> torch.Tensor:
    """One direction of the fusion block on (B, C, H, W) feature maps.

    ``direction`` is ``"r_to_l"`` (queries from the left view, output destined
    for the left view) or ``"l_to_r"`` (the mirror).  Both attention paths use
    the same query/key/value assignment; one path additionally mixes in the
    projected time embedding.
    """
    if z_l.shape != z_r.shape:
        raise FusionError(
            f"view shape mismatch: {tuple(z_l.shape)} vs {tuple(z_r.shape)}"
        )
    if direction not in ("r_to_l", "l_to_r"):
        raise FusionError(f"unknown direction {direction!r}")

    b, c, h, w = z_l.shape
    zl_n = channel_layer_norm(z_l)
    zr_n = channel_layer_norm(z_r)
    if direction == "r_to_l":
        q = _project(params.w1_l, zl_n)
        k = _project(params.w1_r, zr_n)
        v = _project(params.w2_r, z_r)
    else:
        q = _project(params.w1_r, zr_n)
        k = _project(params.w1_l, zl_n)
        v = _project(params.w2_l, z_l)

    attended = temperature_attention(q, k, v, params.tau)
    attended = attended.transpose(1, 2).reshape(b, c, h, w)

    time_vec = _unwrap_time(v_t).to(z_l.dtype)
    u = params.w_time(time_vec)
    if u.dim() == 1:
        u = u.unsqueeze(0).expand(b, -1)
    u = u.reshape(b, c, 1, 1)

    return params.gc_time(params.gc_in(attended) + u) + params.gc_skip(attended)


def fuse_views(
    z_l: torch.Tensor,
    z_r: torch.Tensor,
    v_t: TimeLike,
    params: TimeAwareFusion,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Residual cross-view fusion: each view plus its gain-scaled cross term."""
    z_r2l = tasca(z_l, z_r, v_t, params, "r_to_l")
    z_l2r = tasca(z_l, z_r, v_t, params, "l_to_r")
    z_l_star = params.gamma_l * z_r2l + z_l
    z_r_star = params.gamma_r * z_l2r + z_r
    return z_l_star, z_r_star
