"""Shared-weight dual denoising UNet.

One small UNet processes both views of a latent pair with a single parameter
store; cross-view fusion adapters connect the two paths at configurable
resolution levels.  Conditioning enters three ways: a time embedding added
inside residual blocks, prompt tokens through cross attention, and optional
multi-scale control features added onto the decoder skip connections.

Views are evaluated sequentially (left then right) between fusion points, so
disabling fusion makes the pair forward identical to two independent
single-view passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .fusion import TimeAwareFusion, TimeEmbedding, norm_groups
from .schedule import LatentPair


class UNetError(ValueError):
    """Config/shape violations in the denoiser."""


@dataclass
class DualUNetConfig:
    base_channels: int = 64
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 4])
    attn_levels: list[int] = field(default_factory=lambda: [1, 2])
    time_dim: int = 64
    latent_channels: int = 4
    context_dim: int = 64
    fusion_enabled: bool = True
    fusion_levels: list[int] = field(default_factory=lambda: [1, 2])
    fusion_tau: float = 1.0

    def __post_init__(self) -> None:
        if len(self.channel_mults) < 2:
            raise UNetError("channel_mults needs at least 2 levels")
        levels = set(range(len(self.channel_mults)))
        if not set(self.attn_levels) <= levels:
            raise UNetError(f"attn_levels {self.attn_levels} outside {sorted(levels)}")
        if not set(self.fusion_levels) <= levels:
            raise UNetError(
                f"fusion_levels {self.fusion_levels} outside {sorted(levels)}"
            )
        if self.time_dim % 2:
            raise UNetError("time_dim must be even")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]


@dataclass
class ConditioningBundle:
    """Prompt embeddings, optional control features and the diffusion step.

    ``p_h`` is the merged hard-tag embedding shared by both views; only when
    tag merging is ablated does ``p_h_right`` carry a separate right-view
    sequence.  ``controls`` holds one (left, right) feature pair per UNet
    level, coarsest-last.
    """

    p_h: torch.Tensor
    p_s_l: torch.Tensor
    p_s_r: torch.Tensor
    t: int | torch.Tensor
    controls: Sequence[tuple[torch.Tensor, torch.Tensor]] | None = None
    p_h_right: torch.Tensor | None = None

    @property
    def merged_tags(self) -> bool:
        return self.p_h_right is None

    def hard(self, view: str) -> torch.Tensor:
        if view == "r" and self.p_h_right is not None:
            return self.p_h_right
        return self.p_h

    def context(self, view: str) -> torch.Tensor:
        soft = self.p_s_l if view == "l" else self.p_s_r
        hard = self.hard(view)
        if hard.dim() == 2 and soft.dim() == 3:
            hard = hard.unsqueeze(0).expand(soft.shape[0], -1, -1)
        if hard.dim() == 3 and soft.dim() == 2:
            soft = soft.unsqueeze(0).expand(hard.shape[0], -1, -1)
        return torch.cat([hard, soft], dim=-2)

    def swap(self) -> "ConditioningBundle":
        controls = None
        if self.controls is not None:
            controls = [(r, l) for (l, r) in self.controls]
        p_h = self.p_h_right if self.p_h_right is not None else self.p_h
        p_h_right = self.p_h if self.p_h_right is not None else None
        return ConditioningBundle(
            p_h=p_h,
            p_s_l=self.p_s_r,
            p_s_r=self.p_s_l,
            t=self.t,
            controls=controls,
            p_h_right=p_h_right,
        )


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved sin/cos step embedding: [sin, cos, sin, cos, ...].

    At t = 0 the pattern is [0, 1, 0, 1, ...].
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half, 1)
    )
    angles = t[..., None] * freqs
    emb = torch.zeros(*t.shape, dim, dtype=t.dtype)
    emb[..., 0::2] = torch.sin(angles)
    emb[..., 1::2] = torch.cos(angles)
    return emb


class TimeMap(nn.Module):
    """Sinusoidal step embedding followed by a small learned map."""

    def __init__(self, time_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.time_dim = time_dim
        self.fc1 = nn.Linear(time_dim, time_dim, dtype=dtype)
        self.fc2 = nn.Linear(time_dim, time_dim, dtype=dtype)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        base = sinusoidal_embedding(t, self.time_dim).to(self.fc1.weight.dtype)
        return self.fc2(torch.nn.functional.silu(self.fc1(base)))


def time_embed(t: int | torch.Tensor, weights: TimeMap, T: int | None = None) -> TimeEmbedding:
    """Embed a diffusion step (scalar or batch) as a TimeEmbedding."""
    if isinstance(t, int):
        if t < 0 or (T is not None and t >= T):
            raise UNetError(f"step {t} outside [0, {T})")
        t_tensor = torch.tensor(float(t), dtype=torch.float64)
    else:
        t_tensor = t.to(torch.float64)
        if (t_tensor < 0).any() or (T is not None and (t_tensor >= T).any()):
            raise UNetError("step out of range")
    return TimeEmbedding(weights(t_tensor))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, dtype: torch.dtype):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(c_in), c_in, dtype=dtype)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, dtype=dtype)
        self.time_proj = nn.Linear(time_dim, c_out, dtype=dtype)
        self.norm2 = nn.GroupNorm(norm_groups(c_out), c_out, dtype=dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, dtype=dtype)
        self.skip = (
            nn.Conv2d(c_in, c_out, 1, dtype=dtype) if c_in != c_out else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        if temb.dim() == 1:
            temb = temb.unsqueeze(0).expand(x.shape[0], -1)
        h = h + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class PromptCrossAttention(nn.Module):
    """Single-head cross attention from spatial features onto prompt tokens."""

    def __init__(self, channels: int, context_dim: int, dtype: torch.dtype):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(channels), channels, dtype=dtype)
        self.q = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.k = nn.Linear(context_dim, channels, bias=False, dtype=dtype)
        self.v = nn.Linear(context_dim, channels, bias=False, dtype=dtype)
        self.out = nn.Linear(channels, channels, dtype=dtype)
        self.scale = channels**-0.5

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if context.dim() == 2:
            context = context.unsqueeze(0).expand(b, -1, -1)
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.q(tokens)
        k = self.k(context)
        v = self.v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class DualUNet(nn.Module):
    """Noise predictor applied with one parameter store to both views."""

    def __init__(self, cfg: DualUNetConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        L = cfg.levels
        self.time_map = TimeMap(cfg.time_dim, dtype=dtype)
        self.conv_in = nn.Conv2d(cfg.latent_channels, chs[0], 3, padding=1, dtype=dtype)

        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.downs = nn.ModuleList()
        for i in range(L):
            c_in = chs[i] if i == 0 else chs[i - 1]
            self.enc_res.append(ResBlock(c_in, chs[i], cfg.time_dim, dtype))
            if i in cfg.attn_levels:
                self.enc_attn[str(i)] = PromptCrossAttention(
                    chs[i], cfg.context_dim, dtype
                )
            if i < L - 1:
                self.downs.append(
                    nn.Conv2d(chs[i], chs[i], 3, stride=2, padding=1, dtype=dtype)
                )

        self.mid_res1 = ResBlock(chs[-1], chs[-1], cfg.time_dim, dtype)
        self.mid_attn = (
            PromptCrossAttention(chs[-1], cfg.context_dim, dtype)
            if (L - 1) in cfg.attn_levels
            else None
        )
        self.mid_res2 = ResBlock(chs[-1], chs[-1], cfg.time_dim, dtype)

        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        self.ups = nn.ModuleList()
        for i in range(L - 1, -1, -1):
            self.dec_res.append(ResBlock(2 * chs[i], chs[i], cfg.time_dim, dtype))
            if i in cfg.attn_levels:
                self.dec_attn[str(i)] = PromptCrossAttention(
                    chs[i], cfg.context_dim, dtype
                )
            if i > 0:
                self.ups.append(nn.Conv2d(chs[i], chs[i - 1], 3, padding=1, dtype=dtype))

        self.out_norm = nn.GroupNorm(norm_groups(chs[0]), chs[0], dtype=dtype)
        self.conv_out = nn.Conv2d(chs[0], cfg.latent_channels, 3, padding=1, dtype=dtype)

        self.fusions = nn.ModuleDict()
        if cfg.fusion_enabled:
            for i in cfg.fusion_levels:
                self.fusions[f"enc{i}"] = TimeAwareFusion(
                    chs[i], cfg.time_dim, tau=cfg.fusion_tau, dtype=dtype
                )
                self.fusions[f"dec{i}"] = TimeAwareFusion(
                    chs[i], cfg.time_dim, tau=cfg.fusion_tau, dtype=dtype
                )

    # -- forward machinery ------------------------------------------------

    def _fuse(
        self, site: str, hs: list[torch.Tensor], v_t: TimeEmbedding, fuse: bool
    ) -> None:
        if fuse and len(hs) == 2 and site in self.fusions:
            hs[0], hs[1] = self.fusions[site](hs[0], hs[1], v_t)

    def _check_controls(
        self, controls: Sequence[tuple[torch.Tensor, torch.Tensor]] | None
    ) -> None:
        if controls is not None and len(controls) != self.cfg.levels:
            raise UNetError(
                f"expected {self.cfg.levels} control scales, got {len(controls)}"
            )

    def _forward_views(
        self,
        zs: list[torch.Tensor],
        t: int | torch.Tensor,
        ctxs: list[torch.Tensor],
        controls_per_view: list[Sequence[torch.Tensor] | None],
        fuse: bool,
    ) -> list[torch.Tensor]:
        L = self.cfg.levels
        v_t = time_embed(t, self.time_map)
        temb = v_t.v_t.to(self.conv_in.weight.dtype)

        hs = [self.conv_in(z) for z in zs]
        skips: list[list[torch.Tensor]] = [[] for _ in zs]
        down_idx = 0
        for i in range(L):
            hs = [self.enc_res[i](h, temb) for h in hs]
            if str(i) in self.enc_attn:
                hs = [self.enc_attn[str(i)](h, ctx) for h, ctx in zip(hs, ctxs)]
            self._fuse(f"enc{i}", hs, v_t, fuse)
            for view, h in enumerate(hs):
                skips[view].append(h)
            if i < L - 1:
                hs = [self.downs[down_idx](h) for h in hs]
                down_idx += 1

        hs = [self.mid_res1(h, temb) for h in hs]
        if self.mid_attn is not None:
            hs = [self.mid_attn(h, ctx) for h, ctx in zip(hs, ctxs)]
        hs = [self.mid_res2(h, temb) for h in hs]

        up_idx = 0
        for j, i in enumerate(range(L - 1, -1, -1)):
            new_hs = []
            for view, h in enumerate(hs):
                skip = skips[view][i]
                ctrl = controls_per_view[view]
                if ctrl is not None:
                    skip = skip + ctrl[i]
                new_hs.append(self.dec_res[j](torch.cat([h, skip], dim=1), temb))
            hs = new_hs
            if str(i) in self.dec_attn:
                hs = [self.dec_attn[str(i)](h, ctx) for h, ctx in zip(hs, ctxs)]
            self._fuse(f"dec{i}", hs, v_t, fuse)
            if i > 0:
                hs = [
                    self.ups[up_idx](
                        torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                    )
                    for h in hs
                ]
                up_idx += 1

        return [
            self.conv_out(torch.nn.functional.silu(self.out_norm(h))) for h in hs
        ]

    def forward_view(
        self,
        z: torch.Tensor,
        t: int | torch.Tensor,
        context: torch.Tensor,
        controls: Sequence[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Single-view pass with fusion inactive."""
        if controls is not None and len(controls) != self.cfg.levels:
            raise UNetError("control scale count mismatch")
        return self._forward_views([z], t, [context], [controls], fuse=False)[0]

    def forward(self, z_t: LatentPair, cond: ConditioningBundle) -> LatentPair:
        if z_t.z_l.shape[-3] != self.cfg.latent_channels:
            raise UNetError(
                f"expected {self.cfg.latent_channels} latent channels, got "
                f"{z_t.z_l.shape[-3]}"
            )
        self._check_controls(cond.controls)
        unbatched = z_t.z_l.dim() == 3
        lift = (lambda x: x.unsqueeze(0)) if unbatched else (lambda x: x)
        ctl_l = ctl_r = None
        if cond.controls is not None:
            ctl_l = [lift(pair[0]) for pair in cond.controls]
            ctl_r = [lift(pair[1]) for pair in cond.controls]
        out = self._forward_views(
            [lift(z_t.z_l), lift(z_t.z_r)],
            cond.t,
            [cond.context("l"), cond.context("r")],
            [ctl_l, ctl_r],
            fuse=self.cfg.fusion_enabled,
        )
        if unbatched:
            out = [o.squeeze(0) for o in out]
        return LatentPair(out[0], out[1])


def dual_unet_forward(
    z_t: LatentPair, cond: ConditioningBundle, weights: DualUNet
) -> LatentPair:
    """Predict the injected noise for both views with shared weights."""
    return weights(z_t, cond)
