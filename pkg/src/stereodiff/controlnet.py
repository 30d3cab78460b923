"""Stereo control network: a frozen lightweight restorer feeding a trainable
control branch.

The restorer is a small stereo super-resolution network (local convolution
blocks, windowed and global self attention, spatial attention, cross-view
fusion, pixel-shuffle upsampling).  It is pretrained on its own — with plain
L1 or with an added adversarial term — and stays frozen afterwards.  Its
output passes through a shared conv embedding and a trainable copy of the
denoiser encoder; per-scale features leave through zero-initialized
projections so the control contribution is exactly zero at the start of
diffusion training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .fusion import GroupNormConv, channel_layer_norm, norm_groups, temperature_attention
from .images import StereoImagePair, from_tensor, pair_to_tensors
from .schedule import LatentPair
from .unet import DualUNet, DualUNetConfig, time_embed


class ControlError(ValueError):
    """Shape/config violations in the control path."""


@dataclass
class ControlFeatures:
    """Per-scale (left, right) feature pairs, one per UNet level."""

    scales: list[tuple[torch.Tensor, torch.Tensor]]

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.scales[i]


class CrossViewAttention(nn.Module):
    """Bidirectional cross-view attention with zero-initialized residual gains.

    The time-free counterpart of the fusion adapter: per direction a
    temperature attention over layer-normalized features followed by one
    norm+conv block, scaled by a per-direction gain and added back.
    """

    def __init__(self, channels: int, tau: float = 1.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.w1_l = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w1_r = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w2_l = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.w2_r = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.gc = GroupNormConv(channels, dtype=dtype)
        self.gamma_l = nn.Parameter(torch.zeros((), dtype=dtype))
        self.gamma_r = nn.Parameter(torch.zeros((), dtype=dtype))
        self.register_buffer("tau", torch.as_tensor(float(tau), dtype=dtype))

    def tie_directions_(self) -> None:
        with torch.no_grad():
            self.w1_r.weight.copy_(self.w1_l.weight)
            self.w2_r.weight.copy_(self.w2_l.weight)
            self.gamma_r.copy_(self.gamma_l)

    def _direction(
        self, q_feat: torch.Tensor, kv_feat: torch.Tensor, w1_q, w1_k, w2
    ) -> torch.Tensor:
        b, c, h, w = q_feat.shape
        flat = lambda x: x.reshape(b, c, h * w).transpose(1, 2)
        q = w1_q(flat(channel_layer_norm(q_feat)))
        k = w1_k(flat(channel_layer_norm(kv_feat)))
        v = w2(flat(kv_feat))
        out = temperature_attention(q, k, v, self.tau)
        return self.gc(out.transpose(1, 2).reshape(b, c, h, w))

    def forward(
        self, z_l: torch.Tensor, z_r: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if z_l.shape != z_r.shape:
            raise ControlError(
                f"view shape mismatch: {tuple(z_l.shape)} vs {tuple(z_r.shape)}"
            )
        r2l = self._direction(z_l, z_r, self.w1_l, self.w1_r, self.w2_r)
        l2r = self._direction(z_r, z_l, self.w1_r, self.w1_l, self.w2_l)
        return self.gamma_l * r2l + z_l, self.gamma_r * l2r + z_r


def scatm(
    z_l: torch.Tensor, z_r: torch.Tensor, weights: CrossViewAttention
) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional wrapper over the bidirectional cross-view attention."""
    return weights(z_l, z_r)


# -- restorer blocks -------------------------------------------------------


class LocalConvBlock(nn.Module):
    def __init__(self, channels: int, dtype: torch.dtype):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(torch.nn.functional.silu(self.conv1(x)))


class SelfAttentionBlock(nn.Module):
    """Single-head spatial self attention; ``window`` limits it to local tiles."""

    def __init__(self, channels: int, window: int | None, dtype: torch.dtype):
        super().__init__()
        self.window = window
        self.norm = nn.GroupNorm(norm_groups(channels), channels, dtype=dtype)
        self.qkv = nn.Conv2d(channels, channels * 3, 1, dtype=dtype)
        self.out = nn.Conv2d(channels, channels, 1, dtype=dtype)
        self.scale = channels**-0.5

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        flat = lambda t: t.reshape(b, c, h * w).transpose(1, 2)
        attn = torch.softmax(flat(q) @ flat(k).transpose(1, 2) * self.scale, dim=-1)
        out = (attn @ flat(v)).transpose(1, 2).reshape(b, c, h, w)
        return self.out(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.window is None:
            return x + self._attend(x)
        b, c, h, w = x.shape
        s = self.window
        if h % s or w % s:
            raise ControlError(f"spatial dims ({h},{w}) not divisible by window {s}")
        tiles = (
            x.reshape(b, c, h // s, s, w // s, s)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b * (h // s) * (w // s), c, s, s)
        )
        tiles = tiles + self._attend(tiles)
        return (
            tiles.reshape(b, h // s, w // s, c, s, s)
            .permute(0, 3, 1, 4, 2, 5)
            .reshape(b, c, h, w)
        )


class SpatialAttentionBlock(nn.Module):
    """Reduced-width spatial gating: features are scaled by a learned mask."""

    def __init__(self, channels: int, dtype: torch.dtype):
        super().__init__()
        mid = max(channels // 4, 4)
        self.reduce = nn.Conv2d(channels, mid, 1, dtype=dtype)
        self.down = nn.Conv2d(mid, mid, 3, stride=2, padding=1, dtype=dtype)
        self.mix = nn.Conv2d(mid, mid, 3, padding=1, dtype=dtype)
        self.expand = nn.Conv2d(mid, channels, 1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.reduce(x)
        m = self.mix(torch.nn.functional.silu(self.down(f)))
        m = torch.nn.functional.interpolate(
            m, size=f.shape[-2:], mode="bilinear", align_corners=False
        )
        mask = torch.sigmoid(self.expand(torch.nn.functional.silu(f + m)))
        return x * mask


class RestorerGroup(nn.Module):
    """One restorer stage: local conv, meso/global attention, gating, fusion."""

    def __init__(self, channels: int, window: int, dtype: torch.dtype):
        super().__init__()
        self.lcb = LocalConvBlock(channels, dtype)
        self.meso = SelfAttentionBlock(channels, window, dtype)
        self.glob = SelfAttentionBlock(channels, None, dtype)
        self.esa = SpatialAttentionBlock(channels, dtype)
        self.fuse = CrossViewAttention(channels, dtype=dtype)

    def forward(
        self, x_l: torch.Tensor, x_r: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        per_view = lambda x: self.esa(self.glob(self.meso(self.lcb(x))))
        return self.fuse(per_view(x_l), per_view(x_r))


class StereoRestorer(nn.Module):
    """Ultra-light stereo SR network: shared weights, cross-view fusion, x4 out.

    ``loss_mode_tag`` records how the weights were pretrained ("L1",
    "adversarial", or "init" before any training) and travels with the
    checkpoint manifest.
    """

    def __init__(
        self,
        width: int = 32,
        groups: int = 2,
        window: int = 4,
        scale: int = 4,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.scale = scale
        self.loss_mode_tag = "init"
        self.head = nn.Conv2d(3, width, 3, padding=1, dtype=dtype)
        self.groups = nn.ModuleList(
            RestorerGroup(width, window, dtype) for _ in range(groups)
        )
        self.tail_mix = nn.Conv2d(width, width, 3, padding=1, dtype=dtype)
        self.tail_up = nn.Conv2d(width, 3 * scale * scale, 3, padding=1, dtype=dtype)

    def forward_tensors(
        self, x_l: torch.Tensor, x_r: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 3, h, w) pair -> (B, 3, h*scale, w*scale) pair, clamped to [0,1]."""
        if x_l.shape != x_r.shape:
            raise ControlError("view shape mismatch")
        base_l = torch.nn.functional.interpolate(
            x_l, scale_factor=self.scale, mode="bilinear", align_corners=False
        )
        base_r = torch.nn.functional.interpolate(
            x_r, scale_factor=self.scale, mode="bilinear", align_corners=False
        )
        h_l, h_r = self.head(x_l), self.head(x_r)
        for group in self.groups:
            h_l, h_r = group(h_l, h_r)
        up = lambda h: torch.nn.functional.pixel_shuffle(
            self.tail_up(torch.nn.functional.silu(self.tail_mix(h))), self.scale
        )
        return (
            torch.clamp(up(h_l) + base_l, 0.0, 1.0),
            torch.clamp(up(h_r) + base_r, 0.0, 1.0),
        )


def soan_forward(lr_pair: StereoImagePair, weights: StereoRestorer) -> StereoImagePair:
    """Restore one LR pair to the upscaled resolution."""
    x_l, x_r = pair_to_tensors(lr_pair, next(weights.parameters()).dtype)
    with torch.no_grad():
        y_l, y_r = weights.forward_tensors(x_l.unsqueeze(0), x_r.unsqueeze(0))
    return StereoImagePair(from_tensor(y_l[0]), from_tensor(y_r[0]))


class PatchDiscriminator(nn.Module):
    """Tiny patch discriminator used only inside adversarial pretraining."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1, dtype=dtype),
            nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, stride=2, padding=1, dtype=dtype),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 1, 3, padding=1, dtype=dtype),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def soan_pretrain(
    model: StereoRestorer,
    dataset: Sequence[tuple[StereoImagePair, StereoImagePair]],
    loss_mode: str = "L1",
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 8,
    adv_weight: float = 0.01,
    seed: int = 0,
) -> list[float]:
    """Train the restorer on (LR pair, HR pair) samples; returns epoch losses.

    In adversarial mode a patch discriminator is trained jointly and then
    discarded; only ``loss_mode_tag`` records the difference.  ``epochs=0``
    leaves the weights untouched.
    """
    if loss_mode not in ("L1", "adversarial"):
        raise ControlError(f"unknown loss mode {loss_mode!r}")
    if len(dataset) == 0:
        raise ControlError("empty pretraining dataset")
    model.loss_mode_tag = loss_mode
    if epochs == 0:
        return []

    lr_l = torch.stack([pair_to_tensors(s[0])[0] for s in dataset])
    lr_r = torch.stack([pair_to_tensors(s[0])[1] for s in dataset])
    hr_l = torch.stack([pair_to_tensors(s[1])[0] for s in dataset])
    hr_r = torch.stack([pair_to_tensors(s[1])[1] for s in dataset])

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    disc = None
    opt_d = None
    if loss_mode == "adversarial":
        torch.manual_seed(seed + 1)
        disc = PatchDiscriminator()
        opt_d = torch.optim.Adam(disc.parameters(), lr=lr)
    bce = nn.BCEWithLogitsLoss()

    history: list[float] = []
    n = len(dataset)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            sr_l, sr_r = model.forward_tensors(lr_l[idx], lr_r[idx])
            l1 = torch.nn.functional.l1_loss(sr_l, hr_l[idx]) + \
                torch.nn.functional.l1_loss(sr_r, hr_r[idx])
            loss = l1 / 2
            if disc is not None:
                fake_logits = disc(torch.cat([sr_l, sr_r]))
                g_adv = bce(fake_logits, torch.ones_like(fake_logits))
                loss = loss + adv_weight * g_adv
            opt.zero_grad()
            loss.backward()
            opt.step()

            if disc is not None and opt_d is not None:
                with torch.no_grad():
                    fake = torch.cat(model.forward_tensors(lr_l[idx], lr_r[idx]))
                real = torch.cat([hr_l[idx], hr_r[idx]])
                d_loss = bce(disc(real), torch.ones_like(disc(real))) + bce(
                    disc(fake), torch.zeros_like(disc(fake))
                )
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            total += float(loss.detach()) * len(idx)
        history.append(total / n)
    return history


# -- control branch ---------------------------------------------------------


class ControlEmbedding(nn.Module):
    """Three shared conv layers mapping restored images to latent resolution,
    optionally followed by cross-view fusion."""

    def __init__(
        self,
        out_channels: int,
        use_fusion: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1, dtype=dtype)
        self.conv3 = nn.Conv2d(32, out_channels, 3, padding=1, dtype=dtype)
        self.fuse = CrossViewAttention(out_channels, dtype=dtype) if use_fusion else None

    def forward(
        self, x_l: torch.Tensor, x_r: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        act = torch.nn.functional.silu
        embed = lambda x: self.conv3(act(self.conv2(act(self.conv1(x)))))
        e_l, e_r = embed(x_l), embed(x_r)
        if self.fuse is not None:
            e_l, e_r = self.fuse(e_l, e_r)
        return e_l, e_r


def control_embed(
    sr_pair: StereoImagePair, weights: ControlEmbedding
) -> tuple[torch.Tensor, torch.Tensor]:
    """Embed one restored pair into latent-resolution control tensors."""
    x_l, x_r = pair_to_tensors(sr_pair, next(weights.parameters()).dtype)
    return weights(x_l.unsqueeze(0), x_r.unsqueeze(0))


class DualControlNet(nn.Module):
    """Trainable copy of the denoiser encoder emitting per-scale features.

    Each scale's output passes through a zero-initialized 1x1 projection, so a
    freshly built control branch contributes exactly nothing.  The copy
    processes the two views with shared weights and no cross-view fusion
    (stereo mixing happens in the restorer and the embedding).
    """

    def __init__(
        self,
        cfg: DualUNetConfig,
        source: DualUNet | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.cfg = cfg
        base = DualUNet(
            DualUNetConfig(
                base_channels=cfg.base_channels,
                channel_mults=list(cfg.channel_mults),
                attn_levels=list(cfg.attn_levels),
                time_dim=cfg.time_dim,
                latent_channels=cfg.latent_channels,
                context_dim=cfg.context_dim,
                fusion_enabled=False,
            ),
            dtype=dtype,
        )
        if source is not None:
            own = base.state_dict()
            donor = {k: v for k, v in source.state_dict().items() if k in own}
            own.update(donor)
            base.load_state_dict(own)
        self.time_map = base.time_map
        self.conv_in = base.conv_in
        self.enc_res = base.enc_res
        self.enc_attn = base.enc_attn
        self.downs = base.downs
        self.zero_projs = nn.ModuleList()
        for ch in cfg.channels:
            proj = nn.Conv2d(ch, ch, 1, dtype=dtype)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.zero_projs.append(proj)

    def _encode_view(
        self,
        z: torch.Tensor,
        embed: torch.Tensor,
        temb: torch.Tensor,
        ctx: torch.Tensor,
    ) -> list[torch.Tensor]:
        h = self.conv_in(z) + embed
        feats = []
        down_idx = 0
        for i in range(self.cfg.levels):
            h = self.enc_res[i](h, temb)
            if str(i) in self.enc_attn:
                h = self.enc_attn[str(i)](h, ctx)
            feats.append(self.zero_projs[i](h))
            if i < self.cfg.levels - 1:
                h = self.downs[down_idx](h)
                down_idx += 1
        return feats

    def forward(
        self,
        z_t: LatentPair,
        embed: tuple[torch.Tensor, torch.Tensor],
        t: int | torch.Tensor,
        ctx_l: torch.Tensor,
        ctx_r: torch.Tensor,
    ) -> ControlFeatures:
        unbatched = z_t.z_l.dim() == 3
        lift = lambda x: x.unsqueeze(0) if x.dim() == 3 else x
        temb = time_embed(t, self.time_map).v_t.to(self.conv_in.weight.dtype)
        e_l, e_r = embed
        if e_l.shape[-2:] != z_t.z_l.shape[-2:]:
            raise ControlError(
                f"embedding spatial size {tuple(e_l.shape[-2:])} does not match "
                f"latents {tuple(z_t.z_l.shape[-2:])}"
            )
        feats_l = self._encode_view(lift(z_t.z_l), lift(e_l), temb, ctx_l)
        feats_r = self._encode_view(lift(z_t.z_r), lift(e_r), temb, ctx_r)
        if unbatched:
            feats_l = [f.squeeze(0) for f in feats_l]
            feats_r = [f.squeeze(0) for f in feats_r]
        return ControlFeatures(list(zip(feats_l, feats_r)))


def dual_control_forward(
    z_t: LatentPair,
    embed: tuple[torch.Tensor, torch.Tensor],
    t: int | torch.Tensor,
    ctx_l: torch.Tensor,
    ctx_r: torch.Tensor,
    weights: DualControlNet,
) -> ControlFeatures:
    """Multi-scale control features for both views."""
    return weights(z_t, embed, t, ctx_l, ctx_r)
