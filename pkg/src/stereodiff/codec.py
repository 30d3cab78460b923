"""Toy deterministic autoencoder between image space and latent space.

Maps [0,1] RGB images to bounded latents at a fixed downsample factor and
back.  There is no stochastic/KL term: diffusion only needs a deterministic
z = E(x).  A bypass mode (factor 1) turns both directions into the identity
so diffusion tests can run without a trained codec.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .images import from_tensor, to_tensor
from .schedule import LatentPair


class CodecError(ValueError):
    """Shape/divisibility violations."""


class LatentCodec(nn.Module):
    """Convolutional encoder/decoder with ``log2(factor)`` stride-2 stages.

    Encoder output is squashed with tanh so latents live in (-1, 1), a
    convenient scale for the noise schedule.  ``bypass=True`` (factor 1,
    3 latent channels) makes encode/decode exact identities.
    """

    def __init__(
        self,
        factor: int = 4,
        latent_channels: int = 4,
        width: int = 64,
        bypass: bool = False,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.bypass = bypass
        if bypass:
            factor, latent_channels = 1, 3
        if factor != 1 and (factor < 2 or factor & (factor - 1)):
            raise CodecError(f"factor must be 1 or a power of two, got {factor}")
        self.factor = factor
        self.latent_channels = latent_channels
        if bypass:
            return
        stages = int(math.log2(factor))
        enc: list[nn.Module] = [nn.Conv2d(3, width // 2, 3, padding=1, dtype=dtype), nn.SiLU()]
        ch = width // 2
        for _ in range(stages):
            enc += [nn.Conv2d(ch, width, 3, stride=2, padding=1, dtype=dtype), nn.SiLU()]
            ch = width
        enc += [
            nn.Conv2d(ch, ch, 3, padding=1, dtype=dtype),
            nn.SiLU(),
            nn.Conv2d(ch, latent_channels, 1, dtype=dtype),
            nn.Tanh(),
        ]
        self.enc = nn.Sequential(*enc)
        dec: list[nn.Module] = [nn.Conv2d(latent_channels, width, 3, padding=1, dtype=dtype), nn.SiLU()]
        for _ in range(stages):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, width, 3, padding=1, dtype=dtype),
                nn.SiLU(),
            ]
        dec += [
            nn.Conv2d(width, width // 2, 3, padding=1, dtype=dtype),
            nn.SiLU(),
            nn.Conv2d(width // 2, 3, 3, padding=1, dtype=dtype),
        ]
        self.dec = nn.Sequential(*dec)

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise CodecError(
                f"image dims {tuple(x.shape[-2:])} not divisible by factor "
                f"{self.factor}"
            )
        if self.bypass:
            return x
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        z = self.enc(x)
        return z.squeeze(0) if squeeze else z

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-3] != self.latent_channels:
            raise CodecError(
                f"expected {self.latent_channels} latent channels, got {z.shape[-3]}"
            )
        if self.bypass:
            return z
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        x = self.dec(z)
        return x.squeeze(0) if squeeze else x


def encode(img: np.ndarray | torch.Tensor, weights: LatentCodec) -> torch.Tensor:
    """Image (H, W, 3) in [0,1] (or a (.., 3, H, W) tensor) to a latent."""
    x = to_tensor(img) if isinstance(img, np.ndarray) else img
    if not weights.bypass:
        x = x.to(next(weights.parameters()).dtype)
    with torch.no_grad():
        return weights.encode_tensor(x)


def decode(z: torch.Tensor, weights: LatentCodec) -> np.ndarray:
    """Latent to an (H, W, 3) image clamped to [0, 1] on export."""
    with torch.no_grad():
        x = weights.decode_tensor(z)
    return from_tensor(x if x.dim() == 3 else x[0])


def encode_pair(imgs: tuple[np.ndarray, np.ndarray], weights: LatentCodec) -> LatentPair:
    return LatentPair(encode(imgs[0], weights), encode(imgs[1], weights))


def pretrain_codec(
    model: LatentCodec,
    dataset: Sequence[np.ndarray],
    epochs: int,
    lr: float = 2e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> list[float]:
    """Minimize L2 reconstruction on a set of images; returns epoch losses."""
    if len(dataset) == 0:
        raise CodecError("empty pretraining dataset")
    if model.bypass:
        raise CodecError("bypass codec has nothing to train")
    if epochs == 0:
        return []
    xs = torch.stack([to_tensor(img) for img in dataset])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history: list[float] = []
    n = len(dataset)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = xs[idx]
            recon = model.decode_tensor(model.encode_tensor(batch))
            loss = torch.nn.functional.mse_loss(recon, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / n)
    return history
