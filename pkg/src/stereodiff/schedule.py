"""Noise schedule, forward noising, denoising loss and DDIM sampling.

All operations act on stereo latent pairs and are pure functions of their
inputs.  The forward process follows the standard variance-preserving form

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps

with the same draw ``eps`` applied to both views by default, and the reverse
process is the deterministic DDIM update (eta = 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep ordering."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance table for the forward diffusion process.

    ``alpha_bars[t]`` is the cumulative product of ``1 - betas[s]`` for
    ``s <= t`` and is strictly decreasing in ``t``.
    """

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t: int) -> torch.Tensor:
        """abar at step ``t``; ``t = -1`` is the clean boundary (abar = 1)."""
        if t == -1:
            return torch.ones((), dtype=self.alpha_bars.dtype)
        if not 0 <= t < self.T:
            raise ScheduleError(f"step {t} outside [0, {self.T})")
        return self.alpha_bars[t]


@dataclass
class LatentPair:
    """Left/right latent tensors with identical shapes."""

    z_l: torch.Tensor
    z_r: torch.Tensor

    def __post_init__(self) -> None:
        if self.z_l.shape != self.z_r.shape:
            raise ScheduleError(
                f"latent pair shape mismatch: {tuple(self.z_l.shape)} vs "
                f"{tuple(self.z_r.shape)}"
            )

    @property
    def shape(self) -> torch.Size:
        return self.z_l.shape

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "LatentPair":
        return LatentPair(fn(self.z_l), fn(self.z_r))

    def swap(self) -> "LatentPair":
        return LatentPair(self.z_r, self.z_l)


@dataclass(frozen=True)
class NoiseDraw:
    """A standard-normal draw, fully determined by its seed."""

    eps: torch.Tensor
    seed: int

    @classmethod
    def sample(
        cls,
        shape: Sequence[int],
        seed: int,
        dtype: torch.dtype = torch.float32,
    ) -> "NoiseDraw":
        gen = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(tuple(shape), generator=gen, dtype=dtype)
        return cls(eps=eps, seed=int(seed))


def make_schedule(
    T: int,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    dtype: torch.dtype = torch.float64,
) -> NoiseSchedule:
    """Linear beta schedule between ``beta_min`` and ``beta_max`` over T steps."""
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(
            f"betas must satisfy 0 < beta_min <= beta_max < 1, got "
            f"({beta_min}, {beta_max})"
        )
    betas = torch.linspace(beta_min, beta_max, T, dtype=dtype)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coeffs(
    sched: NoiseSchedule, t: int, like: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    abar = sched.alpha_bar(t).to(like.dtype)
    return torch.sqrt(abar), torch.sqrt(1.0 - abar)


def add_noise(
    pair: LatentPair, t: int, noise: NoiseDraw, sched: NoiseSchedule
) -> LatentPair:
    """Forward-noise both views of ``pair`` to level ``t`` with the same draw."""
    if not 0 <= t < sched.T:
        raise ScheduleError(f"step {t} outside [0, {sched.T})")
    if noise.eps.shape != pair.shape:
        raise ScheduleError(
            f"noise shape {tuple(noise.eps.shape)} does not match pair shape "
            f"{tuple(pair.shape)}"
        )
    c_sig, c_noise = _coeffs(sched, t, pair.z_l)
    eps = noise.eps.to(pair.z_l.dtype)
    return pair.map(lambda z: c_sig * z + c_noise * eps)


def diffusion_loss(eps_pred: LatentPair, noise: NoiseDraw) -> torch.Tensor:
    """MSE between predicted and true noise, averaged over both views."""
    if eps_pred.shape != noise.eps.shape:
        raise ScheduleError(
            f"prediction shape {tuple(eps_pred.shape)} does not match noise "
            f"shape {tuple(noise.eps.shape)}"
        )
    eps = noise.eps.to(eps_pred.z_l.dtype)
    sq_l = (eps_pred.z_l - eps) ** 2
    sq_r = (eps_pred.z_r - eps) ** 2
    return (sq_l.sum() + sq_r.sum()) / (2 * eps.numel())


def ddim_step(
    z_t: LatentPair,
    eps_pred: LatentPair,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> LatentPair:
    """One deterministic DDIM update from level ``t`` down to ``t_prev``.

    ``t_prev = -1`` denotes the clean boundary: the predicted z_0 is returned
    without re-noising.  Applied identically to both views.
    """
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be < t ({t})")
    if not 0 <= t < sched.T:
        raise ScheduleError(f"step {t} outside [0, {sched.T})")
    if t_prev < -1:
        raise ScheduleError(f"t_prev ({t_prev}) below the clean boundary -1")
    if z_t.shape != eps_pred.shape:
        raise ScheduleError("z_t and eps_pred shapes differ")

    sig_t, noi_t = _coeffs(sched, t, z_t.z_l)
    sig_p, noi_p = _coeffs(sched, t_prev, z_t.z_l)

    def step_one(z: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        z0 = (z - noi_t * e) / sig_t
        return sig_p * z0 + noi_p * e

    return LatentPair(step_one(z_t.z_l, eps_pred.z_l), step_one(z_t.z_r, eps_pred.z_r))


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timestep subset from T-1 down to 0."""
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if steps == 1:
        return [T - 1]
    grid = torch.linspace(T - 1, 0, steps)
    ts = sorted({int(round(v.item())) for v in grid}, reverse=True)
    return ts


def ddim_sample(
    model: Callable[[LatentPair, int, object], LatentPair],
    conditioning: object,
    steps: int,
    seed: int,
    sched: NoiseSchedule,
    shape: Sequence[int] | None = None,
    init: LatentPair | None = None,
    dtype: torch.dtype = torch.float32,
    shared_noise: bool = True,
) -> LatentPair:
    """Run the deterministic DDIM chain and return the predicted clean pair.

    The starting latents are drawn from ``seed`` unless ``init`` is given
    (with the default schedule abar_{T-1} ~ 0, pure noise is the standard
    start).  With ``shared_noise`` both views start from the same draw.
    Output is a pure function of (seed/init, model weights, conditioning).
    """
    if init is None:
        if shape is None:
            raise ScheduleError("ddim_sample needs either `shape` or `init`")
        draw = NoiseDraw.sample(shape, seed, dtype=dtype)
        if shared_noise:
            z = LatentPair(draw.eps.clone(), draw.eps.clone())
        else:
            draw_r = NoiseDraw.sample(shape, seed + 1, dtype=dtype)
            z = LatentPair(draw.eps.clone(), draw_r.eps.clone())
    else:
        z = LatentPair(init.z_l.clone(), init.z_r.clone())

    ts = ddim_timesteps(sched.T, steps)
    transitions = list(zip(ts, ts[1:] + [-1]))
    for t, t_prev in transitions:
        eps_pred = model(z, t, conditioning)
        z = ddim_step(z, eps_pred, t, t_prev, sched)
    return z
