"""Stereo-consistent synthetic degradation.

One sampled parameter set describes a blur -> resize -> noise -> compress
chain (optionally repeated with milder ranges) and is applied identically to
both views; only the additive-noise realizations may differ per view, drawn
from per-view substreams of the pair seed.  The exact recipe of the cited
degradation model lives in prior work, so every range here is configurable
and the chain is a documented stand-in.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import cv2
import numpy as np
from scipy.fft import dctn, idctn

from .images import StereoImagePair


class DegradationError(ValueError):
    """Invalid ranges or shapes."""


_INTERP = {
    "area": cv2.INTER_AREA,
    "bilinear": cv2.INTER_LINEAR,
    "bicubic": cv2.INTER_CUBIC,
}


@dataclass
class DegradationStage:
    blur_kind: str = "none"  # none | iso | aniso
    blur_sigma_x: float = 0.0
    blur_sigma_y: float = 0.0
    blur_angle: float = 0.0
    resize_scale: float = 1.0
    resize_interp: str = "bilinear"
    noise_sigma: float = 0.0
    compress_quality: float = 0.0  # 0 disables the compression proxy


@dataclass
class DegradationParams:
    """Full description of one degradation draw; serializable to JSON."""

    stages: list[DegradationStage] = field(default_factory=list)
    final_interp: str = "bilinear"
    per_view_noise: bool = True
    seed: int = 0

    @classmethod
    def identity(cls) -> "DegradationParams":
        return cls(stages=[DegradationStage()], per_view_noise=True, seed=0)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DegradationParams":
        stages = [DegradationStage(**s) for s in d.get("stages", [])]
        return cls(
            stages=stages,
            final_interp=d.get("final_interp", "bilinear"),
            per_view_noise=bool(d.get("per_view_noise", True)),
            seed=int(d.get("seed", 0)),
        )


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if hi < lo:
        raise DegradationError(f"invalid range ({lo}, {hi})")
    return float(lo) if hi == lo else float(rng.uniform(lo, hi))


def sample_degradation(seed: int, config: dict[str, Any]) -> DegradationParams:
    """Deterministically draw degradation parameters from configured ranges."""
    rng = np.random.default_rng(int(seed))

    def draw_stage(blur_rng, resize_rng, noise_rng) -> DegradationStage:
        aniso = rng.random() < float(config.get("aniso_prob", 0.3))
        sx = _uniform(rng, *blur_rng)
        sy = _uniform(rng, *blur_rng) if aniso else sx
        return DegradationStage(
            blur_kind="aniso" if aniso else "iso",
            blur_sigma_x=sx,
            blur_sigma_y=sy,
            blur_angle=_uniform(rng, 0.0, math.pi) if aniso else 0.0,
            resize_scale=_uniform(rng, *resize_rng),
            resize_interp=["area", "bilinear", "bicubic"][int(rng.integers(3))],
            noise_sigma=_uniform(rng, *noise_rng),
            compress_quality=_uniform(rng, *config.get("compress_quality", (35, 90))),
        )

    stages = [
        draw_stage(
            config.get("blur_sigma", (0.4, 2.0)),
            config.get("resize_scale", (0.6, 1.2)),
            config.get("noise_sigma", (0.0, 0.05)),
        )
    ]
    if rng.random() < float(config.get("second_stage_prob", 0.8)):
        stages.append(
            draw_stage(
                config.get("second_blur_sigma", (0.2, 1.0)),
                config.get("second_resize_scale", (0.8, 1.2)),
                config.get("second_noise_sigma", (0.0, 0.03)),
            )
        )
    return DegradationParams(
        stages=stages,
        final_interp=["area", "bilinear", "bicubic"][int(rng.integers(3))],
        per_view_noise=bool(config.get("per_view_noise", True)),
        seed=int(seed),
    )


def gaussian_kernel(
    sigma_x: float, sigma_y: float, angle: float, max_size: int = 21
) -> np.ndarray:
    """Normalized (an)isotropic Gaussian kernel with 3-sigma support."""
    sigma_max = max(sigma_x, sigma_y)
    half = min(max(int(math.ceil(3.0 * sigma_max)), 1), max_size // 2)
    ax = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    c, s = math.cos(angle), math.sin(angle)
    xr = c * xx + s * yy
    yr = -s * xx + c * yy
    k = np.exp(-0.5 * ((xr / max(sigma_x, 1e-8)) ** 2 + (yr / max(sigma_y, 1e-8)) ** 2))
    return (k / k.sum()).astype(np.float32)


def _dct_compress(img: np.ndarray, quality: float) -> np.ndarray:
    """JPEG-like proxy: 8x8 blockwise DCT coefficient quantization per channel."""
    base = (101.0 - float(quality)) / 100.0 * 0.4
    h, w, _ = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    hh, ww = padded.shape[:2]
    i_idx = np.arange(8)
    steps = base * (1.0 + (i_idx[:, None] + i_idx[None, :]) / 4.0)
    out = np.empty_like(padded)
    for ch in range(3):
        blocks = (
            padded[:, :, ch]
            .reshape(hh // 8, 8, ww // 8, 8)
            .transpose(0, 2, 1, 3)
            .astype(np.float64)
        )
        coef = dctn(blocks, axes=(-2, -1), norm="ortho")
        coef = np.round(coef / steps) * steps
        rec = idctn(coef, axes=(-2, -1), norm="ortho")
        out[:, :, ch] = rec.transpose(0, 2, 1, 3).reshape(hh, ww)
    return np.clip(out[:h, :w], 0.0, 1.0)


def _resize(img: np.ndarray, size: tuple[int, int], interp: str) -> np.ndarray:
    if interp not in _INTERP:
        raise DegradationError(f"unknown interpolation {interp!r}")
    out = cv2.resize(img, (size[1], size[0]), interpolation=_INTERP[interp])
    return np.clip(out, 0.0, 1.0)


def _degrade_view(
    img: np.ndarray,
    params: DegradationParams,
    view_index: int,
    out_size: tuple[int, int],
) -> np.ndarray:
    x = img.astype(np.float32, copy=True)
    for stage_index, stage in enumerate(params.stages):
        if stage.blur_kind != "none" and max(stage.blur_sigma_x, stage.blur_sigma_y) > 0:
            k = gaussian_kernel(stage.blur_sigma_x, stage.blur_sigma_y, stage.blur_angle)
            x = cv2.filter2D(x, -1, k, borderType=cv2.BORDER_REFLECT)
        if stage.resize_scale != 1.0:
            h = max(int(round(x.shape[0] * stage.resize_scale)), 8)
            w = max(int(round(x.shape[1] * stage.resize_scale)), 8)
            x = _resize(x, (h, w), stage.resize_interp)
        if stage.noise_sigma > 0:
            stream = [params.seed, view_index, stage_index] if params.per_view_noise \
                else [params.seed, 1000 + stage_index]
            rng = np.random.default_rng(stream)
            x = x + rng.normal(0.0, stage.noise_sigma, size=x.shape).astype(np.float32)
            x = np.clip(x, 0.0, 1.0)
        if stage.compress_quality > 0:
            x = _dct_compress(x, stage.compress_quality).astype(np.float32)
    if x.shape[:2] != out_size:
        x = _resize(x, out_size, params.final_interp)
    return np.clip(x, 0.0, 1.0)


def degrade_pair(
    hr: StereoImagePair,
    params: DegradationParams,
    out_size: tuple[int, int] | None = None,
) -> StereoImagePair:
    """Apply one degradation draw identically to both views.

    ``out_size`` is the (H, W) of the result; by default the original size is
    restored, matching the same-size degradation protocol.  Noise draws come
    from per-view substreams of ``params.seed`` (shared realization when
    ``per_view_noise`` is off), everything else is common to the two views.
    """
    target = out_size if out_size is not None else hr.left.shape[:2]
    left = _degrade_view(hr.left, params, 0, target)
    right = _degrade_view(hr.right, params, 1, target)
    return StereoImagePair(left, right)
