"""Procedural stereo scenes with exact ground-truth disparity, plus dataset IO.

A scene is a textured background (disparity 0) with a few textured rectangles
at integer disparities: the right view draws every object shifted left by its
disparity, using the same texture array, so correspondence is exact by
construction.  Each sample records the per-pixel disparity of the left view,
a visibility mask (false where the left pixel's match is occluded or outside
the right frame), and the scene's attribute tags.

On disk a dataset is one directory per pair holding the four PNGs, a JSON
sidecar (tags, degradation parameters, seed) and the disparity grid in a
little-endian binary format: magic ``FGRD``, uint32 height, uint32 width,
``H*W`` float32 disparities row-major, then ``H*W`` uint8 validity flags.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import semantics
from .degrade import DegradationParams, degrade_pair, sample_degradation
from .images import StereoImagePair, load_png, save_png
from .semantics import TagSet, TagVocabulary

_FGRID_MAGIC = b"FGRD"

_PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.20, 0.20),
    "green": (0.20, 0.80, 0.25),
    "blue": (0.20, 0.35, 0.85),
    "yellow": (0.90, 0.85, 0.20),
    "cyan": (0.20, 0.80, 0.80),
    "magenta": (0.85, 0.25, 0.80),
    "orange": (0.90, 0.55, 0.15),
    "purple": (0.55, 0.25, 0.75),
}


class DatasetError(ValueError):
    """Generation/IO failures."""


@dataclass
class SceneSample:
    """One dataset element: HR pair, degraded LR pair, exact disparity, tags."""

    hr: StereoImagePair
    lr: StereoImagePair
    disparity: np.ndarray
    disparity_valid: np.ndarray
    tags: TagSet
    params: DegradationParams
    seed: int


def _smoothed_speckle(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    noise = rng.uniform(-amp, amp, size=(h + 1, w + 1))
    # 2x2 box smoothing keeps the field matchable but compressible.
    sm = (noise[:-1, :-1] + noise[1:, :-1] + noise[:-1, 1:] + noise[1:, 1:]) / 4.0
    return sm.astype(np.float32)


def _render_texture(
    rng: np.random.Generator,
    kind: str,
    color: tuple[float, float, float],
    h: int,
    w: int,
    speckle_amp: float,
) -> np.ndarray:
    base = np.empty((h, w, 3), dtype=np.float32)
    c = np.asarray(color, dtype=np.float32)
    shade = c * 0.45
    if kind == "plain":
        base[:] = c
    elif kind == "stripes":
        period = int(rng.integers(3, 7))
        cols = (np.arange(w) // period) % 2
        base[:] = np.where(cols[None, :, None] == 0, c, shade)
    elif kind == "checker":
        cell = int(rng.integers(3, 6))
        yy, xx = np.meshgrid(np.arange(h) // cell, np.arange(w) // cell, indexing="ij")
        base[:] = np.where(((yy + xx) % 2 == 0)[..., None], c, shade)
    elif kind == "dots":
        step = int(rng.integers(4, 7))
        base[:] = c
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        mask = ((yy % step) < 2) & ((xx % step) < 2)
        base[mask] = shade
    elif kind == "gradient":
        axis = int(rng.integers(2))
        n = h if axis == 0 else w
        ramp = np.linspace(0.35, 1.0, n, dtype=np.float32)
        ramp = ramp[:, None, None] if axis == 0 else ramp[None, :, None]
        base[:] = c * ramp
    elif kind == "speckle":
        field = _smoothed_speckle(rng, h, w, 0.18)
        base[:] = np.clip(c[None, None, :] * (0.8 + field[..., None] * 2.0), 0, 1)
    else:
        raise DatasetError(f"unknown texture {kind!r}")
    # Low-amplitude speckle everywhere guarantees unique block matches.
    base += _smoothed_speckle(rng, h, w, speckle_amp)[..., None]
    return np.clip(base, 0.0, 1.0)


def render_scene(
    seed: int, size: int, config: dict[str, Any]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, TagSet]:
    """Render one stereo scene.

    Returns (left, right, disparity, valid, tags); ``valid`` is False where
    the left pixel's correspondence is occluded or left of the right frame.
    """
    rng = np.random.default_rng([int(seed), 424242])
    vocab = TagVocabulary()
    speckle_amp = float(config.get("speckle_amp", 0.05))
    min_disp = int(config.get("min_disp", 2))
    max_disp = int(config.get("max_disp", 8))
    n_obj = int(rng.integers(config.get("min_objects", 2), config.get("max_objects", 4) + 1))

    words: set[str] = set()
    bg_color = semantics.COLOR_TAGS[int(rng.integers(len(semantics.COLOR_TAGS)))]
    bg_kind = semantics.TEXTURE_TAGS[int(rng.integers(len(semantics.TEXTURE_TAGS)))]
    bg = _render_texture(rng, bg_kind, _PALETTE[bg_color], size, size, speckle_amp)
    words |= {bg_color, bg_kind}
    words.add("light-bg" if bg.mean() > 0.5 else "dark-bg")

    left = bg.copy()
    right = bg.copy()
    disparity = np.zeros((size, size), dtype=np.float32)
    # Disparity of the top surface at each right-view pixel (z-buffer).
    right_disp = np.zeros((size, size), dtype=np.float32)

    objects = []
    for _ in range(n_obj):
        ow = int(rng.integers(size // 5, size // 2))
        oh = int(rng.integers(size // 5, size // 2))
        ox = int(rng.integers(0, size - ow + 1))
        oy = int(rng.integers(0, size - oh + 1))
        d = int(rng.integers(min_disp, max_disp + 1))
        color = semantics.COLOR_TAGS[int(rng.integers(len(semantics.COLOR_TAGS)))]
        kind = semantics.TEXTURE_TAGS[int(rng.integers(len(semantics.TEXTURE_TAGS)))]
        tex = _render_texture(rng, kind, _PALETTE[color], oh, ow, speckle_amp)
        objects.append((d, ox, oy, ow, oh, color, kind, tex))

    # Nearer objects (larger disparity) drawn last so they win overlaps.
    for d, ox, oy, ow, oh, color, kind, tex in sorted(objects, key=lambda o: o[0]):
        left[oy : oy + oh, ox : ox + ow] = tex
        disparity[oy : oy + oh, ox : ox + ow] = d
        rx0 = ox - d
        t0 = max(0, -rx0)
        if t0 < ow:
            right[oy : oy + oh, rx0 + t0 : rx0 + ow] = tex[:, t0:]
            right_disp[oy : oy + oh, rx0 + t0 : rx0 + ow] = d
        words |= {color, kind}
        side = max(ow, oh)
        words.add("small" if side < size * 0.28 else "medium" if side < size * 0.4 else "large")
        if ow > 1.25 * oh:
            words.add("wide")
        if oh > 1.25 * ow:
            words.add("tall")
        words.add("near" if d >= (min_disp + max_disp) / 2 else "far")

    # Visibility: the left pixel's surface must still be on top at its
    # matching right-view column.
    cols = np.arange(size)[None, :] - disparity.astype(np.int64)
    valid = cols >= 0
    safe_cols = np.clip(cols, 0, size - 1)
    rows = np.arange(size)[:, None].repeat(size, axis=1)
    valid &= right_disp[rows, safe_cols] == disparity

    words.add("few" if n_obj <= 3 else "many")
    words.add("bright" if left.mean() > 0.45 else "dim")
    words.add("high-contrast" if left.std() > 0.18 else "low-contrast")
    kinds_used = {o[6] for o in objects} | {bg_kind}
    if kinds_used - {"plain", "gradient"}:
        words.add("textured")
    if kinds_used <= {"plain", "gradient"}:
        words.add("smooth")
    if n_obj >= 3 and len(kinds_used) >= 3:
        words.add("busy")

    return left, right, disparity, valid, vocab.ids_for(sorted(words))


def synth_stereo_dataset(
    n: int, seed: int, config: dict[str, Any] | None = None
) -> list[SceneSample]:
    """Generate ``n`` samples; fully determined by (seed, config)."""
    if n < 1:
        raise DatasetError(f"need n >= 1, got {n}")
    cfg = dict(config or {})
    size = int(cfg.get("hr_size", 64))
    factor = int(cfg.get("out_factor", 4))
    degrade_cfg = cfg.get("degradation", {})
    samples = []
    for i in range(n):
        pair_seed = int(np.random.default_rng([int(seed), i]).integers(0, 2**31 - 1))
        left, right, disp, valid, tags = render_scene(pair_seed, size, cfg)
        hr = StereoImagePair(left, right)
        params = sample_degradation(pair_seed, degrade_cfg)
        lr = degrade_pair(hr, params, out_size=(size // factor, size // factor))
        samples.append(
            SceneSample(
                hr=hr,
                lr=lr,
                disparity=disp,
                disparity_valid=valid,
                tags=tags,
                params=params,
                seed=pair_seed,
            )
        )
    return samples


# -- disk format -------------------------------------------------------------


def write_disparity_grid(
    path: str | Path, values: np.ndarray, valid: np.ndarray | None = None
) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise DatasetError(f"disparity grid must be 2-D, got {arr.shape}")
    h, w = arr.shape
    mask = (
        np.ones((h, w), dtype=np.uint8)
        if valid is None
        else np.asarray(valid).astype(np.uint8)
    )
    if mask.shape != (h, w):
        raise DatasetError("valid mask shape mismatch")
    with Path(path).open("wb") as f:
        f.write(_FGRID_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(arr.tobytes(order="C"))
        f.write(mask.tobytes(order="C"))


def read_disparity_grid(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _FGRID_MAGIC:
        raise DatasetError(f"{path} is not a disparity grid file")
    h, w = struct.unpack("<II", raw[4:12])
    n = h * w
    values = np.frombuffer(raw[12 : 12 + 4 * n], dtype="<f4").reshape(h, w).copy()
    mask = np.frombuffer(raw[12 + 4 * n : 12 + 5 * n], dtype=np.uint8).reshape(h, w)
    return values, mask.astype(bool)


def save_dataset(samples: list[SceneSample], root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vocab = TagVocabulary()
    vocab.save(root / "vocabulary.txt")
    for i, s in enumerate(samples):
        d = root / f"pair_{i:05d}"
        d.mkdir(exist_ok=True)
        save_png(s.hr.left, d / "left_hr.png")
        save_png(s.hr.right, d / "right_hr.png")
        save_png(s.lr.left, d / "left_lr.png")
        save_png(s.lr.right, d / "right_lr.png")
        write_disparity_grid(d / "disparity.fgrid", s.disparity, s.disparity_valid)
        meta = {
            "seed": s.seed,
            "tags": vocab.words_for(s.tags),
            "degradation": s.params.to_dict(),
            "disparity_file": "disparity.fgrid",
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(root: str | Path) -> list[SceneSample]:
    root = Path(root)
    vocab = TagVocabulary.load(root / "vocabulary.txt")
    samples = []
    for d in sorted(root.glob("pair_*")):
        meta = json.loads((d / "meta.json").read_text())
        disp, valid = read_disparity_grid(d / meta["disparity_file"])
        samples.append(
            SceneSample(
                hr=StereoImagePair(load_png(d / "left_hr.png"), load_png(d / "right_hr.png")),
                lr=StereoImagePair(load_png(d / "left_lr.png"), load_png(d / "right_lr.png")),
                disparity=disp,
                disparity_valid=valid,
                tags=vocab.ids_for(meta["tags"]),
                params=DegradationParams.from_dict(meta["degradation"]),
                seed=int(meta["seed"]),
            )
        )
    if not samples:
        raise DatasetError(f"no pairs found under {root}")
    return samples
