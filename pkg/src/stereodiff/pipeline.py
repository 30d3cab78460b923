"""Training, staged pretraining, inference and evaluation.

Staged order: codec -> tagger -> restorer -> diffusion (control branch +
fusion adapters, plus the base denoiser at desk scale).  The codec, tagger
and restorer are frozen during the diffusion stage; every stochastic choice
is derived from (seed, epoch, step), so runs are reproducible and resumable
from any checkpoint without storing generator state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import LatentCodec, pretrain_codec
from .config import Config
from .controlnet import (
    ControlEmbedding,
    DualControlNet,
    StereoRestorer,
    soan_forward,
    soan_pretrain,
)
from .data import SceneSample
from .degrade import DegradationError
from .images import StereoImagePair, from_tensor, pair_to_tensors, save_png, to_tensor
from .metrics import made, psnr, ssim, write_metric_report
from .schedule import (
    LatentPair,
    NoiseDraw,
    NoiseSchedule,
    add_noise,
    ddim_sample,
    diffusion_loss,
    make_schedule,
)
from .semantics import SemanticExtractor, pretrain_extractor
from .unet import ConditioningBundle, DualUNet, DualUNetConfig


class PipelineError(RuntimeError):
    """Missing components, NaN losses, or config violations."""


@dataclass
class TrainConfig:
    """Diffusion-stage settings distilled from the layered config."""

    batch_size: int = 8
    lr: float = 5e-5
    epochs: int = 10
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 5
    train_base: bool = True
    tascata_enabled: bool = True
    controlnet_mode: str = "soa"
    tag_merge_enabled: bool = True
    shared_noise: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 0:
            raise PipelineError("batch size, lr and epochs must be positive")
        if self.controlnet_mode not in ("none", "plain", "soa"):
            raise PipelineError(f"unknown controlnet mode {self.controlnet_mode!r}")

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainConfig":
        return cls(
            batch_size=int(cfg.get("pipeline.batch_size")),
            lr=float(cfg.get("pipeline.lr")),
            epochs=int(cfg.get("pipeline.epochs")),
            adam_betas=tuple(cfg.get("pipeline.adam_betas")),
            seed=int(cfg.get("pipeline.seed")),
            checkpoint_every=int(cfg.get("pipeline.checkpoint_every")),
            train_base=bool(cfg.get("pipeline.train_base")),
            tascata_enabled=bool(cfg.get("tascata.enabled")),
            controlnet_mode=str(cfg.get("controlnet.mode")),
            tag_merge_enabled=bool(cfg.get("sse.tag_merge_enabled")),
            shared_noise=bool(cfg.get("diffusion.shared_noise")),
        )


@dataclass
class Models:
    """All components of the system; frozen ones are eval()/requires_grad_(False)."""

    codec: LatentCodec
    sse: SemanticExtractor
    soan: StereoRestorer
    unet: DualUNet
    control_embed: ControlEmbedding | None = None
    control: DualControlNet | None = None
    infer_soan: StereoRestorer | None = None

    def frozen_modules(self) -> dict[str, torch.nn.Module]:
        return {"codec": self.codec, "sse": self.sse, "soan": self.soan}

    def freeze_pretrained(self) -> None:
        for m in self.frozen_modules().values():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def trainable_parameters(self, tc: TrainConfig) -> list[torch.nn.Parameter]:
        params: list[torch.nn.Parameter] = []
        for name, p in self.unet.named_parameters():
            is_adapter = name.startswith("fusions.")
            if is_adapter and tc.tascata_enabled:
                params.append(p)
            elif not is_adapter and tc.train_base:
                params.append(p)
        if tc.controlnet_mode != "none":
            if self.control_embed is None or self.control is None:
                raise PipelineError("control branch requested but not built")
            params.extend(self.control_embed.parameters())
            params.extend(self.control.parameters())
        if not params:
            raise PipelineError("no trainable parameters under this ablation")
        return params

    def trainable_state(self, tc: TrainConfig) -> dict[str, torch.Tensor]:
        state = {f"unet.{k}": v for k, v in self.unet.state_dict().items()}
        if tc.controlnet_mode != "none" and self.control is not None:
            state.update({f"embed.{k}": v for k, v in self.control_embed.state_dict().items()})
            state.update({f"control.{k}": v for k, v in self.control.state_dict().items()})
        return state


def unet_config_from(cfg: Config) -> DualUNetConfig:
    return DualUNetConfig(
        base_channels=int(cfg.get("unet.base_channels")),
        channel_mults=list(cfg.get("unet.channel_mults")),
        attn_levels=list(cfg.get("unet.attn_levels")),
        time_dim=int(cfg.get("unet.time_dim")),
        latent_channels=int(cfg.get("unet.latent_channels")),
        context_dim=int(cfg.get("unet.context_dim")),
        fusion_enabled=bool(cfg.get("tascata.enabled")),
        fusion_levels=list(cfg.get("tascata.insertion_levels")),
        fusion_tau=float(cfg.get("tascata.tau")),
    )


def build_models(cfg: Config, seed: int | None = None) -> Models:
    """Construct every component with a deterministic initialization."""
    if seed is None:
        seed = int(cfg.get("pipeline.seed"))
    torch.manual_seed(seed)
    codec = LatentCodec(
        factor=int(cfg.get("codec.factor")),
        latent_channels=int(cfg.get("codec.latent_channels")),
        bypass=bool(cfg.get("codec.bypass")),
    )
    sse = SemanticExtractor(
        input_size=int(cfg.get("sse.input_size")),
        token_dim=int(cfg.get("sse.token_dim")),
        threshold=float(cfg.get("sse.threshold")),
    )
    soan = StereoRestorer(
        width=int(cfg.get("soan.width")),
        groups=int(cfg.get("soan.groups")),
        window=int(cfg.get("soan.window")),
        scale=int(cfg.get("soan.scale")),
    )
    unet = DualUNet(unet_config_from(cfg))
    mode = str(cfg.get("controlnet.mode"))
    control_embed = control = None
    if mode != "none":
        control_embed = ControlEmbedding(
            out_channels=int(cfg.get("unet.base_channels")),
            use_fusion=(mode == "soa"),
        )
        control = DualControlNet(unet.cfg, source=unet)
    return Models(
        codec=codec,
        sse=sse,
        soan=soan,
        unet=unet,
        control_embed=control_embed,
        control=control,
    )


def schedule_from(cfg: Config) -> NoiseSchedule:
    return make_schedule(
        int(cfg.get("diffusion.T")),
        float(cfg.get("diffusion.beta_min")),
        float(cfg.get("diffusion.beta_max")),
    )


# -- conditioning assembly ----------------------------------------------------


def _pad_tags(seqs: list[torch.Tensor], null_row: torch.Tensor) -> torch.Tensor:
    """Stack variable-length hard-tag sequences, padding with the null token."""
    max_n = max(s.shape[0] for s in seqs)
    padded = []
    for s in seqs:
        if s.shape[0] < max_n:
            pad = null_row.expand(max_n - s.shape[0], -1)
            s = torch.cat([s, pad], dim=0)
        padded.append(s)
    return torch.stack(padded)


def build_prompts(
    models: Models, pairs: Sequence[StereoImagePair], merge_tags: bool
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Batched (p_h, p_s_l, p_s_r[, p_h_right]) from LR pairs, no gradients."""
    hard_l, hard_r, soft_l, soft_r = [], [], [], []
    with torch.no_grad():
        for pair in pairs:
            if merge_tags:
                p_s_l, p_s_r, p_h = models.sse.extract(pair)
                hard_l.append(p_h)
                hard_r.append(p_h)
            else:
                p_s_l, p_s_r, p_h_l, p_h_r = models.sse.extract_unmerged(pair)
                hard_l.append(p_h_l)
                hard_r.append(p_h_r)
            soft_l.append(p_s_l)
            soft_r.append(p_s_r)
        null_row = models.sse.tag_table(torch.tensor([models.sse.null_id]))
        p_h = _pad_tags(hard_l, null_row)
        p_h_right = None if merge_tags else _pad_tags(hard_r, null_row)
    return p_h, torch.stack(soft_l), torch.stack(soft_r), p_h_right


def control_inputs(
    models: Models,
    pairs: Sequence[StereoImagePair],
    mode: str,
    scale: int,
    restorer: StereoRestorer | None = None,
) -> tuple[torch.Tensor, torch.Tensor] | None:
    """Image-space tensors feeding the control embedding, per mode.

    ``soa`` runs the frozen restorer, ``plain`` bicubic-upsamples the LR pair,
    ``none`` yields no control input.
    """
    if mode == "none":
        return None
    x_l = torch.stack([pair_to_tensors(p)[0] for p in pairs])
    x_r = torch.stack([pair_to_tensors(p)[1] for p in pairs])
    if mode == "plain":
        up = lambda x: torch.nn.functional.interpolate(
            x, scale_factor=scale, mode="bicubic", align_corners=False
        ).clamp(0.0, 1.0)
        return up(x_l), up(x_r)
    net = restorer if restorer is not None else models.soan
    with torch.no_grad():
        return net.forward_tensors(x_l, x_r)


# -- training ------------------------------------------------------------------


def train_step(
    batch: Sequence[SceneSample],
    models: Models,
    sched: NoiseSchedule,
    opt: torch.optim.Optimizer,
    tc: TrainConfig,
    step_seed: int,
) -> float:
    """One optimizer step on a batch; updates only the trainable sets.

    Raises with a diagnostic if the loss is not finite.
    """
    b = len(batch)
    with torch.no_grad():
        z_l = torch.stack([models.codec.encode_tensor(to_tensor(s.hr.left)) for s in batch])
        z_r = torch.stack([models.codec.encode_tensor(to_tensor(s.hr.right)) for s in batch])

    gen = torch.Generator().manual_seed(step_seed)
    ts = torch.randint(0, sched.T, (b,), generator=gen)
    eps = torch.randn(z_l.shape, generator=gen)
    eps_r = eps if tc.shared_noise else torch.randn(z_l.shape, generator=gen)

    zt_l, zt_r = [], []
    for i in range(b):
        pair = LatentPair(z_l[i], z_r[i])
        t_i = int(ts[i])
        noised_l = add_noise(pair, t_i, NoiseDraw(eps[i], step_seed), sched)
        if tc.shared_noise:
            zt_l.append(noised_l.z_l)
            zt_r.append(noised_l.z_r)
        else:
            noised_r = add_noise(pair, t_i, NoiseDraw(eps_r[i], step_seed), sched)
            zt_l.append(noised_l.z_l)
            zt_r.append(noised_r.z_r)
    z_t = LatentPair(torch.stack(zt_l), torch.stack(zt_r))

    lr_pairs = [s.lr for s in batch]
    p_h, p_s_l, p_s_r, p_h_right = build_prompts(models, lr_pairs, tc.tag_merge_enabled)

    controls = None
    if tc.controlnet_mode != "none":
        imgs = control_inputs(models, lr_pairs, tc.controlnet_mode, models.soan.scale)
        embeds = models.control_embed(*imgs)
        cond_tmp = ConditioningBundle(
            p_h=p_h, p_s_l=p_s_l, p_s_r=p_s_r, t=ts, p_h_right=p_h_right
        )
        feats = models.control(
            z_t, embeds, ts.to(torch.float64), cond_tmp.context("l"), cond_tmp.context("r")
        )
        controls = list(feats)

    cond = ConditioningBundle(
        p_h=p_h,
        p_s_l=p_s_l,
        p_s_r=p_s_r,
        t=ts.to(torch.float64),
        controls=controls,
        p_h_right=p_h_right,
    )
    eps_pred = models.unet(z_t, cond)
    if tc.shared_noise:
        loss = diffusion_loss(eps_pred, NoiseDraw(eps, step_seed))
    else:
        loss = 0.5 * (
            torch.nn.functional.mse_loss(eps_pred.z_l, eps)
            + torch.nn.functional.mse_loss(eps_pred.z_r, eps_r)
        )
    if not torch.isfinite(loss):
        raise PipelineError(
            f"non-finite diffusion loss {float(loss)} at step_seed={step_seed}, "
            f"t={ts.tolist()}"
        )
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7331, epoch]).permutation(n)


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.default_rng([seed, 911, epoch, step]).integers(0, 2**31 - 1))


_CKPT_NAMES = {
    "codec": "codec.npz",
    "sse": "sse.npz",
    "soan_l1": "soan_l1.npz",
    "soan_adv": "soan_adv.npz",
    "diffusion": "diffusion_final.npz",
}


def checkpoint_dir(workdir: str | Path) -> Path:
    return Path(workdir) / "checkpoints"


def load_pretrained(models: Models, workdir: str | Path, cfg: Config) -> None:
    """Load frozen components from the workspace; raises if any is missing."""
    cdir = checkpoint_dir(workdir)
    ckpt.load_module(cdir / _CKPT_NAMES["codec"], models.codec)
    ckpt.load_module(cdir / _CKPT_NAMES["sse"], models.sse)
    soan_path = str(cfg.get("pipeline.train_soan_ckpt")) or str(cdir / _CKPT_NAMES["soan_l1"])
    manifest = ckpt.load_module(soan_path, models.soan)
    models.soan.loss_mode_tag = manifest["extra"].get("loss_mode_tag", "init")
    models.freeze_pretrained()


def train(
    cfg: Config,
    dataset: Sequence[SceneSample],
    workdir: str | Path,
    resume_from: str | Path | None = None,
) -> tuple[list[Path], list[float]]:
    """Diffusion-stage training; returns (checkpoint paths, per-step losses).

    ``epochs=0`` writes only the initialization checkpoint.  Resuming from a
    checkpoint written at epoch k reproduces the exact losses an uninterrupted
    run would produce from epoch k+1 on.
    """
    tc = TrainConfig.from_config(cfg)
    sched = schedule_from(cfg)
    models = build_models(cfg, tc.seed)
    load_pretrained(models, workdir, cfg)

    opt = torch.optim.Adam(models.trainable_parameters(tc), lr=tc.lr, betas=tc.adam_betas)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = restore_diffusion(resume_from, models, tc, opt) + 1

    cdir = checkpoint_dir(workdir)
    cdir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    losses: list[float] = []

    def save(tag: str, epoch: int) -> Path:
        path = cdir / (f"diffusion_{tag}.npz" if tag else _CKPT_NAMES["diffusion"])
        tensors = models.trainable_state(tc)
        opt_tensors, skeleton = ckpt.optimizer_tensors(opt)
        tensors.update(opt_tensors)
        ckpt.save_checkpoint(
            path,
            "diffusion",
            tensors,
            config=cfg.to_dict(),
            extra={
                "epoch": epoch,
                "optimizer": skeleton,
                "controlnet_mode": tc.controlnet_mode,
                "tascata_enabled": tc.tascata_enabled,
                "soan_loss_mode": models.soan.loss_mode_tag,
            },
            rng={"torch": torch.get_rng_state().numpy().tobytes().hex()[:64]},
        )
        paths.append(path)
        return path

    if tc.epochs == 0:
        save("", -1)
        return paths, losses

    n = len(dataset)
    for epoch in range(start_epoch, tc.epochs):
        order = _epoch_order(tc.seed, epoch, n)
        for step, start in enumerate(range(0, n, tc.batch_size)):
            batch = [dataset[int(i)] for i in order[start : start + tc.batch_size]]
            loss = train_step(batch, models, sched, opt, tc, _step_seed(tc.seed, epoch, step))
            losses.append(loss)
        if (epoch + 1) % tc.checkpoint_every == 0 and epoch + 1 < tc.epochs:
            save(f"epoch{epoch:03d}", epoch)
    save("", tc.epochs - 1)
    return paths, losses


def restore_diffusion(
    path: str | Path,
    models: Models,
    tc: TrainConfig,
    opt: torch.optim.Optimizer | None = None,
) -> int:
    """Load trainable tensors (and optimizer) from a diffusion checkpoint."""
    tensors, manifest = ckpt.load_checkpoint(path)

    def restore(module: torch.nn.Module, prefix: str) -> None:
        state = module.state_dict()
        sub = {
            k[len(prefix) :]: v.to(state[k[len(prefix) :]].dtype)
            for k, v in tensors.items()
            if k.startswith(prefix)
        }
        state.update(sub)
        module.load_state_dict(state)

    restore(models.unet, "unet.")
    if tc.controlnet_mode != "none" and models.control is not None:
        restore(models.control_embed, "embed.")
        restore(models.control, "control.")
    if opt is not None and manifest["extra"].get("optimizer"):
        opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
        if opt_tensors:
            ckpt.restore_optimizer(opt, opt_tensors, manifest["extra"]["optimizer"])
    return int(manifest["extra"]["epoch"])


# -- inference ----------------------------------------------------------------


def infer(
    lr_pair: StereoImagePair,
    models: Models,
    cfg: Config,
    steps: int | None = None,
    seed: int = 0,
) -> StereoImagePair:
    """Full super-resolution of one LR pair; deterministic given the seed."""
    tc = TrainConfig.from_config(cfg)
    sched = schedule_from(cfg)
    steps = int(cfg.get("diffusion.infer_steps")) if steps is None else steps
    scale = models.soan.scale
    h_lr, w_lr = lr_pair.left.shape[:2]
    factor = models.codec.factor
    if (h_lr * scale) % factor or (w_lr * scale) % factor:
        raise PipelineError("SR resolution not divisible by the codec factor")
    latent_shape = (
        models.codec.latent_channels,
        h_lr * scale // factor,
        w_lr * scale // factor,
    )

    p_h, p_s_l, p_s_r, p_h_right = build_prompts(models, [lr_pair], tc.tag_merge_enabled)
    embeds = None
    if tc.controlnet_mode != "none":
        imgs = control_inputs(
            models, [lr_pair], tc.controlnet_mode, scale, restorer=models.infer_soan
        )
        with torch.no_grad():
            embeds = models.control_embed(*imgs)

    def denoiser(z: LatentPair, t: int, _cond: object) -> LatentPair:
        controls = None
        if embeds is not None:
            base = ConditioningBundle(
                p_h=p_h, p_s_l=p_s_l, p_s_r=p_s_r, t=t, p_h_right=p_h_right
            )
            z_b = LatentPair(z.z_l.unsqueeze(0), z.z_r.unsqueeze(0))
            feats = models.control(z_b, embeds, t, base.context("l"), base.context("r"))
            controls = [(l.squeeze(0), r.squeeze(0)) for l, r in feats]
        cond = ConditioningBundle(
            p_h=p_h,
            p_s_l=p_s_l,
            p_s_r=p_s_r,
            t=t,
            controls=controls,
            p_h_right=p_h_right,
        )
        return models.unet(z, cond)

    with torch.no_grad():
        z0 = ddim_sample(
            denoiser,
            None,
            steps=steps,
            seed=seed,
            sched=sched,
            shape=latent_shape,
            shared_noise=tc.shared_noise,
        )
        left = models.codec.decode_tensor(z0.z_l)
        right = models.codec.decode_tensor(z0.z_r)
    return StereoImagePair(from_tensor(left), from_tensor(right))


# -- evaluation ---------------------------------------------------------------


def _nearest_upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.kron(img, np.ones((factor, factor, 1), dtype=img.dtype))


def evaluate(
    dataset: Sequence[SceneSample],
    models: Models,
    cfg: Config,
    outdir: str | Path,
    predict_fn: Callable[[SceneSample, int], StereoImagePair] | None = None,
) -> dict[str, float]:
    """Run SR over a dataset and write CSV/JSON reports plus a comparison grid.

    ``predict_fn(sample, index)`` overrides the model path (used e.g. to feed
    ground truth back as the prediction).
    """
    if len(dataset) == 0:
        raise PipelineError("empty evaluation dataset")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    block = int(cfg.get("metrics.block"))
    max_disp = int(cfg.get("metrics.max_disp"))
    cap = float(cfg.get("metrics.psnr_cap"))
    seed = int(cfg.get("pipeline.seed"))

    if predict_fn is None:
        predict_fn = lambda sample, i: infer(sample.lr, models, cfg, seed=seed + i)

    rows = []
    first_grid: np.ndarray | None = None
    for i, sample in enumerate(dataset):
        sr = predict_fn(sample, i)
        rows.append(
            {
                "pair_id": i,
                "psnr_l": psnr(sr.left, sample.hr.left, cap=cap),
                "psnr_r": psnr(sr.right, sample.hr.right, cap=cap),
                "ssim_l": ssim(sr.left, sample.hr.left),
                "ssim_r": ssim(sr.right, sample.hr.right),
                "made": made(sr, sample.hr, max_disp=max_disp, block=block),
            }
        )
        if i == 0:
            factor = sample.hr.left.shape[0] // sample.lr.left.shape[0]
            restored = soan_forward(sample.lr, models.infer_soan or models.soan)
            cols_l = [
                _nearest_upscale(sample.lr.left, factor),
                restored.left,
                sr.left,
                sample.hr.left,
            ]
            cols_r = [
                _nearest_upscale(sample.lr.right, factor),
                restored.right,
                sr.right,
                sample.hr.right,
            ]
            first_grid = np.concatenate(
                [np.concatenate(cols_l, axis=1), np.concatenate(cols_r, axis=1)], axis=0
            )

    aggregate = write_metric_report(rows, outdir / "metrics.csv", outdir / "metrics.json")
    if first_grid is not None:
        save_png(first_grid, outdir / "comparison_grid.png")
    return aggregate
