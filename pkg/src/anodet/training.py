"""Adversarial training of the translator on two healthy domains.

One optimization step runs the autoencoding, cross-translation, latent
reconstruction, and cycle paths on one batch per domain, updating the
discriminators once and the generators once. All randomness (batch order,
style draws) is derived from (seed, step), so a run is resumable and two
runs with the same seed produce identical metric sequences on CPU.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from anodet import images
from anodet.errors import InsufficientDataError, NumericError, ShapeError
from anodet.pipeline import Manifest
from anodet.translator import (ModelConfig, TranslatorModel, load_checkpoint,
                               sample_style, save_checkpoint)

METRICS_NAME = "metrics.csv"
CHECKPOINT_NAME = "checkpoint.pt"

# rng stream tags for per-step seeds
_S_BATCH_X = 0
_S_BATCH_Y = 1
_S_STYLE = 2


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the generator objective's terms."""

    adv: float = 1.0
    img_recon: float = 10.0
    content_recon: float = 1.0
    style_recon: float = 1.0
    cycle: float = 10.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")
        if self.adv <= 0:
            raise ValueError("adv weight must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; step counts and batch size are dataset-dependent."""

    steps: int = 5000
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay_every: int = 100_000
    lr_decay: float = 0.5
    checkpoint_every: int = 1000
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


def _stream_seed(seed: int, stream: int, step: int) -> int:
    # One stable 63-bit seed per (run seed, purpose, step).
    state = np.random.SeedSequence([seed, stream, step]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def recon_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def _scale_list(logits):
    return logits if isinstance(logits, (list, tuple)) else [logits]


def adversarial_losses(real_logits, fake_logits):
    """Least-squares GAN losses, averaged across discriminator scales.

    Returns (d_loss, g_loss); the discriminator pushes real logits to 1 and
    fake to 0, the generator pushes fake logits to 1.
    """
    real = _scale_list(real_logits)
    fake = _scale_list(fake_logits)
    for t in (*real, *fake):
        if not torch.isfinite(t).all():
            raise NumericError("non-finite discriminator logits")
    d = sum(0.5 * ((r - 1) ** 2).mean() + 0.5 * (f ** 2).mean()
            for r, f in zip(real, fake)) / len(real)
    g = sum(((f - 1) ** 2).mean() for f in fake) / len(fake)
    return d, g


def cycle_images(x: torch.Tensor, model: TranslatorModel, source: str = "X",
                 style: torch.Tensor | None = None,
                 rng: torch.Generator | None = None) -> torch.Tensor:
    """Map an image to the other domain with a drawn style and back to its own.

    The return trip reuses the image's own style code, so under a converged
    model the output reproduces the input.
    """
    target = "Y" if source == "X" else "X"
    away = model.translate(x, source, target, style=style, rng=rng)
    back_style = model.encode_style(x, source)
    return model.decode(model.encode_content(away, target), back_style, source)


def generator_losses(model: TranslatorModel, x: torch.Tensor, y: torch.Tensor,
                     s_x: torch.Tensor, s_y: torch.Tensor,
                     weights: LossWeights):
    """Total generator objective and per-term raw values for one batch pair.

    Terms with zero weight are skipped and reported as 0.0. Kept free of
    optimizer state so the same code path serves training and the
    finite-difference gradient check.
    """
    w = weights
    c_x = model.encode_content(x, "X")
    c_y = model.encode_content(y, "Y")
    own_s_x = model.encode_style(x, "X")
    own_s_y = model.encode_style(y, "Y")

    x2y = model.decode(c_x, s_y, "Y")
    y2x = model.decode(c_y, s_x, "X")
    _, g_adv_y = adversarial_losses(model.disc["Y"](y), model.disc["Y"](x2y))
    _, g_adv_x = adversarial_losses(model.disc["X"](x), model.disc["X"](y2x))
    g_adv = g_adv_x + g_adv_y

    zero = x.new_zeros(())
    img = zero
    if w.img_recon > 0:
        img = (recon_loss(x, model.decode(c_x, own_s_x, "X"))
               + recon_loss(y, model.decode(c_y, own_s_y, "Y")))

    content = zero
    style = zero
    cyc = zero
    need_content_back = w.content_recon > 0 or w.cycle > 0
    if need_content_back:
        c_x_back = model.encode_content(x2y, "Y")
        c_y_back = model.encode_content(y2x, "X")
        if w.content_recon > 0:
            content = recon_loss(c_x_back, c_x) + recon_loss(c_y_back, c_y)
        if w.cycle > 0:
            cyc = (recon_loss(x, model.decode(c_x_back, own_s_x, "X"))
                   + recon_loss(y, model.decode(c_y_back, own_s_y, "Y")))
    if w.style_recon > 0:
        style = (recon_loss(model.encode_style(x2y, "Y"), s_y)
                 + recon_loss(model.encode_style(y2x, "X"), s_x))

    total = (w.adv * g_adv + w.img_recon * img + w.content_recon * content
             + w.style_recon * style + w.cycle * cyc)
    metrics = {
        "g_adv": float(g_adv.detach()), "img_recon": float(img.detach()),
        "content_recon": float(content.detach()), "style_recon": float(style.detach()),
        "cycle": float(cyc.detach()), "g_total": float(total.detach()),
    }
    return total, metrics, (x2y, y2x)


class PatchBatcher:
    """Deterministic batch stream over one domain's patches, cached in RAM.

    Batch composition depends only on (seed, step): each epoch uses a fresh
    seeded permutation, and an epoch covers `steps_per_epoch` batches, set
    by the smaller of the two domains so both draw fresh samples each step.
    """

    def __init__(self, records, data_dir, batch_size: int, seed: int, stream: int,
                 steps_per_epoch: int | None = None):
        if len(records) < batch_size:
            raise InsufficientDataError(
                f"{len(records)} patches cannot fill a batch of {batch_size}"
            )
        data_dir = Path(data_dir)
        stack = [images.load_rgb(data_dir / f"{r.patch_id}.png") for r in records]
        self.pixels = np.stack(stack)  # (N, H, W, 3) uint8
        self.batch_size = batch_size
        self.seed = seed
        self.stream = stream
        self.steps_per_epoch = steps_per_epoch or len(records) // batch_size

    def batch(self, step: int) -> torch.Tensor:
        epoch, within = divmod(step, self.steps_per_epoch)
        rng = np.random.default_rng([self.seed, self.stream, epoch])
        perm = rng.permutation(len(self.pixels))
        idx = perm[within * self.batch_size:(within + 1) * self.batch_size]
        arr = self.pixels[idx].astype(np.float32) / 127.5 - 1.0
        return torch.from_numpy(arr.transpose(0, 3, 1, 2))


@dataclass
class TrainState:
    """Everything train_step mutates, plus what a resume needs to rebuild it."""

    model: TranslatorModel
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    sched_g: torch.optim.lr_scheduler.LRScheduler
    sched_d: torch.optim.lr_scheduler.LRScheduler
    cfg: TrainConfig
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = TranslatorModel(cfg.model)
    opt_g = torch.optim.Adam(model.generator_parameters(),
                             lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(model.discriminator_parameters(),
                             lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    sched_g = torch.optim.lr_scheduler.StepLR(opt_g, cfg.lr_decay_every, cfg.lr_decay)
    sched_d = torch.optim.lr_scheduler.StepLR(opt_d, cfg.lr_decay_every, cfg.lr_decay)
    return TrainState(model, opt_g, opt_d, sched_g, sched_d, cfg)


def train_step(state: TrainState, batch_x: torch.Tensor,
               batch_y: torch.Tensor) -> dict:
    """One generator update followed by one discriminator update.

    Both updates share a single generator forward pass and the same style
    draws: the generator trains against the current discriminator, then the
    discriminator trains on the detached translations. Raises on any
    non-finite loss value.
    """
    if batch_x.shape != batch_y.shape:
        raise ShapeError(f"domain batches differ: {tuple(batch_x.shape)} "
                         f"vs {tuple(batch_y.shape)}")
    cfg = state.cfg
    model = state.model
    rng = torch.Generator().manual_seed(_stream_seed(cfg.seed, _S_STYLE, state.step))
    s_x = sample_style(rng, cfg.model.style_dim, batch_x.shape[0])
    s_y = sample_style(rng, cfg.model.style_dim, batch_x.shape[0])

    g_total, metrics, (x2y, y2x) = generator_losses(
        model, batch_x, batch_y, s_x, s_y, cfg.weights)
    state.opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    state.opt_g.step()

    d_y, _ = adversarial_losses(model.disc["Y"](batch_y), model.disc["Y"](x2y.detach()))
    d_x, _ = adversarial_losses(model.disc["X"](batch_x), model.disc["X"](y2x.detach()))
    d_total = d_x + d_y
    state.opt_d.zero_grad(set_to_none=True)
    d_total.backward()
    state.opt_d.step()
    state.sched_g.step()
    state.sched_d.step()

    metrics["d_adv"] = float(d_total.detach())
    bad = sorted(k for k, v in metrics.items() if not np.isfinite(v))
    if bad:
        raise NumericError(f"non-finite losses at step {state.step}: {bad} "
                           f"(metrics: {metrics})")
    state.step += 1
    return metrics


def _append_metrics(path: Path, step: int, metrics: dict) -> None:
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(["step", "loss_name", "value"])
        for name in sorted(metrics):
            writer.writerow([step, name, f"{metrics[name]:.8g}"])


def save_train_checkpoint(path, state: TrainState) -> None:
    save_checkpoint(
        path, state.model, step=state.step,
        opt_g=state.opt_g.state_dict(), opt_d=state.opt_d.state_dict(),
        sched_g=state.sched_g.state_dict(), sched_d=state.sched_d.state_dict(),
    )


def load_train_checkpoint(path, cfg: TrainConfig) -> TrainState:
    model, extra = load_checkpoint(path, expect_config=cfg.model)
    opt_g = torch.optim.Adam(model.generator_parameters(),
                             lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(model.discriminator_parameters(),
                             lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    sched_g = torch.optim.lr_scheduler.StepLR(opt_g, cfg.lr_decay_every, cfg.lr_decay)
    sched_d = torch.optim.lr_scheduler.StepLR(opt_d, cfg.lr_decay_every, cfg.lr_decay)
    opt_g.load_state_dict(extra["opt_g"])
    opt_d.load_state_dict(extra["opt_d"])
    sched_g.load_state_dict(extra["sched_g"])
    sched_d.load_state_dict(extra["sched_d"])
    return TrainState(model, opt_g, opt_d, sched_g, sched_d, cfg,
                      step=int(extra["step"]))


def train(manifest: Manifest, data_dir: str | os.PathLike,
          out_dir: str | os.PathLike, cfg: TrainConfig | None = None,
          resume: bool = False, progress=None) -> TrainState:
    """Run the training loop over a manifest's healthy X/Y records.

    Writes metrics to ``metrics.csv`` and a resumable checkpoint to
    ``checkpoint.pt`` in ``out_dir`` (at the configured cadence and at the
    end). With ``resume=True`` an existing checkpoint is continued until
    ``cfg.steps`` total steps.
    """
    cfg = cfg or TrainConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME

    recs_x = manifest.subset(split="train", label="healthy", domain="X")
    recs_y = manifest.subset(split="train", label="healthy", domain="Y")
    if not recs_x or not recs_y:
        raise InsufficientDataError(
            f"need records in both domains, got {len(recs_x)} X / {len(recs_y)} Y"
        )
    spe = min(len(recs_x), len(recs_y)) // cfg.batch_size
    if spe < 1:
        raise InsufficientDataError(
            f"smaller domain has {min(len(recs_x), len(recs_y))} patches, "
            f"batch size {cfg.batch_size} never fills"
        )
    bx = PatchBatcher(recs_x, data_dir, cfg.batch_size, cfg.seed, _S_BATCH_X, spe)
    by = PatchBatcher(recs_y, data_dir, cfg.batch_size, cfg.seed, _S_BATCH_Y, spe)

    if resume and ckpt_path.exists():
        state = load_train_checkpoint(ckpt_path, cfg)
    else:
        state = init_state(cfg)

    metrics_path = out / METRICS_NAME
    while state.step < cfg.steps:
        step = state.step
        metrics = train_step(state, bx.batch(step), by.batch(step))
        _append_metrics(metrics_path, step, metrics)
        if progress is not None:
            progress(step, metrics)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_train_checkpoint(ckpt_path, state)
    save_train_checkpoint(ckpt_path, state)
    return state
