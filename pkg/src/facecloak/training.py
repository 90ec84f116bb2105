"""Attack training: generator (+ optional discriminator) against a frozen embedder."""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .adversary import AttackModel, Discriminator, DiscriminatorSpec, build_attack_model, build_discriminator
from .config import AttackConfig
from .embedder import Embedder, frozen
from .imaging import apply_perturbation
from .losses import (AdvLossVariant, LossWeights, PertLossVariant, combined_generator_loss, loss_adv,
                     loss_disc, loss_gan, loss_pert)
from .utils import batches, to_batch, to_images

LOG_FIELDS = ("step", "epoch", "l_gan", "l_adv", "l_pert", "total")


@dataclass
class TrainReport:
    epoch_seconds: list[float] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    discriminator_updates: int = 0
    generator_updates: int = 0
    checkpoint: Optional[str] = None

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0

    def to_dict(self) -> dict:
        return {
            "epoch_seconds": self.epoch_seconds,
            "mean_epoch_seconds": self.mean_epoch_seconds,
            "discriminator_updates": self.discriminator_updates,
            "generator_updates": self.generator_updates,
            "num_steps": len(self.steps),
            "final_step": self.steps[-1] if self.steps else None,
            "checkpoint": self.checkpoint,
        }

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for rec in self.steps:
                w.writerow({k: ("" if rec[k] is None else repr(rec[k])) for k in LOG_FIELDS})


def loss_parts(cfg: AttackConfig, target: Optional[np.ndarray] = None):
    weights = LossWeights(cfg.alpha if cfg.use_discriminator else None, cfg.beta, cfg.gamma)
    t = None
    if cfg.targeted:
        if target is None:
            raise ValueError("targeted attack needs a target embedding")
        t = torch.as_tensor(np.asarray(target), dtype=torch.float32)
    adv = AdvLossVariant(cfg.adv_kind, cfg.targeted, t)
    pert = PertLossVariant(cfg.pert_kind, cfg.threshold)
    return weights, adv, pert


def _as_tensor_images(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    if isinstance(images, (list, tuple)) and images and hasattr(images[0], "image"):
        images = np.stack([d.image for d in images])
    return to_batch(images)


def _check_shapes(embedder: Embedder, x: torch.Tensor):
    expected = (embedder.in_channels, embedder.image_size, embedder.image_size)
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"training images {tuple(x.shape[1:])} do not match embedder input {expected}")


def augment_batch(x: torch.Tensor, gen: torch.Generator, light: float = 0.15, noise: float = 0.02,
                  shift: int = 2) -> torch.Tensor:
    n = x.shape[0]
    scale = 1 + light * (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1)
    x = x * scale + noise * torch.randn(x.shape, generator=gen)
    if shift:
        pad = torch.nn.functional.pad(x, (shift,) * 4, mode="replicate")
        dy, dx = (int(v) for v in torch.randint(0, 2 * shift + 1, (2,), generator=gen))
        x = pad[:, :, dy : dy + x.shape[2], dx : dx + x.shape[3]]
    return torch.clamp(x, 0.0, 1.0)


def _epochs(model: AttackModel, disc: Optional[Discriminator], embedder: Embedder, x_all: torch.Tensor,
            cfg: AttackConfig, target, params, lr: float, epochs: int, report: TrainReport,
            gen: torch.Generator, log: Optional[Callable] = None):
    weights, adv_v, pert_v = loss_parts(cfg, target)
    opt = cfg.optimizer
    opt_g = torch.optim.Adam(params, lr=lr, betas=(opt.beta1, opt.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=(opt.beta1, opt.beta2)) if disc is not None else None
    project = cfg.project_in_training and cfg.pert_kind == "threshold"
    for epoch in range(epochs):
        t0 = time.perf_counter()
        model.train()
        if disc is not None:
            disc.train()
        for idx in batches(len(x_all), cfg.batch_size, gen):
            x = x_all[idx]
            if cfg.augment:
                x = augment_batch(x, gen)
            with torch.no_grad():
                e_clean = None if cfg.targeted else embedder(x)
            delta = model(x)
            used = torch.clamp(delta, -cfg.threshold, cfg.threshold) if project else delta
            x_adv = apply_perturbation(x, used)

            if disc is not None:
                eps = 1e-6
                p_real = disc(x).clamp(eps, 1 - eps)
                p_fake = disc(x_adv.detach()).clamp(eps, 1 - eps)
                ld = loss_disc(p_real, p_fake)
                opt_d.zero_grad()
                ld.backward()
                opt_d.step()
                report.discriminator_updates += 1

            l_adv = loss_adv(embedder(x_adv), e_clean, adv_v)
            l_pert = loss_pert(x, delta, pert_v)
            l_gan = loss_gan(disc(x_adv).clamp(1e-6, 1 - 1e-6)) if disc is not None else None
            total = combined_generator_loss(weights, l_gan, l_adv, l_pert)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            if disc is not None:
                # the generator step must not leave gradients on the discriminator
                disc.zero_grad(set_to_none=True)
            report.generator_updates += 1

            gan_v = None if l_gan is None else l_gan.item()
            rec = {"step": len(report.steps), "epoch": epoch, "l_gan": gan_v, "l_adv": l_adv.item(),
                   "l_pert": l_pert.item()}
            rec["total"] = float(combined_generator_loss(weights, gan_v, rec["l_adv"], rec["l_pert"]))
            report.steps.append(rec)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if log:
            last = report.steps[-1]
            log(f"attack epoch {epoch + 1}/{epochs} adv {last['l_adv']:.4f} pert {last['l_pert']:.5f} "
                f"({report.epoch_seconds[-1]:.2f}s)")
    model.eval()
    if disc is not None:
        disc.eval()


def train_attack(embedder: Embedder, train_images, cfg: AttackConfig, target: Optional[np.ndarray] = None,
                 log: Optional[Callable] = None):
    """Train a cloaking generator; returns ``(attack_model, discriminator_or_None, report)``.

    ``train_images`` is an N x H x W x C array (or a list of labeled images).
    The embedder is used frozen; gradients only reach the generator (and the
    discriminator's own step).
    """
    x_all = _as_tensor_images(train_images)
    _check_shapes(embedder, x_all)
    frozen(embedder)
    seed = 0 if cfg.seed is None else cfg.seed
    torch.manual_seed(seed)
    model = build_attack_model(embedder, cfg.generator_widths, cfg.generator_batchnorm, cfg.final_init, seed)
    disc = None
    if cfg.use_discriminator:
        size = embedder.image_size
        disc = build_discriminator(DiscriminatorSpec((size, size, embedder.in_channels), cfg.discriminator_widths),
                                   seed + 1)
    report = TrainReport()
    gen = torch.Generator().manual_seed(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    _epochs(model, disc, embedder, x_all, cfg, target, params, cfg.optimizer.lr, cfg.epochs, report, gen, log)
    if cfg.fine_tune.enabled:
        model = fine_tune(embedder, model, cfg, x_all, target, report=report, log=log)
    return model, disc, report


def fine_tune(embedder: Embedder, model: AttackModel, cfg: AttackConfig, train_images, target=None,
              report: Optional[TrainReport] = None, log: Optional[Callable] = None) -> AttackModel:
    """Continue training with the top ``unfrozen_top_layers`` borrowed blocks trainable.

    Works on a copy: the evaluation embedder and the input model are untouched.
    """
    ft = cfg.fine_tune
    n_blocks = len(model.features.blocks)
    if ft.unfrozen_top_layers > n_blocks:
        raise ValueError(f"cannot unfreeze {ft.unfrozen_top_layers} of {n_blocks} feature blocks")
    if not ft.enabled or ft.unfrozen_top_layers == 0:
        return model
    if ft.lr >= cfg.optimizer.lr:
        raise ValueError("fine-tuning learning rate must be lower than the main learning rate")
    x_all = _as_tensor_images(train_images)
    _check_shapes(embedder, x_all)
    frozen(embedder)
    tuned = copy.deepcopy(model)
    tuned.freeze_features(range(n_blocks - ft.unfrozen_top_layers, n_blocks))
    params = [p for p in tuned.parameters() if p.requires_grad]
    seed = (0 if cfg.seed is None else cfg.seed) + 7
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    report = report if report is not None else TrainReport()
    _epochs(tuned, None, embedder, x_all, cfg, target, params, ft.lr, ft.epochs, report, gen, log)
    return tuned


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class CloakResult:
    images: np.ndarray  # N x H x W x C
    delta: np.ndarray  # projected, pre-clip perturbation
    seconds: float


@torch.no_grad()
def cloak(model: torch.nn.Module, images, threshold: float) -> CloakResult:
    """One forward pass, projection of the perturbation to [-threshold, threshold], then clipping.

    ``model`` is either an :class:`AttackModel` (features come from its copy of
    the embedder trunk) or a student, which only sees raw pixels.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    x = to_batch(batch)
    model.eval()
    t0 = time.perf_counter()
    delta = torch.clamp(model(x), -threshold, threshold)
    d = to_images(delta)
    imgs = apply_perturbation(batch, d)
    secs = time.perf_counter() - t0
    if single:
        return CloakResult(imgs[0], d[0], secs)
    return CloakResult(imgs, d, secs)


class Cloaker:
    """Callable NHWC -> NHWC wrapper around a model at a fixed projection threshold."""

    def __init__(self, model: Optional[torch.nn.Module], threshold: float, chunk: int = 256):
        self.model = model
        self.threshold = threshold
        self.chunk = chunk
        self.seconds = 0.0
        self.count = 0

    def run(self, images) -> CloakResult:
        images = np.asarray(images, dtype=np.float64)
        if self.model is None:
            return CloakResult(images.copy(), np.zeros_like(images), 0.0)
        parts = [cloak(self.model, images[i : i + self.chunk], self.threshold) for i in range(0, len(images), self.chunk)]
        res = CloakResult(np.concatenate([p.images for p in parts]), np.concatenate([p.delta for p in parts]),
                          sum(p.seconds for p in parts))
        self.seconds += res.seconds
        self.count += len(images)
        return res

    def __call__(self, images) -> np.ndarray:
        return self.run(images).images
