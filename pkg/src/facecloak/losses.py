"""Generator and discriminator loss terms.

All functions take torch tensors (any float dtype) and reduce with the
arithmetic mean over the batch, so they are differentiable end to end and
can be checked in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .imaging import SsimParams, ssim_torch

ADV_KINDS = ("mse", "two_norm", "cosine")
PERT_KINDS = ("threshold", "ssim")


@dataclass(frozen=True)
class LossWeights:
    # alpha is None when the discriminator is disabled
    alpha: Optional[float] = None
    beta: float = 10.0
    gamma: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class AdvLossVariant:
    kind: str = "mse"
    targeted: bool = False
    target: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.kind not in ADV_KINDS:
            raise ValueError(f"unknown adversarial loss {self.kind!r}")
        if self.targeted and self.target is None:
            raise ValueError("targeted loss needs a target embedding")


@dataclass(frozen=True)
class PertLossVariant:
    kind: str = "threshold"
    threshold: float = 0.1
    ssim: SsimParams = SsimParams()

    def __post_init__(self):
        if self.kind not in PERT_KINDS:
            raise ValueError(f"unknown perturbation loss {self.kind!r}")
        if self.kind == "threshold" and not (0 < self.threshold <= 1):
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")


def _check_prob(p: torch.Tensor, name: str):
    if torch.any(p <= 0) or torch.any(p >= 1):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")


def loss_gan(prob_adv) -> torch.Tensor:
    """Generator realism term: -log D(x_adv)."""
    p = torch.as_tensor(prob_adv)
    _check_prob(p, "discriminator probability")
    return (-torch.log(p)).mean()


def loss_disc(prob_real, prob_adv) -> torch.Tensor:
    """Discriminator binary cross-entropy with clean images labelled real."""
    pr, pa = torch.as_tensor(prob_real), torch.as_tensor(prob_adv)
    _check_prob(pr, "probability on real images")
    _check_prob(pa, "probability on adversarial images")
    return (-torch.log(pr) - torch.log1p(-pa)).mean()


def embedding_distance(a: torch.Tensor, b: torch.Tensor, kind: str) -> torch.Tensor:
    """Per-row distance between embeddings."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    if kind == "mse":
        return ((a - b) ** 2).mean(dim=-1)
    if kind == "two_norm":
        return torch.linalg.vector_norm(a - b, dim=-1)
    if kind == "cosine":
        return 1.0 - (a * b).sum(dim=-1)
    raise ValueError(f"unknown adversarial loss {kind!r}")


def loss_adv(e_adv: torch.Tensor, e_ref: Optional[torch.Tensor], v: AdvLossVariant) -> torch.Tensor:
    """Targeted: distance to ``v.target``. Untargeted: minus the distance to ``e_ref``
    (the clean image's embedding), so minimising pushes the embedding away."""
    if v.targeted:
        ref = v.target.to(e_adv.dtype)
        return embedding_distance(e_adv, ref.expand_as(e_adv), v.kind).mean()
    if e_ref is None:
        raise ValueError("untargeted loss needs the original embeddings")
    return -embedding_distance(e_adv, e_ref, v.kind).mean()


def loss_pert(x: torch.Tensor, delta: torch.Tensor, v: PertLossVariant) -> torch.Tensor:
    if x.shape != delta.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(delta.shape)}")
    if v.kind == "threshold":
        return (torch.relu(delta.abs() - v.threshold) ** 2).mean()
    x_adv = torch.clamp(x + delta, 0.0, 1.0)
    if x.dim() == 3:
        x, x_adv = x[None], x_adv[None]
    return ((1.0 - ssim_torch(x, x_adv, v.ssim)) / 2.0).mean()


def combined_generator_loss(w: LossWeights, l_gan, l_adv, l_pert):
    total = w.beta * l_adv + w.gamma * l_pert
    if w.alpha is not None:
        total = total + w.alpha * l_gan
    return total
