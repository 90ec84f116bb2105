"""Measurement harness: success rates, blur robustness, SSIM, detectability, embedding shifts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataset import LabeledImage, stack_images
from .embedder import Embedder, VerificationThreshold, distance, embed_batch, reference_table
from .imaging import SsimParams, gaussian_blur, ssim
from .training import Cloaker
from .utils import to_batch


@dataclass
class EvalProtocol:
    references: dict[int, np.ndarray]
    threshold: VerificationThreshold
    targeted: bool = False
    target: Optional[np.ndarray] = None
    # identity whose images are skipped in targeted scoring (the target itself)
    target_identity: Optional[int] = None

    def __post_init__(self):
        if self.targeted and self.target is None:
            raise ValueError("targeted protocol needs a target reference")
        for k, v in self.references.items():
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValueError(f"reference for identity {k} is not unit-norm")

    @property
    def mode(self) -> str:
        return "targeted" if self.targeted else "untargeted"


def make_protocol(embedder: Embedder, test_set: Sequence[LabeledImage], threshold: VerificationThreshold,
                  target: Optional[np.ndarray] = None, target_identity: Optional[int] = None) -> EvalProtocol:
    """References come from the clean test images only."""
    return EvalProtocol(reference_table(embedder, test_set), threshold, target is not None, target, target_identity)


def scored_items(test_set: Sequence[LabeledImage], p: EvalProtocol) -> list[LabeledImage]:
    if p.targeted and p.target_identity is not None:
        return [d for d in test_set if d.identity_id != p.target_identity]
    return list(test_set)


def success_flags(embedder: Embedder, cloaked: np.ndarray, identity_ids: Sequence[int], p: EvalProtocol) -> np.ndarray:
    missing = sorted(set(identity_ids) - set(p.references))
    if missing:
        raise ValueError(f"no reference for identities {missing}")
    emb = embed_batch(embedder, cloaked)
    refs = np.stack([p.references[i] for i in identity_ids])
    d_own = distance(emb, refs, p.threshold.metric)
    if not p.targeted:
        return d_own >= p.threshold.tau
    d_target = distance(emb, p.target[None, :], p.threshold.metric)
    return d_target < d_own


def attack_success_rate(embedder: Embedder, cloaker: Callable, test_set: Sequence[LabeledImage], p: EvalProtocol,
                        blur: Optional[tuple[float, int]] = None) -> float:
    """Untargeted: share of cloaked images that fail verification against their own reference.
    Targeted: share whose embedding is strictly closer to the target than to their own reference.

    ``blur=(sigma, kernel_size)`` blurs every cloaked image right before embedding.
    """
    items = scored_items(test_set, p)
    if not items:
        raise ValueError("empty test set")
    cloaked = cloaker(stack_images(items))
    if blur is not None:
        cloaked = gaussian_blur(cloaked, *blur)
    flags = success_flags(embedder, cloaked, [d.identity_id for d in items], p)
    return float(np.mean(flags))


def robustness_under_blur(embedder: Embedder, cloaker: Callable, test_set, p: EvalProtocol, sigma: float = 1.0,
                          kernel_size: int = 5) -> float:
    return attack_success_rate(embedder, cloaker, test_set, p, blur=(sigma, kernel_size))


def targeted_tau_success(embedder: Embedder, cloaked: np.ndarray, p: EvalProtocol) -> float:
    """Alternative targeted criterion: the cloaked image verifies as the target."""
    emb = embed_batch(embedder, cloaked)
    return float(np.mean(distance(emb, p.target[None, :], p.threshold.metric) < p.threshold.tau))


@torch.no_grad()
def detectability_probe(discriminator: torch.nn.Module, originals, adversarials) -> tuple[float, float]:
    originals, adversarials = np.asarray(originals), np.asarray(adversarials)
    if len(originals) == 0 or len(adversarials) == 0:
        raise ValueError("detectability probe needs non-empty image sets")
    discriminator.eval()
    p_orig = discriminator(to_batch(originals)).double()
    p_adv = discriminator(to_batch(adversarials)).double()
    return float(p_orig.mean()), float(p_adv.mean())


def _summary(v: np.ndarray) -> dict:
    return {
        "mean": float(np.mean(v)),
        "min": float(np.min(v)),
        "max": float(np.max(v)),
        "q10": float(np.quantile(v, 0.1)),
        "median": float(np.median(v)),
        "q90": float(np.quantile(v, 0.9)),
    }


def embedding_shift_stats(embedder: Embedder, originals, cloaked, p: EvalProtocol) -> dict:
    originals, cloaked = np.asarray(originals), np.asarray(cloaked)
    if len(originals) != len(cloaked):
        raise ValueError("originals and cloaked images must be paired")
    e_o = embed_batch(embedder, originals)
    e_c = embed_batch(embedder, cloaked)
    metric = p.threshold.metric
    shift = distance(e_o, e_c, metric)
    out = {"shift": _summary(shift)}
    if p.targeted:
        d_o = distance(e_o, p.target[None, :], metric)
        d_c = distance(e_c, p.target[None, :], metric)
        out["target_distance_original"] = _summary(d_o)
        out["target_distance_cloaked"] = _summary(d_c)
        out["fraction_moved_closer"] = float(np.mean(d_c < d_o))
    return out


def ssim_report(originals, cloaked, params: SsimParams = SsimParams()) -> dict:
    originals, cloaked = np.asarray(originals), np.asarray(cloaked)
    if len(originals) != len(cloaked):
        raise ValueError("originals and cloaked images must be paired")
    vals = np.array([ssim(a, b, params) for a, b in zip(originals, cloaked)])
    return {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max())}


@dataclass
class EvalReport:
    name: str
    threshold: float
    success_rate_whitebox: float
    success_rate_blackbox: float
    success_rate_whitebox_blurred: float
    ssim: dict
    mean_linf: float
    max_linf: float
    seconds_per_image: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(d.pop("extra"))
        return d


def evaluate_cloaker(name: str, model, threshold: float, test_set: Sequence[LabeledImage], white: Embedder,
                     white_p: EvalProtocol, black: Embedder, black_p: EvalProtocol, blur: tuple[float, int],
                     ssim_params: SsimParams = SsimParams(), blackbox_blur: bool = False) -> EvalReport:
    """One summary row for a trained cloaker at a projection threshold."""
    cloaker = Cloaker(model, threshold)
    items = scored_items(test_set, white_p)
    originals = stack_images(items)
    res = cloaker.run(originals)
    fixed = lambda _: res.images  # noqa: E731  reuse the one forward pass for every column
    white_rate = attack_success_rate(white, fixed, items, white_p)
    black_rate = attack_success_rate(black, fixed, items, black_p)
    blurred = attack_success_rate(white, fixed, items, white_p, blur=blur)
    linf = np.abs(res.delta).reshape(len(res.delta), -1).max(axis=1) if len(res.delta) else np.zeros(1)
    extra = {"mode": white_p.mode, "num_images": len(items), "blur": {"sigma": blur[0], "kernel_size": blur[1],
             "applied": "last transform before embedding"}}
    if blackbox_blur:
        extra["success_rate_blackbox_blurred"] = attack_success_rate(black, fixed, items, black_p, blur=blur)
    if white_p.targeted:
        extra["success_rate_whitebox_tau"] = targeted_tau_success(white, res.images, white_p)
    extra["embedding_shift"] = embedding_shift_stats(white, originals, res.images, white_p)
    return EvalReport(
        name=name,
        threshold=threshold,
        success_rate_whitebox=white_rate,
        success_rate_blackbox=black_rate,
        success_rate_whitebox_blurred=blurred,
        ssim=ssim_report(originals, res.images, ssim_params),
        mean_linf=float(linf.mean()),
        max_linf=float(linf.max()),
        seconds_per_image=res.seconds / max(len(items), 1),
        extra=extra,
    )
