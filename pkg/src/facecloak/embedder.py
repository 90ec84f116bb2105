"""Toy face-embedding models and the verification protocol built on them.

The embedder is a small conv net trained as an identity classifier; its
L2-normalised penultimate vector is the face embedding. A designated conv
block ("feature tap") exposes spatial features to the perturbation
generator. Verification compares an embedding to an identity reference and
accepts when the distance is strictly below an EER-calibrated threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EmbedderSpec
from .dataset import LabeledImage, stack_images
from .utils import batches, count_parameters, to_batch

WEIGHTS_NAME = "weights.pt"
MANIFEST_NAME = "manifest.json"


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )


class FeatureTrunk(nn.Module):
    """Stack of conv blocks; ``forward(x, upto=k)`` stops after block ``k``."""

    def __init__(self, in_channels: int, widths: Sequence[int], strides: Sequence[int]):
        super().__init__()
        chans = [in_channels, *widths]
        self.blocks = nn.ModuleList(ConvBlock(a, b, s) for a, b, s in zip(chans[:-1], chans[1:], strides))

    def forward(self, x, upto: int | None = None):
        last = len(self.blocks) - 1 if upto is None else upto
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == last:
                break
        return x


class Embedder(nn.Module):
    def __init__(self, spec: EmbedderSpec, in_channels: int, image_size: int, num_classes: int):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.image_size = image_size
        self.num_classes = num_classes
        self.trunk = FeatureTrunk(in_channels, spec.widths, spec.strides)
        self.head = nn.Linear(spec.widths[-1], spec.embedding_dim)
        self.classifier = nn.Parameter(torch.randn(num_classes, spec.embedding_dim) * 0.1)

    @property
    def tap(self) -> int:
        return self.spec.tap_index

    def _check(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(
                f"input of shape {tuple(x.shape[1:])} does not match embedder input "
                f"{(self.in_channels, self.image_size, self.image_size)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        h = self.trunk(x)
        h = h.mean(dim=(2, 3))
        return F.normalize(self.head(h), dim=1)

    def features(self, x: torch.Tensor, tap: int | None = None) -> torch.Tensor:
        self._check(x)
        return self.trunk(x, upto=self.tap if tap is None else tap)

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        return self.spec.logit_scale * emb @ F.normalize(self.classifier, dim=1).t()

    def feature_shape(self, tap: int | None = None) -> tuple[int, int, int]:
        """(S, S, F) of the activations at ``tap``."""
        tap = self.tap if tap is None else tap
        s = self.image_size
        for stride in self.spec.strides[: tap + 1]:
            s = (s + 2 - 3) // stride + 1
        return (s, s, self.spec.widths[tap])

    def manifest(self) -> dict:
        n = len(self.spec.widths)
        return {
            "kind": "embedder",
            "spec": self.spec.model_dump(mode="json"),
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "feature_tap": self.tap,
            "feature_shapes": {str(i): list(self.feature_shape(i)) for i in range(n)},
            "parameter_count": count_parameters(self),
        }


def frozen(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_embedder(train_set: Sequence[LabeledImage], spec: EmbedderSpec, log=None) -> Embedder:
    """Identity classification with a cosine-softmax head; returns the model in eval mode."""
    ids = sorted({d.identity_id for d in train_set})
    if len(ids) < 2:
        raise ValueError("embedder training needs at least two identities")
    label_of = {k: i for i, k in enumerate(ids)}
    x_all = to_batch(stack_images(train_set))
    y_all = torch.tensor([label_of[d.identity_id] for d in train_set])
    _, c, h, w = x_all.shape
    if h != w:
        raise ValueError("square images expected")
    ts = spec.train
    seed = 0 if ts.seed is None else ts.seed
    torch.manual_seed(seed)
    model = Embedder(spec, c, h, len(ids))
    opt = torch.optim.Adam(model.parameters(), lr=ts.lr, weight_decay=ts.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=ts.epochs)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(ts.epochs):
        total, n = 0.0, 0
        for idx in batches(len(x_all), ts.batch_size, gen):
            x, y = x_all[idx], y_all[idx]
            x = _augment(x, gen)
            loss = F.cross_entropy(model.logits(model(x)), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        sched.step()
        if log:
            log(f"embedder epoch {epoch + 1}/{ts.epochs} loss {total / max(n, 1):.4f}")
    return model.eval()


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # brightness jitter + sensor noise; keeps the input range
    scale = 1 + 0.1 * (torch.rand(x.shape[0], 1, 1, 1, generator=gen) * 2 - 1)
    noise = 0.01 * torch.randn(x.shape, generator=gen)
    return torch.clamp(x * scale + noise, 0, 1)


# ---------------------------------------------------------------------------
# embedding api
# ---------------------------------------------------------------------------


@torch.no_grad()
def embed_batch(embedder: Embedder, images, chunk: int = 256) -> np.ndarray:
    embedder.eval()
    x = to_batch(images)
    out = [embedder(x[i : i + chunk]) for i in range(0, len(x), chunk)]
    return torch.cat(out).double().numpy()


def embed(embedder: Embedder, image) -> np.ndarray:
    return embed_batch(embedder, np.asarray(image)[None])[0]


@torch.no_grad()
def extract_features(embedder: Embedder, image, tap: int | None = None) -> np.ndarray:
    """Tap activations for one HWC image, returned as S x S x F."""
    embedder.eval()
    f = embedder.features(to_batch(image), tap)
    return f[0].permute(1, 2, 0).double().numpy()


def distance(a, b, metric: str = "euclidean"):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if metric == "euclidean":
        return np.linalg.norm(a - b, axis=-1)
    if metric == "cosine":
        return 1.0 - np.sum(a * b, axis=-1)
    raise ValueError(f"unknown metric {metric!r}")


def identity_reference(embedder: Embedder, images) -> np.ndarray:
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("identity reference needs at least one image")
    return normalize(embed_batch(embedder, images).mean(axis=0))


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def reference_table(embedder: Embedder, items: Sequence[LabeledImage]) -> dict[int, np.ndarray]:
    """Per-identity references from clean images."""
    by_id: dict[int, list] = {}
    for d in items:
        by_id.setdefault(d.identity_id, []).append(d.image)
    return {k: identity_reference(embedder, np.stack(v)) for k, v in sorted(by_id.items())}


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VerificationThreshold:
    tau: float
    metric: str = "euclidean"
    eer: float = float("nan")

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def to_dict(self) -> dict:
        return asdict(self)


def error_rates(genuine, impostor, tau: float) -> tuple[float, float]:
    """(false non-match rate, false match rate) when accepting ``d < tau``."""
    genuine, impostor = np.asarray(genuine), np.asarray(impostor)
    fnmr = float(np.mean(genuine >= tau)) if len(genuine) else 0.0
    fmr = float(np.mean(impostor < tau)) if len(impostor) else 0.0
    return fnmr, fmr


def eer_threshold(genuine, impostor) -> tuple[float, float]:
    """Threshold at the equal error rate over all midpoints between observed distances.

    Returns ``(tau, eer)`` where ``eer`` is the mean of the two error rates at
    ``tau``. Ties on ``|FNMR - FMR|`` go to the lower mean error, then the
    smaller threshold.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if len(genuine) == 0:
        raise ValueError("no genuine pairs")
    values = np.unique(np.concatenate([genuine, impostor]))
    cands = (values[:-1] + values[1:]) / 2
    cands = cands[cands > 0]
    if len(cands) == 0:
        cands = np.array([values[-1] + 1e-6 if values[-1] > 0 else 1e-6])
    g = np.sort(genuine)
    i = np.sort(impostor)
    fnmr = (len(g) - np.searchsorted(g, cands, side="left")) / len(g)
    fmr = np.searchsorted(i, cands, side="left") / len(i) if len(i) else np.zeros_like(cands)
    gap = np.abs(fnmr - fmr)
    mean = (fnmr + fmr) / 2
    best = np.lexsort((cands, mean, gap))[0]
    return float(cands[best]), float(mean[best])


def verification_pairs(items: Sequence[LabeledImage], seed: int = 0):
    """All genuine index pairs plus an equal number of sampled impostor pairs."""
    ids = [d.identity_id for d in items]
    genuine = [(a, b) for a, b in combinations(range(len(items)), 2) if ids[a] == ids[b]]
    impostor_all = [(a, b) for a, b in combinations(range(len(items)), 2) if ids[a] != ids[b]]
    rng = np.random.default_rng(seed)
    k = min(len(genuine), len(impostor_all))
    pick = np.sort(rng.choice(len(impostor_all), size=k, replace=False)) if k else []
    return genuine, [impostor_all[j] for j in pick]


def pair_distances(emb: np.ndarray, pairs, metric: str) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    return distance(emb[a], emb[b], metric)


def calibrate_threshold(embedder: Embedder, val_set: Sequence[LabeledImage], metric: str = "euclidean",
                        seed: int = 0) -> VerificationThreshold:
    genuine, impostor = verification_pairs(val_set, seed)
    if not genuine:
        raise ValueError("validation set has no genuine pairs")
    emb = embed_batch(embedder, stack_images(val_set))
    tau, eer = eer_threshold(pair_distances(emb, genuine, metric), pair_distances(emb, impostor, metric))
    return VerificationThreshold(tau, metric, eer)


def verification_accuracy(embedder: Embedder, items: Sequence[LabeledImage], th: VerificationThreshold,
                          seed: int = 0) -> float:
    genuine, impostor = verification_pairs(items, seed)
    emb = embed_batch(embedder, stack_images(items))
    gd = pair_distances(emb, genuine, th.metric)
    idist = pair_distances(emb, impostor, th.metric)
    correct = np.sum(gd < th.tau) + np.sum(idist >= th.tau)
    return float(correct / (len(gd) + len(idist)))


def verify(embedder: Embedder, image, reference, th: VerificationThreshold) -> bool:
    return bool(distance(embed(embedder, image), reference, th.metric) < th.tau)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_embedder(out_dir, embedder: Embedder, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(embedder.state_dict(), out_dir / WEIGHTS_NAME)
    manifest = embedder.manifest()
    manifest.update(extra or {})
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def load_embedder(ckpt_dir) -> tuple[Embedder, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
    spec = EmbedderSpec.model_validate(manifest["spec"])
    model = Embedder(spec, manifest["in_channels"], manifest["image_size"], manifest["num_classes"])
    model.load_state_dict(torch.load(ckpt_dir / WEIGHTS_NAME, weights_only=True))
    return frozen(model), manifest


def threshold_from_manifest(manifest: dict) -> VerificationThreshold:
    t = manifest["threshold"]
    return VerificationThreshold(t["tau"], t["metric"], t.get("eer", float("nan")))


def export_embeddings_csv(path, embedder: Embedder, items: Sequence[LabeledImage]) -> None:
    emb = embed_batch(embedder, stack_images(items))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity_id", "image_id", *[f"e{i}" for i in range(emb.shape[1])]])
        for d, e in zip(items, emb):
            w.writerow([d.identity_id, d.image_id, *[repr(float(v)) for v in e]])
