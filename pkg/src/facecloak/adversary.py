"""Attack networks: feature-conditioned generator, discriminator, student U-Net.

The generator decodes spatial features borrowed from the embedder back to
image resolution with nearest-neighbour upsampling followed by 3x3
convolutions (no transposed convolutions, which tile the output). A tanh
output keeps the perturbation in [-1, 1].
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .config import EmbedderSpec
from .embedder import Embedder, FeatureTrunk
from .utils import count_parameters

WEIGHTS_NAME = "weights.pt"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class GeneratorSpec:
    in_shape: tuple[int, int, int]  # S, S, F
    out_shape: tuple[int, int, int]  # H, W, C
    widths: tuple[int, ...] = (128, 64, 32)
    batchnorm: bool = True
    final_init: str = "small"

    def validate(self):
        s, s2, _ = self.in_shape
        h, w, _ = self.out_shape
        n = len(self.widths)
        if s != s2 or h != w:
            raise ValueError("square feature maps and images expected")
        if s * 2**n != h:
            raise ValueError(
                f"{n} upsample blocks map {s}x{s} features to {s * 2**n}, not the {h}x{h} image"
            )
        if self.final_init not in ("small", "zero"):
            raise ValueError(f"unknown final_init {self.final_init!r}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_shape: tuple[int, int, int]  # H, W, C
    widths: tuple[int, ...] = (32, 64, 128)

    def validate(self):
        h = self.in_shape[0]
        if h < 2 ** len(self.widths):
            raise ValueError("too many stride-2 blocks for the input size")


@dataclass(frozen=True)
class StudentSpec:
    in_shape: tuple[int, int, int]  # H, W, C
    depth: int = 3
    base_width: int = 16

    def validate(self):
        h = self.in_shape[0]
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be positive")
        if h % 2 ** (self.depth - 1):
            raise ValueError(f"image size {h} is not divisible by 2**(depth-1)")


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        layers = []
        c_in = spec.in_shape[2]
        for width in spec.widths:
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c_in, width, 3, padding=1)]
            if spec.batchnorm:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.ReLU(inplace=True))
            c_in = width
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(c_in, spec.out_shape[2], 3, padding=1)
        nn.init.zeros_(self.out.bias)
        if spec.final_init == "zero":
            nn.init.zeros_(self.out.weight)
        else:
            nn.init.normal_(self.out.weight, std=1e-3)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        s, _, f = self.spec.in_shape
        if tuple(features.shape[1:]) != (f, s, s):
            raise ValueError(f"feature shape {tuple(features.shape[1:])} does not match generator input {(f, s, s)}")
        return torch.tanh(self.out(self.body(features)))


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        h, _, c = spec.in_shape
        layers = []
        for i, width in enumerate(spec.widths):
            layers.append(nn.Conv2d(c, width, 3, stride=2, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            c = width
            h = (h - 1) // 2 + 1
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(c * h * h, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probability that each image is unmodified, shape (N,)."""
        return torch.sigmoid(self.fc(self.body(x).flatten(1))).squeeze(1)


def _conv_bn_relu(c_in, c_out):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class StudentUNet(nn.Module):
    """Raw image -> perturbation; one conv per level, skip connections by concatenation."""

    def __init__(self, spec: StudentSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        c = spec.in_shape[2]
        widths = [spec.base_width * 2**i for i in range(spec.depth)]
        self.down = nn.ModuleList()
        prev = c
        for w in widths:
            self.down.append(_conv_bn_relu(prev, w))
            prev = w
        self.up = nn.ModuleList(_conv_bn_relu(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(spec.depth - 1)))
        self.pool = nn.MaxPool2d(2)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.out = nn.Conv2d(widths[0], c, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != (self.spec.in_shape[2], *self.spec.in_shape[:2]):
            raise ValueError(f"student expects {self.spec.in_shape}, got {tuple(x.shape[1:])}")
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = block(torch.cat([self.upsample(x), skip], dim=1))
        return torch.tanh(self.out(x))


class AttackModel(nn.Module):
    """Teacher cloaker: a private copy of the embedder's trunk (up to the tap) + generator."""

    def __init__(self, features: FeatureTrunk, generator: Generator, embedder_spec: EmbedderSpec, in_channels: int):
        super().__init__()
        self.features = features
        self.generator = generator
        self.embedder_spec = embedder_spec
        self.in_channels = in_channels
        self.unfrozen: list[int] = []
        self.freeze_features()

    def freeze_features(self, keep_trainable=()):
        self.unfrozen = sorted(keep_trainable)
        for i, block in enumerate(self.features.blocks):
            for p in block.parameters():
                p.requires_grad_(i in self.unfrozen)
        self.features.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        # borrowed layers keep their batch-norm statistics
        self.features.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.generator(self.features(x))


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    torch.manual_seed(seed)
    return Generator(spec)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> Discriminator:
    torch.manual_seed(seed)
    return Discriminator(spec)


def build_student(spec: StudentSpec, seed: int = 0, teacher_params: int | None = None,
                  max_ratio: float | None = None) -> StudentUNet:
    torch.manual_seed(seed)
    student = StudentUNet(spec)
    if teacher_params is not None:
        n = count_parameters(student)
        if n >= teacher_params:
            raise ValueError(f"student has {n} parameters, not fewer than the teacher's {teacher_params}")
        if max_ratio is not None and n > max_ratio * teacher_params:
            raise ValueError(f"student/teacher parameter ratio {n / teacher_params:.3f} exceeds {max_ratio}")
    return student


def build_attack_model(embedder: Embedder, widths=(128, 64, 32), batchnorm=True, final_init="small",
                       seed: int = 0) -> AttackModel:
    tap = embedder.tap
    trunk = FeatureTrunk(embedder.in_channels, embedder.spec.widths[: tap + 1], embedder.spec.strides[: tap + 1])
    trunk.blocks.load_state_dict(copy.deepcopy(embedder.trunk.blocks[: tap + 1].state_dict()))
    size = embedder.image_size
    spec = GeneratorSpec(embedder.feature_shape(), (size, size, embedder.in_channels), tuple(widths),
                         batchnorm, final_init)
    return AttackModel(trunk, build_generator(spec, seed), embedder.spec, embedder.in_channels)


def generate_perturbation(generator: Generator, features) -> torch.Tensor:
    """Eval-mode generator pass on S x S x F (or N x F x S x S) features."""
    generator.eval()
    f = torch.as_tensor(features, dtype=torch.float32)
    if f.dim() == 3:
        f = f.permute(2, 0, 1)[None]
    with torch.no_grad():
        return generator(f)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _write(out_dir, module: nn.Module, manifest: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), out_dir / WEIGHTS_NAME)
    manifest = dict(manifest, parameter_count=count_parameters(module))
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list))
    return out_dir


def save_attack_model(out_dir, model: AttackModel, extra: dict | None = None) -> Path:
    manifest = {
        "kind": "attack",
        "generator": asdict(model.generator.spec),
        "embedder_spec": model.embedder_spec.model_dump(mode="json"),
        "in_channels": model.in_channels,
        "feature_parameter_count": count_parameters(model.features),
        "generator_parameter_count": count_parameters(model.generator),
        "unfrozen_feature_blocks": model.unfrozen,
        **(extra or {}),
    }
    return _write(out_dir, model, manifest)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_attack_model(ckpt_dir) -> tuple[AttackModel, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
    if manifest.get("kind") != "attack":
        raise ValueError(f"{ckpt_dir} is not an attack checkpoint")
    gspec = GeneratorSpec(**_tuples(manifest["generator"]))
    espec = EmbedderSpec.model_validate(manifest["embedder_spec"])
    tap = espec.tap_index
    trunk = FeatureTrunk(manifest["in_channels"], espec.widths[: tap + 1], espec.strides[: tap + 1])
    model = AttackModel(trunk, Generator(gspec), espec, manifest["in_channels"])
    model.load_state_dict(torch.load(ckpt_dir / WEIGHTS_NAME, weights_only=True))
    return model.eval(), manifest


def save_discriminator(out_dir, disc: Discriminator, extra: dict | None = None) -> Path:
    return _write(out_dir, disc, {"kind": "discriminator", "spec": asdict(disc.spec), **(extra or {})})


def load_discriminator(ckpt_dir) -> tuple[Discriminator, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
    disc = Discriminator(DiscriminatorSpec(**_tuples(manifest["spec"])))
    disc.load_state_dict(torch.load(ckpt_dir / WEIGHTS_NAME, weights_only=True))
    return disc.eval(), manifest


def save_student(out_dir, student: StudentUNet, extra: dict | None = None) -> Path:
    return _write(out_dir, student, {"kind": "student", "spec": asdict(student.spec), **(extra or {})})


def load_student(ckpt_dir) -> tuple[StudentUNet, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
    if manifest.get("kind") != "student":
        raise ValueError(f"{ckpt_dir} is not a student checkpoint")
    student = StudentUNet(StudentSpec(**_tuples(manifest["spec"])))
    student.load_state_dict(torch.load(ckpt_dir / WEIGHTS_NAME, weights_only=True))
    return student.eval(), manifest


def has_transposed_conv(model: nn.Module) -> bool:
    return any(isinstance(m, (nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)) for m in model.modules())


def log2_int(n: int) -> int:
    k = int(round(math.log2(n)))
    if 2**k != n:
        raise ValueError(f"{n} is not a power of two")
    return k
