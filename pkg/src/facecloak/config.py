"""Run configuration.

A run is described by one JSON document with the sections ``dataset``,
``embedder``, ``blackbox``, ``attack``, ``distill``, ``eval``, ``paths`` and a
top-level ``seed``. Every model rejects unknown keys. Section seeds left as
``null`` are derived from the top-level seed when the config is resolved.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Nuisance(_Strict):
    lighting_range: float = Field(0.15, ge=0)
    shift_range_px: int = Field(2, ge=0)
    noise_sigma: float = Field(0.02, ge=0)


class SyntheticConfig(_Strict):
    num_identities: int = Field(40, ge=2)
    images_per_identity: int = Field(12, ge=2)
    image_size: int = Field(32, ge=16)
    channels: Literal[1, 3] = 3
    nuisance: Nuisance = Nuisance()
    seed: Optional[int] = None


class DatasetSection(_Strict):
    synthetic: SyntheticConfig = SyntheticConfig()
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_mode: Literal["identity", "image"] = "identity"
    split_seed: Optional[int] = None
    target_images: int = Field(4, ge=0)
    # None picks the first identity of the test split
    target_identity: Optional[int] = None

    @field_validator("split_fractions")
    @classmethod
    def _fractions(cls, v):
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")
        return v


class TrainSettings(_Strict):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    seed: Optional[int] = None


class EmbedderSpec(_Strict):
    widths: tuple[int, ...] = (32, 64, 64, 64)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    embedding_dim: int = Field(32, ge=8)
    # index into the conv blocks; -1 means the last block
    feature_tap: int = -1
    metric: Literal["euclidean", "cosine"] = "euclidean"
    logit_scale: float = Field(16.0, gt=0)
    train: TrainSettings = TrainSettings()

    @model_validator(mode="after")
    def _check(self):
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and the same length")
        n = len(self.widths)
        if not (-n <= self.feature_tap < n):
            raise ValueError(f"feature_tap {self.feature_tap} is not a valid block index for {n} blocks")
        return self

    @property
    def tap_index(self) -> int:
        return self.feature_tap % len(self.widths)


def _default_blackbox() -> EmbedderSpec:
    return EmbedderSpec(widths=(48, 96, 128), strides=(2, 2, 2))


class OptimizerConfig(_Strict):
    name: Literal["adam"] = "adam"
    lr: float = Field(gt=0)
    beta1: float = Field(ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)


class FineTuneConfig(_Strict):
    enabled: bool = False
    unfrozen_top_layers: int = Field(1, ge=0)
    lr: float = Field(1e-4, gt=0)
    epochs: int = Field(5, ge=1)


class AttackConfig(_Strict):
    targeted: bool = False
    adv_kind: Literal["mse", "two_norm", "cosine"] = "mse"
    pert_kind: Literal["threshold", "ssim"] = "threshold"
    threshold: float = Field(0.1, gt=0, le=1)
    alpha: Optional[float] = Field(None, ge=0)
    beta: float = Field(10.0, ge=0)
    gamma: float = Field(10.0, ge=0)
    use_discriminator: bool = False
    optimizer: Optional[OptimizerConfig] = None
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=2)
    seed: Optional[int] = None
    generator_widths: tuple[int, ...] = (128, 64, 32)
    generator_batchnorm: bool = True
    final_init: Literal["small", "zero"] = "small"
    discriminator_widths: tuple[int, ...] = (32, 64, 128)
    project_in_training: bool = True
    # random brightness / noise / shift applied to each training batch
    augment: bool = True
    fine_tune: FineTuneConfig = FineTuneConfig()

    @model_validator(mode="after")
    def _resolve(self):
        if self.use_discriminator:
            if self.alpha is None:
                self.alpha = 1.0
            if self.optimizer is None:
                self.optimizer = OptimizerConfig(lr=1e-4, beta1=0.5)
        else:
            if self.alpha is not None:
                raise ValueError("alpha must be absent when the discriminator is disabled")
            if self.optimizer is None:
                self.optimizer = OptimizerConfig(lr=1e-3, beta1=0.9)
        if self.fine_tune.enabled:
            if self.fine_tune.unfrozen_top_layers < 1:
                raise ValueError("fine-tuning needs at least one unfrozen layer")
            if self.fine_tune.lr >= self.optimizer.lr:
                raise ValueError("fine-tuning learning rate must be lower than the main learning rate")
        return self

    def variant(self, **changes) -> "AttackConfig":
        """Re-validated copy with ``changes`` applied.

        ``alpha`` and ``optimizer`` are re-derived from the discriminator
        setting unless passed explicitly.
        """
        data = self.model_dump(mode="json", exclude={"alpha", "optimizer"})
        data.update(changes)
        return AttackConfig.model_validate(data)


class DistillConfig(_Strict):
    loss: Literal["mse_on_perturbation"] = "mse_on_perturbation"
    depth: int = Field(3, ge=1)
    base_width: int = Field(16, ge=2)
    optimizer: OptimizerConfig = OptimizerConfig(lr=1e-3, beta1=0.9)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=2)
    seed: Optional[int] = None
    max_param_ratio: float = Field(0.25, gt=0)
    lr_schedule: Literal["cosine", "constant"] = "cosine"


class TsneConfig(_Strict):
    perplexity: float = Field(30.0, gt=0)
    iterations: int = Field(1000, ge=1)
    learning_rate: float = Field(200.0, gt=0)
    max_points_per_kind: int = Field(60, ge=2)
    seed: Optional[int] = None


class EvalConfig(_Strict):
    blur_sigma: float = Field(1.0, gt=0)
    blur_kernel: int = Field(5, ge=1)
    thresholds: tuple[float, ...] = (0.001, 0.05, 0.1, 0.2)
    ssim: dict = Field(default_factory=dict)
    blackbox_blur: bool = False
    tsne: TsneConfig = TsneConfig()

    @field_validator("blur_kernel")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("blur_kernel must be odd")
        return v


class PathsConfig(_Strict):
    out_dir: str = "runs/desk"


class RunConfig(_Strict):
    seed: int = 0
    deterministic: bool = True
    dataset: DatasetSection = DatasetSection()
    embedder: EmbedderSpec = EmbedderSpec()
    blackbox: EmbedderSpec = Field(default_factory=_default_blackbox)
    attack: AttackConfig = AttackConfig()
    distill: DistillConfig = DistillConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()

    def resolved(self) -> "RunConfig":
        """Copy with every derived seed filled in."""
        c = self.model_copy(deep=True)
        s = c.seed
        if c.dataset.synthetic.seed is None:
            c.dataset.synthetic.seed = s
        if c.dataset.split_seed is None:
            c.dataset.split_seed = s + 1
        if c.embedder.train.seed is None:
            c.embedder.train.seed = s + 2
        if c.blackbox.train.seed is None:
            c.blackbox.train.seed = s + 3
        if c.attack.seed is None:
            c.attack.seed = s + 4
        if c.distill.seed is None:
            c.distill.seed = s + 5
        if c.eval.tsne.seed is None:
            c.eval.tsne.seed = s + 6
        return c

    def with_attack(self, **changes) -> "RunConfig":
        c = self.model_copy(deep=True)
        c.attack = c.attack.variant(**changes)
        return c

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    """Parse and validate a config file. Raises ``ValueError`` on any problem."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.model_validate(raw)
    except Exception as exc:  # pydantic.ValidationError
        raise ValueError(str(exc)) from exc
