"""Distil the feature-conditioned teacher into a raw-image student U-Net.

The student regresses the teacher's perturbation (mean squared error); there
are no logits, so no temperature. The teacher is only read.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .adversary import AttackModel, StudentSpec, StudentUNet, build_student
from .config import DistillConfig
from .embedder import frozen
from .training import _as_tensor_images, augment_batch
from .utils import batches, count_parameters


@dataclass
class DistillReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    teacher_parameters: int = 0
    student_parameters: int = 0
    seconds: float = 0.0
    success: dict = field(default_factory=dict)

    @property
    def parameter_ratio(self) -> float:
        return self.student_parameters / self.teacher_parameters if self.teacher_parameters else float("nan")

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "val_losses": self.val_losses,
            "teacher_parameters": self.teacher_parameters,
            "student_parameters": self.student_parameters,
            "parameter_ratio": self.parameter_ratio,
            "seconds": self.seconds,
            "success": self.success,
        }

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, tl in enumerate(self.epoch_losses):
                vl = self.val_losses[i] if i < len(self.val_losses) else ""
                w.writerow([i, repr(tl), repr(vl) if vl != "" else ""])


def student_spec_for(teacher: AttackModel, cfg: DistillConfig) -> StudentSpec:
    h, w, c = teacher.generator.spec.out_shape
    return StudentSpec((h, w, c), cfg.depth, cfg.base_width)


def distillation_loss(student_delta: torch.Tensor, teacher_delta: torch.Tensor) -> torch.Tensor:
    if student_delta.shape != teacher_delta.shape:
        raise ValueError(f"student output {tuple(student_delta.shape)} does not match teacher {tuple(teacher_delta.shape)}")
    return F.mse_loss(student_delta, teacher_delta)


def distill(teacher: AttackModel, student: Optional[StudentUNet], train_images, cfg: DistillConfig,
            val_images=None, evaluate: Optional[Callable] = None, log: Optional[Callable] = None):
    """Train ``student`` (built from ``cfg`` when None) to reproduce the teacher's perturbations.

    ``evaluate(model) -> success rate`` is applied to teacher and student when
    given. Returns ``(student, report)``.
    """
    t0 = time.perf_counter()
    seed = 0 if cfg.seed is None else cfg.seed
    teacher_params = count_parameters(teacher)
    if student is None:
        student = build_student(student_spec_for(teacher, cfg), seed, teacher_params, cfg.max_param_ratio)
    # private frozen copy: the caller's teacher is never touched
    teacher = frozen(copy.deepcopy(teacher))
    x_all = _as_tensor_images(train_images)
    if student.spec.in_shape != teacher.generator.spec.out_shape:
        raise ValueError(f"student shape {student.spec.in_shape} differs from teacher output "
                         f"{teacher.generator.spec.out_shape}")
    x_val = _as_tensor_images(val_images) if val_images is not None else x_all[: min(64, len(x_all))]
    with torch.no_grad():
        val_target = teacher(x_val)

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    o = cfg.optimizer
    opt = torch.optim.Adam(student.parameters(), lr=o.lr, betas=(o.beta1, o.beta2))
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    report = DistillReport(teacher_parameters=teacher_params, student_parameters=count_parameters(student))
    for epoch in range(cfg.epochs):
        student.train()
        total, n = 0.0, 0
        for idx in batches(len(x_all), cfg.batch_size, gen):
            x = augment_batch(x_all[idx], gen)
            with torch.no_grad():
                target = teacher(x)
            loss = distillation_loss(student(x), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        if sched is not None:
            sched.step()
        report.epoch_losses.append(total / max(n, 1))
        student.eval()
        with torch.no_grad():
            report.val_losses.append(distillation_loss(student(x_val), val_target).item())
        if log:
            log(f"distill epoch {epoch + 1}/{cfg.epochs} loss {report.epoch_losses[-1]:.5f} "
                f"val {report.val_losses[-1]:.5f}")
    student.eval()
    report.seconds = time.perf_counter() - t0
    if evaluate is not None:
        report.success = {"teacher": evaluate(teacher), "student": evaluate(student)}
    return student, report
