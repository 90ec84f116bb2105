import numpy as np
import pytest
import torch

from facecloak.adversary import StudentSpec, build_attack_model, build_student
from facecloak.config import DistillConfig
from facecloak.dataset import stack_images
from facecloak.distill import distill, distillation_loss
from facecloak.training import Cloaker
from facecloak.utils import count_parameters, state_hash


@pytest.fixture(scope="module")
def teacher(tiny_embedder):
    return build_attack_model(tiny_embedder, (16, 8, 8), seed=2)


def cfg(**kw):
    base = dict(epochs=2, batch_size=16, seed=1, depth=2, base_width=4)
    base.update(kw)
    return DistillConfig(**base)


def test_loss_zero_for_exact_copy():
    d = torch.rand(2, 3, 8, 8)
    assert float(distillation_loss(d, d.clone())) == 0.0
    with pytest.raises(ValueError):
        distillation_loss(d, d[:, :1])


def test_report_and_teacher_untouched(teacher, tiny_faces):
    before = state_hash(teacher)
    x = stack_images(tiny_faces["train"])
    student, rep = distill(teacher, None, x, cfg(), evaluate=lambda m: 0.5)
    assert state_hash(teacher) == before
    assert rep.teacher_parameters == count_parameters(teacher)
    assert rep.student_parameters == count_parameters(student)
    assert rep.parameter_ratio == rep.student_parameters / rep.teacher_parameters
    assert len(rep.epoch_losses) == len(rep.val_losses) == 2
    assert rep.success == {"teacher": 0.5, "student": 0.5}
    assert np.isfinite(rep.epoch_losses).all()


def test_deterministic(teacher, tiny_faces):
    torch.use_deterministic_algorithms(True)
    x = stack_images(tiny_faces["train"])
    a, ra = distill(teacher, None, x, cfg())
    b, rb = distill(teacher, None, x, cfg())
    assert state_hash(a) == state_hash(b)
    assert ra.val_losses == rb.val_losses


def test_shape_mismatch(teacher, tiny_faces):
    wrong = build_student(StudentSpec((16, 16, 3), 2, 4))
    with pytest.raises(ValueError):
        distill(teacher, wrong, stack_images(tiny_faces["train"]), cfg())


def test_student_makes_no_embedder_calls(teacher, tiny_embedder, tiny_faces):
    student, _ = distill(teacher, None, stack_images(tiny_faces["train"]), cfg(epochs=1))
    calls = []
    hooks = [m.register_forward_hook(lambda *a: calls.append(1)) for m in (tiny_embedder, tiny_embedder.trunk,
                                                                          teacher, teacher.features)]
    try:
        Cloaker(student, 0.1)(stack_images(tiny_faces["test"]))
        assert calls == []
        Cloaker(teacher, 0.1)(stack_images(tiny_faces["test"]))
        assert calls  # the hook itself works
    finally:
        for h in hooks:
            h.remove()


def test_write_log(teacher, tiny_faces, tmp_path):
    _, rep = distill(teacher, None, stack_images(tiny_faces["train"]), cfg(epochs=1))
    rep.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 2
