import json

import pytest

from facecloak.config import AttackConfig, DistillConfig, EvalConfig, RunConfig, load_config


def test_defaults_resolve_seeds():
    c = RunConfig(seed=10).resolved()
    assert c.dataset.synthetic.seed == 10
    assert c.attack.seed == 14
    assert c.embedder.train.seed != c.blackbox.train.seed


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"attack": {"bogus": 1}}))
    with pytest.raises(ValueError):
        load_config(p)


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ValueError):
        load_config(p)


def test_roundtrip(tmp_path):
    c = RunConfig().resolved()
    p = tmp_path / "c.json"
    p.write_text(c.to_json())
    assert load_config(p) == c


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("desk.json", "desk_targeted.json", "desk_discriminator.json"):
        load_config(root / name)


class TestAttackConfig:
    def test_regimes(self):
        no = AttackConfig()
        assert no.alpha is None and no.optimizer.lr == 1e-3 and no.optimizer.beta1 == 0.9
        yes = AttackConfig(use_discriminator=True)
        assert yes.alpha == 1.0 and yes.optimizer.lr == 1e-4 and yes.optimizer.beta1 == 0.5

    def test_alpha_without_discriminator_rejected(self):
        with pytest.raises(ValueError):
            AttackConfig(alpha=1.0)

    def test_finetune_lr_must_be_lower(self):
        with pytest.raises(ValueError):
            AttackConfig(fine_tune={"enabled": True, "lr": 1e-2})
        AttackConfig(fine_tune={"enabled": True, "lr": 1e-4})

    def test_bad_values(self):
        with pytest.raises(ValueError):
            AttackConfig(epochs=0)
        with pytest.raises(ValueError):
            AttackConfig(optimizer={"lr": 0, "beta1": 0.9})

    def test_variant_rederives_regime(self):
        v = AttackConfig().variant(use_discriminator=True)
        assert v.alpha == 1.0 and v.optimizer.lr == 1e-4
        assert v.variant(use_discriminator=False).alpha is None


def test_distill_and_eval_validation():
    with pytest.raises(ValueError):
        DistillConfig(epochs=0)
    with pytest.raises(ValueError):
        EvalConfig(blur_kernel=4)
    with pytest.raises(ValueError):
        RunConfig(dataset={"split_fractions": (0.5, 0.2, 0.2)})
