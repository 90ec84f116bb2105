"""Pipeline stages behind the command line.

Every stage reads its inputs from a run directory, writes its outputs to its
own sub-directory, and drops the resolved config plus the hashes of the
checkpoints it consumed next to them, so a run can be reconstructed from its
output directory alone.

Layout under ``out_dir``::

    data/        manifest.json, images/*.png
    embedder/    white-box embedder (weights.pt, manifest.json)
    blackbox/    black-box embedder
    attack/      teacher cloaker, train_log.csv, train_report.json, discriminator/
    student/     distilled U-Net, distill_log.csv, distill_report.json
    eval/        report.json
    viz/         tsne.csv, tsne.png, summary.json
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .adversary import (MANIFEST_NAME, WEIGHTS_NAME, load_attack_model, load_discriminator, load_student,
                        save_attack_model, save_discriminator, save_student)
from .config import RunConfig
from .dataset import (FaceDataset, generate_synthetic_identities, load_dataset, reserve_target_images,
                      split_dataset, stack_images, write_dataset, file_sha256)
from .distill import distill
from .embedder import (Embedder, calibrate_threshold, distance, embed_batch, export_embeddings_csv,
                       identity_reference, load_embedder, save_embedder, threshold_from_manifest, train_embedder,
                       verification_accuracy)
from .evaluation import (EvalProtocol, attack_success_rate, detectability_probe, evaluate_cloaker, make_protocol,
                         scored_items)
from .imaging import SsimParams, load_png, save_png
from .training import Cloaker, cloak, train_attack
from .tsne import feasible_perplexity, tsne
from .utils import count_parameters, set_determinism

DATA_ROOT_ENV = "FACECLOAK_DATA_ROOT"
RESOLVED_NAME = "config.resolved.json"
INPUTS_NAME = "inputs.json"

log = logging.getLogger("facecloak")


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced what this stage needs."""


class ConfigError(ValueError):
    """The config is valid on its own but does not fit the data."""


class InputError(ValueError):
    """User-supplied input (other than the config) is unusable."""


@dataclass(frozen=True)
class RunPaths:
    root: Path
    data: Path

    @property
    def embedder(self) -> Path:
        return self.root / "embedder"

    @property
    def blackbox(self) -> Path:
        return self.root / "blackbox"

    @property
    def attack(self) -> Path:
        return self.root / "attack"

    @property
    def discriminator(self) -> Path:
        return self.attack / "discriminator"

    @property
    def student(self) -> Path:
        return self.root / "student"

    @property
    def eval(self) -> Path:
        return self.root / "eval"

    @property
    def viz(self) -> Path:
        return self.root / "viz"


def run_paths(cfg: RunConfig, out_dir=None, data_root=None) -> RunPaths:
    """``data_root`` falls back to ``$FACECLOAK_DATA_ROOT`` and then to ``<out_dir>/data``."""
    root = Path(out_dir if out_dir is not None else cfg.paths.out_dir)
    data = data_root or os.environ.get(DATA_ROOT_ENV) or root / "data"
    return RunPaths(root, Path(data))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _checkpoint_hash(ckpt_dir: Path) -> str:
    return file_sha256(ckpt_dir / WEIGHTS_NAME)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the upstream stage first")
    return path


def _stage_dir(path: Path, cfg: RunConfig, inputs: dict[str, Path]) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    (path / RESOLVED_NAME).write_text(cfg.to_json())
    record = {}
    for name, p in inputs.items():
        f = p / WEIGHTS_NAME if (p / WEIGHTS_NAME).exists() else p / MANIFEST_NAME
        record[name] = {"path": str(p), "file": f.name, "sha256": file_sha256(f)}
    (path / INPUTS_NAME).write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _data(paths: RunPaths) -> FaceDataset:
    _require(paths.data / MANIFEST_NAME, "dataset manifest")
    return load_dataset(paths.data)


def _embedder(ckpt: Path, what: str):
    _require(ckpt / WEIGHTS_NAME, what)
    model, manifest = load_embedder(ckpt)
    return model, threshold_from_manifest(manifest)


def _target_reference(embedder: Embedder, ds: FaceDataset, targeted: bool) -> Optional[np.ndarray]:
    if not targeted:
        return None
    if not ds.targets:
        raise ConfigError("targeted attack needs reserved target images (dataset.target_images > 0)")
    return identity_reference(embedder, stack_images(ds.targets))


def _protocol(embedder: Embedder, th, ds: FaceDataset, targeted: bool) -> EvalProtocol:
    target = _target_reference(embedder, ds, targeted)
    return make_protocol(embedder, ds.test, th, target, ds.target_identity if targeted else None)


def _begin(cfg: RunConfig, offset: int = 0) -> None:
    set_determinism(cfg.seed + offset, cfg.deterministic)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def synth_data(cfg: RunConfig, paths: RunPaths) -> Path:
    """Render the synthetic scenes, split them, reserve target images, write PNGs + manifest."""
    _begin(cfg)
    ds_cfg = cfg.dataset
    scenes = generate_synthetic_identities(ds_cfg.synthetic)
    try:
        train, val, test = split_dataset(scenes, ds_cfg.split_fractions, ds_cfg.split_seed, ds_cfg.split_mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not test:
        raise ConfigError("the test split is empty")
    splits = {"train": train, "val": val, "test": test, "targets": []}
    target_id = None
    if ds_cfg.target_images > 0:
        target_id = ds_cfg.target_identity
        if target_id is None:
            target_id = min(d.identity_id for d in test)
        owner = next((k for k in ("test", "val", "train") if any(d.identity_id == target_id for d in splits[k])), None)
        if owner is None:
            raise ConfigError(f"target identity {target_id} does not exist")
        splits["targets"], splits[owner] = reserve_target_images(splits[owner], target_id, ds_cfg.target_images)
    _stage_dir(paths.data, cfg, {})
    return write_dataset(paths.data, ds_cfg.synthetic, scenes, splits, target_id)


def train_embedders(cfg: RunConfig, paths: RunPaths, which=("white", "black")) -> dict:
    """Train and calibrate the white-box and/or black-box embedders."""
    ds = _data(paths)
    out = {}
    for role in which:
        if role not in ("white", "black"):
            raise ValueError(f"unknown embedder role {role!r}")
        spec = cfg.embedder if role == "white" else cfg.blackbox
        ckpt = paths.embedder if role == "white" else paths.blackbox
        _begin(cfg, 2 if role == "white" else 3)
        model = train_embedder(ds.train, spec, log=log.info)
        th = calibrate_threshold(model, ds.val, spec.metric, seed=cfg.dataset.split_seed)
        acc = verification_accuracy(model, ds.test, th, seed=cfg.dataset.split_seed)
        _stage_dir(ckpt, cfg, {"dataset": paths.data})
        save_embedder(ckpt, model, {"role": role, "threshold": th.to_dict(), "test_verification_accuracy": acc})
        export_embeddings_csv(ckpt / "embeddings_val.csv", model, ds.val)
        log.info("%s embedder: tau %.4f (EER %.4f), test verification accuracy %.4f", role, th.tau, th.eer, acc)
        out[role] = {"tau": th.tau, "eer": th.eer, "test_verification_accuracy": acc}
    return out


def train_attack_stage(cfg: RunConfig, paths: RunPaths) -> dict:
    ds = _data(paths)
    white, _ = _embedder(paths.embedder, "white-box embedder")
    target = _target_reference(white, ds, cfg.attack.targeted)
    _begin(cfg, 4)
    model, disc, report = train_attack(white, stack_images(ds.train), cfg.attack, target, log=log.info)
    _stage_dir(paths.attack, cfg, {"dataset": paths.data, "embedder": paths.embedder})
    extra = {"attack_config": cfg.attack.model_dump(mode="json"),
             "embedder_sha256": _checkpoint_hash(paths.embedder),
             "target_reference": None if target is None else [float(v) for v in target]}
    save_attack_model(paths.attack, model, extra)
    report.checkpoint = str(paths.attack / WEIGHTS_NAME)
    if disc is not None:
        save_discriminator(paths.discriminator, disc, {"attack_sha256": _checkpoint_hash(paths.attack)})
    report.write_log(paths.attack / "train_log.csv")
    summary = report.to_dict()
    _write_json(paths.attack / "train_report.json", summary)
    return summary


def distill_stage(cfg: RunConfig, paths: RunPaths) -> dict:
    ds = _data(paths)
    white, th = _embedder(paths.embedder, "white-box embedder")
    _require(paths.attack / WEIGHTS_NAME, "attack checkpoint")
    teacher, _ = load_attack_model(paths.attack)
    p = _protocol(white, th, ds, cfg.attack.targeted)
    t = cfg.attack.threshold

    def success(model) -> float:
        return attack_success_rate(white, Cloaker(model, t), ds.test, p)

    _begin(cfg, 5)
    student, report = distill(teacher, None, stack_images(ds.train), cfg.distill, val_images=stack_images(ds.val),
                              evaluate=success, log=log.info)
    _stage_dir(paths.student, cfg, {"dataset": paths.data, "embedder": paths.embedder, "teacher": paths.attack})
    save_student(paths.student, student, {"teacher_sha256": _checkpoint_hash(paths.attack),
                                          "distill_config": cfg.distill.model_dump(mode="json")})
    report.write_log(paths.student / "distill_log.csv")
    summary = report.to_dict()
    summary["threshold"] = t
    _write_json(paths.student / "distill_report.json", summary)
    return summary


def evaluate_stage(cfg: RunConfig, paths: RunPaths) -> dict:
    """Success rates (white / black / blurred), SSIM, L-inf, timing and detectability for every trained model."""
    ds = _data(paths)
    white, th_w = _embedder(paths.embedder, "white-box embedder")
    black, th_b = _embedder(paths.blackbox, "black-box embedder")
    _require(paths.attack / WEIGHTS_NAME, "attack checkpoint")
    teacher, _ = load_attack_model(paths.attack)
    student = load_student(paths.student)[0] if (paths.student / WEIGHTS_NAME).exists() else None
    disc = load_discriminator(paths.discriminator)[0] if (paths.discriminator / WEIGHTS_NAME).exists() else None
    _begin(cfg)
    targeted = cfg.attack.targeted
    wp = _protocol(white, th_w, ds, targeted)
    bp = _protocol(black, th_b, ds, targeted)
    e = cfg.eval
    blur = (e.blur_sigma, e.blur_kernel)
    sp = SsimParams(**e.ssim)
    t = cfg.attack.threshold

    def row(name, model, threshold):
        return evaluate_cloaker(name, model, threshold, ds.test, white, wp, black, bp, blur, sp,
                                e.blackbox_blur).to_dict()

    models = {"identity": row("identity", None, 0.0), "teacher": row("teacher", teacher, t)}
    if student is not None:
        models["student"] = row("student", student, t)
    sweep = [row("teacher", teacher, th) for th in e.thresholds]
    if student is not None:
        sweep += [row("student", student, th) for th in e.thresholds]

    detect = None
    if disc is not None:
        originals = stack_images(scored_items(ds.test, wp))
        p_orig, p_adv = detectability_probe(disc, originals, Cloaker(teacher, t)(originals))
        detect = {"mean_p_original": p_orig, "mean_p_adversarial": p_adv}

    params = {"teacher": count_parameters(teacher), "teacher_generator": count_parameters(teacher.generator),
              "white_embedder": count_parameters(white), "black_embedder": count_parameters(black)}
    if student is not None:
        params["student"] = count_parameters(student)
        params["student_teacher_ratio"] = params["student"] / params["teacher"]
    train_report = paths.attack / "train_report.json"
    training = json.loads(train_report.read_text()) if train_report.exists() else None
    report = {
        "mode": wp.mode,
        "projection_threshold": t,
        "verification": {"white": th_w.to_dict(), "black": th_b.to_dict()},
        "models": models,
        "threshold_sweep": sweep,
        "detectability": detect,
        "parameters": params,
        "training": None if training is None else {
            "mean_epoch_seconds": training["mean_epoch_seconds"],
            "discriminator_updates": training["discriminator_updates"],
            "generator_updates": training["generator_updates"],
        },
        "num_test_images": len(ds.test),
    }
    inputs = {"dataset": paths.data, "embedder": paths.embedder, "blackbox": paths.blackbox, "attack": paths.attack}
    if student is not None:
        inputs["student"] = paths.student
    if disc is not None:
        inputs["discriminator"] = paths.discriminator
    _stage_dir(paths.eval, cfg, inputs)
    _write_json(paths.eval / "report.json", report)
    return report


def visualize_stage(cfg: RunConfig, paths: RunPaths) -> dict:
    """t-SNE of original, cloaked and target embeddings under the white-box embedder."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ds = _data(paths)
    white, th = _embedder(paths.embedder, "white-box embedder")
    _require(paths.attack / WEIGHTS_NAME, "attack checkpoint")
    teacher, _ = load_attack_model(paths.attack)
    _begin(cfg, 6)
    targeted = cfg.attack.targeted
    p = _protocol(white, th, ds, targeted)
    tc = cfg.eval.tsne
    items = scored_items(ds.test, p)[: tc.max_points_per_kind]
    originals = stack_images(items)
    cloaked = Cloaker(teacher, cfg.attack.threshold)(originals)
    targets = ds.targets[: tc.max_points_per_kind]
    e_orig, e_cloak = embed_batch(white, originals), embed_batch(white, cloaked)
    parts = [e_orig, e_cloak]
    rows = [(d, "original") for d in items] + [(d, "cloaked") for d in items]
    if targets:
        parts.append(embed_batch(white, stack_images(targets)))
        rows += [(d, "target") for d in targets]
    x = np.concatenate(parts)
    perplexity = feasible_perplexity(len(x), tc.perplexity)
    res = tsne(x, perplexity, tc.iterations, tc.learning_rate, tc.seed)
    y = res.embedding

    _stage_dir(paths.viz, cfg, {"dataset": paths.data, "embedder": paths.embedder, "attack": paths.attack})
    with open(paths.viz / "tsne.csv", "w") as fh:
        fh.write("identity_id,image_id,kind,x,y\n")
        for (d, kind), (px, py) in zip(rows, y):
            fh.write(f"{d.identity_id},{d.image_id},{kind},{px!r},{py!r}\n")

    kinds = np.array([k for _, k in rows])
    summary = {"perplexity": perplexity, "num_points": int(len(x)), "final_kl": res.kl_history[-1]}
    if targets:
        target_point = y[kinds == "target"].mean(axis=0)
        summary["target_point"] = [float(v) for v in target_point]
        for kind in ("original", "cloaked"):
            summary[f"mean_2d_distance_to_target_{kind}"] = float(
                np.linalg.norm(y[kinds == kind] - target_point, axis=1).mean())
        ref = p.target if p.target is not None else identity_reference(white, stack_images(targets))
        for kind, emb in (("original", e_orig), ("cloaked", e_cloak)):
            summary[f"mean_embedding_distance_to_target_{kind}"] = float(
                distance(emb, ref[None, :], th.metric).mean())

    fig, ax = plt.subplots(figsize=(6, 6))
    style = {"original": ("tab:blue", "o"), "cloaked": ("tab:red", "x"), "target": ("black", "*")}
    for kind, (color, marker) in style.items():
        m = kinds == kind
        if m.any():
            ax.scatter(y[m, 0], y[m, 1], c=color, marker=marker, s=60 if kind == "target" else 18, label=kind)
    ax.set_title(f"t-SNE of embeddings ({p.mode})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(paths.viz / "tsne.png", dpi=100)
    plt.close(fig)
    _write_json(paths.viz / "summary.json", summary)
    return summary


def cloak_file(cfg: RunConfig, paths: RunPaths, in_path, out_path, use_student: bool = False,
               threshold: Optional[float] = None) -> float:
    """Cloak one PNG; returns the seconds spent in the model's forward pass."""
    ckpt = paths.student if use_student else paths.attack
    _require(ckpt / WEIGHTS_NAME, "student checkpoint" if use_student else "attack checkpoint")
    model = load_student(ckpt)[0] if use_student else load_attack_model(ckpt)[0]
    try:
        image = load_png(in_path)
    except OSError as exc:
        raise InputError(f"cannot read image {in_path}: {exc}") from exc
    spec = model.spec if use_student else model.generator.spec
    expected = spec.in_shape if use_student else spec.out_shape
    if image.shape != tuple(expected):
        raise InputError(f"image shape {image.shape} does not match the model input {tuple(expected)}")
    res = cloak(model, image, cfg.attack.threshold if threshold is None else threshold)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_png(out_path, res.images)
    return res.seconds


def run_pipeline(cfg: RunConfig, paths: RunPaths, visualize: bool = True) -> dict:
    """synth-data, both embedders, attack, distillation, evaluation (and t-SNE)."""
    t0 = time.perf_counter()
    stages = {}

    def timed(name, fn, *args):
        s = time.perf_counter()
        out = fn(*args)
        stages[name] = time.perf_counter() - s
        log.info("stage %s done in %.1f s", name, stages[name])
        return out

    timed("synth-data", synth_data, cfg, paths)
    timed("train-embedder", train_embedders, cfg, paths)
    timed("train-attack", train_attack_stage, cfg, paths)
    timed("distill", distill_stage, cfg, paths)
    report = timed("evaluate", evaluate_stage, cfg, paths)
    if visualize:
        timed("visualize", visualize_stage, cfg, paths)
    paths.root.mkdir(parents=True, exist_ok=True)
    (paths.root / RESOLVED_NAME).write_text(cfg.to_json())
    total = time.perf_counter() - t0
    _write_json(paths.root / "pipeline.json", {"stage_seconds": stages, "total_seconds": total})
    return {"report": report, "stage_seconds": stages, "total_seconds": total}
