"""Desk-scale identity dataset.

Each synthetic identity is a small parameter vector (face geometry, eye
spacing, tones, a skin texture) rendered procedurally. Images of the same
identity differ only in lighting, a pixel shift and additive noise. Every
image ships with its ground-truth face box so the crop/resize preprocessing
runs exactly as it would behind a real detector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import SyntheticConfig
from .imaging import load_png, resize_bilinear, save_png

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def clip(self, height: int, width: int) -> "BoundingBox":
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x0 >= x1 or y0 >= y1:
            raise ValueError(f"box {self} lies outside the {height}x{width} image")
        return BoundingBox(x0, y0, x1, y1)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class LabeledImage:
    image: np.ndarray
    identity_id: int
    image_id: int
    boxes: tuple[BoundingBox, ...] = field(default_factory=tuple)

    @property
    def key(self) -> tuple[int, int]:
        return (self.identity_id, self.image_id)


def crop_largest_face(image: np.ndarray, boxes: Sequence[BoundingBox]) -> np.ndarray:
    """Crop the largest box (after clipping to the image); ties go to the smallest (x0, y0)."""
    if not boxes:
        raise ValueError("no face boxes given")
    h, w = image.shape[:2]
    clipped = [b.clip(h, w) for b in boxes]
    best = min(clipped, key=lambda b: (-b.area, b.x0, b.y0))
    return image[best.y0 : best.y1, best.x0 : best.x1].copy()


def prepare_face(item: LabeledImage, size: int) -> np.ndarray:
    crop = crop_largest_face(item.image, item.boxes)
    return resize_bilinear(crop, size, size)


# ---------------------------------------------------------------------------
# procedural identities
# ---------------------------------------------------------------------------

_PARAM_NAMES = (
    "face_ax", "face_ay", "face_cy", "eye_sep", "eye_y", "eye_r", "nose_len",
    "mouth_y", "mouth_w", "mouth_h", "hair_top", "tex_freq", "tex_theta", "tex_amp",
    "skin_r", "skin_g", "skin_b", "hair_r", "hair_g", "hair_b",
    "eye_c_r", "eye_c_g", "eye_c_b", "mouth_c_r", "mouth_c_g", "mouth_c_b",
)

# skin/mouth green and blue are stored relative to the red channel
_PARAM_RANGES = {
    "face_ax": (0.26, 0.36), "face_ay": (0.32, 0.42), "face_cy": (0.50, 0.56),
    "eye_sep": (0.10, 0.20), "eye_y": (-0.16, -0.04), "eye_r": (0.035, 0.07),
    "nose_len": (0.06, 0.16), "mouth_y": (0.12, 0.24), "mouth_w": (0.06, 0.16),
    "mouth_h": (0.02, 0.05), "hair_top": (0.15, 0.7), "tex_freq": (1.0, 4.0),
    "tex_theta": (0.0, np.pi), "tex_amp": (0.0, 0.12),
    "skin_r": (0.35, 0.95), "skin_g": (0.6, 0.85), "skin_b": (0.6, 0.9),
    "hair_r": (0.05, 0.65), "hair_g": (0.05, 0.5), "hair_b": (0.02, 0.35),
    "eye_c_r": (0.05, 0.45), "eye_c_g": (0.05, 0.45), "eye_c_b": (0.05, 0.5),
    "mouth_c_r": (0.5, 0.85), "mouth_c_g": (0.2, 0.45), "mouth_c_b": (0.2, 0.45),
}


def identity_parameters(seed: int, identity_id: int) -> np.ndarray:
    rng = np.random.default_rng([seed, identity_id, 0x1D])
    return np.array([rng.uniform(*_PARAM_RANGES[name]) for name in _PARAM_NAMES])


def _soft(sd: np.ndarray, edge: float) -> np.ndarray:
    # sd > 0 inside the shape
    return 1.0 / (1.0 + np.exp(-sd / edge))


def render_identity(params: np.ndarray, size: int, channels: int, shift=(0, 0), light=1.0,
                    noise: np.ndarray | None = None, background=(0.5, 0.5, 0.5)):
    p = dict(zip(_PARAM_NAMES, params))
    edge = 0.6 / size
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    cx = 0.5 + shift[0] / size
    cy = p["face_cy"] + shift[1] / size

    def col(k):
        if k == "skin":
            r = p["skin_r"]
            return np.array([r, r * p["skin_g"], r * p["skin_g"] * p["skin_b"]])
        return np.array([p[f"{k}_r"], p[f"{k}_g"], p[f"{k}_b"]])

    img = np.broadcast_to(np.asarray(background, dtype=np.float64), (size, size, 3)).copy()

    def paint(mask, color):
        nonlocal img
        img = img * (1 - mask[..., None]) + mask[..., None] * color

    rad = np.sqrt(((xx - cx) / p["face_ax"]) ** 2 + ((yy - cy) / p["face_ay"]) ** 2)
    face = _soft((1 - rad) * min(p["face_ax"], p["face_ay"]), edge)
    hair_line = cy - p["face_ay"] * (1 - p["hair_top"])
    hair_rad = np.sqrt(((xx - cx) / (p["face_ax"] * 1.12)) ** 2 + ((yy - cy) / (p["face_ay"] * 1.08)) ** 2)
    hair = _soft((1 - hair_rad) * p["face_ax"], edge) * _soft(hair_line - yy, edge)
    paint(_soft((1 - hair_rad) * p["face_ax"], edge) * (yy < cy), col("hair") * 0.9)

    u = (xx - cx) * np.cos(p["tex_theta"]) + (yy - cy) * np.sin(p["tex_theta"])
    skin = col("skin")[None, None, :] * (1 + p["tex_amp"] * np.sin(2 * np.pi * p["tex_freq"] * u / p["face_ax"]))[..., None]
    img = img * (1 - face[..., None]) + face[..., None] * skin
    paint(hair, col("hair"))

    ey = cy + p["eye_y"]
    for sgn in (-1, 1):
        ex = cx + sgn * p["eye_sep"]
        d = np.sqrt((xx - ex) ** 2 + (yy - ey) ** 2)
        paint(_soft(p["eye_r"] - d, edge) * face, col("eye_c"))
    nose = _soft(0.018 - np.abs(xx - cx), edge) * _soft(yy - ey, edge) * _soft(ey + p["nose_len"] - yy, edge)
    paint(nose * face * 0.5, col("skin") * 0.6)
    my = cy + p["mouth_y"]
    mouth = np.sqrt(((xx - cx) / p["mouth_w"]) ** 2 + ((yy - my) / p["mouth_h"]) ** 2)
    paint(_soft((1 - mouth) * p["mouth_h"], edge) * face, col("mouth_c"))

    img = img * light
    if noise is not None:
        img = img + noise
    img = np.clip(img, 0.0, 1.0)
    if channels == 1:
        img = img @ np.array([0.299, 0.587, 0.114])
        img = img[..., None]

    x0 = int(np.floor((cx - p["face_ax"] * 1.12) * size))
    x1 = int(np.ceil((cx + p["face_ax"] * 1.12) * size))
    y0 = int(np.floor((cy - p["face_ay"] * 1.08) * size))
    y1 = int(np.ceil((cy + p["face_ay"]) * size))
    box = BoundingBox(x0, y0, x1, y1).clip(size, size)
    return img, box


def generate_synthetic_identities(cfg: SyntheticConfig) -> list[LabeledImage]:
    """Render ``num_identities * images_per_identity`` labeled scenes; a pure function of ``cfg``."""
    seed = 0 if cfg.seed is None else cfg.seed
    nz = cfg.nuisance
    out = []
    for ident in range(cfg.num_identities):
        params = identity_parameters(seed, ident)
        for img_id in range(cfg.images_per_identity):
            rng = np.random.default_rng([seed, ident, img_id, 0xA5])
            light = 1.0 + rng.uniform(-nz.lighting_range, nz.lighting_range)
            s = nz.shift_range_px
            shift = tuple(int(v) for v in rng.integers(-s, s + 1, size=2))
            background = rng.uniform(0.1, 0.9, size=3)
            noise = rng.normal(0.0, nz.noise_sigma, size=(cfg.image_size, cfg.image_size, 3)) if nz.noise_sigma > 0 else None
            img, box = render_identity(params, cfg.image_size, cfg.channels, shift, light, noise, background)
            out.append(LabeledImage(img, ident, img_id, (box,)))
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    nonzero = [i for i, f in enumerate(fractions) if f > 0]
    if n < len(nonzero):
        raise ValueError(f"cannot split {n} groups into {len(nonzero)} non-empty parts")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    for i in nonzero:
        counts[i] = max(counts[i], 1)
    while sum(counts) > n:
        i = max((j for j in nonzero if counts[j] > 1), key=lambda j: counts[j] - raw[j])
        counts[i] -= 1
    while sum(counts) < n:
        i = max(nonzero, key=lambda j: raw[j] - counts[j])
        counts[i] += 1
    return counts


def split_dataset(data: Sequence[LabeledImage], fractions=(0.6, 0.2, 0.2), seed: int = 0,
                  mode: str = "identity"):
    """Deterministic (train, val, test) split; by identity unless ``mode == "image"``."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"invalid split fractions {fractions}")
    rng = np.random.default_rng(seed)
    if mode == "identity":
        groups = sorted({d.identity_id for d in data})
        order = [groups[i] for i in rng.permutation(len(groups))]
        counts = _allocate(len(groups), fractions)
        assign, start = {}, 0
        for part, c in enumerate(counts):
            for g in order[start : start + c]:
                assign[g] = part
            start += c
        parts = ([], [], [])
        for d in data:
            parts[assign[d.identity_id]].append(d)
    elif mode == "image":
        order = rng.permutation(len(data))
        counts = _allocate(len(data), fractions)
        parts, start = ([], [], []), 0
        for part, c in enumerate(counts):
            idx = sorted(order[start : start + c])
            parts[part].extend(data[i] for i in idx)
            start += c
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return parts


def reserve_target_images(data: Sequence[LabeledImage], identity_id: int, k: int):
    """Move the first ``k`` images (by image_id) of ``identity_id`` out of ``data``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    mine = sorted((d for d in data if d.identity_id == identity_id), key=lambda d: d.image_id)
    if len(mine) < k:
        raise ValueError(f"identity {identity_id} has {len(mine)} images, cannot reserve {k}")
    picked = {d.key for d in mine[:k]}
    targets = [d for d in mine[:k]]
    remainder = [d for d in data if d.key not in picked]
    return targets, remainder


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


@dataclass
class FaceDataset:
    """Preprocessed (cropped + resized) images grouped by split."""

    train: list[LabeledImage]
    val: list[LabeledImage]
    test: list[LabeledImage]
    targets: list[LabeledImage]
    target_identity: int | None
    image_size: int

    def split(self, name: str) -> list[LabeledImage]:
        return getattr(self, name)


def image_filename(identity_id: int, image_id: int) -> str:
    return f"{identity_id}_{image_id}.png"


def write_dataset(root, cfg: SyntheticConfig, scenes: Sequence[LabeledImage], splits: dict[str, Iterable],
                  target_identity: int | None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    assignment = {}
    for name, items in splits.items():
        for d in items:
            assignment[d.key] = name
    records = []
    for d in scenes:
        fname = image_filename(d.identity_id, d.image_id)
        save_png(root / "images" / fname, d.image)
        records.append({
            "file": f"images/{fname}",
            "identity_id": d.identity_id,
            "image_id": d.image_id,
            "boxes": [b.as_list() for b in d.boxes],
            "split": assignment.get(d.key, "unused"),
        })
    manifest = {
        "synthetic_config": cfg.model_dump(mode="json"),
        "image_size": cfg.image_size,
        "target_identity": target_identity,
        "images": records,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(root) -> FaceDataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    size = manifest["image_size"]
    parts = {"train": [], "val": [], "test": [], "targets": []}
    for rec in manifest["images"]:
        if rec["split"] not in parts:
            continue
        scene = load_png(root / rec["file"])
        boxes = tuple(BoundingBox(*b) for b in rec["boxes"])
        item = LabeledImage(scene, rec["identity_id"], rec["image_id"], boxes)
        face = prepare_face(item, size)
        parts[rec["split"]].append(LabeledImage(face, item.identity_id, item.image_id, boxes))
    for v in parts.values():
        v.sort(key=lambda d: d.key)
    return FaceDataset(**parts, target_identity=manifest["target_identity"], image_size=size)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stack_images(items: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([d.image for d in items]).astype(np.float64)
