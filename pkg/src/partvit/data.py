"""Synthetic identity dataset and the training augmentation ladder.

The generator is a desk-scale stand-in for a real face corpus: identity is
encoded in procedural part geometry and colors (two eyes, a nose, two mouth
corners on an elliptical face), nuisance variation in a per-image shift,
rotation, and brightness.  Ground-truth part centers are emitted alongside so
landmark-stability protocols have annotations to regress onto.

Augmentation stages (flip, randaugment, resize&crop, mixup, cutout) follow a
configurable ladder; randaugment draws 2 ops at magnitude 2 from a documented
subset that excludes solarize and invert.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .errors import ConfigError

PART_NAMES = ("eye_left", "eye_right", "nose", "mouth_left", "mouth_right")

# base part positions relative to the face center, in units of image_size/56
_BASE_PARTS = np.array([
    [-8.0, -7.0],   # eye_left
    [8.0, -7.0],    # eye_right
    [0.0, 2.0],     # nose
    [-6.0, 9.0],    # mouth_left
    [6.0, 9.0],     # mouth_right
])


@dataclass
class SyntheticFaceSpec:
    num_identities: int = 10
    images_per_identity: int = 50
    image_size: int = 56
    seed: int = 0
    shift_px: float = 4.0
    rot_deg: float = 12.0
    brightness_jitter: float = 0.15
    noise_std: float = 0.01

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_identity < 1:
            raise ConfigError("num_identities and images_per_identity must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthDataset:
    images: np.ndarray            # [M, 3, H, W] float32 in [0, 1]
    labels: np.ndarray            # [M] int identity indices
    ids: List[str]                # stable string keys
    part_centers: np.ndarray      # [M, 5, 2] normalized (x, y)
    spec: SyntheticFaceSpec

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(self.images[idx], self.labels[idx],
                           [self.ids[i] for i in idx], self.part_centers[idx], self.spec)


def identity_latent(spec: SyntheticFaceSpec, ident: int) -> dict:
    """Deterministic per-identity appearance parameters."""
    rng = np.random.default_rng([spec.seed, 1000 + ident])
    s = spec.image_size / 56.0
    return {
        "part_offsets": rng.uniform(-3.0, 3.0, (5, 2)) * s,
        "part_colors": rng.uniform(0.05, 0.95, (5, 3)),
        "part_radii": rng.uniform(2.0, 3.6, 5) * s,
        "face_color": rng.uniform(0.3, 0.75, 3),
        "face_axes": rng.uniform(16.0, 21.0, 2) * s,
    }


def _render(spec: SyntheticFaceSpec, latent: dict, shift, rot_rad, brightness,
            noise: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    cx, cy = n / 2.0 + shift[0], n / 2.0 + shift[1]

    img = np.empty((3, n, n))
    img[:] = np.linspace(0.15, 0.35, n)[None, :, None]       # background gradient

    ax, ay = latent["face_axes"]
    d_face = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    alpha = np.clip((1.0 - d_face) * 8.0, 0.0, 1.0)          # soft ellipse edge
    img = img * (1 - alpha) + latent["face_color"][:, None, None] * alpha

    c, s = np.cos(rot_rad), np.sin(rot_rad)
    rel = _BASE_PARTS * (spec.image_size / 56.0) + latent["part_offsets"]
    rotated = np.stack([rel[:, 0] * c - rel[:, 1] * s,
                        rel[:, 0] * s + rel[:, 1] * c], axis=1)
    centers = rotated + [cx, cy]                             # [5, 2] pixel (x, y)

    for k in range(5):
        px, py = centers[k]
        r = latent["part_radii"][k]
        dist = np.sqrt((xx - px) ** 2 + (yy - py) ** 2)
        a = np.clip(r + 0.5 - dist, 0.0, 1.0)
        img = img * (1 - a) + latent["part_colors"][k][:, None, None] * a

    img = np.clip(img * brightness + noise, 0.0, 1.0)
    return img.astype(np.float32), (centers / n).astype(np.float32)


def synth_generate(spec: SyntheticFaceSpec) -> SynthDataset:
    """Deterministic procedural dataset with ground-truth part centers."""
    images, labels, ids, centers = [], [], [], []
    for ident in range(spec.num_identities):
        latent = identity_latent(spec, ident)
        for j in range(spec.images_per_identity):
            rng = np.random.default_rng([spec.seed, ident, j])
            shift = rng.uniform(-spec.shift_px, spec.shift_px, 2)
            rot = np.deg2rad(rng.uniform(-spec.rot_deg, spec.rot_deg))
            bright = rng.uniform(1 - spec.brightness_jitter, 1 + spec.brightness_jitter)
            noise = rng.normal(0.0, spec.noise_std, (3, spec.image_size, spec.image_size))
            img, ctr = _render(spec, latent, shift, rot, bright, noise)
            images.append(img)
            labels.append(ident)
            ids.append(f"id{ident:03d}/img{j:04d}")
            centers.append(ctr)
    return SynthDataset(np.stack(images), np.array(labels, dtype=np.int64),
                        ids, np.stack(centers), spec)


def split_dataset(ds: SynthDataset, val_fraction: float = 0.2) -> Tuple[SynthDataset, SynthDataset]:
    """Per-identity split; the last images of each identity go to val."""
    train_idx, val_idx = [], []
    for ident in np.unique(ds.labels):
        members = np.where(ds.labels == ident)[0]
        n_val = max(1, int(round(val_fraction * len(members))))
        train_idx.extend(members[:-n_val])
        val_idx.extend(members[-n_val:])
    return ds.subset(train_idx), ds.subset(val_idx)


# ---------------------------------------------------------------------------
# disk format: identity subdirectories of PNGs + manifest + part annotations
# ---------------------------------------------------------------------------

def save_dataset(ds: SynthDataset, root: str, val_fraction: float = 0.2) -> None:
    os.makedirs(root, exist_ok=True)
    for img, key in zip(ds.images, ds.ids):
        path = os.path.join(root, key + ".png")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        arr = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(path)
    train, val = split_dataset(ds, val_fraction)
    manifest = {
        "identities": int(ds.spec.num_identities),
        "splits": {"train": train.ids, "val": val.ids},
        "spec": ds.spec.to_dict(),
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(root, "parts.jsonl"), "w") as f:
        for key, ctr in zip(ds.ids, ds.part_centers):
            f.write(json.dumps({"id": key, "parts": ctr.tolist()}) + "\n")


def load_dataset(root: str, split: Optional[str] = None) -> SynthDataset:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    spec = SyntheticFaceSpec(**manifest["spec"])
    if split is None:
        keys = manifest["splits"]["train"] + manifest["splits"]["val"]
    else:
        keys = manifest["splits"][split]
    parts: Dict[str, list] = {}
    parts_path = os.path.join(root, "parts.jsonl")
    if os.path.exists(parts_path):
        with open(parts_path) as f:
            for line in f:
                rec = json.loads(line)
                parts[rec["id"]] = rec["parts"]
    images, labels, centers = [], [], []
    for key in keys:
        arr = np.asarray(Image.open(os.path.join(root, key + ".png")), dtype=np.float32) / 255.0
        images.append(arr.transpose(2, 0, 1))
        labels.append(int(key.split("/")[0][2:]))
        centers.append(parts.get(key, np.full((5, 2), np.nan)))
    return SynthDataset(np.stack(images), np.array(labels, dtype=np.int64),
                        list(keys), np.asarray(centers, dtype=np.float32), spec)


# ---------------------------------------------------------------------------
# augmentation ladder
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip: bool = True
    randaugment: bool = True
    resize_crop: bool = True
    stochastic_depth: bool = True      # consumed by the model config
    mixup: bool = True
    cutout: bool = True
    warmup: bool = True                # consumed by the lr schedule
    ra_magnitude: float = 2.0
    ra_num_ops: int = 2
    crop_range: Tuple[float, float] = (0.9, 1.0)
    mixup_alpha: float = 0.5
    mixup_prob: float = 0.2
    cutout_area: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop_range must lie in (0, 1], got {self.crop_range}")
        for name in ("mixup_prob", "cutout_area"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(flip=False, randaugment=False, resize_crop=False,
                   stochastic_depth=False, mixup=False, cutout=False, warmup=False)


def _to_pil(img: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8))


def _from_pil(pil: Image.Image) -> np.ndarray:
    return np.asarray(pil, dtype=np.float32).transpose(2, 0, 1) / 255.0


def _signed(level, rng):
    return level if rng.random() < 0.5 else -level


# (name, needs_level, apply); levels follow the common 0-30 magnitude scale
_RA_OPS = {
    "rotate": lambda p, m, rng: p.rotate(_signed(30.0 * m / 30.0, rng), resample=Image.BILINEAR),
    "translate_x": lambda p, m, rng: p.transform(
        p.size, Image.AFFINE, (1, 0, _signed(0.45 * m / 30.0, rng) * p.size[0], 0, 1, 0),
        resample=Image.BILINEAR),
    "translate_y": lambda p, m, rng: p.transform(
        p.size, Image.AFFINE, (1, 0, 0, 0, 1, _signed(0.45 * m / 30.0, rng) * p.size[1]),
        resample=Image.BILINEAR),
    "shear_x": lambda p, m, rng: p.transform(
        p.size, Image.AFFINE, (1, _signed(0.3 * m / 30.0, rng), 0, 0, 1, 0),
        resample=Image.BILINEAR),
    "shear_y": lambda p, m, rng: p.transform(
        p.size, Image.AFFINE, (1, 0, 0, _signed(0.3 * m / 30.0, rng), 1, 0),
        resample=Image.BILINEAR),
    "brightness": lambda p, m, rng: ImageEnhance.Brightness(p).enhance(1.0 + _signed(0.9 * m / 30.0, rng)),
    "contrast": lambda p, m, rng: ImageEnhance.Contrast(p).enhance(1.0 + _signed(0.9 * m / 30.0, rng)),
    "sharpness": lambda p, m, rng: ImageEnhance.Sharpness(p).enhance(1.0 + _signed(0.9 * m / 30.0, rng)),
    "color": lambda p, m, rng: ImageEnhance.Color(p).enhance(1.0 + _signed(0.9 * m / 30.0, rng)),
    "equalize": lambda p, m, rng: ImageOps.equalize(p),
    "autocontrast": lambda p, m, rng: ImageOps.autocontrast(p),
    "posterize": lambda p, m, rng: ImageOps.posterize(p, 8 - int(4.0 * m / 30.0)),
}
RA_OP_NAMES = tuple(sorted(_RA_OPS))


def randaugment(img: np.ndarray, magnitude: float, num_ops: int,
                rng: np.random.Generator) -> np.ndarray:
    pil = _to_pil(img)
    for name in rng.choice(RA_OP_NAMES, size=num_ops, replace=True):
        pil = _RA_OPS[name](pil, magnitude, rng)
    return _from_pil(pil)


def random_resize_crop(img: np.ndarray, crop_range, rng: np.random.Generator) -> np.ndarray:
    _, H, W = img.shape
    area = rng.uniform(*crop_range)
    side = max(1, int(round(np.sqrt(area) * H)))
    top = rng.integers(0, H - side + 1)
    left = rng.integers(0, W - side + 1)
    pil = _to_pil(img).crop((left, top, left + side, top + side)).resize((W, H), Image.BILINEAR)
    return _from_pil(pil)


def cutout(img: np.ndarray, area_fraction: float, rng: np.random.Generator) -> np.ndarray:
    _, H, W = img.shape
    side = int(round(np.sqrt(area_fraction) * H))
    if side == 0:
        return img
    top = rng.integers(0, max(1, H - side + 1))
    left = rng.integers(0, max(1, W - side + 1))
    out = img.copy()
    out[:, top:top + side, left:left + side] = 0.0
    return out


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            train_mode: bool = True) -> np.ndarray:
    """Apply the enabled per-sample stages in ladder order."""
    if not train_mode:
        return img
    if cfg.flip and rng.random() < 0.5:
        img = img[:, :, ::-1].copy()
    if cfg.randaugment:
        img = randaugment(img, cfg.ra_magnitude, cfg.ra_num_ops, rng)
    if cfg.resize_crop:
        img = random_resize_crop(img, cfg.crop_range, rng)
    if cfg.cutout:
        img = cutout(img, cfg.cutout_area, rng)
    return np.clip(img, 0.0, 1.0)


def mixup_batch(images: np.ndarray, labels: np.ndarray, num_classes: int,
                cfg: AugmentConfig, rng: np.random.Generator
                ) -> Tuple[np.ndarray, np.ndarray]:
    """Batch-level mixup producing soft labels; always returns soft labels."""
    soft = np.zeros((len(labels), num_classes), dtype=np.float32)
    soft[np.arange(len(labels)), labels] = 1.0
    if not cfg.mixup or rng.random() >= cfg.mixup_prob:
        return images, soft
    lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    perm = rng.permutation(len(labels))
    mixed = lam * images + (1.0 - lam) * images[perm]
    return mixed.astype(images.dtype), lam * soft + (1.0 - lam) * soft[perm]
