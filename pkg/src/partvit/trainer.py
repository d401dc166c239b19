"""AdamW optimization, warmup+cosine schedule, training loop, checkpoints.

Weight-decay grouping: landmark-CNN tensors decay at 0.05, everything else at
0.1, except biases, layer-norm gains, positional tables, and the class token,
which never decay.  The checkpoint format is a manifest.json next to a flat
little-endian float32 blob; payload size is exactly 4 bytes per parameter.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, zero_grads
from .config import LandmarkNetConfig, ModelConfig
from .cosface import (DEFAULT_MARGIN, DEFAULT_SCALE, cosface_loss,
                      init_cosface_head, predictions)
from .data import AugmentConfig, SynthDataset, augment, mixup_batch
from .errors import CheckpointError, ContractError, NumericError
from .parts import (init_landmark_params, part_fvit_forward,
                    regular_grid_landmarks)
from .vit import Params, fvit_forward, init_vit_params

CHECKPOINT_VERSION = 1

_NO_DECAY_SUFFIXES = (".b", ".b1", ".b2", ".g")
_NO_DECAY_NAMES = {"vit.cls", "vit.pos.table", "vit.pos.cls"}


def weight_decay_for(name: str, vit_decay: float = 0.1, lmk_decay: float = 0.05) -> float:
    """Total assignment of every parameter name to exactly one decay group."""
    if name.endswith(_NO_DECAY_SUFFIXES) or name in _NO_DECAY_NAMES:
        return 0.0
    if name.startswith("lmk."):
        return lmk_decay
    return vit_decay


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    vit_decay: float = 0.1
    lmk_decay: float = 0.05
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Params, state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update in place; grads must be set."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            raise ContractError(f"adamw_step: no gradient for {name!r}")
        if g.shape != p.data.shape:
            raise ContractError(f"adamw_step: grad shape {g.shape} != param shape "
                                f"{p.data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        wd = weight_decay_for(name, state.vit_decay, state.lmk_decay)
        p.data -= (lr * (mhat / (np.sqrt(vhat) + state.eps) + wd * p.data)).astype(p.data.dtype)


@dataclass
class Schedule:
    base_lr: float = 3e-4
    warmup_epochs: int = 5
    total_epochs: int = 34
    steps_per_epoch: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ContractError("warmup_epochs must be < total_epochs")

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch


def cosine_warmup_lr(step: int, sched: Schedule) -> float:
    """Linear ramp 0 -> base_lr, then half-cosine base_lr -> min_lr."""
    if step < 0:
        raise ContractError(f"cosine_warmup_lr: step must be >= 0, got {step}")
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    span = max(1, sched.total_steps - sched.warmup_steps)
    progress = min(1.0, (step - sched.warmup_steps) / span)
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# model assembly + forward
# ---------------------------------------------------------------------------

def build_model(cfg: ModelConfig, lmk_cfg: Optional[LandmarkNetConfig],
                num_classes: int, rng: np.random.Generator) -> Params:
    """Backbone (+ landmark CNN for the part variant) + CosFace head."""
    lmk_feat = None
    if cfg.variant == "part":
        if lmk_cfg is None:
            raise ContractError("part variant needs a LandmarkNetConfig")
        lmk_feat = lmk_cfg.feature_dim if cfg.bottleneck_violation else None
    params = init_vit_params(cfg, rng, lmk_feature_dim=lmk_feat)
    if cfg.variant == "part":
        grid = regular_grid_landmarks(cfg).data[0]
        params.update(init_landmark_params(lmk_cfg, rng, grid_bias=grid))
    params.update(init_cosface_head(cfg.embed_dim, num_classes, rng))
    return params


def model_forward(images: Tensor, params: Params, cfg: ModelConfig,
                  lmk_cfg: Optional[LandmarkNetConfig] = None,
                  train_mode: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    if cfg.variant == "part":
        return part_fvit_forward(images, params, cfg, lmk_cfg,
                                 train_mode=train_mode, rng=rng)
    return fvit_forward(images, params, cfg, train_mode=train_mode, rng=rng)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 3e-4
    min_lr: float = 0.0
    warmup_epochs: int = 5
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE
    seed: int = 0
    workers: int = 1          # documentation of the determinism contract

    def to_dict(self):
        return asdict(self)


def _grad_norms(params: Params, top: int = 5):
    norms = {n: float(np.linalg.norm(t.grad)) for n, t in params.items()
             if t.grad is not None}
    return dict(sorted(norms.items(), key=lambda kv: -kv[1])[:top])


def train_loop(cfg: ModelConfig, lmk_cfg: Optional[LandmarkNetConfig],
               dataset: SynthDataset, aug_cfg: AugmentConfig,
               train_cfg: TrainConfig,
               params: Optional[Params] = None,
               out_dir: Optional[str] = None,
               opt_state: Optional[OptimizerState] = None
               ) -> Tuple[Params, List[dict]]:
    """SGD over shuffled minibatches; returns (params, per-step metric rows).

    Deterministic under a fixed seed in single-worker mode: epoch shuffles and
    per-sample augmentation draw from streams keyed on (seed, epoch, index),
    so the order workers consume samples cannot change the result.
    """
    num_classes = int(dataset.labels.max()) + 1
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = build_model(cfg, lmk_cfg, num_classes, rng)
    if not aug_cfg.stochastic_depth and cfg.stochastic_depth_prob > 0:
        cfg = dataclasses.replace(cfg, stochastic_depth_prob=0.0)
    warmup = train_cfg.warmup_epochs if aug_cfg.warmup else 0
    steps_per_epoch = max(1, len(dataset) // train_cfg.batch_size)
    sched = Schedule(base_lr=train_cfg.base_lr, warmup_epochs=warmup,
                     total_epochs=max(train_cfg.epochs, warmup + 1),
                     steps_per_epoch=steps_per_epoch, min_lr=train_cfg.min_lr)
    if opt_state is None:
        opt_state = OptimizerState()
    history: List[dict] = []
    writer = None
    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=["epoch", "step", "lr", "loss", "train_acc"])
        writer.writeheader()

    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = np.random.default_rng([train_cfg.seed, 17, epoch]).permutation(len(dataset))
            for b in range(steps_per_epoch):
                idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
                imgs = np.stack([
                    augment(dataset.images[i], aug_cfg,
                            np.random.default_rng([train_cfg.seed, epoch, int(i)]))
                    for i in idx])
                hard = dataset.labels[idx]
                imgs, soft = mixup_batch(imgs, hard, num_classes, aug_cfg,
                                         np.random.default_rng([train_cfg.seed, 23, epoch, b]))
                lr = cosine_warmup_lr(step, sched)
                model_rng = np.random.default_rng([train_cfg.seed, 29, epoch, b])
                zero_grads(params.values())
                emb = model_forward(Tensor(imgs), params, cfg, lmk_cfg,
                                    train_mode=True, rng=model_rng)
                loss = cosface_loss(emb, soft, params["head.w"],
                                    margin=train_cfg.margin, scale=train_cfg.scale)
                loss_val = loss.item()
                backward(loss)
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss {loss_val} at epoch {epoch} step {step}; "
                        f"lr={lr:.3e}; largest grad norms: {_grad_norms(params)}")
                acc = float((predictions(emb, params["head.w"]) == hard).mean())
                adamw_step(params, opt_state, lr)
                row = {"epoch": epoch, "step": step, "lr": lr,
                       "loss": loss_val, "train_acc": acc}
                history.append(row)
                if writer is not None:
                    writer.writerow(row)
                step += 1
            if csv_file is not None:
                csv_file.flush()
    finally:
        if csv_file is not None:
            csv_file.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint"), params, cfg, lmk_cfg,
                        opt_state=opt_state, rng_state=rng.bit_generator.state)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + flat little-endian float32 blob
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: Params, cfg: ModelConfig,
                    lmk_cfg: Optional[LandmarkNetConfig] = None,
                    opt_state: Optional[OptimizerState] = None,
                    rng_state: Optional[dict] = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(path, "params.bin"), "wb") as f:
        for name in sorted(params):
            arr = params[name].data.astype("<f4")
            entries.append({"name": name, "shape": list(arr.shape),
                            "dtype": "float32", "offset": offset})
            f.write(arr.tobytes())
            offset += arr.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "tensors": entries,
        "payload_bytes": offset,
        "model_config": cfg.to_dict(),
        "landmark_config": lmk_cfg.to_dict() if lmk_cfg is not None else None,
        "optimizer_state": opt_state is not None,
        "optimizer_step": opt_state.step if opt_state is not None else None,
        "rng_state": _jsonable(rng_state),
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def load_checkpoint(path: str) -> Tuple[Params, ModelConfig, Optional[LandmarkNetConfig], dict]:
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint manifest: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    blob_path = os.path.join(path, "params.bin")
    size = os.path.getsize(blob_path)
    if size != manifest["payload_bytes"]:
        raise CheckpointError(f"truncated payload: {size} bytes on disk, "
                              f"manifest declares {manifest['payload_bytes']}")
    blob = np.fromfile(blob_path, dtype="<f4")
    params: Params = {}
    for ent in manifest["tensors"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"] // 4
        if start + n > blob.size:
            raise CheckpointError(f"tensor {ent['name']!r} extends past payload end")
        params[ent["name"]] = Tensor(blob[start:start + n].reshape(ent["shape"]).copy(),
                                     requires_grad=True)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    lmk_cfg = None
    if manifest.get("landmark_config"):
        lmk_cfg = LandmarkNetConfig.from_dict(manifest["landmark_config"])
    return params, cfg, lmk_cfg, manifest


def verify_checkpoint_params(params: Params, expected_names) -> None:
    """Named error listing tensors missing from or unexpected in a checkpoint."""
    have, want = set(params), set(expected_names)
    if have != want:
        missing = sorted(want - have)
        unknown = sorted(have - want)
        raise CheckpointError(f"checkpoint/config mismatch: missing {missing}, unknown {unknown}")
