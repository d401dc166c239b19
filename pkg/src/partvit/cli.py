"""Command-line entry point.

Subcommands: generate, train, extract, landmarks, attention, evaluate.
Configuration precedence: CLI flags and dotted-key overrides > JSON config
file > preset defaults.  Exit codes: 0 ok, 1 runtime failure, 2 usage or
validation error.  PARTVIT_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from typing import List, Optional

import numpy as np

from .config import LandmarkNetConfig, ModelConfig, preset
from .data import (AugmentConfig, SyntheticFaceSpec, load_dataset,
                   save_dataset, synth_generate)
from .errors import (CheckpointError, ConfigError, ContractError,
                     NumericError, ShapeError)
from .evalsuite import (LandmarkEvalSet, ScoreSet, attention_map_dump,
                        build_verification_pairs, embed_extract,
                        embeddings_by_id, forward_error, landmark_extract,
                        metric_record, overlap_rate_dataset, rank1_identification,
                        read_jsonl, tar_at_far, verification_accuracy_kfold,
                        write_jsonl)
from .trainer import TrainConfig, load_checkpoint, train_loop

log = logging.getLogger("partvit")


def default_config(preset_name: str = "fvit-tiny") -> dict:
    model = preset(preset_name).to_dict()
    return {
        "model": model,
        "landmark": LandmarkNetConfig(num_landmarks=model["num_patches"]).to_dict(),
        "train": TrainConfig().to_dict(),
        "augment": AugmentConfig().to_dict(),
        "data": SyntheticFaceSpec().to_dict(),
        "eval": {"folds": 5, "num_pairs": 200, "far": 1e-2, "layer": -1},
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value, touched: set) -> None:
    """Set a dotted key, failing loudly on keys that do not exist."""
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
    touched.add(dotted)


def assemble_config(args) -> dict:
    cfg = default_config(args.preset)
    touched: set = set()
    if args.config:
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {args.config}: {e}") from e
        for section, body in file_cfg.items():
            if not isinstance(body, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for k, v in body.items():
                apply_override(cfg, f"{section}.{k}", v, touched)
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        apply_override(cfg, key.strip(), _parse_value(val.strip()), touched)

    flag_map = {
        "variant": "model.variant",
        "patches": "model.num_patches",
        "pos_enc": "model.pos_encoding",
        "epochs": "train.epochs",
        "workers": "train.workers",
    }
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            apply_override(cfg, key, val, touched)
    if getattr(args, "bottleneck_violation", False):
        apply_override(cfg, "model.bottleneck_violation", True, touched)
    if args.seed is not None:
        apply_override(cfg, "train.seed", args.seed, touched)
        apply_override(cfg, "data.seed", args.seed, touched)

    # derived defaults: keep patch size and landmark count in sync with R
    if "model.num_patches" in touched and "model.patch_size" not in touched:
        H = cfg["model"]["image_size"][0]
        side = math.isqrt(cfg["model"]["num_patches"])
        if side and H % side == 0:
            cfg["model"]["patch_size"] = H // side
    if "landmark.num_landmarks" not in touched:
        cfg["landmark"]["num_landmarks"] = cfg["model"]["num_patches"]
    return cfg


def _model_from_config(cfg: dict):
    model_cfg = ModelConfig.from_dict(cfg["model"])
    lmk_cfg = LandmarkNetConfig.from_dict(cfg["landmark"]) \
        if model_cfg.variant == "part" else None
    return model_cfg, lmk_cfg


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"missing required flag for {what}")
    return path


def _load_model(args):
    path = _require(args.checkpoint, "--checkpoint")
    if not os.path.isdir(path):
        raise ConfigError(f"checkpoint directory not found: {path}")
    return load_checkpoint(path)


def _load_data(args, split=None):
    root = _require(args.data, "--data")
    if not os.path.isdir(root):
        raise ConfigError(f"dataset root not found: {root}")
    return load_dataset(root, split=split)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = assemble_config(args)
    spec = SyntheticFaceSpec(**cfg["data"])
    out = _require(args.out, "--out")
    ds = synth_generate(spec)
    save_dataset(ds, out)
    log.info("wrote %d images to %s", len(ds), out)
    print(os.path.join(out, "manifest.json"))
    return 0


def cmd_train(args) -> int:
    cfg = assemble_config(args)
    out = _require(args.out, "--out")
    ds = _load_data(args, split="train")
    model_cfg, lmk_cfg = _model_from_config(cfg)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
    train_cfg = TrainConfig(**cfg["train"])
    aug_cfg = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in cfg["augment"].items()})
    try:
        params, history = train_loop(model_cfg, lmk_cfg, ds, aug_cfg, train_cfg,
                                     out_dir=out)
    except NumericError as e:
        diag_path = os.path.join(out, "failure.json")
        with open(diag_path, "w") as f:
            json.dump({"error": str(e)}, f, indent=1)
        log.error("training aborted: %s (diagnostics: %s)", e, diag_path)
        return 1
    if history:
        log.info("final loss %.4f, train acc %.3f",
                 history[-1]["loss"], history[-1]["train_acc"])
    print(os.path.join(out, "checkpoint"))
    return 0


def cmd_extract(args) -> int:
    params, model_cfg, lmk_cfg, _ = _load_model(args)
    ds = _load_data(args)
    out = _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    write_jsonl(embed_extract(params, model_cfg, lmk_cfg, ds),
                os.path.join(out, "embeddings.jsonl"))
    print(os.path.join(out, "embeddings.jsonl"))
    return 0


def cmd_landmarks(args) -> int:
    params, model_cfg, lmk_cfg, _ = _load_model(args)
    if lmk_cfg is None:
        raise ConfigError("checkpoint is a holistic model; no landmark CNN to dump")
    ds = _load_data(args)
    out = _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    write_jsonl(landmark_extract(params, model_cfg, lmk_cfg, ds),
                os.path.join(out, "landmarks.jsonl"))
    print(os.path.join(out, "landmarks.jsonl"))
    return 0


def cmd_attention(args) -> int:
    cfg = assemble_config(args)
    params, model_cfg, lmk_cfg, _ = _load_model(args)
    ds = _load_data(args)
    out = _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    n = min(args.limit, len(ds))
    recs = attention_map_dump(params, model_cfg, lmk_cfg, ds.images[:n],
                              ds.ids[:n], layer=int(cfg["eval"]["layer"]))
    write_jsonl(recs, os.path.join(out, "attention.jsonl"))
    print(os.path.join(out, "attention.jsonl"))
    return 0


def cmd_evaluate(args) -> int:
    cfg = assemble_config(args)
    out = _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    ev = cfg["eval"]
    rng = np.random.default_rng(cfg["train"]["seed"])
    metrics: List[dict] = []
    wanted = args.metric

    def need(path, what):
        if not path or not os.path.exists(path):
            raise ConfigError(f"{what} file not found: {path}")
        return path

    if wanted in ("verification", "tar_at_far", "rank1", "all"):
        recs = read_jsonl(need(args.embeddings, "embeddings"))
        emb = embeddings_by_id(recs)
        if wanted in ("verification", "all"):
            pairs = build_verification_pairs(recs, int(ev["num_pairs"]),
                                             int(ev["folds"]), rng)
            metrics.append(metric_record(
                "verification_accuracy", verification_accuracy_kfold(pairs, emb),
                {"folds": ev["folds"], "num_pairs": ev["num_pairs"]}))
        if wanted in ("tar_at_far", "all"):
            pairs = build_verification_pairs(recs, int(ev["num_pairs"]),
                                             int(ev["folds"]), rng)
            scores = {True: [], False: []}
            for a, b, same in pairs.pairs:
                scores[same].append(float(emb[a] @ emb[b]
                                          / (np.linalg.norm(emb[a]) * np.linalg.norm(emb[b]))))
            metrics.append(metric_record(
                "tar_at_far", tar_at_far(ScoreSet(scores[True], scores[False]),
                                         float(ev["far"])),
                {"far": ev["far"]}))
        if wanted in ("rank1", "all"):
            by_label: dict = {}
            for r in recs:
                by_label.setdefault(r["label"], []).append(np.asarray(r["embedding"]))
            gallery, g_labels, probe, p_labels = [], [], [], []
            for lab, vecs in sorted(by_label.items()):
                gallery.append(vecs[0])
                g_labels.append(lab)
                for v in vecs[1:]:
                    probe.append(v)
                    p_labels.append(lab)
            metrics.append(metric_record(
                "rank1_identification",
                rank1_identification(np.stack(probe), p_labels,
                                     np.stack(gallery), g_labels)))
    if wanted in ("overlap", "all"):
        recs = read_jsonl(need(args.landmarks, "landmarks"))
        model_side = cfg["model"]["image_size"][0]
        K = cfg["model"]["patch_size"]
        lms = [np.asarray(r["landmarks"]) * model_side for r in recs]
        mean, var = overlap_rate_dataset(lms, K)
        metrics.append(metric_record("overlap_rate_mean", mean, {"K": K}))
        metrics.append(metric_record("overlap_rate_var", var, {"K": K}))
    if wanted in ("forward_error", "all"):
        recs = read_jsonl(need(args.landmarks, "landmarks"))
        ds = _load_data(args)
        by_id = {r["id"]: np.asarray(r["landmarks"]) for r in recs}
        missing = [k for k in ds.ids if k not in by_id]
        if missing:
            raise ConfigError(f"landmark dump missing ids, e.g. {missing[0]!r}")
        pred = np.stack([by_id[k] for k in ds.ids])
        gt = ds.part_centers.astype(np.float64)
        h = len(ds) // 2
        es = LandmarkEvalSet(pred[:h], gt[:h], pred[h:], gt[h:])
        metrics.append(metric_record("forward_error", forward_error(es)))
    if not metrics:
        raise ConfigError(f"unknown metric {wanted!r}")
    path = os.path.join(out, "metrics.json")
    with open(path, "w") as f:
        json.dump(metrics, f, indent=1)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partvit",
                                description="part-based face transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("extract", cmd_extract), ("landmarks", cmd_landmarks),
                     ("attention", cmd_attention), ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--checkpoint", help="checkpoint directory")
        sp.add_argument("--data", help="dataset root")
        sp.add_argument("--preset", default="fvit-tiny",
                        choices=["fvit-b", "fvit-s", "fvit-tiny"])
        sp.add_argument("--variant", choices=["holistic", "part"])
        sp.add_argument("--patches", type=int, choices=[16, 49, 196])
        sp.add_argument("--pos-enc", dest="pos_enc",
                        choices=["trainable", "cosine", "coordinate"])
        sp.add_argument("--bottleneck-violation", action="store_true")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("override", nargs="*", metavar="key=value",
                        help="dotted-key config overrides")
        if name == "attention":
            sp.add_argument("--limit", type=int, default=8)
        if name == "evaluate":
            sp.add_argument("--metric", default="all",
                            choices=["verification", "tar_at_far", "rank1",
                                     "overlap", "forward_error", "all"])
            sp.add_argument("--embeddings", help="embeddings.jsonl path")
            sp.add_argument("--landmarks", help="landmarks.jsonl path")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("PARTVIT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, ContractError, CheckpointError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
