"""Evaluation protocols: verification, TAR@FAR, rank-1, landmark statistics.

All metrics are pure functions over embedding / landmark records, so they can
be driven either in-process or from the JSON-lines dumps written by the CLI.
Embedding records: {"id", "label", "embedding": [d floats]} (unit-norm rows).
Landmark records: {"id", "landmarks": [[x, y] * R]} with normalized coords.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .config import LandmarkNetConfig, ModelConfig
from .errors import ContractError
from .parts import part_fvit_forward
from .trainer import model_forward
from .vit import Params, fvit_forward


# ---------------------------------------------------------------------------
# embedding extraction and dumps
# ---------------------------------------------------------------------------

def embed_extract(params: Params, cfg: ModelConfig,
                  lmk_cfg: Optional[LandmarkNetConfig], dataset,
                  batch_size: int = 32) -> List[dict]:
    """Unit-norm class-token embeddings for every image, keyed by id."""
    records = []
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size]
        emb = model_forward(Tensor(imgs), params, cfg, lmk_cfg).data
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        emb = emb / norms
        for j in range(len(imgs)):
            i = start + j
            records.append({"id": dataset.ids[i], "label": int(dataset.labels[i]),
                            "embedding": emb[j].astype(float).tolist()})
    return records


def landmark_extract(params: Params, cfg: ModelConfig,
                     lmk_cfg: LandmarkNetConfig, dataset,
                     batch_size: int = 32) -> List[dict]:
    """Predicted normalized landmark coordinates per image."""
    from .parts import landmark_net_forward
    records = []
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size]
        coords, _ = landmark_net_forward(Tensor(imgs), params, lmk_cfg)
        for j in range(len(imgs)):
            records.append({"id": dataset.ids[start + j],
                            "landmarks": coords.data[j].astype(float).tolist()})
    return records


def write_jsonl(records: Sequence[dict], path: str) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_jsonl(path: str) -> List[dict]:
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ContractError(f"{path}:{ln}: invalid JSON record: {e}") from e
    return out


def embeddings_by_id(records: Sequence[dict]) -> Dict[str, np.ndarray]:
    return {r["id"]: np.asarray(r["embedding"], dtype=np.float64) for r in records}


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class VerificationPairSet:
    pairs: List[Tuple[str, str, bool]]
    fold: np.ndarray                      # fold index per pair, 0..F-1

    def __post_init__(self):
        self.fold = np.asarray(self.fold)
        if len(self.fold) != len(self.pairs):
            raise ContractError("fold assignment must cover every pair")


def build_verification_pairs(records: Sequence[dict], num_pairs: int,
                             folds: int, rng: np.random.Generator) -> VerificationPairSet:
    """Balanced genuine/impostor pairs with round-robin fold assignment."""
    by_label: Dict[int, List[str]] = {}
    for r in records:
        by_label.setdefault(r["label"], []).append(r["id"])
    labels = [l for l, ids in by_label.items() if len(ids) >= 2]
    if len(labels) < 2:
        raise ContractError("need >= 2 identities with >= 2 images each")
    pairs = []
    for k in range(num_pairs):
        if k % 2 == 0:
            l = labels[rng.integers(len(labels))]
            a, b = rng.choice(len(by_label[l]), 2, replace=False)
            pairs.append((by_label[l][a], by_label[l][b], True))
        else:
            la, lb = rng.choice(len(labels), 2, replace=False)
            a = by_label[labels[la]][rng.integers(len(by_label[labels[la]]))]
            b = by_label[labels[lb]][rng.integers(len(by_label[labels[lb]]))]
            pairs.append((a, b, False))
    return VerificationPairSet(pairs, np.arange(num_pairs) % folds)


def _pair_scores(pairs: VerificationPairSet, emb: Dict[str, np.ndarray]):
    scores = np.empty(len(pairs.pairs))
    same = np.empty(len(pairs.pairs), dtype=bool)
    for i, (a, b, s) in enumerate(pairs.pairs):
        for key in (a, b):
            if key not in emb:
                raise ContractError(f"no embedding for id {key!r}")
        va, vb = emb[a], emb[b]
        scores[i] = va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))
        same[i] = s
    return scores, same


def _best_threshold_accuracy(scores, same):
    """Accuracy of the best threshold over candidate cuts, and that threshold."""
    cands = np.concatenate([scores, [scores.min() - 1.0, scores.max() + 1.0]])
    best_acc, best_t = -1.0, 0.0
    for t in np.sort(cands):
        acc = ((scores >= t) == same).mean()
        if acc > best_acc:
            best_acc, best_t = acc, t
    return best_acc, best_t


def verification_accuracy_kfold(pairs: VerificationPairSet,
                                emb: Dict[str, np.ndarray]) -> float:
    """LFW-style protocol: per fold, tune the threshold on the other folds."""
    scores, same = _pair_scores(pairs, emb)
    accs = []
    for f in np.unique(pairs.fold):
        held = pairs.fold == f
        _, t = _best_threshold_accuracy(scores[~held], same[~held])
        accs.append(((scores[held] >= t) == same[held]).mean())
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# TAR@FAR and rank-1
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ContractError("ScoreSet needs non-empty genuine and impostor lists")
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ContractError("ScoreSet scores must be finite")


def tar_at_far(scores: ScoreSet, far_target: float) -> float:
    """TAR at the smallest threshold whose empirical FAR is <= far_target."""
    if scores.impostor.size < 1.0 / max(far_target, 1e-12):
        warnings.warn(f"only {scores.impostor.size} impostor scores for "
                      f"far={far_target}; estimate is coarse")
    # candidate cuts include genuine scores: the admissible-threshold set is an
    # open interval above an impostor score, so a genuine score inside it is
    # the smallest attainable threshold
    lo = min(scores.impostor.min(), scores.genuine.min()) - 1.0
    cands = np.sort(np.concatenate([scores.impostor, scores.genuine,
                                    [lo, scores.impostor.max() + 1.0]]))
    for t in cands:
        far = (scores.impostor >= t).mean()
        if far <= far_target:
            return float((scores.genuine >= t).mean())
    return 0.0


def rank1_assign(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Index of the nearest gallery row by cosine; ties -> lower index."""
    if gallery.size == 0:
        raise ContractError("gallery must be non-empty")
    p = probe / np.linalg.norm(probe, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    return (p @ g.T).argmax(axis=1)      # argmax keeps the first (lowest) max


def rank1_identification(probe: np.ndarray, probe_labels, gallery: np.ndarray,
                         gallery_labels) -> float:
    idx = rank1_assign(probe, gallery)
    return float((np.asarray(gallery_labels)[idx] == np.asarray(probe_labels)).mean())


# ---------------------------------------------------------------------------
# landmark statistics
# ---------------------------------------------------------------------------

def overlap_rate(landmarks_px: np.ndarray, K: int) -> Tuple[float, float]:
    """Mean/variance of nearest-neighbor K x K square overlap, pixel coords."""
    if K < 1:
        raise ContractError(f"overlap_rate: K must be >= 1, got {K}")
    lm = np.asarray(landmarks_px, dtype=np.float64)
    R = len(lm)
    if R < 2:
        raise ContractError("overlap_rate needs >= 2 landmarks")
    d2 = ((lm[:, None, :] - lm[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)                # ties -> lower index via argmax semantics
    dx = np.abs(lm[:, 0] - lm[nn, 0])
    dy = np.abs(lm[:, 1] - lm[nn, 1])
    ov = np.clip(K - dx, 0, None) * np.clip(K - dy, 0, None) / K ** 2
    return float(ov.mean()), float(ov.var())


def overlap_rate_dataset(all_landmarks_px: Sequence[np.ndarray], K: int) -> Tuple[float, float]:
    """Aggregate per-image means: mean of means, variance across images."""
    means = [overlap_rate(lm, K)[0] for lm in all_landmarks_px]
    return float(np.mean(means)), float(np.var(means))


@dataclass
class LandmarkEvalSet:
    pred_train: np.ndarray     # [n, R, 2]
    gt_train: np.ndarray       # [n, G, 2]; gt indices 0, 1 are the two eyes
    pred_test: np.ndarray
    gt_test: np.ndarray

    def __post_init__(self):
        for name in ("pred_train", "gt_train", "pred_test", "gt_test"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.gt_train.shape[1] < 2:
            raise ContractError("need >= 2 ground-truth points for inter-ocular scaling")
        if self.pred_train.shape[1] != self.pred_test.shape[1]:
            raise ContractError("inconsistent R between train and test predictions")


def forward_error(es: LandmarkEvalSet) -> float:
    """Affine-regressor landmark-stability metric.

    Fits X W = Y by least squares from flattened predictions (plus intercept)
    to flattened ground truth on the train split; reports the mean test
    Euclidean error per ground-truth point, divided by the inter-ocular
    distance, times 100.
    """
    n, R, _ = es.pred_train.shape
    G = es.gt_train.shape[1]
    X = np.concatenate([es.pred_train.reshape(n, 2 * R), np.ones((n, 1))], axis=1)
    Y = es.gt_train.reshape(n, 2 * G)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        warnings.warn("rank-deficient design matrix; using ridge 1e-6")
        A = X.T @ X + 1e-6 * np.eye(X.shape[1])
        W = np.linalg.solve(A, X.T @ Y)
    else:
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    m = len(es.pred_test)
    Xt = np.concatenate([es.pred_test.reshape(m, 2 * R), np.ones((m, 1))], axis=1)
    pred = (Xt @ W).reshape(m, G, 2)
    err = np.linalg.norm(pred - es.gt_test, axis=2)          # [m, G]
    iod = np.linalg.norm(es.gt_test[:, 0] - es.gt_test[:, 1], axis=1)   # [m]
    return float((err / iod[:, None]).mean() * 100.0)


# ---------------------------------------------------------------------------
# attention dumps
# ---------------------------------------------------------------------------

def attention_map_dump(params: Params, cfg: ModelConfig,
                       lmk_cfg: Optional[LandmarkNetConfig],
                       images: np.ndarray, ids: Sequence[str],
                       layer: int = -1) -> List[dict]:
    """Row-stochastic attention matrices plus the class-token spatial map.

    One record per (image, head): {"id", "layer", "head", "rows", "cls_map"}.
    ``cls_map`` is the class-token row over the R patch tokens; for the part
    variant the record also carries the landmark positions the values live at.
    """
    if not -cfg.depth <= layer < cfg.depth:
        raise ContractError(f"layer {layer} out of range for depth {cfg.depth}")
    layer = layer % cfg.depth
    capture: List[np.ndarray] = []
    landmarks = None
    if cfg.variant == "part":
        emb, lms = part_fvit_forward(Tensor(images), params, cfg, lmk_cfg,
                                     capture=capture, return_landmarks=True)
        landmarks = lms.data
    else:
        fvit_forward(Tensor(images), params, cfg, capture=capture)
    maps = capture[layer]                 # [N, h, T, T]
    records = []
    for i, key in enumerate(ids):
        for h in range(cfg.heads):
            rec = {"id": key, "layer": int(layer), "head": int(h),
                   "rows": maps[i, h].astype(float).tolist(),
                   "cls_map": maps[i, h, 0, 1:].astype(float).tolist()}
            if landmarks is not None:
                rec["landmarks"] = landmarks[i].astype(float).tolist()
            records.append(rec)
    return records


def metric_record(metric: str, value: float, config: Optional[dict] = None) -> dict:
    return {"metric": metric, "value": value, "config": config or {}}
