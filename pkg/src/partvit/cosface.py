"""CosFace margin loss on normalized embeddings and class weights.

cos(theta_{j,i}) is the dot product of the unit-normalized embedding i with
the unit-normalized column j of the class-weight matrix; the margin m is
subtracted from the true-class cosine only, and every logit is scaled by b.

The upstream formulation fixes b to the (detached) embedding norm; that makes
the scale input-dependent, so the default here is a constant b=64 with the
literal behaviour available via ``paper_literal_b=True``.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .vit import Params, _param

DEFAULT_MARGIN = 0.35
DEFAULT_SCALE = 64.0


def init_cosface_head(embed_dim: int, num_classes: int,
                      rng: np.random.Generator, dtype=np.float32) -> Params:
    """Class-weight matrix [d, num_classes], one column per identity."""
    return {"head.w": _param(rng, embed_dim, num_classes, dtype=dtype)}


def l2_normalize_embedding(z: Tensor) -> Tensor:
    """Unit-normalize each embedding row; zero rows are a numeric error."""
    return ad.l2_normalize(z, axis=-1)


def cosine_logits(embeddings: Tensor, head_w: Tensor) -> Tensor:
    """[N, num_classes] cosines between unit embeddings and unit columns."""
    z = l2_normalize_embedding(embeddings)
    w = ad.l2_normalize(head_w, axis=0)
    return ad.matmul(z, w)


def _targets(labels, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise ContractError(f"soft labels have {labels.shape[1]} columns, head has {num_classes}")
        return labels.astype(dtype)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be an int vector or a [N, num_classes] soft matrix")
    if (labels < 0).any() or (labels >= num_classes).any():
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ContractError(f"label {bad} out of range [0, {num_classes})")
    onehot = np.zeros((labels.size, num_classes), dtype=dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    return onehot


def cosface_loss(embeddings: Tensor, labels, head_w: Tensor,
                 margin: float = DEFAULT_MARGIN,
                 scale: float = DEFAULT_SCALE,
                 paper_literal_b: bool = False) -> Tensor:
    """Mean margin-softmax loss over the batch.

    ``labels`` may be hard int labels or soft [N, num_classes] rows (mixup);
    with soft labels the margin is applied proportionally to the label mass.
    ``paper_literal_b`` uses the detached per-row embedding norm as b instead
    of the constant ``scale``.
    """
    num_classes = head_w.shape[1]
    y = _targets(labels, num_classes, embeddings.data.dtype)
    cos = cosine_logits(embeddings, head_w)
    shifted = ad.sub(cos, Tensor(margin * y))
    if paper_literal_b:
        norms = np.sqrt((embeddings.data ** 2).sum(axis=-1, keepdims=True))
        b = Tensor(norms.astype(embeddings.data.dtype))
        logits = ad.mul(shifted, ad.broadcast_to(b, shifted.shape))
    else:
        logits = ad.scale(shifted, scale)
    logp = ad.log_softmax(logits, axis=-1)
    per_sample = ad.sum_(ad.mul(logp, Tensor(y)), axis=-1)
    return ad.scale(ad.mean(per_sample), -1.0)


def predictions(embeddings: Tensor, head_w: Tensor) -> np.ndarray:
    """Argmax class per row of the cosine logits (no margin, no scale)."""
    return cosine_logits(embeddings, head_w).data.argmax(axis=-1)
