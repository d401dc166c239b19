"""Vision Transformer building blocks and the holistic fViT forward pass.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``vit.l3.attn.wq`` etc.) so the optimizer and checkpoint code can address
them uniformly.  Forward functions are pure: same params + same input give
bit-identical output in eval mode.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError, ContractError

Params = Dict[str, Tensor]


def _param(rng, *shape, std=0.02, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)


def _zeros(*shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(*shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w with an explicitly broadcast bias."""
    y = ad.matmul(x, w)
    if b is not None:
        bb = ad.reshape(b, (1,) * (len(y.shape) - 1) + (b.shape[0],))
        y = ad.add(y, ad.broadcast_to(bb, y.shape))
    return y


def cosine_table(num_positions: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal table; position 0 is the alternating 0/1 pattern."""
    pos = np.arange(num_positions)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def init_vit_params(cfg: ModelConfig, rng: np.random.Generator,
                    dtype=np.float32, lmk_feature_dim: Optional[int] = None) -> Params:
    """Initialize all backbone parameters (no classifier head)."""
    d, K, C = cfg.embed_dim, cfg.patch_size, cfg.channels
    R, h, dh = cfg.num_patches, cfg.heads, cfg.head_dim
    p: Params = {}
    p["vit.embed.w"] = _param(rng, K * K * C, d, dtype=dtype)
    p["vit.embed.b"] = _zeros(d, dtype=dtype)
    p["vit.cls"] = _param(rng, d, dtype=dtype)
    p["vit.pos.cls"] = _param(rng, d, dtype=dtype)
    if cfg.pos_encoding == "trainable" or cfg.bottleneck_violation:
        p["vit.pos.table"] = _param(rng, R, d, dtype=dtype)
    if cfg.pos_encoding == "coordinate":
        p["vit.pos.coord.w"] = _param(rng, 2, d, dtype=dtype)
        p["vit.pos.coord.b"] = _zeros(d, dtype=dtype)
    if cfg.bottleneck_violation:
        if lmk_feature_dim is None:
            raise ConfigError("bottleneck_violation needs lmk_feature_dim at init time")
        p["vit.pos.bv.w"] = _param(rng, lmk_feature_dim + d, d, dtype=dtype)
        p["vit.pos.bv.b"] = _zeros(d, dtype=dtype)
    for l in range(cfg.depth):
        pre = f"vit.l{l}"
        p[f"{pre}.ln1.g"] = _ones(d, dtype=dtype)
        p[f"{pre}.ln1.b"] = _zeros(d, dtype=dtype)
        for name in ("wq", "wk", "wv"):
            p[f"{pre}.attn.{name}"] = _param(rng, d, h * dh, dtype=dtype)
            p[f"{pre}.attn.{name}b"] = _zeros(h * dh, dtype=dtype)
        p[f"{pre}.attn.wo"] = _param(rng, h * dh, d, dtype=dtype)
        p[f"{pre}.attn.wob"] = _zeros(d, dtype=dtype)
        p[f"{pre}.ln2.g"] = _ones(d, dtype=dtype)
        p[f"{pre}.ln2.b"] = _zeros(d, dtype=dtype)
        p[f"{pre}.mlp.w1"] = _param(rng, d, cfg.mlp_dim, dtype=dtype)
        p[f"{pre}.mlp.b1"] = _zeros(cfg.mlp_dim, dtype=dtype)
        p[f"{pre}.mlp.w2"] = _param(rng, cfg.mlp_dim, d, dtype=dtype)
        p[f"{pre}.mlp.b2"] = _zeros(d, dtype=dtype)
    p["vit.final_ln.g"] = _ones(d, dtype=dtype)
    p["vit.final_ln.b"] = _zeros(d, dtype=dtype)
    return p


def count_params(params: Params, prefix: str = "") -> int:
    return sum(t.data.size for name, t in params.items() if name.startswith(prefix))


def cast_params(params: Params, dtype) -> Params:
    out = {}
    for name, t in params.items():
        out[name] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def self_attention_head(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """One attention head over [batch, T, d] tokens, scaled by 1/sqrt(d_h)."""
    q, k, v = ad.matmul(tokens, wq), ad.matmul(tokens, wk), ad.matmul(tokens, wv)
    dh = wq.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def multi_head_attention(tokens: Tensor, params: Params, prefix: str, cfg: ModelConfig,
                         capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """h independent heads, concatenated and re-projected to embed_dim."""
    N, T, _ = tokens.shape
    h, dh = cfg.heads, cfg.head_dim

    def heads_of(name):
        y = linear(tokens, params[f"{prefix}.attn.{name}"], params[f"{prefix}.attn.{name}b"])
        return ad.transpose(ad.reshape(y, (N, T, h, dh)), (0, 2, 1, 3))   # [N,h,T,dh]

    q, k, v = heads_of("wq"), heads_of("wk"), heads_of("wv")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(attn.data.copy())
    mixed = ad.matmul(attn, v)                                            # [N,h,T,dh]
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (N, T, h * dh))
    return linear(mixed, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.wob"])


def stochastic_depth(branch: Tensor, p: float, train_mode: bool,
                     rng: Optional[np.random.Generator]) -> Tensor:
    """Per-sample residual drop with 1/(1-p) survival rescaling."""
    if p >= 1.0 or p < 0.0:
        raise ConfigError(f"stochastic depth probability must be in [0,1), got {p}")
    if not train_mode or p == 0.0:
        return branch
    if rng is None:
        raise ContractError("stochastic_depth in train mode needs an rng")
    N = branch.shape[0]
    keep = (rng.random(N) >= p).astype(branch.data.dtype) / (1.0 - p)
    mask = Tensor(keep.reshape((N,) + (1,) * (len(branch.shape) - 1)))
    return ad.mul(branch, ad.broadcast_to(mask, branch.shape))


def transformer_layer(z: Tensor, params: Params, layer: int, cfg: ModelConfig,
                      train_mode: bool = False, rng: Optional[np.random.Generator] = None,
                      capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """Pre-norm residual layer: z + MSA(LN(z)), then + MLP(LN(.))."""
    pre = f"vit.l{layer}"
    a = multi_head_attention(
        ad.layer_norm(z, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"]),
        params, pre, cfg, capture)
    y = ad.add(z, stochastic_depth(a, cfg.stochastic_depth_prob, train_mode, rng))
    m = ad.layer_norm(y, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    m = linear(ad.gelu(linear(m, params[f"{pre}.mlp.w1"], params[f"{pre}.mlp.b1"])),
               params[f"{pre}.mlp.w2"], params[f"{pre}.mlp.b2"])
    return ad.add(y, stochastic_depth(m, cfg.stochastic_depth_prob, train_mode, rng))


# ---------------------------------------------------------------------------
# tokenization and positional encoding
# ---------------------------------------------------------------------------

def extract_regular_patches(image: Tensor, cfg: ModelConfig) -> Tensor:
    """Non-overlapping K x K tiling, flattened [C,K,K]-major per patch."""
    N = image.shape[0]
    C, (H, W), K, P = cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid_side
    if image.shape[1:] != (C, H, W):
        raise ConfigError(f"expected image shape (N,{C},{H},{W}), got {image.shape}")
    x = ad.reshape(image, (N, C, P, K, P, K))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))            # [N, P, P, C, K, K]
    return ad.reshape(x, (N, cfg.num_patches, C * K * K))


def patch_embed_regular(image: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Embed the regular tiling into [N, R, d] visual tokens (no pos enc)."""
    flat = extract_regular_patches(image, cfg)
    return linear(flat, params["vit.embed.w"], params["vit.embed.b"])


def positional_encode(visual: Tensor, params: Params, cfg: ModelConfig,
                      landmarks: Optional[Tensor] = None,
                      penultimate: Optional[Tensor] = None) -> Tensor:
    """Add the configured per-position vector to the R visual tokens.

    ``landmarks`` ([N,R,2] normalized) is required for the coordinate kind;
    ``penultimate`` ([N,F]) is required when the information-bottleneck
    violation is enabled (it replaces the plain positional addition).
    """
    N, R, d = visual.shape
    if cfg.bottleneck_violation:
        if penultimate is None:
            raise ContractError("bottleneck_violation requires the penultimate CNN feature")
        enc = bottleneck_violation_inject(penultimate, params["vit.pos.table"],
                                          params["vit.pos.bv.w"], params["vit.pos.bv.b"])
        return ad.add(visual, enc)
    if cfg.pos_encoding == "trainable":
        table = ad.reshape(params["vit.pos.table"], (1, R, d))
        return ad.add(visual, ad.broadcast_to(table, visual.shape))
    if cfg.pos_encoding == "cosine":
        table = Tensor(cosine_table(R, d, dtype=visual.data.dtype).reshape(1, R, d))
        return ad.add(visual, ad.broadcast_to(table, visual.shape))
    # coordinate: a linear layer embeds each landmark into R^d
    if landmarks is None:
        raise ContractError("coordinate positional encoding requires landmarks")
    enc = linear(landmarks, params["vit.pos.coord.w"], params["vit.pos.coord.b"])
    return ad.add(visual, enc)


def bottleneck_violation_inject(penultimate: Tensor, pos_table: Tensor,
                                proj_w: Tensor, proj_b: Tensor) -> Tensor:
    """concat(penultimate feature, trainable positional row) -> linear -> [N,R,d]."""
    N, F = penultimate.shape
    R, d = pos_table.shape
    w_feat = ad.slice_(proj_w, np.s_[:F, :])
    w_pos = ad.slice_(proj_w, np.s_[F:, :])
    from_feat = ad.reshape(ad.matmul(penultimate, w_feat), (N, 1, d))
    from_pos = ad.reshape(linear(pos_table, w_pos, proj_b), (1, R, d))
    return ad.add(ad.broadcast_to(from_feat, (N, R, d)),
                  ad.broadcast_to(from_pos, (N, R, d)))


def encode_tokens(visual: Tensor, params: Params, cfg: ModelConfig,
                  train_mode: bool = False, rng: Optional[np.random.Generator] = None,
                  capture: Optional[List[np.ndarray]] = None,
                  landmarks: Optional[Tensor] = None,
                  penultimate: Optional[Tensor] = None) -> Tensor:
    """Positional-encode, prepend the class token, run all layers, return the
    final-layer class token after the terminal layer norm."""
    N, R, d = visual.shape
    visual = positional_encode(visual, params, cfg, landmarks, penultimate)
    cls = ad.reshape(ad.add(params["vit.cls"], params["vit.pos.cls"]), (1, 1, d))
    tokens = ad.concat([ad.broadcast_to(cls, (N, 1, d)), visual], axis=1)
    for l in range(cfg.depth):
        tokens = transformer_layer(tokens, params, l, cfg, train_mode, rng, capture)
    tokens = ad.layer_norm(tokens, params["vit.final_ln.g"], params["vit.final_ln.b"])
    return ad.reshape(ad.slice_(tokens, np.s_[:, 0:1, :]), (N, d))


def fvit_forward(image: Tensor, params: Params, cfg: ModelConfig,
                 train_mode: bool = False, rng: Optional[np.random.Generator] = None,
                 capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """Holistic fViT: regular tiling -> transformer -> class-token embedding.

    The returned embedding is NOT L2-normalized; normalization happens in the
    loss and in evaluation.
    """
    if cfg.variant != "holistic":
        raise ConfigError("fvit_forward requires variant='holistic'")
    visual = patch_embed_regular(image, params, cfg)
    return encode_tokens(visual, params, cfg, train_mode, rng, capture)
