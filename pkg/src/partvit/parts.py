"""Landmark CNN, differentiable patch sampling, and the part-fViT forward.

Pixel-center convention (the regular-grid equivalence test depends on it):
pixel i occupies continuous coordinate i + 0.5 in [0, H]; a normalized
coordinate x in [0, 1] maps to continuous x * W.  Patch sample points use
unit pixel spacing, so a K x K patch covers a K x K pixel window.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accum, _result
from .config import LandmarkNetConfig, ModelConfig
from .errors import ConfigError, ContractError, NumericError
from .vit import Params, encode_tokens, linear, _param, _zeros


# ---------------------------------------------------------------------------
# landmark CNN
# ---------------------------------------------------------------------------

def init_landmark_params(cfg: LandmarkNetConfig, rng: np.random.Generator,
                         dtype=np.float32,
                         grid_bias: Optional[np.ndarray] = None) -> Params:
    """Conv stages + linear head.  When ``grid_bias`` (normalized [R,2]
    coordinates) is given, the head bias is set to its logit so the landmarks
    start at those positions (weights stay small-random)."""
    p: Params = {}
    cin = cfg.in_channels
    k = cfg.kernel_size
    for i, cout in enumerate(cfg.channels):
        p[f"lmk.conv{i}.w"] = _param(rng, cout, cin, k, k,
                                     std=math.sqrt(2.0 / (cin * k * k)), dtype=dtype)
        p[f"lmk.conv{i}.b"] = _zeros(cout, dtype=dtype)
        cin = cout
    p["lmk.head.w"] = _param(rng, cfg.feature_dim, cfg.output_count, std=0.01, dtype=dtype)
    bias = np.zeros(cfg.output_count, dtype=dtype)
    if grid_bias is not None:
        g = np.clip(np.asarray(grid_bias, dtype=np.float64).reshape(-1), 1e-4, 1 - 1e-4)
        bias = (np.log(g) - np.log1p(-g)).astype(dtype)     # logit
    p["lmk.head.b"] = Tensor(bias, requires_grad=True)
    return p


def landmark_net_forward(image: Tensor, params: Params,
                         cfg: LandmarkNetConfig) -> Tuple[Tensor, Tensor]:
    """Image -> ([N,R,2] sigmoid-squashed coordinates, [N,F] pooled feature)."""
    if image.shape[1] != cfg.in_channels:
        raise ConfigError(f"expected {cfg.in_channels}-channel input, got shape {image.shape}")
    x = image
    for i in range(len(cfg.channels)):
        w = params[f"lmk.conv{i}.w"]
        b = params[f"lmk.conv{i}.b"]
        x = ad.conv2d(x, w, stride=2, padding=cfg.kernel_size // 2)
        bb = ad.reshape(b, (1, b.shape[0], 1, 1))
        x = ad.relu(ad.add(x, ad.broadcast_to(bb, x.shape)))
    feat = ad.mean(x, axis=(2, 3))                       # global average pool [N,F]
    raw = linear(feat, params["lmk.head.w"], params["lmk.head.b"])
    coords = ad.reshape(ad.sigmoid(raw), (raw.shape[0], cfg.num_landmarks, 2))
    return coords, feat


# ---------------------------------------------------------------------------
# differentiable patch sampling
# ---------------------------------------------------------------------------

def grid_sample_patches(image: Tensor, landmarks: Tensor, K: int) -> Tensor:
    """Bilinearly sample a K x K patch centered at each landmark.

    Out-of-image taps clamp to the border, which keeps coordinate gradients
    alive near (but not beyond) the edges.  Differentiable wrt both the image
    values and the landmark coordinates.  Returns [N, R, C, K, K].
    """
    if K < 1:
        raise ContractError(f"grid_sample_patches: K must be >= 1, got {K}")
    if not np.isfinite(landmarks.data).all():
        raise NumericError("grid_sample_patches: non-finite landmark coordinate")
    img = image.data
    N, C, H, W = img.shape
    R = landmarks.shape[1]
    dt = np.result_type(img.dtype, landmarks.data.dtype)

    # geometry in float64 so integer-aligned centers stay (near-)exact crops
    cx = landmarks.data[..., 0].astype(np.float64) * W    # [N,R] continuous coords
    cy = landmarks.data[..., 1].astype(np.float64) * H
    offs = np.arange(K) - (K - 1) / 2.0
    px = cx[..., None] + offs - 0.5                       # [N,R,K] fractional col index
    py = cy[..., None] + offs - 0.5

    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = (px - x0).astype(dt)
    wy = (py - y0).astype(dt)
    x0c = np.clip(x0, 0, W - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, W - 1).astype(np.int64)
    y0c = np.clip(y0, 0, H - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, H - 1).astype(np.int64)

    nn = np.arange(N)[:, None, None, None]

    def gather(yi, xi):
        # [N,R,K,K,C]: advanced indices around the channel slice put batch dims first
        return img[nn, :, yi[:, :, :, None], xi[:, :, None, :]]

    v00, v01 = gather(y0c, x0c), gather(y0c, x1c)
    v10, v11 = gather(y1c, x0c), gather(y1c, x1c)

    wyi = wy[:, :, :, None, None]                         # row weight    [N,R,K,1,1]
    wxj = wx[:, :, None, :, None]                         # column weight [N,R,1,K,1]
    patch = ((1 - wyi) * (1 - wxj) * v00 + (1 - wyi) * wxj * v01
             + wyi * (1 - wxj) * v10 + wyi * wxj * v11)   # [N,R,K,K,C]
    out = _result(np.ascontiguousarray(patch.transpose(0, 1, 4, 2, 3)), (image, landmarks))

    if out.requires_grad:
        def bwd(g):
            gv = g.transpose(0, 1, 3, 4, 2)               # [N,R,K,K,C]
            if image.requires_grad:
                gi = np.zeros_like(img, dtype=dt)
                cc = np.arange(C)[None, None, None, None, :]
                nn5 = np.arange(N)[:, None, None, None, None]
                for yi, xi, wgt in (
                    (y0c, x0c, (1 - wyi) * (1 - wxj)),
                    (y0c, x1c, (1 - wyi) * wxj),
                    (y1c, x0c, wyi * (1 - wxj)),
                    (y1c, x1c, wyi * wxj),
                ):
                    np.add.at(gi, (nn5, cc, yi[:, :, :, None, None], xi[:, :, None, :, None]),
                              gv * wgt)
                _accum(image, gi)
            if landmarks.requires_grad:
                dx = (1 - wyi) * (v01 - v00) + wyi * (v11 - v10)   # d(patch)/d(px_j)
                dy = (1 - wxj) * (v10 - v00) + wxj * (v11 - v01)   # d(patch)/d(py_i)
                gpx = (gv * dx).sum(axis=(2, 4))          # sum rows+channels -> [N,R,K]
                gpy = (gv * dy).sum(axis=(3, 4))          # sum cols+channels -> [N,R,K]
                gl = np.stack([gpx.sum(axis=-1) * W, gpy.sum(axis=-1) * H], axis=-1)
                _accum(landmarks, gl)
        out._backward = bwd
    return out


def regular_grid_landmarks(cfg: ModelConfig, batch: int = 1,
                           dtype=np.float64) -> Tensor:
    """Normalized centers of the holistic non-overlapping tiling, row-major."""
    P, K = cfg.grid_side, cfg.patch_size
    H, W = cfg.image_size
    if H != P * K or W != P * K:
        raise ConfigError(f"regular grid needs image {P * K}x{P * K} for P={P}, K={K}, got {cfg.image_size}")
    cx = (np.arange(P) * K + K / 2.0) / W
    cy = (np.arange(P) * K + K / 2.0) / H
    gx, gy = np.meshgrid(cx, cy)                          # row-major grid order
    coords = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1).astype(dtype)
    return Tensor(np.broadcast_to(coords, (batch,) + coords.shape).copy())


# ---------------------------------------------------------------------------
# part-fViT forward
# ---------------------------------------------------------------------------

def tokenize_patches(patches: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Flatten sampled [N,R,C,K,K] patches and embed with the shared layer E."""
    N, R = patches.shape[:2]
    flat = ad.reshape(patches, (N, R, cfg.channels * cfg.patch_size ** 2))
    return linear(flat, params["vit.embed.w"], params["vit.embed.b"])


def part_fvit_forward(image: Tensor, params: Params, cfg: ModelConfig,
                      lmk_cfg: LandmarkNetConfig,
                      train_mode: bool = False,
                      rng: Optional[np.random.Generator] = None,
                      capture: Optional[List[np.ndarray]] = None,
                      return_landmarks: bool = False,
                      landmarks_override: Optional[Tensor] = None):
    """Landmark CNN -> grid sampling -> tokenize -> transformer -> embedding.

    ``landmarks_override`` bypasses the CNN (used by the regular-grid
    equivalence check); gradients still flow through the sampler.
    """
    if cfg.variant != "part":
        raise ConfigError("part_fvit_forward requires variant='part'")
    penult = None
    if landmarks_override is not None:
        landmarks = landmarks_override
        if cfg.bottleneck_violation:
            raise ContractError("bottleneck_violation needs the landmark CNN feature")
    else:
        landmarks, penult = landmark_net_forward(image, params, lmk_cfg)
    patches = grid_sample_patches(image, landmarks, cfg.patch_size)
    visual = tokenize_patches(patches, params, cfg)
    emb = encode_tokens(visual, params, cfg, train_mode, rng, capture,
                        landmarks=landmarks, penultimate=penult)
    if return_landmarks:
        return emb, landmarks
    return emb
