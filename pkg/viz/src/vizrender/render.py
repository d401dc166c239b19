"""Renderers for attention grids, landmark overlays, and training curves.

Coordinate convention (shared with the producer of the dumps): a normalized
coordinate x in [0, 1] maps to the continuous position x * W in pixel units,
and pixel i occupies [i, i+1) with its center at i + 0.5.  So the array index
under a normalized coordinate is round(x * W - 0.5).
"""

from __future__ import annotations

import math
import os
import warnings
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import cm
from PIL import Image

from .bundle import DumpBundle, RenderError


def pixel_index(x: float, size: int) -> int:
    """Array index addressed by a normalized coordinate."""
    return int(round(x * size - 0.5))


def landmark_color(index: int, total: int):
    """Stable RGB for landmark ``index``; identical across all images."""
    return cm.hsv(index / max(total, 1))[:3]


# ---------------------------------------------------------------------------
# landmarks
# ---------------------------------------------------------------------------

def render_landmarks(bundle: DumpBundle, out_dir: str,
                     radius: Optional[int] = None) -> List[str]:
    """One overlay PNG per dumped image; index-i dots share a color."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for rec in bundle.landmarks():
        img = bundle.image(rec["id"])
        H, W = img.shape[:2]
        r = radius if radius is not None else max(1, H // 56)
        lm = np.asarray(rec["landmarks"], dtype=np.float64)
        if (lm < 0).any() or (lm > 1).any():
            warnings.warn(f"{rec['id']}: out-of-range landmark clipped to [0, 1]")
            lm = np.clip(lm, 0.0, 1.0)
        out = img.copy()
        for i, (x, y) in enumerate(lm):
            cx = pixel_index(x, W)
            cy = pixel_index(y, H)
            color = landmark_color(i, len(lm))
            y0, y1 = max(0, cy - r), min(H, cy + r + 1)
            x0, x1 = max(0, cx - r), min(W, cx + r + 1)
            out[y0:y1, x0:x1] = color
        path = os.path.join(out_dir, rec["id"].replace("/", "_") + ".png")
        Image.fromarray(np.round(out * 255).astype(np.uint8)).save(path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _heat_map(rec: dict, H: int, W: int) -> np.ndarray:
    """Class-token attention as an [H, W] map in [0, 1].

    Holistic records reshape the cls row to the patch grid and upsample
    bilinearly; part records splat each value at its landmark position with a
    Gaussian kernel (values live at irregular points, not on a grid).
    """
    vals = np.asarray(rec["cls_map"], dtype=np.float64)
    R = vals.size
    if "landmarks" in rec:
        lm = np.clip(np.asarray(rec["landmarks"], dtype=np.float64), 0.0, 1.0)
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
        sigma = H / (2.0 * math.sqrt(R))
        num = np.zeros((H, W))
        den = np.zeros((H, W))
        for v, (x, y) in zip(vals, lm):
            k = np.exp(-((xx - x * W) ** 2 + (yy - y * H) ** 2) / (2 * sigma ** 2))
            num += v * k
            den += k
        heat = num / np.maximum(den, 1e-12)
    else:
        side = math.isqrt(R)
        if side * side != R:
            raise RenderError(f"cls_map of {R} values is not a square grid")
        small = Image.fromarray(vals.reshape(side, side).astype(np.float32), mode="F")
        heat = np.asarray(small.resize((W, H), Image.BILINEAR), dtype=np.float64)
    span = heat.max() - heat.min()
    if span < 1e-12:
        return np.full((H, W), 0.5)        # uniform attention -> flat overlay
    return (heat - heat.min()) / span


def render_attention(bundle: DumpBundle, out_dir: str,
                     layer: Optional[int] = None,
                     heads: Optional[Sequence[int]] = None,
                     alpha: float = 0.55) -> str:
    """Grid PNG: one row per dumped image, one column per requested head."""
    os.makedirs(out_dir, exist_ok=True)
    records = bundle.attention()
    layers = sorted({r["layer"] for r in records})
    if layer is None:
        layer = layers[-1]
    records = [r for r in records if r["layer"] == layer]
    if not records:
        raise RenderError(f"no attention records for layer {layer}; dump has {layers}")
    by_image: Dict[str, Dict[int, dict]] = {}
    order = []
    for r in records:
        if r["id"] not in by_image:
            order.append(r["id"])
        by_image.setdefault(r["id"], {})[r["head"]] = r
    if heads is None:
        heads = sorted(by_image[order[0]])
    for image_id, recs in by_image.items():
        for h in heads:
            if h not in recs:
                raise RenderError(f"head {h} missing for image {image_id!r} "
                                  f"(dump has heads {sorted(recs)})")

    fig, axes = plt.subplots(len(order), len(heads), squeeze=False,
                             figsize=(1.6 * len(heads), 1.6 * len(order)))
    for i, image_id in enumerate(order):
        img = bundle.image(image_id)
        H, W = img.shape[:2]
        gray = img.mean(axis=2, keepdims=True).repeat(3, axis=2)
        for j, h in enumerate(heads):
            heat = _heat_map(by_image[image_id][h], H, W)
            overlay = (1 - alpha) * gray + alpha * cm.inferno(heat)[..., :3]
            ax = axes[i][j]
            ax.imshow(np.clip(overlay, 0, 1))
            ax.set_axis_off()
            if i == 0:
                ax.set_title(f"head {h}", fontsize=7)
    path = os.path.join(out_dir, f"attention_layer{layer}.png")
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

_X_COLUMNS = ("epoch", "step")


def render_curves(bundle: DumpBundle, out_dir: str) -> dict:
    """One curve per metric column of the CSV; x axis is the row index."""
    os.makedirs(out_dir, exist_ok=True)
    rows = bundle.metrics()
    columns = [c for c in rows[0] if c not in _X_COLUMNS]
    if not columns:
        raise RenderError("metrics CSV has no metric columns")
    x = np.arange(len(rows))
    fig, axes = plt.subplots(len(columns), 1, squeeze=False,
                             figsize=(6, 2.0 * len(columns)), sharex=True)
    for ax, col in zip(axes[:, 0], columns):
        ax.plot(x, [row[col] for row in rows])
        ax.set_ylabel(col)
        ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("step")
    path = os.path.join(out_dir, "curves.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return {"path": path, "columns": columns, "rows": len(rows)}
