"""Dump discovery and read-only loading.

A bundle directory holds the artifacts written by the training/extraction
tool: an image tree of ``<identity>/<image>.png`` files (or an ``images/``
subdirectory), ``landmarks.jsonl``, ``attention.jsonl``, and ``metrics.csv``.
Records reference images by id; ``id000/img0003`` resolves to
``<image_dir>/id000/img0003.png``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from PIL import Image


class RenderError(ValueError):
    """A dump is missing, malformed, or inconsistent with the request."""


@dataclass
class DumpBundle:
    image_dir: Optional[str] = None
    landmarks_path: Optional[str] = None
    attention_path: Optional[str] = None
    metrics_path: Optional[str] = None

    @classmethod
    def from_dir(cls, root: str, **overrides) -> "DumpBundle":
        """Locate artifacts by their conventional names under ``root``."""
        if not os.path.isdir(root):
            raise RenderError(f"bundle directory not found: {root}")

        def find(name):
            p = os.path.join(root, name)
            return p if os.path.exists(p) else None

        image_dir = root
        sub = os.path.join(root, "images")
        if os.path.isdir(sub):
            image_dir = sub
        b = cls(image_dir=image_dir,
                landmarks_path=find("landmarks.jsonl"),
                attention_path=find("attention.jsonl"),
                metrics_path=find("metrics.csv"))
        for k, v in overrides.items():
            if v is not None:
                setattr(b, k, v)
        return b

    def image(self, image_id: str) -> np.ndarray:
        """[H, W, 3] float image in [0, 1] for a dump id."""
        path = os.path.join(self.image_dir or "", image_id + ".png")
        if not os.path.exists(path):
            raise RenderError(f"id {image_id!r} does not resolve to an image "
                              f"(looked for {path})")
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0

    def landmarks(self) -> List[dict]:
        return _read_jsonl(self.landmarks_path, "landmark dump")

    def attention(self) -> List[dict]:
        return _read_jsonl(self.attention_path, "attention dump")

    def metrics(self) -> List[Dict[str, float]]:
        if not self.metrics_path or not os.path.exists(self.metrics_path):
            raise RenderError(f"metrics CSV not found: {self.metrics_path}")
        with open(self.metrics_path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise RenderError(f"metrics CSV has no data rows: {self.metrics_path}")
        return [{k: float(v) for k, v in row.items()} for row in rows]


def _read_jsonl(path: Optional[str], what: str) -> List[dict]:
    if not path or not os.path.exists(path):
        raise RenderError(f"{what} not found: {path}")
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise RenderError(f"{path}:{ln}: invalid JSON: {e}") from e
    if not out:
        raise RenderError(f"{what} is empty: {path}")
    return out
