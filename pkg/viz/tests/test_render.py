import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from vizrender import (DumpBundle, RenderError, render_attention,
                       render_curves, render_landmarks)
from vizrender.cli import main
from vizrender.render import landmark_color, pixel_index


def _write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


@pytest.fixture()
def bundle_dir(tmp_path):
    """Two 8x8 images, landmark/attention dumps, and a metrics CSV."""
    rng = np.random.default_rng(0)
    ids = ["id000/img0000", "id001/img0000"]
    for key in ids:
        _write_png(tmp_path / (key + ".png"), rng.random((8, 8, 3)) * 0.5)
    with open(tmp_path / "landmarks.jsonl", "w") as f:
        for key in ids:
            lm = [[(i + 0.5) / 4 * 0.9 + 0.05, (i + 0.5) / 4 * 0.9 + 0.05]
                  for i in range(4)]
            f.write(json.dumps({"id": key, "landmarks": lm}) + "\n")
    with open(tmp_path / "attention.jsonl", "w") as f:
        for key in ids:
            for h in range(2):
                rows = np.full((5, 5), 0.2)
                f.write(json.dumps({"id": key, "layer": 1, "head": h,
                                    "rows": rows.tolist(),
                                    "cls_map": rng.random(4).tolist()}) + "\n")
    with open(tmp_path / "metrics.csv", "w") as f:
        f.write("epoch,step,lr,loss,train_acc\n")
        for s in range(6):
            f.write(f"0,{s},0.001,{3.0 - 0.3 * s},{0.1 * s}\n")
    return tmp_path


class TestCalibration:
    def test_pixel_index_convention(self):
        # normalized center of pixel i must address index i exactly
        for size in (8, 56, 112):
            for i in (0, 3, size - 1):
                assert pixel_index((i + 0.5) / size, size) == i

    def test_corner_probe_overlay(self, tmp_path):
        """A landmark at the center of pixel (x=3, y=5) paints exactly it."""
        key = "id000/img0000"
        _write_png(tmp_path / (key + ".png"), np.zeros((8, 8, 3)))
        with open(tmp_path / "landmarks.jsonl", "w") as f:
            f.write(json.dumps({"id": key,
                                "landmarks": [[3.5 / 8, 5.5 / 8]]}) + "\n")
        b = DumpBundle.from_dir(str(tmp_path))
        paths = render_landmarks(b, str(tmp_path / "out"), radius=0)
        out = np.asarray(Image.open(paths[0]))
        lit = np.argwhere(out.sum(axis=2) > 0)
        assert lit.tolist() == [[5, 3]]      # (row, col) = (y, x)


class TestLandmarks:
    def test_dot_count_and_stable_colors(self, bundle_dir):
        b = DumpBundle.from_dir(str(bundle_dir))
        paths = render_landmarks(b, str(bundle_dir / "out"), radius=0)
        assert len(paths) == 2
        imgs = [np.asarray(Image.open(p)) for p in paths]
        for img in imgs:
            # dots replace pixels with exact colormap colors at 4 positions
            assert len({tuple(px) for px in img.reshape(-1, 3)}) >= 4
        # index-i color identical across both images
        for i in range(4):
            want = np.round(np.array(landmark_color(i, 4)) * 255)
            for img in imgs:
                assert (np.abs(img.reshape(-1, 3) - want).sum(axis=1) < 3).any()

    def test_out_of_range_clipped_with_warning(self, tmp_path):
        key = "id000/img0000"
        _write_png(tmp_path / (key + ".png"), np.zeros((8, 8, 3)))
        with open(tmp_path / "landmarks.jsonl", "w") as f:
            f.write(json.dumps({"id": key, "landmarks": [[1.4, -0.2]]}) + "\n")
        b = DumpBundle.from_dir(str(tmp_path))
        with pytest.warns(UserWarning, match="clipped"):
            render_landmarks(b, str(tmp_path / "out"))

    def test_unresolvable_id(self, tmp_path):
        with open(tmp_path / "landmarks.jsonl", "w") as f:
            f.write(json.dumps({"id": "ghost/img", "landmarks": [[0.5, 0.5]]}) + "\n")
        b = DumpBundle.from_dir(str(tmp_path))
        with pytest.raises(RenderError, match="ghost"):
            render_landmarks(b, str(tmp_path / "out"))


class TestAttention:
    def test_grid_written(self, bundle_dir):
        b = DumpBundle.from_dir(str(bundle_dir))
        path = render_attention(b, str(bundle_dir / "out"))
        assert path.endswith("attention_layer1.png")
        img = Image.open(path)
        assert img.size[0] > 0

    def test_uniform_map_renders_flat(self, tmp_path):
        key = "id000/img0000"
        _write_png(tmp_path / (key + ".png"), np.full((8, 8, 3), 0.3))
        with open(tmp_path / "attention.jsonl", "w") as f:
            f.write(json.dumps({"id": key, "layer": 0, "head": 0,
                                "rows": np.full((5, 5), 0.2).tolist(),
                                "cls_map": [0.25, 0.25, 0.25, 0.25]}) + "\n")
        from vizrender.render import _heat_map
        heat = _heat_map({"cls_map": [0.25] * 4}, 8, 8)
        assert heat.min() == heat.max()      # flat overlay
        b = DumpBundle.from_dir(str(tmp_path))
        assert render_attention(b, str(tmp_path / "out"))

    def test_missing_head_named(self, bundle_dir):
        b = DumpBundle.from_dir(str(bundle_dir))
        with pytest.raises(RenderError, match="head 7"):
            render_attention(b, str(bundle_dir / "out"), heads=[0, 7])

    def test_missing_layer(self, bundle_dir):
        b = DumpBundle.from_dir(str(bundle_dir))
        with pytest.raises(RenderError, match="layer 3"):
            render_attention(b, str(bundle_dir / "out"), layer=3)

    def test_part_records_splat_at_landmarks(self, tmp_path):
        key = "id000/img0000"
        _write_png(tmp_path / (key + ".png"), np.zeros((16, 16, 3)))
        rec = {"id": key, "layer": 0, "head": 0,
               "rows": np.eye(3).tolist(),
               "cls_map": [1.0, 0.0],
               "landmarks": [[0.25, 0.25], [0.75, 0.75]]}
        with open(tmp_path / "attention.jsonl", "w") as f:
            f.write(json.dumps(rec) + "\n")
        from vizrender.render import _heat_map
        heat = _heat_map(rec, 16, 16)
        assert heat[4, 4] > heat[12, 12]     # mass at the hot landmark


class TestCurves:
    def test_columns_and_rows(self, bundle_dir):
        b = DumpBundle.from_dir(str(bundle_dir))
        info = render_curves(b, str(bundle_dir / "out"))
        assert info["columns"] == ["lr", "loss", "train_acc"]
        assert info["rows"] == 6

    def test_empty_csv_errors(self, tmp_path):
        (tmp_path / "metrics.csv").write_text("epoch,step,lr,loss,train_acc\n")
        b = DumpBundle.from_dir(str(tmp_path))
        with pytest.raises(RenderError, match="no data rows"):
            render_curves(b, str(tmp_path / "out"))


class TestReadOnlyAndCli:
    def _digest(self, root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file() and "out" not in p.parts:
                h.update(p.read_bytes())
        return h.hexdigest()

    def test_rendering_never_mutates_dumps(self, bundle_dir):
        before = self._digest(bundle_dir)
        b = DumpBundle.from_dir(str(bundle_dir))
        render_landmarks(b, str(bundle_dir / "out"))
        render_attention(b, str(bundle_dir / "out"))
        render_curves(b, str(bundle_dir / "out"))
        assert self._digest(bundle_dir) == before

    def test_cli_all_subjects(self, bundle_dir, tmp_path):
        out = str(tmp_path / "cli_out")
        for what in ("landmarks", "attention", "curves"):
            assert main(["render", what, "--in", str(bundle_dir), "--out", out]) == 0

    def test_cli_missing_bundle(self, tmp_path):
        rc = main(["render", "curves", "--in", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_cli_bad_usage(self):
        assert main(["render", "frobnicate", "--in", "x", "--out", "y"]) == 2
