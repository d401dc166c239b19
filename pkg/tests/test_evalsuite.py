import warnings

import numpy as np
import pytest

from partvit.config import LandmarkNetConfig, preset
from partvit.errors import ContractError
from partvit.evalsuite import (LandmarkEvalSet, ScoreSet, VerificationPairSet,
                               attention_map_dump, build_verification_pairs,
                               embed_extract, embeddings_by_id, forward_error,
                               landmark_extract, overlap_rate,
                               overlap_rate_dataset, rank1_assign,
                               rank1_identification, read_jsonl, tar_at_far,
                               verification_accuracy_kfold, write_jsonl)
from partvit.trainer import build_model
from tests.test_trainer import micro_cfg, micro_dataset, micro_lmk


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def tar_oracle(genuine, impostor, far_target):
    """Scan every candidate threshold ascending; first with FAR <= target."""
    genuine, impostor = np.asarray(genuine), np.asarray(impostor)
    for t in np.sort(np.concatenate([genuine, impostor, [min(genuine.min(), impostor.min()) - 1]])):
        if (impostor >= t).mean() <= far_target:
            return (genuine >= t).mean()
    return 0.0


def rank1_oracle(probe, gallery):
    out = []
    for p in probe:
        best, best_s = 0, -np.inf
        for j, g in enumerate(gallery):
            s = p @ g / (np.linalg.norm(p) * np.linalg.norm(g))
            if s > best_s:
                best, best_s = j, s
        out.append(best)
    return np.array(out)


def overlap_oracle(lm, K, step=0.02):
    """Rasterize square_i and count the fraction of points inside square_j."""
    lm = np.asarray(lm, dtype=float)
    d2 = ((lm[:, None] - lm[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    ax = np.arange(-K / 2 + step / 2, K / 2, step)
    oy, ox = np.meshgrid(ax, ax, indexing="ij")
    vals = []
    for i, j in enumerate(nn):
        px = lm[i, 0] + ox
        py = lm[i, 1] + oy
        inside = (np.abs(px - lm[j, 0]) <= K / 2) & (np.abs(py - lm[j, 1]) <= K / 2)
        vals.append(inside.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# TAR@FAR
# ---------------------------------------------------------------------------

class TestTarAtFar:
    def test_worked_example(self):
        s = ScoreSet([0.9, 0.8, 0.7], [0.6, 0.4, 0.2, 0.1])
        assert tar_at_far(s, 0.25) == 1.0

    def test_degenerate_far_one(self):
        s = ScoreSet([0.1, 0.9], [0.5, 0.6])
        assert tar_at_far(s, 1.0) == 1.0

    def test_adversarial_far_zero(self):
        s = ScoreSet([0.1, 0.2], [0.5, 0.6, 0.7])
        assert tar_at_far(s, 0.0) == 0.0

    def test_empty_raises(self):
        with pytest.raises(ContractError):
            ScoreSet([], [0.5])

    def test_against_oracle_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = rng.normal(0.4, 0.3, rng.integers(3, 30))
            i = rng.normal(0.0, 0.3, rng.integers(4, 40))
            far = float(rng.choice([0.0, 0.05, 0.1, 0.25, 0.5, 1.0]))
            s = ScoreSet(g, i)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = tar_at_far(s, far)
            assert got == pytest.approx(tar_oracle(g, i, far), abs=1e-12)

    def test_monotone_in_far(self):
        rng = np.random.default_rng(1)
        s = ScoreSet(rng.normal(0.4, 0.3, 20), rng.normal(0, 0.3, 40))
        tars = [tar_at_far(s, f) for f in np.linspace(0, 1, 21)]
        assert all(b >= a for a, b in zip(tars, tars[1:]))

    def test_few_impostors_warns(self):
        with pytest.warns(UserWarning, match="impostor"):
            tar_at_far(ScoreSet([0.9], [0.1, 0.2]), 0.01)


# ---------------------------------------------------------------------------
# rank-1
# ---------------------------------------------------------------------------

class TestRank1:
    def test_exact_match_wins(self):
        g = np.eye(4)
        assert rank1_assign(g[2:3], g)[0] == 2

    def test_tiny_noise(self):
        rng = np.random.default_rng(2)
        g = np.linalg.qr(rng.standard_normal((5, 5)))[0]
        p = g[3] + 1e-6 * rng.standard_normal(5)
        assert rank1_assign(p[None], g)[0] == 3

    def test_tie_breaks_to_lower_index(self):
        g = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert rank1_assign(np.array([[1.0, 0.0]]), g)[0] == 0

    def test_against_oracle(self):
        rng = np.random.default_rng(3)
        probe = rng.standard_normal((20, 8))
        gallery = rng.standard_normal((50, 8))
        np.testing.assert_array_equal(rank1_assign(probe, gallery),
                                      rank1_oracle(probe, gallery))

    def test_accuracy(self):
        g = np.eye(3)
        acc = rank1_identification(g, [0, 1, 2], g, [0, 1, 9])
        assert acc == pytest.approx(2 / 3)

    def test_empty_gallery(self):
        with pytest.raises(ContractError):
            rank1_assign(np.ones((1, 3)), np.empty((0, 3)))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

class TestVerification:
    def test_separable_toy(self):
        emb = {"a1": np.array([1.0, 0]), "a2": np.array([0.9, 0.1]),
               "b1": np.array([0, 1.0]), "b2": np.array([0.1, 0.9])}
        pairs = VerificationPairSet(
            [("a1", "a2", True), ("b1", "b2", True), ("a1", "b1", False), ("a2", "b2", False)],
            [0, 1, 0, 1])
        assert verification_accuracy_kfold(pairs, emb) == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(4)
        emb = {f"x{i}": v / np.linalg.norm(v)
               for i, v in enumerate(rng.standard_normal((200, 16)))}
        keys = list(emb)
        pairs = [(keys[rng.integers(200)], keys[rng.integers(200)], bool(rng.integers(2)))
                 for _ in range(1000)]
        ps = VerificationPairSet(pairs, np.arange(1000) % 10)
        assert abs(verification_accuracy_kfold(ps, emb) - 0.5) < 0.05

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        vecs = rng.standard_normal((40, 8))
        emb = {f"x{i}": v for i, v in enumerate(vecs)}
        recs = [{"id": f"x{i}", "label": i % 4} for i in range(40)]
        ps = build_verification_pairs(recs, 100, 5, np.random.default_rng(6))
        a = verification_accuracy_kfold(ps, emb)
        Q = np.linalg.qr(rng.standard_normal((8, 8)))[0]
        emb_rot = {k: Q @ v for k, v in emb.items()}
        b = verification_accuracy_kfold(ps, emb_rot)
        assert abs(a - b) < 1e-6

    def test_missing_embedding_keyed_error(self):
        ps = VerificationPairSet([("a", "b", True)], [0])
        with pytest.raises(ContractError, match="'b'"):
            verification_accuracy_kfold(ps, {"a": np.ones(2)})

    def test_fold_cover_contract(self):
        with pytest.raises(ContractError):
            VerificationPairSet([("a", "b", True)], [0, 1])


# ---------------------------------------------------------------------------
# overlap rate
# ---------------------------------------------------------------------------

class TestOverlapRate:
    def test_regular_grid_zero(self):
        g = np.stack(np.meshgrid(np.arange(4) * 8 + 4.0, np.arange(4) * 8 + 4.0),
                     axis=-1).reshape(-1, 2)
        mean, var = overlap_rate(g, 8)
        assert mean == 0.0 and var == 0.0

    def test_half_shift_pair(self):
        mean, var = overlap_rate(np.array([[0.0, 0.0], [4.0, 0.0]]), 8)
        assert mean == pytest.approx(0.5)
        assert var == pytest.approx(0.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(7)
        lm = rng.uniform(10, 40, (10, 2))
        a = overlap_rate(lm, 6)
        b = overlap_rate(lm + [13.7, -4.2], 6)
        assert a == pytest.approx(b)

    def test_against_rasterization_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            lm = rng.uniform(0, 30, (10, 2))
            mean, _ = overlap_rate(lm, 8)
            assert abs(mean - overlap_oracle(lm, 8, step=0.05)) < 1e-2

    def test_needs_two(self):
        with pytest.raises(ContractError):
            overlap_rate(np.ones((1, 2)), 4)

    def test_dataset_aggregate(self):
        a = np.array([[0.0, 0.0], [4.0, 0.0]])     # mean 0.5
        b = np.array([[0.0, 0.0], [80.0, 0.0]])    # mean 0.0
        mean, var = overlap_rate_dataset([a, b], 8)
        assert mean == pytest.approx(0.25)
        assert var == pytest.approx(0.0625)


# ---------------------------------------------------------------------------
# forward error
# ---------------------------------------------------------------------------

def _toy_eval_set(rng, transform=None, noise=0.0, n=40, R=6):
    gt = rng.uniform(0.2, 0.8, (n, 5, 2))
    pred = np.concatenate([gt, rng.uniform(0, 1, (n, R - 5, 2))], axis=1)
    if transform is not None:
        A, t = transform
        pred = pred @ A.T + t
    pred = pred + noise * rng.standard_normal(pred.shape)
    h = n // 2
    return LandmarkEvalSet(pred[:h], gt[:h], pred[h:], gt[h:])


class TestForwardError:
    def test_identity_predictions(self):
        es = _toy_eval_set(np.random.default_rng(9))
        assert forward_error(es) < 1e-6

    def test_affine_invariance(self):
        rng = np.random.default_rng(10)
        A = rng.standard_normal((2, 2)) + 2 * np.eye(2)
        es = _toy_eval_set(rng, transform=(A, rng.standard_normal(2)))
        assert forward_error(es) < 1e-6

    def test_noise_much_worse(self):
        rng = np.random.default_rng(11)
        clean = forward_error(_toy_eval_set(rng))
        gt = rng.uniform(0.2, 0.8, (40, 5, 2))
        noise_pred = rng.uniform(0, 1, (40, 6, 2))
        noisy = forward_error(LandmarkEvalSet(noise_pred[:20], gt[:20],
                                              noise_pred[20:], gt[20:]))
        assert noisy > 100 * max(clean, 1e-9)

    def test_rank_deficient_warns_not_crashes(self):
        rng = np.random.default_rng(12)
        gt = rng.uniform(0.2, 0.8, (10, 5, 2))
        pred = np.broadcast_to(rng.uniform(0, 1, (1, 6, 2)), (10, 6, 2)).copy()
        with pytest.warns(UserWarning, match="ridge"):
            forward_error(LandmarkEvalSet(pred[:5], gt[:5], pred[5:], gt[5:]))

    def test_needs_two_gt_points(self):
        with pytest.raises(ContractError):
            LandmarkEvalSet(np.zeros((4, 3, 2)), np.zeros((4, 1, 2)),
                            np.zeros((4, 3, 2)), np.zeros((4, 1, 2)))


# ---------------------------------------------------------------------------
# extraction and dumps
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    cfg, lmk = micro_cfg(), micro_lmk()
    params = build_model(cfg, lmk, 3, np.random.default_rng(13))
    return cfg, lmk, params


class TestExtraction:
    def test_unit_norm_and_determinism(self, tiny_model):
        cfg, lmk, params = tiny_model
        ds = micro_dataset()
        recs = embed_extract(params, cfg, lmk, ds, batch_size=7)
        assert len(recs) == len(ds)
        for r in recs:
            assert abs(np.linalg.norm(r["embedding"]) - 1.0) < 1e-5
        again = embed_extract(params, cfg, lmk, ds, batch_size=7)
        assert recs == again

    def test_identical_images_identical_embeddings(self, tiny_model):
        cfg, lmk, params = tiny_model
        ds = micro_dataset()
        ds.images[1] = ds.images[0]
        recs = embed_extract(params, cfg, lmk, ds)
        assert recs[0]["embedding"] == recs[1]["embedding"]

    def test_landmarks_in_unit_square(self, tiny_model):
        cfg, lmk, params = tiny_model
        ds = micro_dataset()
        recs = landmark_extract(params, cfg, lmk, ds)
        lm = np.array([r["landmarks"] for r in recs])
        assert lm.shape == (len(ds), lmk.num_landmarks, 2)
        assert (lm >= 0).all() and (lm <= 1).all()

    def test_jsonl_round_trip(self, tiny_model, tmp_path):
        cfg, lmk, params = tiny_model
        recs = embed_extract(params, cfg, lmk, micro_dataset())
        p = str(tmp_path / "emb.jsonl")
        write_jsonl(recs, p)
        assert read_jsonl(p) == recs
        assert "x0" not in embeddings_by_id(recs)

    def test_bad_jsonl_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "a"}\nnot json\n')
        with pytest.raises(ContractError, match=":2"):
            read_jsonl(str(p))


class TestAttentionDump:
    def test_rows_stochastic_and_count(self, tiny_model):
        cfg, lmk, params = tiny_model
        ds = micro_dataset()
        recs = attention_map_dump(params, cfg, lmk, ds.images[:3], ds.ids[:3], layer=-1)
        assert len(recs) == 3 * cfg.heads
        for r in recs:
            rows = np.array(r["rows"])
            assert rows.shape == (cfg.num_patches + 1,) * 2
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-5)
            assert len(r["cls_map"]) == cfg.num_patches
            assert np.array(r["landmarks"]).shape == (lmk.num_landmarks, 2)

    def test_holistic_uniform_tokens_near_uniform_maps(self):
        cfg = preset("fvit-tiny")
        params = build_model(cfg, None, 3, np.random.default_rng(14))
        img = np.full((1, 3, 56, 56), 0.5, dtype=np.float32)
        recs = attention_map_dump(params, cfg, None, img, ["u"], layer=0)
        for r in recs:
            patch_rows = np.array(r["rows"])[1:, 1:]   # identical patch tokens
            assert patch_rows.max() - patch_rows.min() < 1e-3

    def test_invalid_layer(self, tiny_model):
        cfg, lmk, params = tiny_model
        with pytest.raises(ContractError, match="layer"):
            attention_map_dump(params, cfg, lmk, micro_dataset().images[:1], ["a"],
                               layer=cfg.depth)
