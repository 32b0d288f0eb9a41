import csv
import math

import numpy as np
import pytest

from vitseg import diagnostics, engine
from vitseg.container import TextEmbeddings, random_weight_tensors, weights_from_tensors
from vitseg.diagnostics import PatchLabels
from vitseg.errors import DataError, ShapeError
from vitseg.kernels import cosine_rows
from vitseg.types import TokenSequence
from reference import auc_pairs
from toys import orthogonal_text, split_labels, toy_config, toy_image, toy_weights, two_tone_image


def labels_of(values, grid, ignore_index=255):
    return PatchLabels(labels=np.asarray(values, dtype=np.int64).reshape(-1),
                       grid=grid, ignore_index=ignore_index)


class TestPatchLabels:
    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            PatchLabels(labels=np.zeros(5, dtype=np.int64), grid=(2, 2))

    def test_valid_mask(self):
        pl = labels_of([0, 255, 1, 0], (2, 2))
        np.testing.assert_array_equal(pl.valid_mask(), [True, False, True, True])


class TestDiscriminabilityAuc:
    def test_two_clusters_perfectly_separable(self):
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
                         dtype=np.float32)
        auc = diagnostics.discriminability_auc(feats, labels_of([0, 0, 1, 1], (2, 2)))
        assert auc == 1.0

    def test_permuted_labels_average_near_half(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(16, 8)).astype(np.float32)
        base = np.array([0] * 8 + [1] * 8)
        vals = []
        for _ in range(200):
            perm = rng.permutation(base)
            vals.append(diagnostics.discriminability_auc(
                feats, labels_of(perm, (4, 4))))
        assert abs(np.mean(vals) - 0.5) < 0.05

    def test_tie_case_equals_brute_force(self):
        a = np.array([1.0, 0.0, 0.0], np.float32)
        b = np.array([0.0, 1.0, 0.0], np.float32)
        c = np.array([0.0, 0.0, 1.0], np.float32)
        feats = np.stack([a, a, b, b, c, c])
        pl = labels_of([0, 0, 0, 1, 1, 1], (2, 3))
        auc = diagnostics.discriminability_auc(feats, pl)
        sims = cosine_rows(feats, feats)
        iu = np.triu_indices(6, k=1)
        scores = sims[iu]
        positive = pl.labels[iu[0]] == pl.labels[iu[1]]
        assert auc == auc_pairs(scores, positive)

    def test_ignored_patches_excluded(self):
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
                         dtype=np.float32)
        # the awkward fourth patch is ignored, leaving perfect separation
        auc = diagnostics.discriminability_auc(feats, labels_of([0, 0, 1, 255], (2, 2)))
        assert auc == 1.0

    def test_single_class_rejected(self):
        feats = np.eye(4, dtype=np.float32)
        with pytest.raises(DataError):
            diagnostics.discriminability_auc(feats, labels_of([0, 0, 0, 0], (2, 2)))


class TestAlignmentAccuracy:
    def _projected(self, cfg, w, seq):
        feats = engine.final_layer_features(seq, w.layers[-1],
                                            "identity_no_ffn_no_residual", cfg)
        return engine.project(feats, w)

    def test_self_match_gives_perfect_accuracy(self, small_config):
        w = toy_weights(small_config, seed=0)
        rng = np.random.default_rng(1)
        seq = TokenSequence.from_stacked(
            rng.normal(size=(17, 16)).astype(np.float32), (4, 4))
        projected = self._projected(small_config, w, seq)
        norms = np.linalg.norm(projected.astype(np.float64), axis=1, keepdims=True)
        text = TextEmbeddings(class_names=tuple(f"p{i}" for i in range(16)),
                              matrix=(projected / norms).astype(np.float32))
        pl = labels_of(np.arange(16), (4, 4))
        acc = diagnostics.alignment_accuracy(seq, w, text, pl)
        assert acc == 1.0

    def test_two_class_case_verified_by_scalar_oracle(self, small_config):
        w = toy_weights(small_config, seed=2)
        rng = np.random.default_rng(3)
        seq = TokenSequence.from_stacked(
            rng.normal(size=(17, 16)).astype(np.float32), (4, 4))
        text_mat = orthogonal_text(2, small_config.projection_dim)
        text = TextEmbeddings(class_names=("a", "b"), matrix=text_mat)
        labels = np.array([0, 1] * 8)
        pl = labels_of(labels, (4, 4))
        acc = diagnostics.alignment_accuracy(seq, w, text, pl)
        projected = self._projected(small_config, w, seq)
        hits = 0
        for i in range(16):
            row = projected[i].astype(np.float64)
            cosines = [float(row @ t) / (np.linalg.norm(row) * np.linalg.norm(t))
                       for t in text_mat.astype(np.float64)]
            pred = int(np.argmax(cosines))
            hits += int(pred == labels[i])
        assert acc == pytest.approx(hits / 16)

    def test_all_ignored_rejected(self, small_config, small_weights):
        seq = TokenSequence.from_stacked(np.ones((17, 16), np.float32) +
                                         np.arange(17, dtype=np.float32)[:, None],
                                         (4, 4))
        text = TextEmbeddings(class_names=("a", "b"),
                              matrix=orthogonal_text(2, small_config.projection_dim))
        pl = labels_of([255] * 16, (4, 4))
        with pytest.raises(DataError):
            diagnostics.alignment_accuracy(seq, small_weights, text, pl)


class TestLayerSweep:
    def test_row_count_excludes_final_layer(self, small_config, tmp_path):
        w = toy_weights(small_config, seed=4)
        img = two_tone_image(small_config)
        pl = split_labels(small_config)
        text = TextEmbeddings(class_names=("a", "b"),
                              matrix=orthogonal_text(2, small_config.projection_dim))
        report = diagnostics.layer_sweep([(img, pl)], w, text)
        assert sorted(report.layer_auc) == [1, 2]  # 3-layer model, final excluded
        assert report.sample_count == 1
        out = tmp_path / "layer_auc.csv"
        diagnostics.write_layer_csv(out, report)
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["layer", "auc", "alignment"]
        assert len(rows) == 3

    def test_two_cluster_features_score_one_at_every_layer(self, small_config):
        # patch projection keyed to color makes the clusters survive all layers
        tensors = random_weight_tensors(small_config, seed=5, scale=0.01)
        pp = np.zeros_like(tensors["patch_proj"])
        pp[0, :16] = 1.0 / 16.0   # mean of the red plane
        pp[1, 32:] = 1.0 / 16.0   # mean of the blue plane
        pp += np.random.default_rng(6).normal(scale=1e-3, size=pp.shape)
        tensors["patch_proj"] = pp.astype(np.float32)
        tensors["pos_embed"] = (tensors["pos_embed"] * 0.01).astype(np.float32)
        w = weights_from_tensors(small_config, tensors)
        img = two_tone_image(small_config)
        pl = split_labels(small_config)
        text = TextEmbeddings(class_names=("a", "b"),
                              matrix=orthogonal_text(2, small_config.projection_dim))
        report = diagnostics.layer_sweep([(img, pl)], w, text)
        for auc in report.layer_auc.values():
            assert auc == 1.0


class TestRankHeads:
    def _copy_vs_constant_weights(self):
        cfg = toy_config(layers=3, heads=2, width=8, patch_size=4, image_size=16)
        tensors = random_weight_tensors(cfg, seed=7, scale=0.02)
        pp = np.zeros_like(tensors["patch_proj"])
        pp[0, :16] = 1.0 / 16.0
        pp[1, 32:] = 1.0 / 16.0
        tensors["patch_proj"] = pp.astype(np.float32)
        tensors["pos_embed"] = (tensors["pos_embed"] * 0.01).astype(np.float32)
        eye = np.eye(8, dtype=np.float32)
        for i in range(cfg.layers):
            prefix = f"layers.{i}."
            qk = np.zeros((8, 8), dtype=np.float32)
            qk[:4, :4] = 4.0 * np.eye(4)   # head 1 attends within its cluster
            tensors[prefix + "attn_q_w"] = qk
            tensors[prefix + "attn_k_w"] = qk.copy()
            wv = np.zeros((8, 8), dtype=np.float32)
            wv[:4, :4] = np.eye(4)          # head 1 copies its input slice
            tensors[prefix + "attn_v_w"] = wv
            bv = np.zeros(8, dtype=np.float32)
            bv[4:] = 1.0                    # head 2 emits a constant vector
            tensors[prefix + "attn_v_b"] = bv
            tensors[prefix + "attn_o_w"] = eye.copy()
        return cfg, weights_from_tensors(cfg, tensors)

    def test_copying_head_ranks_first_constant_heads_degenerate(self):
        cfg, w = self._copy_vs_constant_weights()
        img = two_tone_image(cfg)
        pl = split_labels(cfg)
        scores = diagnostics.rank_heads([(img, pl)], w)
        assert len(scores) == (cfg.layers - 1) * cfg.heads
        assert scores[0].head == 1          # a copying head leads
        by_key = {(s.layer, s.head): s.mean_auc for s in scores}
        assert by_key[(1, 2)] == 0.5        # constant features: every pair ties
        assert by_key[(1, 1)] > 0.9

    def test_single_head_model_lists_every_layer_head_slot(self, tmp_path):
        cfg = toy_config(layers=3, heads=1, width=8, patch_size=4, image_size=16)
        w = toy_weights(cfg, seed=8)
        img = two_tone_image(cfg)
        pl = split_labels(cfg)
        scores = diagnostics.rank_heads([(img, pl)], w)
        assert len(scores) == cfg.layers - 1  # one head per non-final layer
        out = tmp_path / "rank.json"
        diagnostics.write_ranking(out, scores)
        from vitseg.strategies import load_ranking
        assert load_ranking(out) == [(s.layer, s.head) for s in scores]

    def test_ties_break_by_layer_then_head(self):
        cfg, w = self._copy_vs_constant_weights()
        img = two_tone_image(cfg)
        pl = split_labels(cfg)
        scores = diagnostics.rank_heads([(img, pl)], w)
        degenerate = [(s.layer, s.head) for s in scores if s.mean_auc == 0.5]
        assert degenerate == sorted(degenerate)

    def test_dataset_tags_average_within_then_across(self):
        cfg, w = self._copy_vs_constant_weights()
        img = two_tone_image(cfg)
        pl = split_labels(cfg)
        scores = diagnostics.rank_heads([(img, pl), (img, pl), (img, pl)], w,
                                        datasets=["a", "a", "b"])
        for s in scores:
            tags = dict(s.per_dataset)
            assert set(tags) == {"a", "b"}
            assert s.mean_auc == pytest.approx((tags["a"] + tags["b"]) / 2)

    def test_empty_sample_set_rejected(self, small_weights):
        with pytest.raises(DataError):
            diagnostics.rank_heads([], small_weights)


class TestHoyerMap:
    def test_spike_persists_from_planting_layer_onward(self, small_config):
        tensors = random_weight_tensors(small_config, seed=9)
        pos = tensors["pos_embed"].copy()
        pos[1 + 7] = 0.0
        pos[1 + 7, 2] = 300.0
        tensors["pos_embed"] = pos
        w = weights_from_tensors(small_config, tensors)
        img = toy_image(small_config, seed=10)
        rows = diagnostics.hoyer_map(img, w)
        assert len(rows) == small_config.layers * 16
        assert all(0.0 <= score <= 1.0 for _, _, _, score in rows)
        by_layer = {}
        for layer, r, c, score in rows:
            by_layer.setdefault(layer, {})[(r, c)] = score
        spike_rc = (7 // 4, 7 % 4)
        for layer in range(1, small_config.layers + 1):
            layer_scores = by_layer[layer]
            assert layer_scores[spike_rc] == max(layer_scores.values())
            assert layer_scores[spike_rc] > 0.5

    def test_csv_format(self, small_config, small_weights, tmp_path):
        img = toy_image(small_config, seed=11)
        rows = diagnostics.hoyer_map(img, small_weights)
        out = tmp_path / "hoyer_map.csv"
        diagnostics.write_hoyer_csv(out, rows)
        parsed = list(csv.reader(out.open()))
        assert parsed[0] == ["layer", "row", "col", "score"]
        assert len(parsed) == 1 + len(rows)
        assert parsed[1][0] == "1"


class TestHeadCsv:
    def test_columns_and_order(self, tmp_path):
        scores = [
            diagnostics.HeadScore(layer=1, head=2, mean_auc=0.9,
                                  per_dataset=(("voc", 0.9),)),
            diagnostics.HeadScore(layer=2, head=1, mean_auc=0.8,
                                  per_dataset=(("ade", 0.7), ("voc", 0.9))),
        ]
        out = tmp_path / "head_auc.csv"
        diagnostics.write_head_csv(out, scores)
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["layer", "head", "dataset", "auc"]
        assert rows[1] == ["1", "2", "voc", "0.90000000"]
        assert rows[2] == ["2", "1", "ade", "0.70000000"]
