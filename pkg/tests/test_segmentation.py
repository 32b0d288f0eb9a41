import csv
import math

import numpy as np
import pytest

from vitseg import segmentation
from vitseg.container import TextEmbeddings
from vitseg.engine import Engine, forward
from vitseg.errors import ConfigError, DataError, ShapeError
from vitseg.imaging import resize_bilinear, resize_short_side
from vitseg.segmentation import ClassMap, SlideConfig, miou, slide_segment, window_segment
from vitseg.strategies import StrategyConfig
from toys import orthogonal_text, toy_weights


@pytest.fixture(scope="module")
def toy_setup(small_config):
    weights = toy_weights(small_config, seed=21)
    engine = Engine(weights)
    text = TextEmbeddings(class_names=("a", "b"),
                          matrix=orthogonal_text(2, small_config.projection_dim))
    return engine, StrategyConfig.disabled(), text


def cmap(values, num_classes=2):
    return ClassMap(labels=np.asarray(values, dtype=np.int64), num_classes=num_classes)


class TestPatchLogits:
    def test_feature_equal_to_class_row(self):
        text = TextEmbeddings(class_names=("a", "b", "c"),
                              matrix=orthogonal_text(3, 4))
        feats = text.matrix[2:3].copy()
        logits = segmentation.patch_logits(feats, text)
        assert np.argmax(logits[0]) == 2
        assert logits[0, 2] == pytest.approx(1.0, abs=1e-7)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        text = TextEmbeddings(class_names=("a", "b"), matrix=orthogonal_text(2, 6))
        feats = rng.normal(size=(5, 6)).astype(np.float32)
        base = segmentation.patch_logits(feats, text)
        scaled = segmentation.patch_logits(feats * 10.0, text)
        np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-6)
        np.testing.assert_array_equal(np.argmax(scaled, axis=1),
                                      np.argmax(base, axis=1))

    def test_hand_case_matches_scalar_oracle(self):
        feats = np.array([[1.0, 1.0], [1.0, 0.0], [-1.0, 2.0]], dtype=np.float32)
        tmat = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        text = TextEmbeddings(class_names=("a", "b"), matrix=tmat)
        logits = segmentation.patch_logits(feats, text)
        for i in range(3):
            for c in range(2):
                f = feats[i].astype(np.float64)
                t = tmat[c].astype(np.float64)
                expect = float(f @ t) / (math.hypot(*f) * math.hypot(*t))
                assert logits[i, c] == pytest.approx(expect, abs=1e-6)

    def test_dim_mismatch(self):
        text = TextEmbeddings(class_names=("a",), matrix=orthogonal_text(1, 4))
        with pytest.raises(ShapeError):
            segmentation.patch_logits(np.zeros((2, 5), np.float32), text)


class TestWindowSegment:
    def test_matches_manual_composition(self, toy_setup):
        engine, strategy, text = toy_setup
        rng = np.random.default_rng(1)
        crop = rng.random((16, 16, 3)).astype(np.float32)
        got = window_segment(crop, engine, strategy, text)
        projected, _, _ = forward(crop, engine.weights, strategy)
        np.testing.assert_array_equal(got, segmentation.patch_logits(projected, text))

    def test_repeat_calls_bit_identical(self, toy_setup):
        engine, strategy, text = toy_setup
        rng = np.random.default_rng(2)
        crop = rng.random((16, 16, 3)).astype(np.float32)
        a = window_segment(crop, engine, strategy, text)
        b = window_segment(crop, engine, strategy, text)
        np.testing.assert_array_equal(a, b)


class TestWindowOrigins:
    def test_even_tiling(self):
        assert segmentation._window_origins(336, 224, 112) == [0, 112]

    def test_last_window_snaps_to_edge(self):
        assert segmentation._window_origins(300, 224, 112) == [0, 76]

    def test_single_window(self):
        assert segmentation._window_origins(224, 224, 112) == [0]


class TestSlideSegment:
    def test_single_window_equals_upsampled_argmax(self, toy_setup):
        engine, strategy, text = toy_setup
        rng = np.random.default_rng(3)
        image = rng.random((16, 16, 3)).astype(np.float32)
        cfg = SlideConfig(short_side=16, crop=16, stride=16)
        result = slide_segment(image, engine, strategy, text, cfg)
        work = resize_short_side(np.asarray(image, np.float64), 16)
        window = np.ascontiguousarray(work, dtype=np.float32)
        logits = window_segment(window, engine, strategy, text)
        pixel = resize_bilinear(logits.reshape(4, 4, 2).astype(np.float64), 16, 16)
        np.testing.assert_array_equal(result.labels, np.argmax(pixel, axis=2))

    def test_uniform_logits_unaffected_by_overlap(self, toy_setup):
        engine, strategy, _ = toy_setup
        # identical class rows give identical logits; ties resolve to class 0
        row = orthogonal_text(1, engine.config.projection_dim)[0]
        text = TextEmbeddings(class_names=("a", "b"), matrix=np.stack([row, row]))
        rng = np.random.default_rng(4)
        image = rng.random((16, 24, 3)).astype(np.float32)
        cfg = SlideConfig(short_side=16, crop=16, stride=8)
        result = slide_segment(image, engine, strategy, text, cfg)
        np.testing.assert_array_equal(result.labels, np.zeros((16, 24), np.int64))

    def test_two_window_overlap_is_hand_accumulated_mean(self, toy_setup):
        engine, strategy, text = toy_setup
        rng = np.random.default_rng(5)
        image = rng.random((16, 24, 3)).astype(np.float32)
        cfg = SlideConfig(short_side=16, crop=16, stride=8)
        result = slide_segment(image, engine, strategy, text, cfg)

        work = resize_short_side(np.asarray(image, np.float64), 16)
        maps = []
        for left in (0, 8):
            window = np.ascontiguousarray(work[:, left:left + 16], np.float32)
            logits = window_segment(window, engine, strategy, text)
            maps.append(resize_bilinear(logits.reshape(4, 4, 2).astype(np.float64),
                                        16, 16))
        canvas = np.zeros((16, 24, 2))
        cover = np.zeros((16, 24, 1))
        for left, pixel in zip((0, 8), maps):
            canvas[:, left:left + 16] += pixel
            cover[:, left:left + 16] += 1.0
        averaged = canvas / cover
        np.testing.assert_array_equal(result.labels, np.argmax(averaged, axis=2))
        band = (maps[0][:, 8:16] + maps[1][:, 0:8]) / cover[:, 8:16]
        np.testing.assert_array_equal(averaged[:, 8:16], band)

    def test_stride_equal_crop_stitches_without_averaging(self, toy_setup):
        engine, strategy, text = toy_setup
        rng = np.random.default_rng(6)
        image = rng.random((16, 32, 3)).astype(np.float32)
        cfg = SlideConfig(short_side=16, crop=16, stride=16)
        result = slide_segment(image, engine, strategy, text, cfg)
        work = resize_short_side(np.asarray(image, np.float64), 16)
        stitched = np.zeros((16, 32), dtype=np.int64)
        for left in (0, 16):
            window = np.ascontiguousarray(work[:, left:left + 16], np.float32)
            logits = window_segment(window, engine, strategy, text)
            pixel = resize_bilinear(logits.reshape(4, 4, 2).astype(np.float64), 16, 16)
            stitched[:, left:left + 16] = np.argmax(pixel, axis=2)
        np.testing.assert_array_equal(result.labels, stitched)

    def test_image_smaller_than_crop_resizes_directly(self, toy_setup):
        engine, strategy, text = toy_setup
        rng = np.random.default_rng(7)
        image = rng.random((8, 12, 3)).astype(np.float32)
        cfg = SlideConfig(short_side=8, crop=16, stride=16)
        result = slide_segment(image, engine, strategy, text, cfg)
        assert result.labels.shape == (8, 12)
        work = resize_bilinear(np.asarray(image, np.float64), 16, 16)
        window = np.ascontiguousarray(work, np.float32)
        logits = window_segment(window, engine, strategy, text)
        pixel = resize_bilinear(logits.reshape(4, 4, 2).astype(np.float64), 16, 16)
        back = resize_bilinear(pixel, 8, 12)
        np.testing.assert_array_equal(result.labels, np.argmax(back, axis=2))

    def test_config_errors(self, toy_setup):
        engine, strategy, text = toy_setup
        image = np.zeros((16, 16, 3), np.float32)
        with pytest.raises(ConfigError):
            slide_segment(image, engine, strategy, text,
                          SlideConfig(short_side=16, crop=16, stride=17))
        with pytest.raises(ConfigError):
            slide_segment(image, engine, strategy, text,
                          SlideConfig(short_side=16, crop=18, stride=6))
        with pytest.raises(DataError):
            slide_segment(np.zeros((16, 16), np.float32), engine, strategy, text,
                          SlideConfig(short_side=16, crop=16, stride=16))


class TestMiou:
    def test_identical_maps_score_one(self):
        rng = np.random.default_rng(8)
        labels = rng.integers(0, 3, size=(5, 5))
        labels[0, 0] = 255
        m = miou(cmap(labels, 3), cmap(labels, 3))
        assert m.miou == 1.0
        assert m.valid_pixels == 24

    def test_disjoint_maps_score_zero(self):
        m = miou(cmap(np.zeros((4, 4))), cmap(np.ones((4, 4))))
        assert m.miou == 0.0

    def test_hand_counted_half(self):
        # 6 gt-0 pixels: pred 0,0,0,1,abstain,abstain
        # 9 gt-1 pixels: pred 1×5, abstain×4; one gt pixel ignored
        # I0=3 U0=3+1+2=6, I1=5 U1=1+5+4=10 → IoU 0.5 each
        gt = np.array([0] * 6 + [1] * 9 + [255]).reshape(4, 4)
        pred = np.array([0, 0, 0, 1, 255, 255,
                         1, 1, 1, 1, 1, 255, 255, 255, 255,
                         0]).reshape(4, 4)
        m = miou(cmap(pred), cmap(gt))
        np.testing.assert_array_equal(m.intersection, [3, 5])
        np.testing.assert_array_equal(m.union, [6, 10])
        assert m.miou == pytest.approx(0.5)

    def test_intersection_is_symmetric(self):
        rng = np.random.default_rng(9)
        a = cmap(rng.integers(0, 4, size=(6, 6)), 4)
        b = cmap(rng.integers(0, 4, size=(6, 6)), 4)
        np.testing.assert_array_equal(miou(a, b).intersection,
                                      miou(b, a).intersection)

    def test_absent_classes_excluded_from_mean(self):
        pred = cmap(np.zeros((2, 2)), 3)
        gt = cmap(np.zeros((2, 2)), 3)
        m = miou(pred, gt, class_names=["a", "b", "c"])
        assert m.miou == 1.0
        assert np.isnan(m.iou[1]) and np.isnan(m.iou[2])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            miou(cmap(np.zeros((2, 2))), cmap(np.zeros((2, 3))))

    def test_everything_ignored(self):
        full = np.full((2, 2), 255)
        with pytest.raises(DataError):
            miou(cmap(np.zeros((2, 2))), cmap(full))

    def test_short_class_name_list(self):
        with pytest.raises(ConfigError):
            miou(cmap(np.zeros((2, 2)), 3), cmap(np.zeros((2, 2)), 3),
                 class_names=["a"])


class TestMergeCounts:
    def test_aggregate_differs_from_mean_of_means(self):
        m1 = miou(cmap([[0, 1]]), cmap([[0, 1]]))
        m2 = miou(cmap([[1, 0]]), cmap([[0, 1]]))
        assert (m1.miou, m2.miou) == (1.0, 0.0)
        merged = segmentation.merge_counts([m1, m2])
        np.testing.assert_array_equal(merged.intersection, [1, 1])
        np.testing.assert_array_equal(merged.union, [3, 3])
        assert merged.miou == pytest.approx(1 / 3)
        assert merged.valid_pixels == 4

    def test_class_list_mismatch(self):
        m1 = miou(cmap([[0, 1]]), cmap([[0, 1]]), class_names=["x", "y"])
        m2 = miou(cmap([[0, 1]]), cmap([[0, 1]]))
        with pytest.raises(ConfigError):
            segmentation.merge_counts([m1, m2])

    def test_empty(self):
        with pytest.raises(DataError):
            segmentation.merge_counts([])


class TestMetricsCsv:
    def test_rows_and_final_miou(self, tmp_path):
        pred = cmap(np.zeros((2, 2)), 3)
        gt = cmap(np.zeros((2, 2)), 3)
        m = miou(pred, gt, class_names=["a", "b", "c"])
        out = tmp_path / "metrics.csv"
        segmentation.write_metrics_csv(out, m)
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["class_name", "intersection", "union", "iou"]
        assert rows[1] == ["a", "4", "4", "1.00000000"]
        assert rows[2] == ["b", "0", "0", ""]
        assert rows[-1] == ["mIoU", "", "", "1.00000000"]
