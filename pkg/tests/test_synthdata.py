import json

import numpy as np
import pytest

from selfctl.synthdata import (
    CAPTIONS,
    CLASS_PAIRS,
    SyntheticTaskData,
    build_vocab,
    export_dataset,
    make_sample,
    probe_classify,
)


class TestMakeSample:
    def test_centered_red_square(self):
        s = make_sample("red", "square", jitter=0)
        expected = np.zeros((16, 16, 3), dtype=np.float32)
        expected[5:11, 5:11, 0] = 1.0
        np.testing.assert_array_equal(s.image, expected)
        np.testing.assert_array_equal(s.cond[:, :, 0], expected[:, :, 0])

    def test_caption_text(self):
        assert make_sample("red", "square", jitter=0).caption == "red square"

    def test_all_nine_classes_render(self):
        rng = np.random.default_rng(0)
        for color, shape in CLASS_PAIRS:
            s = make_sample(color, shape, jitter=2, rng=rng)
            assert s.image.sum() > 0
            assert s.caption == f"{color} {shape}"

    def test_condition_is_silhouette_of_target(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            color, shape = CLASS_PAIRS[rng.integers(9)]
            s = make_sample(color, shape, jitter=3, rng=rng)
            lit = s.image.mean(axis=2) > 0.1
            np.testing.assert_array_equal(s.cond[:, :, 0] > 0, lit)

    def test_deterministic_given_seed(self):
        a = make_sample("blue", "cross", jitter=3, rng=np.random.default_rng(5))
        b = make_sample("blue", "cross", jitter=3, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a.image, b.image)

    def test_shape_stays_on_canvas(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = make_sample("green", "circle", jitter=8, rng=rng)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert s.image.sum() > 0

    def test_invalid_labels_rejected(self):
        with pytest.raises(ValueError):
            make_sample("mauve", "square")
        with pytest.raises(ValueError):
            make_sample("red", "triangle")


class TestProbe:
    def test_all_black_is_none(self):
        assert probe_classify(np.zeros((16, 16, 3))) == ("none", "none")

    def test_full_red_square_canvas(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[:, :, 0] = 1.0
        assert probe_classify(img) == ("red", "square")

    def test_self_consistency_blue_circle_100_jitters(self):
        rng = np.random.default_rng(3)
        hits = sum(
            probe_classify(make_sample("blue", "circle", jitter=3, rng=rng).image)
            == ("blue", "circle")
            for _ in range(100)
        )
        assert hits >= 99

    def test_self_consistency_all_classes(self):
        rng = np.random.default_rng(4)
        total = hits = 0
        for color, shape in CLASS_PAIRS:
            for _ in range(25):
                s = make_sample(color, shape, jitter=2, rng=rng)
                hits += probe_classify(s.image) == (color, shape)
                total += 1
        assert hits / total >= 0.99

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            probe_classify(np.zeros((8, 8, 3)))


class TestVocabAndData:
    def test_vocab_covers_all_captions(self):
        vocab = build_vocab()
        for caption in CAPTIONS:
            for word in caption.split():
                assert vocab.id_of(word) >= 2

    def test_batch_shapes(self):
        data = SyntheticTaskData(build_vocab())
        rng = np.random.default_rng(0)
        text, cond, target = data.batch(5, rng)
        assert text.shape == (5, 4)
        assert cond.shape == (5, 16, 48)
        assert target.shape == (5, 16, 48)
        assert cond.dtype == np.float32 and target.dtype == np.float32

    def test_batch_deterministic_per_seed(self):
        data = SyntheticTaskData(build_vocab())
        a = data.batch(4, np.random.default_rng(11))
        b = data.batch(4, np.random.default_rng(11))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestExport:
    def test_manifest_and_files(self, tmp_path):
        out = export_dataset(tmp_path / "ds", 18, jitter=2, seed=0)
        lines = (out / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 18
        records = [json.loads(l) for l in lines]
        for rec in records:
            assert (out / rec["target"]).exists()
            assert (out / rec["cond"]).exists()
            assert rec["caption"] == f"{rec['color']} {rec['shape']}"

    def test_exact_class_balance(self, tmp_path):
        out = export_dataset(tmp_path / "ds", 27, seed=1)
        records = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
        counts = {}
        for rec in records:
            counts[(rec["color"], rec["shape"])] = counts.get((rec["color"], rec["shape"]), 0) + 1
        assert all(v == 3 for v in counts.values()) and len(counts) == 9

    def test_non_multiple_of_nine_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            export_dataset(tmp_path / "ds", 10)

    def test_round_trip_through_png(self, tmp_path):
        from PIL import Image

        out = export_dataset(tmp_path / "ds", 9, jitter=0, seed=2)
        rec = json.loads((out / "manifest.jsonl").read_text().splitlines()[0])
        arr = np.asarray(Image.open(out / rec["target"]), dtype=np.float32) / 255.0
        assert probe_classify(arr) == (rec["color"], rec["shape"])
