import numpy as np
import pytest
from PIL import Image

from anodet.errors import DegenerateInputError, ShapeError
from anodet.scoring import (METRIC_PERCEPTUAL, METRIC_SSIM, FeaturePyramid,
                            anomaly_score, perceptual_distance, read_scores,
                            reconstruct, score_manifest, ssim, write_scores)
from anodet.translator import TranslatorModel

from oracles import brute_force_ssim


def rand_image(seed, size=16, channels=3, spread=1.0):
    rng = np.random.default_rng(seed)
    shape = (size, size) if channels is None else (channels, size, size)
    return np.clip(rng.normal(0, spread, shape), -1, 1).astype(np.float64)


class TestSsim:
    def test_identity(self):
        x = rand_image(0)
        assert abs(ssim(x, x) - 1.0) < 1e-9

    def test_symmetry(self):
        for seed in range(5):
            a = rand_image(seed)
            b = rand_image(seed + 100)
            assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_constant_opposite_images(self):
        a = np.full((3, 16, 16), -1.0)
        b = np.full((3, 16, 16), 1.0)
        c1 = (0.01 * 2.0) ** 2
        expected = c1 / (2.0 + c1)
        assert abs(ssim(a, b) - expected) < 1e-7
        assert abs(expected - 1.9996e-4) < 1e-7

    def test_brute_force_oracle(self):
        for seed in range(4):
            a = rand_image(seed)
            b = np.clip(a + rand_image(seed + 50, spread=0.3), -1, 1)
            assert abs(ssim(a, b) - brute_force_ssim(a, b)) < 1e-9

    def test_brute_force_oracle_grayscale(self):
        a = rand_image(7, channels=None)
        b = rand_image(8, channels=None)
        assert abs(ssim(a, b) - brute_force_ssim(a, b)) < 1e-9

    def test_channel_mean(self):
        a = rand_image(3)
        b = rand_image(4)
        per_channel = [ssim(a[c], b[c]) for c in range(3)]
        assert abs(ssim(a, b) - np.mean(per_channel)) < 1e-12

    def test_bounded(self):
        for seed in range(10):
            s = ssim(rand_image(seed), rand_image(seed + 30))
            assert -1.0 <= s <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 17)))

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            ssim(rand_image(0), rand_image(1), window=10)

    def test_window_exceeding_image(self):
        with pytest.raises(DegenerateInputError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), window=11)

    def test_window_equal_to_image_ok(self):
        a = rand_image(2, size=11)
        assert abs(ssim(a, a) - 1.0) < 1e-9


class TestPerceptualDistance:
    def test_self_distance_zero(self):
        a = rand_image(0).astype(np.float32)
        assert abs(perceptual_distance(a, a)) < 1e-9

    def test_symmetry(self):
        a = rand_image(1)
        b = rand_image(2)
        assert abs(perceptual_distance(a, b) - perceptual_distance(b, a)) < 1e-9

    def test_non_negative(self):
        for seed in range(5):
            assert perceptual_distance(rand_image(seed), rand_image(seed + 9)) >= 0.0

    def test_monotone_under_noise(self):
        a = rand_image(5, size=32)
        means = []
        for amp in (0.1, 0.3, 0.5):
            vals = []
            for seed in range(20):
                noise = np.random.default_rng(seed).normal(0, amp, a.shape)
                vals.append(perceptual_distance(a, np.clip(a + noise, -1, 1)))
            means.append(np.mean(vals))
        assert means[0] < means[1] < means[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            perceptual_distance(rand_image(0), rand_image(1, size=32))
        with pytest.raises(ShapeError):
            perceptual_distance(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)))

    def test_extractor_reproducible(self):
        a = rand_image(3)
        b = rand_image(4)
        d1 = perceptual_distance(a, b, FeaturePyramid(seed=17))
        d2 = perceptual_distance(a, b, FeaturePyramid(seed=17))
        assert d1 == d2


@pytest.fixture(scope="module")
def model(tiny_model_config):
    import torch
    torch.manual_seed(11)
    m = TranslatorModel(tiny_model_config)
    m.eval()
    return m


class TestReconstruct:
    def test_shape_and_determinism(self, model):
        x = rand_image(0, size=32).astype(np.float32)
        a = reconstruct(x, model)
        b = reconstruct(x, model)
        assert a.shape == x.shape
        assert np.array_equal(a, b)

    def test_bounded(self, model):
        out = reconstruct(rand_image(1, size=32).astype(np.float32), model)
        assert out.min() >= -1.0 and out.max() <= 1.0


class TestAnomalyScore:
    def test_score_recomputable_ssim(self, model):
        x = rand_image(2, size=32).astype(np.float32)
        rec = anomaly_score(x, model, METRIC_SSIM)
        assert rec.metric == METRIC_SSIM
        assert rec.score == 1.0 - ssim(rec.query, rec.output)

    def test_score_recomputable_perceptual(self, model):
        x = rand_image(3, size=32).astype(np.float32)
        rec = anomaly_score(x, model, METRIC_PERCEPTUAL)
        assert rec.score == perceptual_distance(rec.query, rec.output)

    def test_perfect_reconstruction_scores_zero(self):
        x = rand_image(4, size=32)
        assert abs(1.0 - ssim(x, x)) < 1e-9

    def test_deterministic(self, model):
        x = rand_image(5, size=32).astype(np.float32)
        assert anomaly_score(x, model).score == anomaly_score(x, model).score

    def test_unknown_metric(self, model):
        with pytest.raises(ValueError):
            anomaly_score(rand_image(0, size=32).astype(np.float32), model, "psnr")

    def test_noise_on_reconstruction_raises_score(self):
        # orientation: a worse reconstruction must not score less anomalous
        x = rand_image(6, size=32)
        means = []
        for amp in (0.0, 0.1, 0.3):
            vals = []
            for seed in range(50):
                noise = np.random.default_rng(seed).normal(0, amp, x.shape) if amp else 0
                vals.append(1.0 - ssim(x, np.clip(x + noise, -1, 1)))
            means.append(np.mean(vals))
        assert means[0] < means[1] < means[2]


class TestScoreManifest:
    def test_counts_order_and_parallel_agreement(self, model, synth_dataset):
        _, manifest, out = synth_dataset
        test = manifest.subset(split="test")
        recs1, errs1 = score_manifest(manifest, out, model, METRIC_SSIM, jobs=1)
        recs4, errs4 = score_manifest(manifest, out, model, METRIC_SSIM, jobs=4)
        assert errs1 == [] and errs4 == []
        assert [r.patch_id for r in recs1] == [r.patch_id for r in test]
        assert recs1 == recs4
        labels = {r.true_label for r in recs1}
        assert labels == {"healthy", "anomalous"}

    def test_empty_test_split(self, model, synth_dataset):
        from anodet.pipeline import Manifest
        _, manifest, out = synth_dataset
        train_only = Manifest(manifest.subset(split="train"), manifest.fingerprint)
        records, errors = score_manifest(train_only, out, model)
        assert records == [] and errors == []

    def test_missing_file_becomes_error(self, model, synth_dataset, tmp_path):
        _, manifest, out = synth_dataset
        test_ids = [r.patch_id for r in manifest.subset(split="test")]
        missing = test_ids[1]
        for rec in manifest.subset(split="test"):
            if rec.patch_id != missing:
                data = (out / f"{rec.patch_id}.png").read_bytes()
                (tmp_path / f"{rec.patch_id}.png").write_bytes(data)
        records, errors = score_manifest(manifest, tmp_path, model)
        assert len(records) == len(test_ids) - 1
        assert len(errors) == 1 and errors[0][0] == missing
        assert missing not in [r.patch_id for r in records]

    def test_dump_reconstructions(self, model, synth_dataset, tmp_path):
        _, manifest, out = synth_dataset
        dump = tmp_path / "pairs"
        records, _ = score_manifest(manifest, out, model, dump_dir=dump)
        first = records[0].patch_id
        with Image.open(dump / f"{first}.png") as img:
            assert img.size == (128, 64)  # query and reconstruction side by side


class TestScoreFile:
    def test_round_trip_and_precision(self, tmp_path):
        from anodet.scoring import ScoreRecord
        records = [
            ScoreRecord("p1", "healthy", "ssim", 0.123456789123),
            ScoreRecord("p2", "anomalous", "ssim", 1.0 / 3.0),
        ]
        path = write_scores(tmp_path / "scores.csv", records)
        text = path.read_text()
        assert "0.12345679" in text  # 8 significant digits
        back = read_scores(path)
        assert [r.patch_id for r in back] == ["p1", "p2"]
        assert back[0].score == pytest.approx(records[0].score, rel=1e-7)

    def test_byte_identical_rewrites(self, tmp_path):
        from anodet.scoring import ScoreRecord
        records = [ScoreRecord("a", "healthy", "perceptual", 0.25)]
        p1 = write_scores(tmp_path / "one.csv", records)
        p2 = write_scores(tmp_path / "two.csv", records)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("id,label,metric,score\na,healthy,ssim,0.5\n")
        with pytest.raises(ValueError):
            read_scores(path)
