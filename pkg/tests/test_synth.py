import json

import numpy as np
import pytest

from anodet import images, pipeline, synthetic
from anodet.evaluation import auc, roc_points
from anodet.pipeline import MANIFEST_META_NAME, MANIFEST_NAME
from anodet.synthetic import SynthConfig, build_dataset, gen_anomalous, gen_healthy

SMALL = SynthConfig(seed=9, n_train=4, n_test=6, size=32)


class TestSynthConfig:
    def test_defaults_valid(self):
        SynthConfig()

    @pytest.mark.parametrize("kwargs", [
        dict(area_lo=0.0),
        dict(area_lo=0.5, area_hi=0.4),
        dict(area_hi=1.0),
        dict(size=16),
        dict(n_train=0),
        dict(n_test=0),
        dict(octaves=0),
        dict(base_freq=0),
    ])
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


class TestGenHealthy:
    def test_deterministic(self):
        a = gen_healthy(SMALL, 3)
        b = gen_healthy(SMALL, 3)
        assert np.array_equal(a, b)

    def test_shape_dtype_range(self):
        img = gen_healthy(SMALL, 0)
        assert img.shape == (3, 32, 32)
        assert img.dtype == np.float32
        assert img.min() >= -1.0 and img.max() <= 1.0

    def test_indices_differ(self):
        # same-parity pairs share the cohort tint, so any difference comes
        # from the texture itself; each pair must differ in >= 1% of pixels
        n = 32 * 32
        for i in range(100):
            a = gen_healthy(SMALL, 2 * i)
            b = gen_healthy(SMALL, 2 * i + 2)
            differing = (a != b).any(axis=0).sum()
            assert differing >= 0.01 * n

    def test_seed_changes_texture(self):
        a = gen_healthy(SynthConfig(seed=1, size=32), 0)
        b = gen_healthy(SynthConfig(seed=2, size=32), 0)
        assert not np.array_equal(a, b)

    def test_cohort_tint_alternates(self):
        base = SynthConfig(seed=9, size=32, tint=0.2)
        even = gen_healthy(base, 0)
        odd = gen_healthy(base, 1)
        # different textures, but tint shows up in the channel means
        assert even.mean() > odd.mean()


class TestGenAnomalous:
    def test_deterministic(self):
        img_a, mask_a = gen_anomalous(SMALL, 2)
        img_b, mask_b = gen_anomalous(SMALL, 2)
        assert np.array_equal(img_a, img_b)
        assert np.array_equal(mask_a, mask_b)

    def test_mask_fraction_in_range(self):
        n = SMALL.size * SMALL.size
        for index in range(30):
            _, mask = gen_anomalous(SMALL, index)
            frac = mask.sum() / n
            assert SMALL.area_lo <= frac <= SMALL.area_hi, (index, frac)

    def test_matches_healthy_outside_mask(self):
        for index in range(10):
            img, mask = gen_anomalous(SMALL, index)
            healthy = gen_healthy(SMALL, index)
            outside = ~mask
            assert np.abs(img - healthy)[:, outside].max() <= 1e-6

    def test_differs_inside_mask(self):
        img, mask = gen_anomalous(SMALL, 0)
        healthy = gen_healthy(SMALL, 0)
        inside = np.abs(img - healthy)[:, mask].max()
        assert inside > 0.1

    def test_range_and_dtype(self):
        img, mask = gen_anomalous(SMALL, 1)
        assert img.dtype == np.float32
        assert mask.dtype == np.bool_
        assert img.min() >= -1.0 and img.max() <= 1.0

    def test_impossible_area_range(self):
        cfg = SynthConfig(size=32, area_lo=0.10001, area_hi=0.10002)
        with pytest.raises(ValueError):
            gen_anomalous(cfg, 0)


class TestBuildDataset:
    def test_layout_and_counts(self, synth_dataset):
        cfg, manifest, out = synth_dataset
        train = manifest.subset(split="train")
        assert len(train) == 2 * cfg.n_train
        assert sum(r.domain == "X" for r in train) == cfg.n_train
        assert sum(r.domain == "Y" for r in train) == cfg.n_train
        assert all(r.label == pipeline.LABEL_HEALTHY for r in train)
        test = manifest.subset(split="test")
        labels = [r.label for r in test]
        assert labels.count(pipeline.LABEL_HEALTHY) == cfg.n_test
        assert labels.count(pipeline.LABEL_ANOMALOUS) == cfg.n_test
        for r in manifest.records:
            assert (out / f"{r.patch_id}.png").is_file()

    def test_regeneration_bit_identical(self, tmp_path):
        cfg = SynthConfig(seed=13, n_train=3, n_test=2, size=32)
        a = tmp_path / "a"
        b = tmp_path / "b"
        build_dataset(cfg, a)
        build_dataset(cfg, b)
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_manifest_round_trips(self, synth_dataset):
        import dataclasses

        cfg, manifest, out = synth_dataset
        back = pipeline.read_manifest(out)
        # coverages are stored at 6 decimals; everything else is exact
        quantized = [
            dataclasses.replace(r, tissue_coverage=round(r.tissue_coverage, 6),
                                lesion_coverage=round(r.lesion_coverage, 6))
            for r in manifest.records
        ]
        assert back.records == quantized
        # the sidecar is JSON, which turns the palette tuples into lists
        assert back.fingerprint == json.loads(json.dumps(manifest.fingerprint))
        assert (out / MANIFEST_NAME).is_file()
        assert (out / MANIFEST_META_NAME).is_file()

    def test_lesion_coverage_is_exact_blob_fraction(self, synth_dataset):
        cfg, manifest, out = synth_dataset
        n = cfg.size * cfg.size
        anomalous = manifest.subset(label=pipeline.LABEL_ANOMALOUS)
        assert len(anomalous) == cfg.n_test
        for i, r in enumerate(anomalous):
            _, mask = gen_anomalous(cfg, i)
            assert r.lesion_coverage == mask.sum() / n

    def test_saved_patches_match_generator(self, synth_dataset):
        cfg, manifest, out = synth_dataset
        rec = manifest.subset(split="train")[0]
        loaded = images.load_patch(out / f"{rec.patch_id}.png")
        index = int(rec.patch_id.split("_h")[1])
        # uint8 quantization is the only loss
        assert np.abs(loaded - gen_healthy(cfg, index)).max() <= 1.0 / 255

    def test_oracle_scorer_separates_classes(self, synth_dataset):
        """Scoring by true blob area must give a perfect ROC."""
        cfg, manifest, out = synth_dataset
        test = manifest.subset(split="test")
        scores = [r.lesion_coverage for r in test]
        labels = [r.label == pipeline.LABEL_ANOMALOUS for r in test]
        assert auc(roc_points(scores, labels)) == 1.0
