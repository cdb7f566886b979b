import dataclasses

import numpy as np
import pytest

from cmalign.data import (ConfigError, DataFormatError, DatasetSpec, generate,
                          inject_symmetric_noise, load_dataset, save_dataset)

SMALL = DatasetSpec(n_classes=4, n_train=60, n_test=20, latent_dim=6,
                    ambient_dims=(10, 12), seed=5)


class TestGenerate:
    def test_zero_noise_collapse(self):
        spec = dataclasses.replace(SMALL, within_class_sigma=0.0, modality_noise_sigma=0.0)
        ds = generate(spec)
        for j in range(spec.n_modalities):
            for k in range(spec.n_classes):
                rows = ds.train.features[j][ds.train.true_labels == k]
                assert np.ptp(rows, axis=0).max() == 0.0

    def test_deterministic(self):
        a, b = generate(SMALL), generate(SMALL)
        for j in range(SMALL.n_modalities):
            np.testing.assert_array_equal(a.train.features[j], b.train.features[j])
            np.testing.assert_array_equal(a.test.features[j], b.test.features[j])
        np.testing.assert_array_equal(a.train.true_labels, b.train.true_labels)

    def test_nearest_prototype_oracle(self):
        # latents with within_class_sigma <= 0.1 * class_separation are near-separable
        spec = DatasetSpec(n_classes=10, n_train=500, n_test=50, seed=3,
                           class_separation=1.0, within_class_sigma=0.1)
        ds = generate(spec)
        latents, labels = ds.latents, ds.train.true_labels
        means = np.stack([latents[labels == k].mean(axis=0) for k in range(10)])
        d2 = ((latents[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        acc = (d2.argmin(axis=1) == labels).mean()
        assert acc >= 0.99

    def test_every_class_populated_and_labels_in_range(self):
        ds = generate(SMALL)
        counts = np.bincount(ds.train.true_labels, minlength=SMALL.n_classes)
        assert counts.min() >= 1
        assert ds.train.given_labels.min() >= 0
        assert ds.train.given_labels.max() < SMALL.n_classes

    def test_train_test_rows_are_distinct_draws(self):
        ds = generate(SMALL)
        train = ds.train.features[0]
        test = ds.test.features[0]
        collisions = (train[:, None, :] == test[None, :, :]).all(axis=2).sum()
        assert collisions == 0

    def test_degenerate_spec_rejected(self):
        with pytest.raises(ConfigError):
            generate(dataclasses.replace(SMALL, n_train=3))
        with pytest.raises(ConfigError):
            DatasetSpec.from_dict({"n_classes": 1})
        with pytest.raises(ConfigError):
            DatasetSpec.from_dict({"bogus": 1})


class TestNoiseInjection:
    def test_rate_zero_is_identity(self):
        ds = inject_symmetric_noise(generate(SMALL), 0.0, seed=1)
        np.testing.assert_array_equal(ds.train.given_labels, ds.train.true_labels)

    def test_rate_one_always_flips(self):
        ds = inject_symmetric_noise(generate(SMALL), 1.0, seed=1)
        assert (ds.train.given_labels != ds.train.true_labels).all()

    def test_binomial_envelope_at_point_four(self):
        spec = DatasetSpec(n_classes=10, n_train=500, n_test=10, seed=9)
        ds = inject_symmetric_noise(generate(spec), 0.4, seed=2)
        corrupted = int((ds.train.given_labels != ds.train.true_labels).sum())
        assert 160 <= corrupted <= 240  # 200 +- 4 * sqrt(500 * .4 * .6)

    def test_binomial_envelope_across_rates(self):
        spec = DatasetSpec(n_classes=8, n_train=400, n_test=10, seed=11)
        clean = generate(spec)
        for trial, rate in enumerate([0.1, 0.3, 0.5, 0.7, 0.9]):
            ds = inject_symmetric_noise(clean, rate, seed=trial)
            corrupted = int((ds.train.given_labels != ds.train.true_labels).sum())
            sigma = np.sqrt(400 * rate * (1 - rate))
            assert abs(corrupted - 400 * rate) <= 4 * sigma

    def test_never_alters_truth_features_or_order(self):
        clean = generate(SMALL)
        before = [f.copy() for f in clean.train.features]
        true_before = clean.train.true_labels.copy()
        noisy = inject_symmetric_noise(clean, 0.6, seed=4)
        np.testing.assert_array_equal(noisy.train.true_labels, true_before)
        np.testing.assert_array_equal(clean.train.true_labels, true_before)
        for f_before, f_after in zip(before, noisy.train.features):
            np.testing.assert_array_equal(f_after, f_before)
        np.testing.assert_array_equal(noisy.test.given_labels, noisy.test.true_labels)

    def test_deterministic_given_seed(self):
        clean = generate(SMALL)
        a = inject_symmetric_noise(clean, 0.5, seed=42)
        b = inject_symmetric_noise(clean, 0.5, seed=42)
        np.testing.assert_array_equal(a.train.given_labels, b.train.given_labels)

    def test_invalid_rate_rejected(self):
        with pytest.raises(ConfigError):
            inject_symmetric_noise(generate(SMALL), 1.5, seed=0)


class TestSerialization:
    def test_roundtrip_bitwise(self, tmp_path):
        ds = inject_symmetric_noise(generate(SMALL), 0.4, seed=8)
        path = tmp_path / "ds.txt"
        save_dataset(ds, str(path))
        back = load_dataset(str(path))
        assert back.spec == ds.spec
        assert back.noise_rate == 0.4 and back.noise_seed == 8
        for split_a, split_b in ((ds.train, back.train), (ds.test, back.test)):
            np.testing.assert_array_equal(split_a.true_labels, split_b.true_labels)
            np.testing.assert_array_equal(split_a.given_labels, split_b.given_labels)
            for fa, fb in zip(split_a.features, split_b.features):
                np.testing.assert_array_equal(fa, fb)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not json\n")
        with pytest.raises(DataFormatError):
            load_dataset(str(path))

    def test_version_mismatch_rejected(self, tmp_path):
        ds = generate(SMALL)
        path = tmp_path / "ds.txt"
        save_dataset(ds, str(path))
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace('"version": 1', '"version": 99')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="version"):
            load_dataset(str(path))

    def test_truncated_file_rejected(self, tmp_path):
        ds = generate(SMALL)
        path = tmp_path / "ds.txt"
        save_dataset(ds, str(path))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:10]) + "\n")
        with pytest.raises(DataFormatError, match="truncated"):
            load_dataset(str(path))
