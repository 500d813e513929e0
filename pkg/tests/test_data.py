import json

import cv2
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mfishseg.data import (CHANNEL_NAMES, DEFAULT_EXCLUSIONS,
                           AugmentationConfig, DatasetManifest, LabelCoding,
                           ManifestEntry, MfishSample, augment,
                           batch_iterator, compute_crop_window, curate,
                           load_manifest, load_sample, preprocess, sample_rng)

from conftest import make_sample


def write_sample_files(tmp_path, sample_id, labels, bit_depth=8, value=100):
    """Write six constant channel rasters plus a label raster; returns a
    manifest entry."""
    paths = {}
    h, w = labels.shape
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    for name in CHANNEL_NAMES:
        p = tmp_path / f"{sample_id}_{name}.png"
        cv2.imwrite(str(p), np.full((h, w), value, dtype=dtype))
        paths[name] = p
    label_path = tmp_path / f"{sample_id}_labels.png"
    cv2.imwrite(str(label_path), labels.astype(np.uint8))
    return ManifestEntry(id=sample_id, channel_paths=paths,
                         label_path=label_path)


class TestLabelCoding:
    def test_defaults(self, coding):
        assert len(coding.chromosome_codes) == 24
        assert coding.code_names[23] == "X"
        assert coding.code_names[24] == "Y"
        assert coding.background_code == 0
        assert coding.overlap_code == 255

    def test_duplicate_codes_rejected(self):
        with pytest.raises(ValueError, match="24 distinct"):
            LabelCoding(chromosome_codes=(1,) * 24)

    def test_overlapping_special_codes_rejected(self):
        with pytest.raises(ValueError, match="disjoint"):
            LabelCoding(background_code=5)


class TestLoadSample:
    def test_8bit_normalization(self, tmp_path, coding):
        labels = np.zeros((512, 640), dtype=np.int32)
        labels[10:20, 10:20] = 3
        entry = write_sample_files(tmp_path, "V000000", labels, value=255)
        sample = load_sample(entry, coding)
        assert sample.height == 512 and sample.width == 640
        assert sample.channels.max() == pytest.approx(1.0)
        assert sample.channels.shape == (6, 512, 640)

    def test_16bit_normalization(self, tmp_path, coding):
        labels = np.zeros((8, 8), dtype=np.int32)
        labels[0, 0] = 1
        entry = write_sample_files(tmp_path, "V000001", labels, bit_depth=16,
                                   value=65535)
        sample = load_sample(entry, coding)
        assert sample.channels.max() == pytest.approx(1.0)

    def test_undeclared_code_rejected(self, tmp_path, coding):
        labels = np.full((8, 8), 99, dtype=np.int32)
        entry = write_sample_files(tmp_path, "V000002", labels)
        with pytest.raises(ValueError, match="undeclared label codes"):
            load_sample(entry, coding)

    def test_missing_file(self, tmp_path, coding):
        labels = np.zeros((8, 8), dtype=np.int32)
        entry = write_sample_files(tmp_path, "V000003", labels)
        entry.channel_paths["green"].unlink()
        with pytest.raises(FileNotFoundError):
            load_sample(entry, coding)

    def test_dimension_mismatch(self, tmp_path, coding):
        labels = np.zeros((8, 8), dtype=np.int32)
        entry = write_sample_files(tmp_path, "V000004", labels)
        cv2.imwrite(str(entry.channel_paths["red"]),
                    np.zeros((9, 8), dtype=np.uint8))
        with pytest.raises(ValueError, match="shape"):
            load_sample(entry, coding)


class TestManifest:
    def _manifest_doc(self, tmp_path, ids, exclude=None):
        labels = np.zeros((8, 8), dtype=np.int32)
        labels[0, 0] = 1
        doc = {"samples": []}
        for sid in ids:
            entry = write_sample_files(tmp_path, sid, labels)
            doc["samples"].append({
                "id": sid,
                "channels": {k: v.name for k, v in entry.channel_paths.items()},
                "labels": entry.label_path.name,
            })
        if exclude is not None:
            doc["exclude"] = exclude
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc))
        return path

    def test_default_exclusions_applied(self, tmp_path):
        ids = ["V1306XY", "V250253", "V190442", "V999999"]
        manifest = load_manifest(self._manifest_doc(tmp_path, ids))
        assert set(manifest.exclusion_list) == set(DEFAULT_EXCLUSIONS)
        samples = curate(manifest)
        assert [s.id for s in samples] == ["V1306XY", "V999999"]

    def test_table_exclusion_count(self):
        assert len(DEFAULT_EXCLUSIONS) == 14

    def test_empty_exclusion_is_identity(self, tmp_path):
        ids = ["B", "A"]
        manifest = load_manifest(self._manifest_doc(tmp_path, ids, exclude=[]))
        assert [s.id for s in curate(manifest)] == ["A", "B"]  # sorted

    def test_all_excluded_gives_empty(self, tmp_path):
        manifest = load_manifest(
            self._manifest_doc(tmp_path, ["A", "B"], exclude=["A", "B"]))
        assert curate(manifest) == []

    @given(st.lists(st.sampled_from(list(DEFAULT_EXCLUSIONS) + ["Vx", "Vy", "Vz"]),
                    min_size=1, max_size=6, unique=True))
    @settings(max_examples=15, deadline=None)
    def test_never_returns_excluded(self, tmp_path_factory, ids):
        tmp_path = tmp_path_factory.mktemp("manifests")
        manifest = load_manifest(self._manifest_doc(tmp_path, ids))
        result_ids = {s.id for s in curate(manifest)}
        assert result_ids.isdisjoint(DEFAULT_EXCLUSIONS)


class TestPreprocess:
    def test_paper_geometry(self, coding):
        labels = np.zeros((645, 517), dtype=np.int32)
        labels[300:340, 250:280] = 5
        sample = make_sample(labels, coding)
        crop = compute_crop_window(sample, coding, 536, 490)
        out = preprocess(sample, crop, 0.7)
        assert (out.height, out.width) == (375, 343)

    def test_identity(self, coding):
        labels = np.zeros((16, 16), dtype=np.int32)
        labels[2:5, 2:5] = 1
        sample = make_sample(labels, coding)
        out = preprocess(sample, (0, 0, 16, 16), 1.0)
        np.testing.assert_array_equal(out.channels, sample.channels)
        np.testing.assert_array_equal(out.labels, sample.labels)
        # idempotent
        again = preprocess(out, (0, 0, 16, 16), 1.0)
        np.testing.assert_array_equal(again.channels, out.channels)

    def test_constant_channel_stays_constant(self, coding):
        labels = np.zeros((20, 20), dtype=np.int32)
        sample = MfishSample(id="C", channels=np.full((6, 20, 20), 0.3,
                                                      dtype=np.float32),
                             labels=labels)
        out = preprocess(sample, (0, 0, 20, 20), 0.5)
        np.testing.assert_allclose(out.channels, 0.3, atol=1e-6)

    def test_labels_stay_declared(self, coding):
        labels = np.zeros((30, 30), dtype=np.int32)
        labels[5:15, 5:15] = 7
        labels[20:25, 20:25] = 255
        sample = make_sample(labels, coding)
        out = preprocess(sample, (0, 0, 30, 30), 0.6)
        assert set(np.unique(out.labels)) <= coding.declared_codes

    def test_crop_out_of_bounds(self, coding):
        sample = make_sample(np.zeros((10, 10), dtype=np.int32), coding)
        with pytest.raises(ValueError, match="exceeds"):
            preprocess(sample, (5, 5, 10, 10), 1.0)


class TestAugment:
    def test_degenerate_config_identity(self, coding):
        labels = np.zeros((12, 12), dtype=np.int32)
        labels[3:6, 3:6] = 2
        sample = make_sample(labels, coding)
        out = augment(sample, AugmentationConfig.identity(),
                      np.random.default_rng(0), coding)
        np.testing.assert_array_equal(out.channels, sample.channels)
        np.testing.assert_array_equal(out.labels, sample.labels)

    def test_90_degree_rotation_oracle(self, coding):
        labels = np.zeros((16, 16), dtype=np.int32)
        labels[1:4, 2:9] = 4
        labels[10:14, 11:13] = 9
        sample = make_sample(labels, coding)
        config = AugmentationConfig(rotation_range_deg=(90.0, 90.0),
                                    scale_range=(1.0, 1.0),
                                    translation_range_frac=(0.0, 0.0))
        out = augment(sample, config, np.random.default_rng(0), coding)
        np.testing.assert_array_equal(out.labels, np.rot90(sample.labels, 1))
        for c in range(6):
            np.testing.assert_allclose(out.channels[c],
                                       np.rot90(sample.channels[c], 1),
                                       atol=1e-5)

    def test_labels_stay_declared(self, coding):
        labels = np.zeros((20, 20), dtype=np.int32)
        labels[4:10, 4:10] = 11
        sample = make_sample(labels, coding)
        config = AugmentationConfig(seed=3)
        for k in range(5):
            out = augment(sample, config, np.random.default_rng(k), coding)
            assert set(np.unique(out.labels)) <= coding.declared_codes

    def test_channels_and_labels_stay_aligned(self, coding):
        # a delta blob transformed with the same parameters lands in the
        # same place in intensity and label space
        labels = np.zeros((32, 32), dtype=np.int32)
        labels[8:11, 20:23] = 1
        channels = np.zeros((6, 32, 32), dtype=np.float32)
        channels[:, 8:11, 20:23] = 1.0
        sample = MfishSample(id="D", channels=channels, labels=labels)
        config = AugmentationConfig(rotation_range_deg=(-45.0, 45.0),
                                    translation_range_frac=(-0.05, 0.05))
        for k in range(5):
            out = augment(sample, config, np.random.default_rng(k), coding)
            blob = out.labels == 1
            if blob.sum() == 0:
                continue
            ys, xs = np.nonzero(blob)
            cy, cx = ys.mean(), xs.mean()
            iy, ix = np.unravel_index(np.argmax(out.channels[0]),
                                      out.channels[0].shape)
            assert abs(cy - iy) < 3 and abs(cx - ix) < 3

    def test_deterministic_rng(self, coding):
        labels = np.zeros((16, 16), dtype=np.int32)
        labels[2:8, 2:8] = 6
        sample = make_sample(labels, coding)
        config = AugmentationConfig(seed=9)
        a = augment(sample, config, sample_rng(9, sample.id, 4), coding)
        b = augment(sample, config, sample_rng(9, sample.id, 4), coding)
        np.testing.assert_array_equal(a.channels, b.channels)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_scale_range_positive(self):
        with pytest.raises(ValueError, match="positive"):
            AugmentationConfig(scale_range=(0.0, 1.0))


class TestBatchIterator:
    def _samples(self, n, coding, h=8, w=8):
        out = []
        for i in range(n):
            labels = np.zeros((h, w), dtype=np.int32)
            labels[0, 0] = coding.chromosome_codes[i % 24]
            labels[0, 1] = coding.overlap_code
            labels[1:3, 1:3] = 5
            out.append(make_sample(labels, coding, sample_id=f"S{i:03d}"))
        return out

    def test_batch_sizes_65_by_16(self, coding):
        samples = self._samples(65, coding)
        sizes = [b[0].shape[0] for b in
                 batch_iterator(samples, 16, np.random.default_rng(0), coding)]
        assert sizes == [16, 16, 16, 16, 1]

    def test_mask_and_onehot(self, coding):
        samples = self._samples(1, coding)
        inputs, targets, mask = next(
            batch_iterator(samples, 1, np.random.default_rng(0), coding))
        assert inputs.shape == (1, 6, 8, 8)
        assert targets.shape == (1, 24, 8, 8)
        assert mask.shape == (1, 1, 8, 8)
        # background pixel: mask 0, one-hot all zero
        assert mask[0, 0, 7, 7] == 0
        assert targets[0, :, 7, 7].sum() == 0
        # overlap pixel: masked out
        assert mask[0, 0, 0, 1] == 0
        # chromosome pixel code 5: one-hot at its class index
        idx = coding.class_index(5)
        assert targets[0, idx, 1, 1] == 1
        assert targets[0, :, 1, 1].sum() == 1
        assert mask[0, 0, 1, 1] == 1

    def test_onehot_sum_equals_mask(self, coding):
        samples = self._samples(5, coding)
        for _, targets, mask in batch_iterator(samples, 2,
                                               np.random.default_rng(1), coding):
            np.testing.assert_array_equal(
                targets.sum(dim=1, keepdim=True).numpy(), mask.numpy())

    def test_epoch_is_seeded_permutation(self, coding):
        samples = self._samples(6, coding)
        a = [b[0].numpy() for b in
             batch_iterator(samples, 2, np.random.default_rng(3), coding)]
        b = [b[0].numpy() for b in
             batch_iterator(samples, 2, np.random.default_rng(3), coding)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_heterogeneous_sizes_rejected(self, coding):
        s1 = make_sample(np.zeros((8, 8), dtype=np.int32), coding, "A")
        s2 = make_sample(np.zeros((9, 8), dtype=np.int32), coding, "B")
        with pytest.raises(ValueError, match="size"):
            list(batch_iterator([s1, s2], 2, np.random.default_rng(0), coding))
