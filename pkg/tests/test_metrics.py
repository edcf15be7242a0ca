"""PSNR and structural-similarity tests against independent oracles."""

import numpy as np
import pytest

from cair import metrics as MX
from cair.tensor import ContractViolation


def brute_force_ssim(a, b):
    """Windowed-formula reference: explicit loops over valid positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    r = MX.SSIM_WINDOW // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k1d = np.exp(-(d * d) / (2.0 * MX.SSIM_SIGMA ** 2))
    k1d /= k1d.sum()
    w = np.outer(k1d, k1d)
    c1 = (MX.SSIM_K1 * 1.0) ** 2
    c2 = (MX.SSIM_K2 * 1.0) ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(a.shape[1] - 2 * r):
            for j in range(a.shape[2] - 2 * r):
                pa = a[c, i:i + 2 * r + 1, j:j + 2 * r + 1]
                pb = b[c, i:i + 2 * r + 1, j:j + 2 * r + 1]
                mua = (w * pa).sum()
                mub = (w * pb).sum()
                va = (w * pa * pa).sum() - mua * mua
                vb = (w * pb * pb).sum() - mub * mub
                cov = (w * pa * pb).sum() - mua * mub
                num = (2 * mua * mub + c1) * (2 * cov + c2)
                den = (mua ** 2 + mub ** 2 + c1) * (va + vb + c2)
                vals.append(num / den)
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_hits_sentinel(self):
        x = np.random.default_rng(0).random((3, 12, 12))
        assert MX.psnr(x, x.copy()) == 120.0

    def test_uniform_error_closed_form(self):
        x = np.full((3, 8, 8), 0.4)
        y = np.full((3, 8, 8), 0.5)
        assert abs(MX.psnr(x, y) - 20.0) < 1e-9

    def test_matches_hand_formula(self):
        rng = np.random.default_rng(5)
        x = rng.random((3, 10, 10))
        y = rng.random((3, 10, 10))
        mse = np.mean((x - y) ** 2)
        assert abs(MX.psnr(x, y) - 10.0 * np.log10(1.0 / mse)) < 1e-9

    def test_255_domain_variant_agrees(self):
        rng = np.random.default_rng(6)
        x = rng.random((3, 9, 9))
        y = rng.random((3, 9, 9))
        assert abs(MX.psnr(x * 255, y * 255, peak=255.0) - MX.psnr(x, y)) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(7)
        x = rng.random((3, 8, 8))
        y = rng.random((3, 8, 8))
        assert MX.psnr(x, y) == MX.psnr(y, x)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(8)
        x = rng.random((3, 16, 16)) * 0.5 + 0.25
        noise = rng.standard_normal(x.shape)
        vals = [MX.psnr(x, x + amp * noise)
                for amp in (0.01, 0.05, 0.1, 0.2, 0.3)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_near_identical_capped(self):
        x = np.full((3, 8, 8), 0.5)
        y = x + 1e-9
        assert MX.psnr(x, y) == 120.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            MX.psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


class TestSsim:
    def test_self_similarity_exactly_one(self):
        x = np.random.default_rng(1).random((3, 16, 16))
        assert MX.ssim(x, x.copy()) == 1.0

    def test_checkerboard_anticorrelation(self):
        idx = np.indices((16, 16)).sum(axis=0)
        x = (idx % 2).astype(np.float64)
        assert MX.ssim(x, 1.0 - x) <= 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((3, 14, 15))
        y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
        assert abs(MX.ssim(x, y) - brute_force_ssim(x, y)) < 1e-6

    def test_grayscale_input(self):
        rng = np.random.default_rng(9)
        x = rng.random((13, 13))
        y = rng.random((13, 13))
        assert abs(MX.ssim(x, y) - brute_force_ssim(x, y)) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(10)
        x = rng.random((3, 12, 12))
        y = rng.random((3, 12, 12))
        assert MX.ssim(x, y) == MX.ssim(y, x)

    def test_window_kernel_normalized(self):
        k = MX.ssim_window_kernel()
        assert k.shape == (11,)
        assert abs(k.sum() - 1.0) < 1e-15
        assert np.array_equal(k, k[::-1])

    def test_too_small_rejected(self):
        with pytest.raises(ContractViolation):
            MX.ssim(np.zeros((3, 10, 12)), np.zeros((3, 10, 12)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            MX.ssim(np.zeros((3, 12, 12)), np.zeros((3, 12, 13)))


class TestEvaluatePairs:
    def test_averages_per_image(self):
        rng = np.random.default_rng(2)
        pairs = []
        for _ in range(3):
            x = rng.random((3, 12, 12))
            y = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)
            pairs.append((x, y))
        rep = MX.evaluate_pairs(pairs)
        assert rep.n_images == 3
        assert abs(rep.psnr_db - np.mean([MX.psnr(a, b) for a, b in pairs])) < 1e-12
        assert abs(rep.ssim - np.mean([MX.ssim(a, b) for a, b in pairs])) < 1e-12
        assert rep.ssim <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            MX.evaluate_pairs([])
