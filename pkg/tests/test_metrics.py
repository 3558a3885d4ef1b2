"""Metric closed forms, sentinel caps, invariances, and the report CSV."""

import numpy as np
import pytest

from hqdeblur.metrics import (
    EvalReport,
    EvalRow,
    evaluate_model,
    isnr,
    kernel_rmse,
    psnr,
    ssim,
    write_report_csv,
)
from hqdeblur.spectral import embed
from hqdeblur.synthesis import linear_kernel
from hqdeblur.training import init_params
from common import blurred_scene
from oracles import exhaustive_min_shift_rmse


class TestPsnr:
    def test_closed_forms(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)   # MSE 0.01
        assert psnr(a, b) == pytest.approx(20.0)
        c = np.ones((10, 10))        # MSE 1
        assert psnr(a, c) == pytest.approx(0.0)

    def test_identical_images_hit_the_cap(self):
        a = np.random.default_rng(0).random((8, 8))
        value, capped = psnr(a, a, with_flag=True)
        assert value == 99.0 and capped
        assert psnr(a, a) == 99.0

    def test_near_identical_images_also_cap(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 1e-9)
        value, capped = psnr(a, b, with_flag=True)
        assert value == 99.0 and capped

    def test_symmetry_and_flag_absence(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert psnr(a, b) == psnr(b, a)
        _, capped = psnr(a, b, with_flag=True)
        assert not capped

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.ones((4, 4)), np.ones((4, 5)))


class TestIsnr:
    def test_no_change_scores_zero(self):
        rng = np.random.default_rng(2)
        x = rng.random((8, 8))
        y = rng.random((8, 8))
        assert isnr(y, y, x) == pytest.approx(0.0)

    def test_perfect_restoration_caps(self):
        rng = np.random.default_rng(3)
        x = rng.random((8, 8))
        y = x + 0.1
        value, capped = isnr(x, y, x, with_flag=True)
        assert value == 99.0 and capped

    def test_quarter_error_energy_is_six_db(self):
        x = np.zeros((8, 8))
        y = np.full((8, 8), 0.2)
        restored = np.full((8, 8), 0.1)   # error energy ratio 4
        assert isnr(restored, y, x) == pytest.approx(10 * np.log10(4), abs=1e-12)

    def test_translation_consistency(self):
        rng = np.random.default_rng(4)
        x, y, r = (rng.random((8, 8)) for _ in range(3))
        base = isnr(r, y, x)
        rolled = [np.roll(img, (3, 5), axis=(0, 1)) for img in (r, y, x)]
        assert isnr(*rolled) == pytest.approx(base, rel=1e-12)


class TestSsim:
    def test_self_similarity_is_exactly_one(self):
        a = np.random.default_rng(5).random((32, 32))
        assert ssim(a, a) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_inverted_checkerboard_scores_negative(self):
        tile = np.indices((24, 24)).sum(axis=0) % 2
        a = tile.astype(float)
        assert ssim(a, 1.0 - a) < 0.0

    def test_noise_monotonically_degrades(self):
        rng = np.random.default_rng(7)
        base = np.clip(np.kron(rng.random((4, 4)), np.ones((8, 8))), 0, 1)
        scores = []
        for sigma in (0.01, 0.05, 0.1):
            noisy = base + np.random.default_rng(8).normal(scale=sigma,
                                                           size=base.shape)
            scores.append(ssim(base, noisy))
        assert scores[0] > scores[1] > scores[2]

    def test_color_is_mean_of_planes(self):
        rng = np.random.default_rng(9)
        a = rng.random((3, 16, 16))
        b = rng.random((3, 16, 16))
        per_plane = [ssim(a[c], b[c]) for c in range(3)]
        assert ssim(a, b) == pytest.approx(np.mean(per_plane), rel=1e-14)

    def test_small_images_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.ones((8, 8)), np.ones((8, 8)))


class TestKernelRmse:
    def test_exact_match_scores_zero(self):
        k = linear_kernel(0.4, 7, size=11)
        assert kernel_rmse(k, k) == 0.0

    def test_shift_is_absorbed(self):
        k = linear_kernel(0.7, 9, size=15)
        for shift in [(1, 0), (0, 3), (4, 4), (14, 9)]:
            shifted = np.roll(k, shift, axis=(0, 1))
            assert kernel_rmse(shifted, k) == pytest.approx(0.0, abs=1e-15)
            assert kernel_rmse(k, shifted) == pytest.approx(0.0, abs=1e-15)

    def test_matches_exhaustive_shift_oracle(self):
        truth = linear_kernel(0.0, 15, size=31)
        delta = np.zeros((31, 31))
        delta[15, 15] = 1.0
        assert kernel_rmse(delta, truth) == pytest.approx(
            exhaustive_min_shift_rmse(delta, truth), rel=1e-12)
        rng = np.random.default_rng(10)
        for _ in range(5):
            a = rng.random((9, 9))
            b = rng.random((9, 9))
            assert kernel_rmse(a, b) == pytest.approx(
                exhaustive_min_shift_rmse(a, b), rel=1e-12)

    def test_different_sizes_share_a_common_grid(self):
        truth = linear_kernel(0.0, 5, size=11)
        small = linear_kernel(0.0, 5, size=7)
        big = embed(small, (11, 11))
        assert kernel_rmse(small, truth) == pytest.approx(
            kernel_rmse(big, truth), rel=1e-12)

    def test_non_2d_rejected(self):
        with pytest.raises(ValueError):
            kernel_rmse(np.ones(5), np.ones((5, 5)))


class TestEvaluation:
    def test_report_rows_and_means(self):
        rng = np.random.default_rng(11)
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=1)
        samples = [blurred_scene(rng, shape=(16, 16), k_extent=3,
                                 k_shape=(5, 5)) for _ in range(3)]
        report = evaluate_model(params, samples)
        assert len(report.rows) == 3
        assert report.mean("psnr_db") == pytest.approx(
            np.mean([r.psnr_db for r in report.rows]))
        for row in report.rows:
            assert -1.0 <= row.ssim <= 1.0
            assert row.kernel_rmse >= 0.0

    def test_empty_sample_list_rejected(self):
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=1)
        with pytest.raises(ValueError):
            evaluate_model(params, [])

    def test_csv_layout(self, tmp_path):
        report = EvalReport(rows=[
            EvalRow("0", 20.0, 1.0, 0.5, 0.001),
            EvalRow("1", 30.0, 3.0, 0.9, 0.003),
        ])
        path = tmp_path / "report.csv"
        write_report_csv(path, report)
        lines = path.read_text().splitlines()
        assert lines[0] == "id,psnr_db,isnr_db,ssim,kernel_rmse"
        assert lines[1] == "0,20,1,0.5,0.001"
        assert lines[-1] == "mean,25,2,0.7,0.002"
        assert len(lines) == 4
