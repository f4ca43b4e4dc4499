"""Training objective and evaluation metrics against brute-force loop oracles."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesst.gradcheck import check_gradients
from cesst.losses import (LossConfig, combine, effective_window, gaussian_window, loss_mix, loss_mrae,
                          loss_terms, loss_total, ssim)
from cesst.metrics import (MetricReport, average_reports, ergas, metric_suite, mrae, per_band_rmse, psnr,
                           rmse, sam)
from cesst.tensor import Tensor
from oracles import naive_band_rmse, naive_ergas, naive_mrae, naive_rmse, naive_sam, naive_ssim


@pytest.fixture
def cubes(rng):
    return rng.random((4, 4, 4)) * 0.9 + 0.05, rng.random((4, 4, 4)) * 0.9 + 0.05


class TestMetricOracles:
    def test_mrae(self, cubes):
        x, y = cubes
        assert abs(mrae(x, y) - naive_mrae(x, y)) <= 1e-10

    def test_rmse(self, cubes):
        x, y = cubes
        assert abs(rmse(x, y) - naive_rmse(x, y)) <= 1e-10

    def test_psnr(self, cubes):
        x, y = cubes
        assert abs(psnr(x, y) - 10 * math.log10(1 / naive_rmse(x, y) ** 2)) <= 1e-10

    def test_sam(self, cubes):
        x, y = cubes
        assert abs(sam(x, y) - naive_sam(x, y)) <= 1e-10

    def test_ergas(self, cubes):
        x, y = cubes
        assert abs(ergas(x, y) - naive_ergas(x, y)) <= 1e-10

    def test_per_band(self, cubes):
        x, y = cubes
        assert np.allclose(per_band_rmse(x, y), naive_band_rmse(x, y), rtol=0, atol=1e-10)


class TestMetricExamples:
    def test_identical(self, rng):
        y = rng.random((31, 4, 4))
        rep = metric_suite(y, y)
        assert (rep.mrae, rep.rmse, rep.sam, rep.ergas) == (0, 0, 0, 0)
        assert rep.psnr == math.inf

    def test_orthogonal_spectra(self):
        x = np.zeros((2, 3, 3))
        y = np.zeros((2, 3, 3))
        x[0], y[1] = 0.5, 0.8
        assert abs(sam(x, y) - math.pi / 2) <= 1e-12

    def test_ergas_single_band(self):
        y = np.full((1, 2, 2), 0.5)
        x = y + np.array([0.1, -0.1, 0.1, -0.1]).reshape(1, 2, 2)
        assert abs(ergas(x, y) - 20.0) <= 1e-10

    def test_uniform_error(self):
        y = np.full((31, 4, 4), 0.5)
        assert abs(rmse(y - 0.1, y) - 0.1) <= 1e-12
        assert abs(psnr(y - 0.1, y) - 20.0) <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metric_suite(np.zeros((31, 2, 2)), np.zeros((31, 2, 3)))

    def test_symmetry_and_asymmetry(self):
        x = np.full((2, 2, 2), 0.2)
        y = np.full((2, 2, 2), 0.4)
        assert rmse(x, y) == rmse(y, x) and psnr(x, y) == psnr(y, x)
        assert mrae(x, y) != mrae(y, x)
        assert ergas(x, y) != ergas(y, x)

    def test_sam_zero_spectrum_counts_zero(self):
        x = np.zeros((3, 1, 2))
        y = np.ones((3, 1, 2))
        assert sam(x, y) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_sam_scale_invariant(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.random((5, 3, 3)) + 0.01, r.random((5, 3, 3)) + 0.01
        s1, s2 = r.uniform(0.1, 10, (1, 3, 3)), r.uniform(0.1, 10, (1, 3, 3))
        assert abs(sam(x * s1, y * s2) - sam(x, y)) <= 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_psnr_rmse_consistency(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.random((3, 4, 4)), r.random((3, 4, 4))
        assert abs(psnr(x, y) + 20 * math.log10(rmse(x, y))) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_metrics_non_negative(self, seed):
        r = np.random.default_rng(seed)
        rep = metric_suite(r.random((31, 3, 3)), r.random((31, 3, 3)) + 1e-3)
        assert min(rep.mrae, rep.rmse, rep.sam, rep.ergas) >= 0
        assert all(v >= 0 for v in rep.per_band_rmse)


class TestReport:
    def test_json_inf_sentinel(self, rng):
        y = rng.random((31, 2, 2))
        d = json.loads(metric_suite(y, y, params=5, flops=7).to_json())
        assert d["psnr"] == "+inf" and d["params"] == 5 and d["flops"] == 7
        assert MetricReport.from_dict(d).psnr == math.inf

    def test_round_trip(self, rng):
        rep = metric_suite(rng.random((31, 2, 2)), rng.random((31, 2, 2)))
        assert MetricReport.from_dict(json.loads(rep.to_json())) == rep

    def test_band_csv(self, rng):
        rep = metric_suite(rng.random((31, 2, 2)), rng.random((31, 2, 2)))
        lines = rep.band_csv().strip().split("\n")
        assert lines[0] == "band_nm,rmse" and len(lines) == 32
        assert lines[1].startswith("400,") and lines[-1].startswith("700,")
        assert float(lines[5].split(",")[1]) == rep.per_band_rmse[4]

    def test_average(self):
        a = MetricReport(1.0, 0.2, 10.0, 0.1, 50.0, [0.1] * 31)
        b = MetricReport(3.0, 0.4, 20.0, 0.3, 70.0, [0.3] * 31)
        m = average_reports([a, b])
        assert (m.mrae, m.psnr, m.ergas) == (2.0, 15.0, 60.0)
        assert np.allclose(m.per_band_rmse, 0.2)
        with pytest.raises(ValueError):
            average_reports([])


def pyramid(rng, b=1, size=16):
    return [rng.random((b, 31, size >> s, size >> s)) * 0.8 + 0.1 for s in range(3)]


def as_tensors(arrs):
    return [Tensor(a) for a in arrs]


class TestSsim:
    def test_matches_loop_oracle(self, rng):
        x, y = rng.random((1, 2, 13, 12)), rng.random((1, 2, 13, 12))
        assert abs(float(ssim(Tensor(x), y).data) - naive_ssim(x[0], y[0])) <= 1e-10

    def test_small_image_window_shrinks(self, rng):
        x, y = rng.random((1, 3, 4, 6)), rng.random((1, 3, 4, 6))
        assert effective_window(11, 4, 6) == 3
        assert abs(float(ssim(Tensor(x), y).data) - naive_ssim(x[0], y[0])) <= 1e-10

    def test_identical_is_one(self, rng):
        x = rng.random((2, 31, 16, 16))
        assert abs(float(ssim(Tensor(x), x).data) - 1.0) <= 1e-12

    def test_window_normalized(self):
        g = gaussian_window(11, 1.5)
        assert g.shape == (11, 11) and abs(g.sum() - 1) <= 1e-12 and g[5, 5] == g.max()


class TestLosses:
    def test_perfect_reconstruction(self, rng):
        gt = pyramid(rng)
        assert abs(float(loss_mix(as_tensors(gt), gt).data)) <= 1e-12
        assert float(loss_mrae(as_tensors(gt), gt).data) == 0.0
        assert abs(float(loss_total(as_tensors(gt), gt).data)) <= 1e-10

    def test_pure_l1_constant_offset(self, rng):
        gt = pyramid(rng)
        pred = as_tensors([y + 0.1 for y in gt])
        assert abs(float(loss_mix(pred, gt, LossConfig(mix_alpha=0.0)).data) - 0.3) <= 1e-12

    def test_mix_monotone_in_noise(self, rng):
        gt = pyramid(rng)
        noise = [rng.standard_normal(y.shape) for y in gt]
        vals = [float(loss_mix(as_tensors([y + a * n for y, n in zip(gt, noise)]), gt).data)
                for a in (0.01, 0.05, 0.2)]
        assert vals[0] < vals[1] < vals[2]

    def test_mrae_scalar_example(self):
        y = np.array([1.0, 2.0]).reshape(1, 1, 1, 2)
        x = np.array([1.1, 1.8]).reshape(1, 1, 1, 2)
        assert abs(float(loss_mrae([Tensor(x)], [y], eps=0.0).data) - 0.1) <= 1e-12

    def test_mrae_zero_target_finite(self):
        y = np.zeros((1, 1, 2, 2))
        assert np.isfinite(float(loss_mrae([Tensor(y + 0.5)], [y]).data))

    def test_combine(self):
        assert abs(combine(0.2, 0.003, 100.0) - 0.5) <= 1e-12

    def test_lambda_zero_is_mix(self, rng):
        gt = pyramid(rng)
        pred = as_tensors([y + 0.05 * rng.standard_normal(y.shape) for y in gt])
        cfg = LossConfig(lambda1=0.0)
        assert float(loss_total(pred, gt, cfg).data) == float(loss_mix(pred, gt, cfg).data)

    def test_terms_combine(self, rng):
        gt = pyramid(rng)
        pred = as_tensors([y * 0.9 for y in gt])
        t = loss_terms(pred, gt).floats()
        assert abs(t["total"] - (t["mix"] + 100 * t["mrae"])) <= 1e-9

    def test_shape_and_scale_mismatch(self, rng):
        gt = pyramid(rng)
        with pytest.raises(ValueError):
            loss_total(as_tensors(gt[:2]), gt)
        with pytest.raises(ValueError):
            loss_total(as_tensors(gt), [gt[0], gt[2], gt[1]])

    @pytest.mark.parametrize("kw", [{"lambda1": -1.0}, {"mix_alpha": 1.5}, {"ssim_window": 4}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)

    def test_total_gradient_matches_finite_differences(self, rng):
        gt = pyramid(rng, size=16)
        pred = [Tensor(y + 0.05 * rng.standard_normal(y.shape), requires_grad=True) for y in gt]
        tensors = {f"x{s}": t for s, t in enumerate(pred)}
        res = check_gradients(lambda: loss_total(pred, gt), tensors, tol=1e-3, max_entries=24)
        assert all(r.passed for r in res), [(r.name, r.rel_error) for r in res]
