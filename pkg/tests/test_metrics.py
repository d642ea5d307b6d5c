import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from unaen.metrics import (
    MetricReport,
    evaluate_set,
    gaussian_window_1d,
    mse,
    psnr,
    psnr_from_mse,
    ssim,
    ssim_constants,
    window_size_for,
)


def closed_form_global(x, y, c1=1e-4, c2=9e-4):
    mx, my = np.mean(x), np.mean(y)
    vx, vy = np.var(x), np.var(y)
    cxy = np.mean((x - mx) * (y - my))
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_ssim_identity():
    x = np.random.default_rng(0).random((32, 32))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, x, windowed=False) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_skimage_gaussian_mode():
    rng = np.random.default_rng(1)
    x = rng.random((40, 36))
    y = np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1)
    ref = structural_similarity(
        x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
    )
    assert ssim(x, y) == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("a,b", [(0.2, 0.2), (0.2, 0.7), (0.0, 1.0), (0.5, 0.0)])
def test_global_ssim_constant_pairs(a, b):
    x, y = np.full((8, 8), a), np.full((8, 8), b)
    c1, _ = ssim_constants()
    want = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(x, y, windowed=False) == pytest.approx(want, abs=1e-9)


def test_global_ssim_closed_form_random():
    rng = np.random.default_rng(2)
    x, y = rng.random((9, 13)), rng.random((9, 13))
    assert ssim(x, y, windowed=False) == pytest.approx(closed_form_global(x, y), abs=1e-12)


def test_ssim_symmetry_and_range():
    rng = np.random.default_rng(3)
    x, y = rng.random((20, 20)), rng.random((20, 20))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert -1 <= ssim(x, y) <= 1


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))


def test_window_shrinks_for_small_images():
    assert window_size_for((64, 64)) == 11
    assert window_size_for((8, 20)) == 7
    assert window_size_for((5, 5)) == 5
    x = np.random.default_rng(4).random((6, 6))
    assert ssim(x, x) == pytest.approx(1.0)


def test_gaussian_window_normalized():
    g = gaussian_window_1d()
    assert g.size == 11 and g.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(g, g[::-1])


def test_psnr_exact_20_db():
    assert psnr_from_mse(0.01, max_value=1.0) == 20.0
    x = np.zeros((10, 10))
    y = np.full((10, 10), 0.1)
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-12)


def test_psnr_identical_is_inf():
    x = np.ones((3, 3))
    assert math.isinf(psnr(x, x))


def test_mse_value():
    assert mse(np.array([0.0, 1.0]), np.array([1.0, 1.0])) == 0.5


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.1, 10.0))
def test_psnr_formula(err, peak):
    x = np.zeros(4)
    y = np.full(4, math.sqrt(err))
    assert psnr(x, y, peak) == pytest.approx(10 * math.log10(peak**2 / err), rel=1e-9)


def test_report_invariant():
    with pytest.raises(ValueError):
        MetricReport(ssim=1.0, psnr=30.0, mse=0.0, n_images=1)
    with pytest.raises(ValueError):
        MetricReport(ssim=1.0, psnr=math.inf, mse=0.1, n_images=1)


def test_report_json_round_trip():
    r = MetricReport(ssim=1.0, psnr=math.inf, mse=0.0, n_images=2, n_psnr_infinite=2)
    assert '"inf"' in r.to_json()
    assert MetricReport.from_json(r.to_json()) == r
    assert "ssim=1.0" in r.to_text()


def test_evaluate_set_identical():
    x = np.random.default_rng(5).random((16, 16))
    r = evaluate_set([(x, x), (x, x)])
    assert r.ssim == pytest.approx(1.0) and math.isinf(r.psnr) and r.n_psnr_infinite == 2


def test_evaluate_set_excludes_infinite_psnr():
    x = np.zeros((16, 16))
    y = np.full((16, 16), 0.1)
    r = evaluate_set([(x, x), (x, y)])
    assert r.psnr == pytest.approx(20.0) and r.n_psnr_infinite == 1
    assert r.mse == pytest.approx(0.005)


def test_evaluate_set_empty():
    with pytest.raises(ValueError):
        evaluate_set([])
