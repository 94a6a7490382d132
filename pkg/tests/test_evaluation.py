import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from oracles import masked_rmse_scalar
from warpforge.errors import ContractViolation, UndefinedMetricError
from warpforge.evaluation import CSV_HEADER, metric_report, mpsnr, mssim, ssim_map


def test_constant_difference_gives_20db():
    a = np.full((20, 30, 3), 0.4)
    p, r = mpsnr(a, a + 0.1, np.ones((20, 30)))
    assert abs(p - 20.0) < 1e-6 and r == pytest.approx(0.1, abs=1e-12)


def test_identical_overlap_is_infinite():
    a = np.random.default_rng(0).random((10, 10))
    assert mpsnr(a, a, np.ones((10, 10))) == (math.inf, 0.0)


def test_rmse_only_sees_the_strip(rng):
    a, b = rng.random((16, 24, 3)), rng.random((16, 24, 3))
    m = np.zeros((16, 24))
    m[:, 10:14] = 1
    _, r = mpsnr(a, b, m)
    assert abs(r - masked_rmse_scalar(a, b, m)) < 1e-10
    b2 = b.copy()
    b2[:, :10] = 0  # outside the strip
    assert mpsnr(a, b2, m)[1] == r


def test_mssim_identity_exact(texture):
    m = np.ones(texture.shape[:2])
    assert mssim(texture, texture, m) == 1.0


def test_mssim_negative_image_is_low(texture):
    m = np.ones(texture.shape[:2])
    assert mssim(texture, 1.0 - texture, m) < 0.5


@pytest.mark.parametrize("seed", range(3))
def test_full_overlap_matches_reference_ssim(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((40, 50))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref_full = structural_similarity(a, b, win_size=7, data_range=1.0, gaussian_weights=False,
                                     use_sample_covariance=True, full=True)[1]
    # the reference crops a (win-1)/2 border before averaging
    ref = ref_full[3:-3, 3:-3].mean()
    assert abs(mssim(a, b, np.ones(a.shape)) - ref) < 1e-8


def test_ssim_map_shape():
    assert ssim_map(np.zeros((20, 9)), np.zeros((20, 9))).shape == (14, 3)


@given(st.integers(0, 2**31 - 1))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 12, 2)), rng.random((12, 12, 2))
    m = (rng.random((12, 12)) < 0.8).astype(float)
    m[2:10, 2:10] = 1
    assert mpsnr(a, b, m) == mpsnr(b, a, m)
    assert abs(mssim(a, b, m) - mssim(b, a, m)) < 1e-15


def test_shrinking_mask_restricts_support(rng):
    a, b = rng.random((30, 30)), rng.random((30, 30))
    big = np.ones((30, 30))
    small = np.zeros((30, 30))
    small[5:20, 5:20] = 1
    b_same = b.copy()
    b_same[small == 0] = rng.random(int((small == 0).sum()))
    assert mpsnr(a, b, small) == mpsnr(a, b_same, small)
    assert mssim(a, b, small) == mssim(a, b_same, small)
    assert mpsnr(a, b, big) != mpsnr(a, b_same, big)


def test_empty_and_thin_overlaps():
    a = np.zeros((10, 10))
    with pytest.raises(UndefinedMetricError):
        mpsnr(a, a, np.zeros((10, 10)))
    thin = np.zeros((10, 10))
    thin[:, 3:8] = 1  # 5 columns, narrower than the window
    with pytest.raises(UndefinedMetricError):
        mssim(a, a, thin)
    with pytest.raises(UndefinedMetricError):
        mssim(np.zeros((5, 5)), np.zeros((5, 5)), np.ones((5, 5)))


def test_shape_mismatch():
    with pytest.raises(ContractViolation):
        mpsnr(np.zeros((4, 4)), np.zeros((4, 5)), np.ones((4, 4)))


def test_report_formats(rng):
    a = rng.random((12, 12))
    thin = np.zeros((12, 12))
    thin[:, :3] = 1
    rep = metric_report(a, a * 0.9, thin)
    assert rep.mssim is None and rep.overlap_pixels == 36
    assert rep.as_lines().splitlines()[0].startswith("mpsnr=")
    assert len(rep.csv_row().split(",")) == len(CSV_HEADER.split(","))
