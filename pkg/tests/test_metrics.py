import math

import numpy as np
import pytest

from manifoldnerf.errors import DomainError
from manifoldnerf.metrics import PSNR_IDENTICAL, MetricReport, psnr, ssim


def test_psnr_identical_sentinel(rng):
    a = rng.random((8, 8, 3))
    assert psnr(a, a) == PSNR_IDENTICAL == 99.0


def test_psnr_known_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    # 10 log10(1 / 0.0025) = 26.0206...
    assert psnr(a, a + 0.05) == pytest.approx(10 * math.log10(400.0), abs=1e-9)
    assert psnr(a, a + 0.05) == pytest.approx(26.0206, abs=1e-4)


def test_psnr_symmetric_and_monotone(rng):
    a = rng.random((16, 16, 3))
    pattern = rng.normal(size=a.shape)
    b = a + 0.01 * pattern
    assert psnr(a, b) == psnr(b, a)
    values = [psnr(a, a + k * 0.01 * pattern) for k in (1, 2, 3, 4)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(DomainError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identity(rng):
    for _ in range(5):
        a = rng.random((20, 17, 3))
        assert abs(ssim(a, a) - 1.0) < 1e-9


def test_ssim_constant_mid_gray_negative():
    a = np.full((16, 16, 3), 0.5)
    assert ssim(a, 1.0 - a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16, 3), 0.25)
    b = np.full((16, 16, 3), 0.75)
    c1 = 0.01**2
    want = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
    assert ssim(a, b) == pytest.approx(want, abs=1e-6)
    assert want == pytest.approx(0.6001, abs=1e-4)


def test_ssim_symmetric_and_bounded(rng):
    a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert -1.0 <= ssim(a, b) <= 1.0
    assert ssim(a, b) < ssim(a, np.clip(a + 0.01, 0, 1))


def test_ssim_grayscale_and_size_check(rng):
    a = rng.random((12, 12))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DomainError):
        ssim(np.zeros((10, 30, 3)), np.zeros((10, 30, 3)))


def test_ssim_matches_reference_implementation(rng):
    skimage_metrics = pytest.importorskip("skimage.metrics")
    a = rng.random((32, 32, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = skimage_metrics.structural_similarity(
        a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    # windows and border handling differ slightly between implementations
    assert ssim(a, b) == pytest.approx(ref, abs=0.01)


def test_metric_report_csv(tmp_path):
    rep = MetricReport([(0, 20.0, 0.5), (1, 30.0, 0.7)])
    assert rep.mean_psnr == 25.0
    path = tmp_path / "m.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "view_index,psnr_db,ssim"
    assert len(lines) == 4
    assert lines[-1].startswith("mean,25.0")
