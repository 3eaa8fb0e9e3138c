import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflow.metrics import bpd, nll_from_bpd, pearson, ssim


def direct_ssim(a, b, r=1.0, win=8):
    """Window-by-window SSIM written straight from the definition."""
    c1, c2 = (0.01 * r) ** 2, (0.03 * r) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            x = a[i : i + win, j : j + win].ravel()
            y = b[i : i + win, j : j + win].ravel()
            mx, my = x.mean(), y.mean()
            vx = ((x - mx) ** 2).mean()
            vy = ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_bpd_examples():
    assert bpd(10 * math.log(2), 10) == pytest.approx(1.0)
    assert bpd(0.5 * math.log(2 * math.pi), 1) == pytest.approx(1.3257, abs=1e-4)
    assert bpd(10 * math.log(2), 10, discrete=True) == pytest.approx(9.0)
    with pytest.raises(ValueError):
        bpd(1.0, 0)


@given(st.floats(-1e4, 1e4), st.integers(1, 10_000), st.booleans())
def test_bpd_is_invertible(nll, dims, discrete):
    back = nll_from_bpd(bpd(nll, dims, discrete), dims, discrete)
    # the +8 offset costs about one ulp of 8 bits per dimension on the way back
    tol = 1e-12 * max(1.0, abs(nll)) + (16 * np.finfo(float).eps * dims if discrete else 0.0)
    assert abs(back - nll) <= tol


def test_ssim_identity_and_bounds(rng):
    a = rng.uniform(size=(8, 8))
    assert ssim(a, a) == pytest.approx(1.0)
    assert -1.0 <= ssim(a, rng.uniform(size=(8, 8))) <= 1.0


def test_ssim_constant_offset_luminance_term():
    r = 1.0
    a = np.full((8, 8), 0.2)
    b = a + 0.5 * r
    c1 = (0.01 * r) ** 2
    lum = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1)
    # constant windows: the contrast-structure term is c2 / c2 = 1
    assert ssim(a, b, data_range=r) == pytest.approx(lum, rel=1e-12)
    assert ssim(a, b) < 1.0


def test_ssim_matches_direct_formula(rng):
    for shape in [(8, 8), (12, 10), (16, 16)]:
        a, b = rng.uniform(size=shape), rng.uniform(size=shape)
        assert abs(ssim(a, b) - direct_ssim(a, b)) < 1e-10


def test_ssim_multichannel_is_channel_mean(rng):
    a, b = rng.uniform(size=(9, 9, 3)), rng.uniform(size=(9, 9, 3))
    ref = np.mean([direct_ssim(a[..., c], b[..., c]) for c in range(3)])
    assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_pearson():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson(x, np.ones(10)) == 0.0
