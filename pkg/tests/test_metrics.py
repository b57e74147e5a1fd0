import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ifr import metrics

C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def mirror(i, n):
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def loop_psnr(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (float(x) - float(y)) ** 2
    mse = total / a.size
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def loop_ssim(a, b, size=11, sigma=1.5):
    r = size // 2
    w = np.array([[math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma**2)) for j in range(size)]
                  for i in range(size)])
    w /= w.sum()
    h, wd = a.shape
    vals = []
    for y in range(h):
        for x in range(wd):
            ma = mb = saa = sbb = sab = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    k = w[dy + r, dx + r]
                    pa = a[mirror(y + dy, h), mirror(x + dx, wd)]
                    pb = b[mirror(y + dy, h), mirror(x + dx, wd)]
                    ma += k * pa
                    mb += k * pb
                    saa += k * pa * pa
                    sbb += k * pb * pb
                    sab += k * pa * pb
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + C1) * (2 * cov + C2))
                        / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((8, 8))
    assert metrics.psnr(a, a) == math.inf
    assert metrics.capped(metrics.psnr(a, a)) == 100.0


def test_psnr_constant_pair():
    assert metrics.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert metrics.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * math.log10(4))


def test_psnr_monotone_in_noise_amplitude():
    rng = np.random.default_rng(42)
    img = 0.25 + 0.5 * rng.random((32, 128))
    noise = rng.uniform(-1, 1, img.shape)
    values = [metrics.psnr(img, img + a * noise) for a in (0.05, 0.1, 0.2)]
    assert values[0] > values[1] > values[2]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_identical():
    a = np.random.default_rng(1).random((32, 128))
    assert abs(metrics.ssim(a, a) - 1.0) < 1e-9


def test_ssim_constant_closed_form():
    value = metrics.ssim(np.zeros((16, 16)), np.ones((16, 16)))
    assert abs(value - C1 / (1 + C1)) < 1e-7
    assert value == pytest.approx(9.999e-5, abs=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert abs(metrics.ssim(a, b) - loop_ssim(a, b)) < 1e-6
    assert abs(metrics.psnr(a, b) - loop_psnr(a, b)) < 1e-6


def test_ssim_batched_equals_per_image_mean():
    rng = np.random.default_rng(3)
    a, b = rng.random((3, 1, 16, 20)), rng.random((3, 1, 16, 20))
    per = [metrics.ssim(a[i, 0], b[i, 0]) for i in range(3)]
    assert metrics.ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)


unit_images = arrays(np.float64, (12, 12), elements=st.floats(0, 1))


@settings(max_examples=40, deadline=None)
@given(unit_images, unit_images)
def test_symmetry_and_range(a, b):
    s = metrics.ssim(a, b)
    assert abs(s - metrics.ssim(b, a)) < 1e-9
    assert -1 - 1e-9 <= s <= 1 + 1e-9
    assert metrics.psnr(a, b) == metrics.psnr(b, a)


@settings(max_examples=20, deadline=None)
@given(unit_images)
def test_self_similarity(a):
    assert abs(metrics.ssim(a, a) - 1) < 1e-9
    assert metrics.psnr(a, a) == math.inf


def test_quantize():
    q = metrics.quantize(np.array([0.0, 0.5, 1.0, 1.2, -0.1, 0.1234]))
    np.testing.assert_allclose(q * 255, np.round(q * 255))
    assert q[3] == 1.0 and q[4] == 0.0


class TestWordAccuracy:
    def test_identical(self):
        assert metrics.word_accuracy(["ab", "c1"], ["ab", "c1"]) == 1.0

    def test_case_insensitive(self):
        assert metrics.word_accuracy(["ABC"], ["abc"]) == 1.0

    def test_counting(self):
        assert metrics.word_accuracy(["a", "b", "c", "x"], ["a", "b", "c", "d"]) == 0.75

    def test_ignores_non_alphanumerics(self):
        assert metrics.word_accuracy(["a-b!"], ["AB"]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            metrics.word_accuracy(["a"], ["a", "b"])

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics.word_accuracy([], [])
