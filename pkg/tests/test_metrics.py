import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtir.degrade import GaussianNoise, TaskSpec, make_dataset
from dtir.errors import ContractError, ShapeError
from dtir.metrics import MetricRow, baseline, evaluate, psnr, ssim

img16 = arrays(np.float64, (1, 16, 16), elements=st.floats(0, 1))


class TestPsnr:
    def test_identical_capped(self):
        x = np.random.default_rng(0).random((1, 8, 8))
        assert psnr(x, x) == 99.0

    def test_known_mse(self):
        a = np.zeros((1, 10, 10))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_constant_offset(self):
        a = np.zeros((1, 4, 4))
        assert psnr(a, a + 0.5) == pytest.approx(10 * math.log10(4), abs=1e-9)
        assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-4)

    def test_errors(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros(3), np.zeros(4))
        with pytest.raises(ContractError):
            psnr(np.zeros(3), np.zeros(3), peak=0)

    @settings(max_examples=30, deadline=None)
    @given(img16, img16)
    def test_symmetric(self, a, b):
        assert psnr(a, b) == psnr(b, a)

    def test_decreasing_in_mse(self):
        a = np.zeros((1, 4, 4))
        vals = [psnr(a, a + d) for d in (0.01, 0.05, 0.2, 0.7)]
        assert all(x > y for x, y in zip(vals, vals[1:]))


class TestSsim:
    def test_identical(self):
        x = np.random.default_rng(1).random((1, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_constant_pair(self):
        c = np.full((1, 8, 8), 0.5)
        assert ssim(c, c) == pytest.approx(1.0)

    def test_inverted_below_one(self):
        x = np.random.default_rng(2).random((1, 16, 16))
        assert ssim(x, 1 - x) < 1.0

    def test_hand_window(self):
        # one 8x8 window, closed-form statistics
        rng = np.random.default_rng(3)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        ma, mb = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - ma) * (b - mb)).mean()
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        want = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
        assert ssim(a, b) == pytest.approx(want, rel=1e-12)

    def test_too_small(self):
        with pytest.raises(ContractError):
            ssim(np.zeros((1, 7, 7)), np.zeros((1, 7, 7)))

    @settings(max_examples=30, deadline=None)
    @given(img16, img16)
    def test_symmetric_and_bounded(self, a, b):
        s = ssim(a, b)
        assert s == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1 - 1e-9 <= s <= 1 + 1e-9


class TestEvaluate:
    def test_identity_model_matches_baseline(self):
        _, ev = make_dataset(TaskSpec(GaussianNoise(0.1), n_train=1, n_eval=6), (1, 16, 16))
        zero = lambda x, t: np.zeros_like(x)  # noqa: E731
        got = evaluate(zero, ev, 4, "n")
        base = baseline(ev, "n")
        assert got.psnr == pytest.approx(base.psnr, abs=1e-4)
        assert got.ssim == pytest.approx(base.ssim, abs=1e-5)
        assert evaluate(zero, ev, 4, "n") == got

    def test_noise_baseline_near_20db(self):
        # PSNR of sigma=0.1 noise ~ 10 log10(1 / 0.01); clipping shaves a little MSE
        _, ev = make_dataset(TaskSpec(GaussianNoise(0.1), n_train=1, n_eval=64))
        assert baseline(ev).psnr == pytest.approx(20.0, abs=0.5)

    def test_row_needs_samples(self):
        with pytest.raises(ContractError):
            MetricRow("x", 1.0, 1.0, 0)
