import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maclookup.autograd import ShapeError, Tensor, precision
from maclookup.losses import (LossConfig, charbonnier, composite_losses, compose_total, frequency_loss,
                              gaussian_window, loss_terms, maae_loss, psnr, ssim)
from maclookup.ops import bilinear_resize


@pytest.fixture(autouse=True)
def _f64():
    with precision("float64"):
        yield


def loop_charbonnier(o, t, eps):
    total = 0.0
    for a, b in zip(o.ravel(), t.ravel()):
        total += math.sqrt((a - b) ** 2 + eps * eps)
    return total / o.size


def naive_freq(o, t):
    c, h, w = o.shape
    total = 0.0
    for ch in range(c):
        d = o[ch] - t[ch]
        for u in range(h):
            for v in range(w):
                s = sum(d[m, n] * cmath.exp(-2j * math.pi * (u * m / h + v * n / w))
                        for m in range(h) for n in range(w))
                total += abs(s.real) + abs(s.imag)
    return total / (c * h * w)


def loop_psnr(o, t):
    se = 0.0
    for a, b in zip(o.ravel(), t.ravel()):
        se += (a - b) ** 2
    mse = max(se / o.size, 1e-12)
    return min(10 * math.log10(1 / mse), 120.0)


def sliding_ssim(o, t):
    r = np.arange(11) - 5
    yy, xx = np.meshgrid(r, r, indexing="ij")
    win = np.exp(-(xx ** 2 + yy ** 2) / (2 * 1.5 ** 2))
    win /= win.sum()
    c1, c2 = 1e-4, 9e-4
    c, h, w = o.shape
    vals = []
    for ch in range(c):
        for i in range(h - 10):
            for j in range(w - 10):
                a = o[ch, i:i + 11, j:j + 11]
                b = t[ch, i:i + 11, j:j + 11]
                mx, my = (win * a).sum(), (win * b).sum()
                vx = (win * a * a).sum() - mx * mx
                vy = (win * b * b).sum() - my * my
                cxy = (win * a * b).sum() - mx * my
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestCharbonnier:
    def test_equal_images_leave_eps(self, rng):
        x = rng.uniform(size=(3, 8, 8))
        assert charbonnier(x, x).item() == pytest.approx(1e-3, abs=1e-15)

    def test_constant_offset(self):
        o = np.full((3, 4, 4), 0.5)
        assert charbonnier(o, o - 0.3).item() == pytest.approx(math.sqrt(0.09 + 1e-6), abs=1e-12)

    def test_loop_oracle(self, rng):
        for _ in range(20):
            o, t = rng.uniform(size=(2, 3, 8, 8))
            assert abs(charbonnier(o, t).item() - loop_charbonnier(o, t, 1e-3)) < 1e-7

    def test_lower_bound(self, rng):
        o, t = rng.uniform(size=(2, 3, 4, 4))
        assert charbonnier(o, t).item() > 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            charbonnier(np.zeros((3, 4, 4)), np.zeros((3, 4, 2)))


class TestFrequencyLoss:
    def test_equal_is_zero(self, rng):
        x = rng.uniform(size=(3, 8, 8))
        assert frequency_loss(x, x).item() == 0.0

    def test_dc_offset(self):
        o = np.full((1, 4, 4), 0.6)
        assert frequency_loss(o, o - 0.1).item() == pytest.approx(0.1, abs=1e-12)

    def test_naive_dft_oracle(self, rng):
        for _ in range(20):
            o, t = rng.uniform(size=(2, 1, 8, 8))
            assert abs(frequency_loss(o, t).item() - naive_freq(o, t)) < 1e-4

    def test_symmetric_nonnegative(self, rng):
        o, t = rng.uniform(size=(2, 3, 8, 8))
        a, b = frequency_loss(o, t).item(), frequency_loss(t, o).item()
        assert a == pytest.approx(b, abs=1e-12) and a > 0


class TestPsnr:
    def test_offset_gives_20_db(self):
        o = np.full((3, 8, 8), 0.5)
        assert psnr(o, o + 0.1).item() == pytest.approx(20.0, abs=1e-9)

    def test_cap(self, rng):
        x = rng.uniform(size=(3, 8, 8))
        assert psnr(x, x).item() == 120.0

    def test_loop_oracle(self, rng):
        for _ in range(20):
            o, t = rng.uniform(size=(2, 3, 16, 16))
            assert abs(psnr(o, t).item() - loop_psnr(o, t)) < 1e-6

    def test_decreasing_in_offset(self):
        o = np.full((3, 8, 8), 0.25)
        vals = [psnr(o, o + d).item() for d in np.linspace(0.01, 0.5, 20)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestSsim:
    def test_self_similarity(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        assert ssim(x, x).item() == 1.0

    def test_constant_images(self):
        # zero variances: (2*0.125 + C1) / (0.25 + 0.0625 + C1)
        expect = (2 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4)
        got = ssim(np.full((1, 16, 16), 0.5), np.full((1, 16, 16), 0.25)).item()
        assert got == pytest.approx(expect, abs=1e-9)
        assert got == pytest.approx(0.80007, abs=1e-4)

    def test_sliding_window_oracle(self, rng):
        for _ in range(20):
            o = rng.uniform(size=(1, 32, 32))
            t = np.clip(o + 0.2 * rng.standard_normal(o.shape), 0, 1)
            assert abs(ssim(o, t).item() - sliding_ssim(o, t)) < 1e-5

    def test_symmetric(self, rng):
        o, t = rng.uniform(size=(2, 3, 16, 16))
        assert abs(ssim(o, t).item() - ssim(t, o).item()) < 1e-9

    def test_window(self):
        w = gaussian_window()
        assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0) and w.argmax() == 60

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


class TestMaaeLoss:
    def test_single_term(self, rng):
        o, t = rng.uniform(size=(2, 3, 8, 8))
        ref = charbonnier(o, t).item() + 0.1 * frequency_loss(o, t).item()
        assert maae_loss([[Tensor(o)]], t).item() == pytest.approx(ref, abs=1e-12)

    def test_perfect_outputs_floor(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        t_half = bilinear_resize(Tensor(t), 8, 8).data
        outs = [[Tensor(t), Tensor(t_half)], [Tensor(t), Tensor(t_half)]]
        assert maae_loss(outs, t).item() == pytest.approx(4 * 1e-3, abs=1e-12)

    def test_term_by_term(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        outs = [[Tensor(rng.uniform(size=(3, 16, 16))), Tensor(rng.uniform(size=(3, 8, 8)))] for _ in range(2)]
        total = 0.0
        for row in outs:
            for n, o in enumerate(row):
                tn = bilinear_resize(Tensor(t), 16 // 2 ** n, 16 // 2 ** n).data
                total += charbonnier(o, tn).item() + 0.1 * frequency_loss(o, tn).item()
        assert maae_loss(outs, t).item() == pytest.approx(total, abs=1e-6)

    def test_halving_law_enforced(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        with pytest.raises(ShapeError):
            maae_loss([[Tensor(t), Tensor(rng.uniform(size=(3, 4, 4)))]], t)


class TestComposition:
    def test_perfect_case(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        t_half = bilinear_resize(Tensor(t), 8, 8).data
        outs = [[Tensor(t), Tensor(t_half)], [Tensor(t), Tensor(t_half)]]
        gt, total = composite_losses(t, t, outs, 0.0)
        assert gt.item() == pytest.approx(-1.0, abs=1e-12)
        assert total.item() == pytest.approx(-1.0 + 0.5 * 4 * 1e-3, abs=1e-12)

    def test_recomposition(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        outs = [[Tensor(rng.uniform(size=(3, 16, 16))), Tensor(rng.uniform(size=(3, 8, 8)))] for _ in range(2)]
        o = outs[-1][0]
        lut = 0.37
        terms = loss_terms(o, t, outs, lut)
        p, s = psnr(o, t).item(), ssim(o, t).item()
        gt = -p / 120 + 0.4 * (1 - s)
        assert terms.gt.item() == pytest.approx(gt, abs=1e-6)
        assert terms.total.item() == pytest.approx(gt + 0.5 * lut + 0.5 * maae_loss(outs, t).item(), abs=1e-6)

    def test_gt_excluded_when_flag_off(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        o = rng.uniform(size=(3, 16, 16))
        terms = loss_terms(o, t, [[Tensor(o)]], 0.2, LossConfig(gt_in_total=False))
        assert terms.total.item() == pytest.approx(0.5 * 0.2 + 0.5 * terms.maae.item(), abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(eps_char=0)
        with pytest.raises(ValueError):
            LossConfig(w_ssim=-1)


class TestLinearProbes:
    """Each coefficient is read back from the loss by finite linear probing."""

    def test_unit_probes_of_total(self):
        def total(gt, c, m):
            return compose_total(Tensor(np.array(gt)), Tensor(np.array(c)), Tensor(np.array(m)), LossConfig()).item()

        base = total(0.0, 0.0, 0.0)
        assert total(1.0, 0.0, 0.0) - base == pytest.approx(1.0, abs=1e-12)
        assert total(0.0, 1.0, 0.0) - base == pytest.approx(0.5, abs=1e-12)
        assert total(0.0, 0.0, 1.0) - base == pytest.approx(0.5, abs=1e-12)

    def test_cltcc_weight(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        o = rng.uniform(size=(3, 16, 16))
        outs = [[Tensor(o)]]
        d = 0.0625
        a = loss_terms(o, t, outs, 0.25).total.item()
        b = loss_terms(o, t, outs, 0.25 + d).total.item()
        assert abs((b - a) / d - 0.5) < 1e-9

    def test_maae_weight(self, rng):
        t = rng.uniform(size=(3, 16, 16))
        o = rng.uniform(size=(3, 16, 16))
        one = loss_terms(o, t, [[Tensor(o)]], 0.0)
        two = loss_terms(o, t, [[Tensor(o)], [Tensor(o)]], 0.0)
        assert abs((two.total.item() - one.total.item()) / one.maae.item() - 0.5) < 1e-9

    def test_lambda_freq(self, rng):
        o, t = rng.uniform(size=(2, 3, 8, 8))
        m = maae_loss([[Tensor(o)]], t).item()
        lam = (m - charbonnier(o, t).item()) / frequency_loss(o, t).item()
        assert abs(lam - 0.1) < 1e-9

    def test_ssim_weight(self, rng):
        o, t = rng.uniform(size=(2, 3, 16, 16))
        terms = loss_terms(o, t, None, None)
        w = (terms.gt.item() + terms.psnr.item() / 120.0) / (1.0 - terms.ssim.item())
        assert abs(w - 0.4) < 1e-9

    def test_eps(self, rng):
        x = rng.uniform(size=(3, 4, 4))
        assert abs(charbonnier(x, x).item() - 1e-3) < 1e-9
        # second probe: sqrt(d^2 + eps^2) at d = 0.3 recovers eps
        got = charbonnier(x, x + 0.3).item()
        assert abs(math.sqrt(got ** 2 - 0.09) - 1e-3) < 1e-9


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_ssim_bounded_and_symmetric(self, seed):
        with precision("float64"):
            r = np.random.default_rng(seed)
            o, t = r.uniform(size=(2, 1, 12, 12))
            a, b = ssim(o, t).item(), ssim(t, o).item()
        assert -1.0 <= a <= 1.0 and abs(a - b) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_charbonnier_at_least_eps(self, seed):
        with precision("float64"):
            r = np.random.default_rng(seed)
            o, t = r.uniform(size=(2, 2, 4, 4))
            assert charbonnier(o, t).item() >= 1e-3
