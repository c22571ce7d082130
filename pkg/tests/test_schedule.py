import math

import mpmath
import numpy as np
import pytest
import sympy
import torch
from scipy.integrate import quad

from diffclass.schedule import (
    NoiseSchedule,
    alpha_sigma,
    convert_prediction,
    forward_diffuse,
    min_snr_weight,
    training_loss,
)

PAPER = NoiseSchedule(base_resolution=64, image_resolution=256)
UNSHIFTED = NoiseSchedule(base_resolution=256, image_resolution=256)


def mp_log_snr(t, base=64, res=256):
    mpmath.mp.dps = 50
    t = mpmath.mpf(t)
    return -2 * mpmath.log(mpmath.tan(mpmath.pi * t / 2)) + 2 * mpmath.log(mpmath.mpf(base) / res)


class TestLogSnr:
    def test_midpoint_is_pure_shift(self):
        assert float(PAPER.log_snr(0.5)) == pytest.approx(2 * math.log(0.25), abs=1e-12)
        assert float(PAPER.log_snr(0.5)) == pytest.approx(-2.772589, abs=1e-6)

    def test_unshifted_midpoint_is_zero(self):
        assert abs(float(UNSHIFTED.log_snr(0.5))) < 1e-12

    @pytest.mark.parametrize("t", [0.25, 0.01, 0.9, 1e-6, 1 - 1e-6])
    def test_matches_high_precision(self, t):
        assert float(PAPER.log_snr(t)) == pytest.approx(float(mp_log_snr(t)), abs=1e-10)

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
    def test_domain_error_at_endpoints(self, t):
        with pytest.raises(ValueError):
            PAPER.log_snr(t)

    def test_strictly_decreasing(self):
        t = torch.linspace(1e-6, 1 - 1e-6, 20001, dtype=torch.float64)
        assert torch.all(torch.diff(PAPER.log_snr(t)) < 0)

    def test_shift_uses_resolution(self):
        s = NoiseSchedule(base_resolution=64, image_resolution=16)
        assert s.shift == pytest.approx(2 * math.log(4))


class TestInverse:
    def test_examples(self):
        assert float(PAPER.log_snr_inverse(2 * math.log(0.25))) == pytest.approx(0.5, abs=1e-12)
        assert float(UNSHIFTED.log_snr_inverse(0.0)) == pytest.approx(0.5, abs=1e-12)

    def test_lambda_round_trip(self):
        lam = torch.from_numpy(np.random.default_rng(0).uniform(-15, 15, 1000))
        back = PAPER.log_snr(PAPER.log_snr_inverse(lam))
        assert torch.max(torch.abs(back - lam)) < 1e-9

    def test_t_round_trip(self):
        t = torch.from_numpy(np.random.default_rng(1).uniform(1e-6, 1 - 1e-6, 1000))
        for sched in (PAPER, UNSHIFTED):
            back = sched.log_snr_inverse(sched.log_snr(t))
            assert torch.max(torch.abs(back - t)) < 1e-9

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PAPER.log_snr_inverse(float("nan"))


class TestAlphaSigma:
    def test_zero(self):
        a, s = alpha_sigma(0.0)
        assert float(a) == pytest.approx(0.7071068, abs=1e-7)
        assert float(s) == pytest.approx(0.7071068, abs=1e-7)

    def test_log16(self):
        a, s = alpha_sigma(math.log(16))
        assert float(a) ** 2 == pytest.approx(16 / 17, abs=1e-14)
        assert float(s) ** 2 == pytest.approx(1 / 17, abs=1e-14)

    def test_variance_preserving(self):
        lam = torch.from_numpy(np.random.default_rng(2).uniform(-30, 30, 1000))
        a, s = alpha_sigma(lam)
        assert torch.max(torch.abs(a ** 2 + s ** 2 - 1)) < 1e-12
        assert torch.all(a > 0) and torch.all(s > 0)

    def test_extreme_values_stay_finite(self):
        a, s = alpha_sigma(torch.tensor([-30.0, 30.0], dtype=torch.float64))
        assert torch.all(torch.isfinite(a)) and torch.all(s > 0) and torch.all(a > 0)


class TestNoiseDensity:
    def test_symbolic_oracle(self):
        t = sympy.symbols("t", positive=True)
        f = -2 * sympy.log(sympy.tan(sympy.pi * t / 2)) + 2 * sympy.log(sympy.Rational(64, 256))
        p = -1 / sympy.diff(f, t)
        for tv in (0.5, 0.1, 0.3, 0.77, 0.95):
            expected = float(p.subs(t, tv).evalf(30))
            assert float(PAPER.noise_density(tv)) == pytest.approx(expected, rel=1e-12)
        assert float(PAPER.noise_density(0.5)) == pytest.approx(1 / (2 * math.pi), abs=1e-12)

    def test_normalised_by_quadrature(self):
        integrand = lambda t: float(PAPER.noise_density(t) * abs(PAPER.log_snr_derivative(t)))
        val, _ = quad(integrand, 0, 1)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_positive(self):
        t = torch.linspace(1e-4, 1 - 1e-4, 1001, dtype=torch.float64)
        assert torch.all(PAPER.noise_density(t) > 0)

    def test_matches_central_difference(self):
        t = torch.linspace(0.01, 0.99, 100, dtype=torch.float64)
        h = 1e-6
        fd = (PAPER.log_snr(t + h) - PAPER.log_snr(t - h)) / (2 * h)
        assert torch.max(torch.abs(PAPER.noise_density(t) - (-1 / fd))) < 1e-5

    def test_endpoint_domain_error(self):
        with pytest.raises(ValueError):
            PAPER.noise_density(0.0)


class TestForwardDiffuse:
    def test_high_snr_is_identity(self):
        x = torch.randn(4, 3, dtype=torch.float64)
        z = forward_diffuse(x, 30.0, torch.randn(4, 3, dtype=torch.float64))
        assert torch.allclose(z, x, atol=1e-6)

    def test_zero_signal(self):
        eps = torch.randn(5, dtype=torch.float64)
        _, s = alpha_sigma(1.3)
        assert torch.allclose(forward_diffuse(torch.zeros(5, dtype=torch.float64), 1.3, eps), s * eps)

    def test_scalar_example(self):
        z = forward_diffuse(torch.tensor(1.0, dtype=torch.float64), 0.0, torch.tensor(1.0, dtype=torch.float64))
        assert float(z) == pytest.approx(1.4142136, abs=1e-7)

    def test_per_sample_lambda(self):
        x = torch.ones(2, 1, 2, 2, dtype=torch.float64)
        z = forward_diffuse(x, torch.tensor([0.0, 30.0], dtype=torch.float64), torch.zeros_like(x))
        assert torch.allclose(z[0], torch.full((1, 2, 2), math.sqrt(0.5), dtype=torch.float64))
        assert torch.allclose(z[1], x[1], atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(3), 0.0, torch.zeros(4))

    def test_variance_preservation(self):
        g = torch.Generator().manual_seed(0)
        x = 2.0 * torch.randn(100_000, generator=g, dtype=torch.float64)
        eps = torch.randn(100_000, generator=g, dtype=torch.float64)
        lam = 0.7
        a, s = alpha_sigma(lam)
        expected = float(a ** 2 * 4.0 + s ** 2)
        assert float(forward_diffuse(x, lam, eps).var()) == pytest.approx(expected, rel=0.01)


class TestConvertPrediction:
    def test_hand_example(self):
        x = torch.tensor(1.0, dtype=torch.float64)
        z = forward_diffuse(x, 0.0, torch.tensor(0.0, dtype=torch.float64))
        v = convert_prediction(z, x, "x", "v", 0.0)
        assert float(v) == pytest.approx(-0.7071068, abs=1e-7)
        assert float(convert_prediction(z, v, "v", "x", 0.0)) == pytest.approx(1.0, abs=1e-12)

    def test_high_snr_v_is_eps(self):
        x = torch.randn(10, dtype=torch.float64)
        eps = torch.randn(10, dtype=torch.float64)
        z = forward_diffuse(x, 30.0, eps)
        v = convert_prediction(z, eps, "eps", "v", 30.0)
        assert torch.allclose(v, eps, atol=1e-6)

    def test_consistent_with_definition(self):
        rng = np.random.default_rng(3)
        x = torch.from_numpy(rng.standard_normal((200, 4)))
        eps = torch.from_numpy(rng.standard_normal((200, 4)))
        lam = torch.from_numpy(rng.uniform(-10, 10, 200))
        z = forward_diffuse(x, lam, eps)
        a, s = alpha_sigma(lam)
        v = a[:, None] * eps - s[:, None] * x
        assert torch.allclose(convert_prediction(z, x, "x", "v", lam), v, atol=1e-10)
        assert torch.allclose(convert_prediction(z, eps, "eps", "v", lam), v, atol=1e-10)
        assert torch.allclose(convert_prediction(z, v, "v", "eps", lam), eps, atol=1e-10)
        assert torch.allclose(convert_prediction(z, x, "x", "eps", lam), eps, atol=1e-10)

    @pytest.mark.parametrize("a,b", [("x", "eps"), ("x", "v"), ("eps", "v"),
                                     ("eps", "x"), ("v", "x"), ("v", "eps")])
    def test_round_trips(self, a, b):
        rng = np.random.default_rng(4)
        x = torch.from_numpy(rng.standard_normal((500, 8)))
        eps = torch.from_numpy(rng.standard_normal((500, 8)))
        lam = torch.from_numpy(rng.uniform(-8, 8, 500))
        z = forward_diffuse(x, lam, eps)
        vals = {"x": x, "eps": eps, "v": convert_prediction(z, x, "x", "v", lam)}
        there = convert_prediction(z, vals[a], a, b, lam)
        back = convert_prediction(z, there, b, a, lam)
        assert torch.max(torch.abs(back - vals[a])) < 1e-10

    def test_unknown_space(self):
        with pytest.raises(ValueError):
            convert_prediction(torch.zeros(2), torch.zeros(2), "x", "score", 0.0)


class TestMinSnr:
    def test_examples(self):
        assert float(min_snr_weight(0.0, 5.0)) == pytest.approx(1.0)
        assert float(min_snr_weight(math.log(10), 5.0)) == pytest.approx(0.5, abs=1e-12)

    def test_range(self):
        lam = torch.from_numpy(np.random.default_rng(5).uniform(-30, 30, 1000))
        w = min_snr_weight(lam, 5.0)
        assert torch.all(w > 0) and torch.all(w <= 1)

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            min_snr_weight(0.0, 0.0)


class TestTrainingLoss:
    def test_perfect_prediction(self):
        x = torch.randn(4, 1, 4, 4)
        assert float(training_loss(x, x.clone(), torch.zeros(4))) == 0.0

    def test_constant_offset(self):
        x = torch.zeros(3, 2, 2, dtype=torch.float64)
        assert float(training_loss(x, x - 2, torch.zeros(3), 5.0)) == pytest.approx(4.0)

    def test_weighting_applies_per_sample(self):
        x = torch.zeros(2, 4, dtype=torch.float64)
        lam = torch.tensor([0.0, math.log(10)], dtype=torch.float64)
        assert float(training_loss(x, x + 1, lam, 5.0)) == pytest.approx((1.0 + 0.5) / 2)
