import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downscale_lab import tensor as T
from downscale_lab.preprocessing import (
    ConfigurationError,
    DegenerateDataError,
    GammaTransform,
    LinearNormalizer,
    denormalize,
    denormalize_array,
    fit_normalizer,
    gamma_forward,
    gamma_forward_array,
    gamma_inverse,
    gamma_inverse_array,
    normalize,
    normalize_array,
)
from downscale_lab.tensor import Tensor

from conftest import central_difference, rel_err


def fwd(x, g):
    return gamma_forward(Tensor(np.atleast_1d(np.asarray(x, dtype=float))), GammaTransform.fixed(g)).data


class TestGammaForward:
    def test_zero(self):
        assert fwd(0.0, 2.2)[0] == 0.0

    def test_square_root(self):
        assert fwd(16.0, 2.0)[0] == 4.0
        assert fwd(-16.0, 2.0)[0] == -4.0

    def test_high_precision_oracle(self):
        mpmath.mp.dps = 50
        exact = mpmath.power(mpmath.mpf(100), 1 / mpmath.mpf("2.2"))
        got = fwd(100.0, 2.2)[0]
        assert abs(got - float(exact)) / float(exact) < 1e-12

    def test_none_mode_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        assert np.array_equal(gamma_forward(Tensor(x), GammaTransform("none")).data, x)
        assert np.array_equal(gamma_inverse(Tensor(x), GammaTransform("none")).data, x)

    def test_channel_selection(self, rng):
        x = rng.uniform(1, 10, (2, 3, 4, 4))
        out = gamma_forward(Tensor(x), GammaTransform.fixed(2.0, applies_to=(0, 2))).data
        assert np.allclose(out[:, 0], np.sqrt(x[:, 0]))
        assert np.array_equal(out[:, 1], x[:, 1])
        assert np.allclose(out[:, 2], np.sqrt(x[:, 2]))

    def test_gamma_one_exact(self, rng):
        x = rng.standard_normal(500) * 1e3
        assert np.array_equal(gamma_forward_array(x, 1.0), x)

    @given(st.floats(0.1, 10.0), st.floats(-1e6, 1e6, allow_subnormal=False))
    @settings(max_examples=200, deadline=None)
    def test_odd_and_monotone(self, g, x):
        a = gamma_forward_array(np.array([x]), g)[0]
        assert gamma_forward_array(np.array([-x]), g)[0] == -a
        b = gamma_forward_array(np.array([x + 1.0]), g)[0]
        assert b > a or (abs(x) > 1e5 and b >= a)


class TestGammaInverse:
    def test_square(self):
        assert gamma_inverse(Tensor([4.0]), GammaTransform.fixed(2.0)).data[0] == 16.0

    def test_round_trip_sweep(self, rng):
        x = rng.uniform(-50, 50, 1000)
        t = GammaTransform.fixed(2.2)
        back = gamma_inverse(gamma_forward(Tensor(x), t), t).data
        assert np.max(np.abs(back - x) / np.abs(x)) < 1e-9

    def test_round_trip_decades(self, rng):
        mags = 10 ** rng.uniform(-6, 6, 5000)
        x = mags * rng.choice([-1, 1], mags.size)
        for g in (0.3, 0.9, 2.2, 6.0):
            back = gamma_inverse_array(gamma_forward_array(x, g), g)
            assert np.max(np.abs(back - x) / np.abs(x)) < 1e-9


class TestCompression:
    def test_compression_inequality(self, rng):
        x = rng.uniform(1.0, 1e4, 10_000) * rng.choice([-1, 1], 10_000)
        x = x[np.abs(x) > 1]
        g = rng.uniform(1.01, 5, x.size)
        f = np.array([gamma_forward_array(np.array([v]), gg)[0] for v, gg in zip(x[:2000], g[:2000])])
        assert np.all(np.abs(f) < np.abs(x[:2000]))
        assert np.all(np.abs(gamma_forward_array(x, 2.2)) < np.abs(x))
        small = rng.uniform(1e-4, 0.999, 10_000)
        assert np.all(gamma_forward_array(small, 2.2) > small)
        assert np.all(np.abs(gamma_forward_array(x, 0.5)) > np.abs(x))


class TestLearnable:
    def test_positive_and_identity_start(self):
        t = GammaTransform.learnable()
        assert t.gamma == 1.0 and t.parameters()[0].requires_grad
        t.parameters()[0].data[...] = -40.0
        assert t.gamma > 0

    def test_fixed_has_no_parameters(self):
        assert GammaTransform.fixed(2.2).parameters() == []
        with pytest.raises(ConfigurationError):
            GammaTransform.fixed(-1.0)
        with pytest.raises(ConfigurationError):
            GammaTransform("sometimes")

    def test_dgamma_matches_finite_difference(self, rng):
        """df/dgamma away from zero, by chain rule through theta = log gamma."""
        x = rng.uniform(0.1, 20, 30) * rng.choice([-1, 1], 30)
        t = GammaTransform.learnable(2.2)
        theta = t.parameters()[0]
        for i in range(len(x)):
            theta.grad = None
            xi = Tensor(x[i : i + 1])
            T.tsum(gamma_forward(xi, t)).backward()
            ana = float(theta.grad) / t.gamma  # d/dgamma = d/dtheta / gamma
            g0 = t.gamma
            h = 1e-6
            num = (gamma_forward_array(x[i : i + 1], g0 + h)[0] - gamma_forward_array(x[i : i + 1], g0 - h)[0]) / (2 * h)
            assert rel_err(ana, num) < 1e-5

    def test_theta_gradient_small_model(self, rng):
        t = GammaTransform.learnable(1.3)
        theta = t.parameters()[0]
        w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)), requires_grad=True)
        x = Tensor(rng.uniform(0.1, 5, (2, 2, 4, 4)))
        y = Tensor(rng.standard_normal((2, 2, 4, 4)))

        def loss():
            h = T.conv2d(gamma_forward(x, t), w, Tensor(np.zeros(2)), 1, 1)
            return T.mean(T.square(T.sub(h, y)))

        theta.grad = None
        loss().backward()
        num = central_difference(lambda: loss().item(), theta, 0)
        assert rel_err(float(theta.grad), num) < 1e-4

    def test_to_config(self):
        assert float(GammaTransform.fixed(2.2).to_config()["gamma"]) == 2.2
        assert GammaTransform("none").to_config()["mode"] == "none"


class TestNormalizer:
    def test_mean_maps_to_zero(self):
        n = LinearNormalizer(np.array([3.0]), np.array([2.0]))
        assert normalize(Tensor(np.full((1, 1, 2, 2), 3.0)), n).data.max() == 0.0

    def test_standard_normal_sample(self, rng):
        x = rng.standard_normal((1, 1, 40, 40))
        n = fit_normalizer([x])
        z = normalize_array(x, n)
        assert abs(z.mean()) < 0.1 and abs(z.std() - 1) < 0.1

    def test_round_trip(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)) * 5 + 2
        n = LinearNormalizer(np.array([1.0, -2.0, 0.5]), np.array([0.3, 2.0, 7.0]))
        assert np.allclose(denormalize(normalize(Tensor(x), n), n).data, x, rtol=1e-14, atol=1e-14)
        assert np.allclose(denormalize_array(normalize_array(x, n), n), x, rtol=1e-14, atol=1e-14)

    def test_nonpositive_std(self):
        with pytest.raises(ConfigurationError):
            LinearNormalizer(np.array([0.0]), np.array([0.0]))

    def test_outlier_two_pass(self):
        x = np.full((1, 1, 10, 10), 2.0)
        x[0, 0, 3, 4] = 500.0
        n = fit_normalizer([x])
        v = x.ravel()
        mu = math.fsum(v) / v.size
        sd = math.sqrt(math.fsum((v - mu) ** 2) / v.size)
        assert np.isclose(n.mean[0], mu, rtol=1e-14) and np.isclose(n.std[0], sd, rtol=1e-12)

    def test_zeros_and_ones(self):
        x = np.array([0.0, 1.0] * 8).reshape(1, 1, 4, 4)
        assert fit_normalizer([x]).mean[0] == 0.5

    def test_permutation_invariant(self, rng):
        fields = [rng.standard_normal((1, 2, 4, 4)) * (i + 1) for i in range(7)]
        a = fit_normalizer(fields)
        b = fit_normalizer([fields[i] for i in rng.permutation(7)])
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)

    def test_zero_variance(self):
        with pytest.raises(DegenerateDataError):
            fit_normalizer([np.ones((1, 1, 3, 3))])
