import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from norin.normalizers import (
    AffinePost,
    InstanceStats,
    ShapeParams,
    jsu_forward,
    jsu_inverse,
    jsu_shape_grads,
    mean_std_stats,
    revin_forward,
    revin_inverse,
    robust_loc_scale,
)
from norin.series import moments

# -0.5 + 2 * asinh(1), evaluated with mpmath at 30 digits
FORWARD_EXAMPLE = 1.26274717403908605046521864996


def _stats(loc, scale, kind="robust-median-mad"):
    return InstanceStats(np.asarray(loc, dtype=float), np.asarray(scale, dtype=float), kind)


def _shape(delta, eps):
    delta, eps = np.atleast_1d(delta).astype(float), np.atleast_1d(eps).astype(float)
    return ShapeParams(delta, eps, shared=delta.size == 1)


def _lookback(*channel):
    return np.asarray(channel, dtype=float)[None, :, None]


def _random_points(rng, n):
    delta = rng.uniform(0.8, 5.0, n)
    eps = rng.uniform(-1.0, 1.0, n)
    loc = rng.uniform(-5.0, 5.0, n)
    scale = rng.uniform(0.1, 10.0, n)
    x = loc + scale * rng.uniform(-5.0, 5.0, n)
    return x, _stats(loc, scale), ShapeParams(delta, eps, shared=False)


def _rel_err(approx, exact, floor):
    return np.abs(approx - exact) / np.maximum(np.abs(exact), floor)


class TestStats:
    def test_robust_outlier(self):
        s = robust_loc_scale(_lookback(1, 2, 3, 4, 100))
        assert s.loc[0, 0] == 3.0 and s.scale[0, 0] == 1.0 and not s.degenerate[0, 0]

    def test_robust_constant_is_floored(self):
        s = robust_loc_scale(_lookback(5, 5, 5, 5))
        assert s.loc[0, 0] == 5.0 and s.scale[0, 0] == 1.0 and s.degenerate[0, 0]

    def test_robust_even_length_midpoint(self):
        s = robust_loc_scale(_lookback(0, 10))
        assert s.loc[0, 0] == 5.0 and s.scale[0, 0] == 5.0

    def test_mean_std_population(self):
        s = mean_std_stats(_lookback(1, 2, 3))
        assert s.loc[0, 0] == 2.0
        assert s.scale[0, 0] == pytest.approx(math.sqrt(2 / 3), rel=1e-15)

    def test_mean_std_constant_is_floored(self):
        s = mean_std_stats(_lookback(7, 7))
        assert s.loc[0, 0] == 7.0 and s.scale[0, 0] == 1.0 and s.degenerate[0, 0]

    def test_mean_std_symmetric_pair(self):
        s = mean_std_stats(_lookback(-1, 1))
        assert s.loc[0, 0] == 0.0 and s.scale[0, 0] == 1.0

    def test_shapes(self):
        x = np.random.default_rng(0).normal(size=(6, 9, 3))
        for fn in (robust_loc_scale, mean_std_stats):
            s = fn(x)
            assert s.loc.shape == s.scale.shape == s.degenerate.shape == (6, 3)

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError):
            robust_loc_scale(np.zeros((3, 4)))


class TestShapeParams:
    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            ShapeParams(np.array([0.0]), np.array([0.0]))

    def test_shared_requires_equal_entries(self):
        with pytest.raises(ValueError):
            ShapeParams(np.array([1.0, 2.0]), np.array([0.0, 0.0]), shared=True)
        ShapeParams(np.array([1.0, 2.0]), np.array([0.0, 0.0]), shared=False)

    def test_json_document(self):
        s = ShapeParams(np.array([1.5, 2.0]), np.array([0.1, -0.2]), shared=False)
        doc = json.loads(s.to_json(["a", "b"]))
        assert doc == {"shared": False, "delta": [1.5, 2.0], "epsilon": [0.1, -0.2], "channels": ["a", "b"]}
        back = ShapeParams.from_json(s.to_json())
        np.testing.assert_array_equal(back.delta, s.delta)
        np.testing.assert_array_equal(back.epsilon, s.epsilon)
        assert back.shared is False

    def test_vector_round_trip(self):
        shared = ShapeParams.uniform(2.0, -0.3, 3)
        np.testing.assert_array_equal(shared.to_vector(), [2.0, -0.3])
        again = ShapeParams.from_vector(shared.to_vector(), 3, True)
        np.testing.assert_array_equal(again.delta, [2.0, 2.0, 2.0])
        per = ShapeParams(np.array([1.0, 2.0]), np.array([0.5, -0.5]), shared=False)
        np.testing.assert_array_equal(per.to_vector(), [1.0, 2.0, 0.5, -0.5])


class TestJsuMaps:
    def test_forward_origin(self):
        assert jsu_forward(0.0, _stats(0, 1), _shape(1, 0)) == 0.0

    def test_forward_sinh_one(self):
        z = jsu_forward(math.sinh(1.0), _stats(0, 1), _shape(1, 0))
        assert float(np.squeeze(z)) == pytest.approx(1.0, rel=1e-15)

    def test_forward_hand_example(self):
        z = jsu_forward(3.0, _stats(1, 2), _shape(2, -0.5))
        assert float(np.squeeze(z)) == pytest.approx(FORWARD_EXAMPLE, rel=1e-15)
        assert FORWARD_EXAMPLE == pytest.approx(-0.5 + 2 * math.log(1 + math.sqrt(2)), rel=1e-15)

    def test_inverse_origin(self):
        assert jsu_inverse(0.0, _stats(0, 1), _shape(1, 0)) == 0.0

    def test_inverse_hand_example(self):
        x = jsu_inverse(FORWARD_EXAMPLE, _stats(1, 2), _shape(2, -0.5))
        assert float(np.squeeze(x)) == pytest.approx(3.0, rel=1e-15)

    def test_inverse_huge_delta_is_affine(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(-1.0, 1.0, 1000)
        loc, scale, eps, delta = 0.7, 3.0, 0.2, 1e9
        x = jsu_inverse(z, _stats(loc, scale), _shape(delta, eps))
        np.testing.assert_allclose(x, loc + scale * (z - eps) / delta, rtol=1e-12)
        with_zero_loc = jsu_inverse(z, _stats(0.0, scale), _shape(delta, eps))
        np.testing.assert_allclose(with_zero_loc, scale * (z - eps) / delta, rtol=1e-12)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            jsu_forward(1.0, _stats(0, 0), _shape(1, 0))
        with pytest.raises(ValueError):
            jsu_inverse(1.0, _stats(0, -1), _shape(1, 0))

    def test_round_trip_random(self):
        rng = np.random.default_rng(1)
        n = 10_000
        delta = rng.uniform(0.8, 5.0, n)
        eps = rng.uniform(-1.0, 1.0, n)
        scale = 10.0 ** rng.uniform(-3.0, 3.0, n)
        loc = rng.uniform(-100.0, 100.0, n)
        x = loc + scale * rng.uniform(-1e3, 1e3, n)
        stats, shape = _stats(loc, scale), ShapeParams(delta, eps, shared=False)
        back = jsu_inverse(jsu_forward(x, stats, shape), stats, shape)
        denom = np.maximum.reduce([np.abs(x), np.abs(loc), scale])
        assert np.max(np.abs(back - x) / denom) <= 1e-9

    @given(
        st.floats(-1e4, 1e4),
        st.floats(0.8, 5.0),
        st.floats(-1.0, 1.0),
        st.floats(-1e3, 1e3),
        st.floats(1e-3, 1e3),
    )
    @settings(max_examples=300, deadline=None)
    def test_round_trip_property(self, x, delta, eps, loc, scale):
        stats, shape = _stats(loc, scale), _shape(delta, eps)
        back = float(np.squeeze(jsu_inverse(jsu_forward(x, stats, shape), stats, shape)))
        assert abs(back - x) <= 1e-9 * max(abs(x), abs(loc), scale)

    @given(
        st.floats(-1e3, 1e3),
        st.floats(1e-6, 1e3),
        st.floats(0.1, 10.0),
        st.floats(-3.0, 3.0),
        st.floats(-10.0, 10.0),
        st.floats(1e-2, 1e2),
    )
    @settings(max_examples=300, deadline=None)
    def test_monotone(self, x, gap, delta, eps, loc, scale):
        stats, shape = _stats(loc, scale), _shape(delta, eps)
        x2 = x + gap
        z1, z2 = jsu_forward(np.array([x, x2]), stats, shape)
        assert z1 < z2

    def test_monotone_dense_grid(self):
        x = np.linspace(-1e3, 1e3, 200_001)
        z = jsu_forward(x, _stats(0.3, 0.5), _shape(0.8, -1.0))
        assert np.all(np.diff(z) > 0)

    @pytest.mark.parametrize("u_max", [1e-3, 1e-4, 1e-5])
    def test_near_linear_deviation_is_cubic(self, u_max):
        # arcsinh(u) - u = -u^3/6 + O(u^5): deviation / affine term is bounded by u_max^2 / 6
        rng = np.random.default_rng(2)
        delta, eps, loc = 2.5, 0.3, 4.0
        raw = rng.uniform(-1.0, 1.0, 1000)
        scale = np.max(np.abs(raw)) / u_max
        x = loc + raw
        z = jsu_forward(x, _stats(loc, scale), _shape(delta, eps))
        affine = delta * (x - loc) / scale
        ratio = np.max(np.abs(z - (eps + affine))) / np.max(np.abs(affine))
        rounding = 4 * np.finfo(float).eps * np.max(np.abs(z)) / np.max(np.abs(affine))
        assert ratio <= (u_max**2 / 6) * (1 + 1e-3) + rounding

    def test_near_linear_meets_1e8_once_u_small_enough(self):
        u_max = math.sqrt(6e-8) * 0.99
        delta, eps, loc = 2.5, 0.3, 4.0
        x = loc + np.linspace(-1.0, 1.0, 1001)
        scale = 1.0 / u_max
        z = jsu_forward(x, _stats(loc, scale), _shape(delta, eps))
        affine = delta * (x - loc) / scale
        assert np.max(np.abs(z - (eps + affine))) <= 1e-8 * np.max(np.abs(affine))

    def test_reshapes_matched_sample_to_normal(self):
        rng = np.random.default_rng(3)
        d0, e0, l0, s0 = 1.3, -0.4, 2.0, 0.5
        x = l0 + s0 * np.sinh((rng.standard_normal(100_000) - e0) / d0)
        assert moments(x).kurtosis > 5.0
        z = jsu_forward(x, _stats(l0, s0), _shape(d0, e0))
        m = moments(z)
        assert abs(m.skewness) <= 0.05 and abs(m.kurtosis - 3.0) <= 0.1

    def test_window_broadcasting(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 7, 3))
        stats = robust_loc_scale(x)
        shape = ShapeParams(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.5, -0.5]), shared=False)
        z = jsu_forward(x, stats, shape)
        for i in range(5):
            for c in range(3):
                u = (x[i, :, c] - stats.loc[i, c]) / stats.scale[i, c]
                np.testing.assert_allclose(z[i, :, c], shape.epsilon[c] + shape.delta[c] * np.arcsinh(u), rtol=1e-14)


class TestRevin:
    def test_unit_stats_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 3))
        s = _stats(np.zeros((2, 3)), np.ones((2, 3)), "mean-std")
        np.testing.assert_array_equal(revin_forward(x, s), x)
        np.testing.assert_array_equal(revin_inverse(x, s), x)

    def test_hand_window(self):
        x = _lookback(1, 2, 3)
        z = revin_forward(x, mean_std_stats(x), AffinePost.identity(1))
        np.testing.assert_allclose(z[0, :, 0], [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], rtol=1e-15)

    def test_disabled_post_ignores_gamma_beta(self):
        x = np.random.default_rng(1).normal(size=(3, 6, 2))
        s = mean_std_stats(x)
        post = AffinePost(np.array([3.0, 0.0]), np.array([1.0, 2.0]), enabled=False)
        np.testing.assert_array_equal(revin_forward(x, s, post), revin_forward(x, s, None))

    def test_zero_gamma_rejected_when_enabled(self):
        x = _lookback(1, 2, 3)
        with pytest.raises(ValueError):
            revin_forward(x, mean_std_stats(x), AffinePost(np.array([0.0]), np.array([0.0]), enabled=True))

    @pytest.mark.parametrize("enabled", [False, True])
    def test_round_trip(self, enabled):
        rng = np.random.default_rng(5)
        x = rng.normal(scale=50.0, size=(20, 16, 3)) + 10.0
        s = mean_std_stats(x)
        post = AffinePost(rng.uniform(0.5, 2.0, 3), rng.normal(size=3), enabled)
        back = revin_inverse(revin_forward(x, s, post), s, post)
        np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12 * np.abs(x).max())

    def test_moments_unchanged(self):
        rng = np.random.default_rng(6)
        x = rng.standard_t(3, size=(50, 64, 1)) * 7.0 + 3.0
        z = revin_forward(x, mean_std_stats(x))
        for i in range(50):
            a, b = moments(x[i, :, 0]), moments(z[i, :, 0])
            assert b.skewness == pytest.approx(a.skewness, abs=1e-10)
            assert b.kurtosis == pytest.approx(a.kurtosis, rel=1e-10)


class TestShapeGrads:
    def test_forward_at_origin(self):
        g = jsu_shape_grads(1.5, _stats(1.5, 2.0), _shape(3.0, 0.2), "forward")
        assert g["delta"] == 0.0 and g["epsilon"] == 1.0 and g["input"] == pytest.approx(1.5, rel=1e-15)

    def test_inverse_at_epsilon(self):
        g = jsu_shape_grads(0.2, _stats(1.5, 2.0), _shape(3.0, 0.2), "inverse")
        assert g["delta"] == 0.0
        assert g["epsilon"] == pytest.approx(-2.0 / 3.0, rel=1e-15)
        assert g["input"] == pytest.approx(2.0 / 3.0, rel=1e-15)

    def test_bad_direction(self):
        with pytest.raises(ValueError):
            jsu_shape_grads(0.0, _stats(0, 1), _shape(1, 0), "sideways")

    @pytest.mark.parametrize("direction", ["forward", "inverse"])
    def test_finite_differences(self, direction):
        rng = np.random.default_rng(7)
        x, stats, shape = _random_points(rng, 1000)
        fn = jsu_forward if direction == "forward" else jsu_inverse
        if direction == "inverse":
            x = jsu_forward(x, stats, shape)
        g = jsu_shape_grads(x, stats, shape, direction)
        h = 1e-5

        def fd(f_plus, f_minus, step):
            return (f_plus - f_minus) / (2 * step)

        d, e = shape.delta, shape.epsilon
        num = {
            "delta": fd(
                fn(x, stats, ShapeParams(d + h, e, shared=False)),
                fn(x, stats, ShapeParams(d - h, e, shared=False)),
                h,
            ),
            "epsilon": fd(
                fn(x, stats, ShapeParams(d, e + h, shared=False)),
                fn(x, stats, ShapeParams(d, e - h, shared=False)),
                h,
            ),
            "input": fd(fn(x + h, stats, shape), fn(x - h, stats, shape), h),
        }
        for key in ("delta", "epsilon", "input"):
            err = _rel_err(g[key], num[key], 1e-3)
            assert err.max() <= 1e-5, key
