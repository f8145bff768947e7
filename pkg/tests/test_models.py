"""Observation families: oracles, closed-form constants, instance sampling."""

import math

import numpy as np
import pytest

from ancreg.core import RngStream
from ancreg.models import (
    ModelKind,
    NoClosedFormError,
    NoiseSpec,
    UnsupportedModelError,
    f_gradient,
    f_value,
    loss_hessian_at_zero_dense,
    loss_hessian_vp_at_zero,
    sample_instance,
    sigma_star_closed_form,
    sigma_star_monte_carlo,
    tau_closed_form,
)

SMOOTH = [ModelKind.linear(), ModelKind.square(), ModelKind.softplus(),
          ModelKind.softplus(base="e"), ModelKind.one_hidden_layer([0.5, 2.0], inner="softplus")]
ALL = SMOOTH + [ModelKind.relu(), ModelKind.one_hidden_layer([1.0, 1.0], inner="relu")]


class TestValues:
    def test_square_direct(self):
        assert f_value(ModelKind.square(), np.array([1.0, 0.0]), np.array([3.0, 4.0])) == 9.0

    def test_relu_clips(self):
        assert f_value(ModelKind.relu(), np.array([1.0, 1.0]), np.array([-2.0, 1.0])) == 0.0

    def test_softplus_at_zero_is_one(self):
        assert f_value(ModelKind.softplus(), np.array([2.0, -1.0]), np.zeros(2)) == pytest.approx(1.0)

    def test_softplus_natural_base(self):
        val = f_value(ModelKind.softplus(base="e"), np.array([1.0]), np.array([0.0]))
        assert val == pytest.approx(math.log(2.0))

    def test_one_hidden_layer_value(self):
        model = ModelKind.one_hidden_layer([2.0, 3.0], inner="relu")
        a = np.array([1.0, 0.0])
        x = np.array([1.0, 5.0, -1.0, 7.0])  # blocks (1,5) and (-1,7)
        assert f_value(model, a, x) == pytest.approx(2.0 * 1.0 + 3.0 * 0.0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            ModelKind.one_hidden_layer([1.0, -0.5], inner="relu")


class TestGradients:
    def test_square_direct(self):
        g = f_gradient(ModelKind.square(), np.array([1.0, 0.0]), np.array([3.0, 4.0]))
        assert g == pytest.approx(np.array([6.0, 0.0]))

    def test_relu_at_kink_uses_one(self):
        a = np.array([1.0, 2.0])
        g = f_gradient(ModelKind.relu(), a, np.zeros(2))
        assert np.array_equal(g, a)

    @pytest.mark.parametrize("model", SMOOTH, ids=lambda m: m.describe())
    def test_matches_finite_differences(self, model):
        gen = RngStream(17).generator()
        a_dim = 5
        eps = 1e-6
        for _ in range(100):
            a = gen.standard_normal(a_dim)
            x = gen.standard_normal(model.x_dim(a_dim))
            g = f_gradient(model, a, x)
            d = gen.standard_normal(x.shape[0])
            d /= np.linalg.norm(d)
            fd = (f_value(model, a, x + eps * d) - f_value(model, a, x - eps * d)) / (2 * eps)
            assert fd == pytest.approx(float(g @ d), rel=1e-6, abs=1e-6)

    @pytest.mark.parametrize("model", ALL, ids=lambda m: m.describe())
    def test_link_convexity_midpoint(self, model):
        gen = RngStream(19).generator()
        a = gen.standard_normal(4)
        for _ in range(1000):
            x, z = gen.standard_normal((2, model.x_dim(4)))
            mid = f_value(model, a, 0.5 * (x + z))
            assert mid <= 0.5 * (f_value(model, a, x) + f_value(model, a, z)) + 1e-10

    def test_single_block_reduces_to_link(self):
        gen = RngStream(23).generator()
        single = ModelKind.relu()
        wrapped = ModelKind.one_hidden_layer([1.0], inner="relu")
        for _ in range(50):
            a = gen.standard_normal(6)
            x = gen.standard_normal(6)
            assert f_value(wrapped, a, x) == f_value(single, a, x)
            assert np.array_equal(f_gradient(wrapped, a, x), f_gradient(single, a, x))


class TestHessianVectorProduct:
    def test_square_single_datum(self):
        inst = _noiseless(ModelKind.square(), np.array([1.0, 0.0]), m=0)
        # manual instance: one equation a = e1, y = 1
        from ancreg.core import ProblemInstance

        inst = ProblemInstance(ModelKind.square(), np.array([[1.0, 0.0]]), np.array([1.0]))
        out = loss_hessian_vp_at_zero(inst, np.array([1.0, 0.0]))
        assert out == pytest.approx(np.array([-2.0, 0.0]))

    def test_zero_vector_maps_to_zero(self):
        inst = _noiseless(ModelKind.square(), _unit(8, 1), m=50)
        assert np.array_equal(loss_hessian_vp_at_zero(inst, np.zeros(8)), np.zeros(8))

    def test_linear_supported_with_unit_coefficients(self):
        inst = _noiseless(ModelKind.linear(), _unit(4, 2), m=30)
        v = np.ones(4)
        expected = inst.data.T @ (inst.data @ v) / inst.m
        assert loss_hessian_vp_at_zero(inst, v) == pytest.approx(expected)

    def test_relu_rejected(self):
        inst = _noiseless(ModelKind.relu(), _unit(4, 3), m=20)
        with pytest.raises(UnsupportedModelError):
            loss_hessian_vp_at_zero(inst, np.ones(4))

    def test_linear_in_v_and_symmetric(self):
        inst = _noiseless(ModelKind.softplus(), _unit(6, 4), m=40)
        gen = RngStream(29).generator()
        for _ in range(50):
            u, v = gen.standard_normal((2, 6))
            alpha = gen.uniform(-2, 2)
            left = loss_hessian_vp_at_zero(inst, alpha * u + v)
            right = alpha * loss_hessian_vp_at_zero(inst, u) + loss_hessian_vp_at_zero(inst, v)
            assert left == pytest.approx(right, abs=1e-10)
            assert float(u @ loss_hessian_vp_at_zero(inst, v)) == pytest.approx(
                float(v @ loss_hessian_vp_at_zero(inst, u)), abs=1e-10
            )

    def test_square_expected_spectrum(self):
        # negated curvature concentrates on 4 x x' + 2 I for unit x: top
        # Rayleigh quotient near 6, bulk near 2
        x = _unit(8, 5)
        inst = _noiseless(ModelKind.square(), x, m=100_000)
        top = -float(x @ loss_hessian_vp_at_zero(inst, x))
        assert top == pytest.approx(6.0, rel=0.05)

    def test_dense_matches_matrix_free(self):
        inst = _noiseless(ModelKind.square(), _unit(5, 6), m=64)
        H = loss_hessian_at_zero_dense(inst)
        gen = RngStream(31).generator()
        v = gen.standard_normal(5)
        assert H @ v == pytest.approx(loss_hessian_vp_at_zero(inst, v), abs=1e-12)


class TestSigmaStar:
    def test_linear_identity(self):
        s = sigma_star_closed_form(ModelKind.linear(), _unit(6, 0))
        assert s.operator_norm == 1.0
        assert s.trace(6) == 6.0

    def test_square_norm_six(self):
        x = 2.0 * _unit(6, 1)  # norm 2
        s = sigma_star_closed_form(ModelKind.square(), x)
        assert s.operator_norm == pytest.approx(24.0)  # 6 ||x||^2

    def test_relu_half_identity(self):
        s = sigma_star_closed_form(ModelKind.relu(), _unit(6, 2))
        assert s.operator_norm == 0.5

    def test_softplus_signals_no_closed_form(self):
        with pytest.raises(NoClosedFormError):
            sigma_star_closed_form(ModelKind.softplus(), _unit(6, 3))

    @pytest.mark.parametrize(
        "model", [ModelKind.linear(), ModelKind.square(), ModelKind.relu()],
        ids=lambda m: m.describe(),
    )
    def test_monte_carlo_matches_closed_form(self, model):
        x = _unit(8, 7)
        closed = sigma_star_closed_form(model, x)
        mc = sigma_star_monte_carlo(model, x, 100_000, RngStream(41).derive(model.kind))
        assert mc.operator_norm == pytest.approx(closed.operator_norm, rel=0.05)

    def test_quad_form_consistency(self):
        x = _unit(5, 8)
        s = sigma_star_closed_form(ModelKind.square(), x)
        gen = RngStream(43).generator()
        h = gen.standard_normal(5)
        expected = 2.0 * float(h @ h) + 4.0 * float(x @ h) ** 2
        assert s.quad_form(h) == pytest.approx(expected)


class TestTauClosedForm:
    def test_linear_constant(self):
        val = tau_closed_form(ModelKind.linear(), _unit(4, 0), np.array([1.0, 2.0, 3.0, 4.0]))
        assert val == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=1e-12)

    def test_relu_along_truth(self):
        x = _unit(4, 1)
        assert tau_closed_form(ModelKind.relu(), x, x) == pytest.approx(
            2.0 / math.sqrt(8 * math.pi)
        )

    def test_square_along_truth_is_two(self):
        x = _unit(4, 2)
        assert tau_closed_form(ModelKind.square(), x, x) == pytest.approx(2.0)

    def test_zero_direction_rejected(self):
        with pytest.raises(ValueError):
            tau_closed_form(ModelKind.square(), _unit(4, 3), np.zeros(4))

    def test_scale_invariance_in_h(self):
        x = _unit(6, 4)
        gen = RngStream(47).generator()
        h = gen.standard_normal(6)
        base = tau_closed_form(ModelKind.square(), x, h)
        for s in (2.0, 4.0, 0.5):  # powers of two scale without rounding
            assert tau_closed_form(ModelKind.square(), x, s * h) == base
        assert tau_closed_form(ModelKind.square(), x, 1.7 * h) == pytest.approx(base, abs=1e-13)

    @pytest.mark.parametrize("r", [-0.9, -0.5, 0.0, 0.4, 0.9])
    def test_square_matches_monte_carlo(self, r):
        x = _unit(6, 5)
        gen = RngStream(53).generator()
        w = gen.standard_normal(6)
        w -= (w @ x) * x
        w /= np.linalg.norm(w)
        h = r * x + math.sqrt(1 - r * r) * w
        closed = tau_closed_form(ModelKind.square(), x, h)
        A = RngStream(59).derive(str(r)).generator().standard_normal((400_000, 6))
        mc = float(np.mean(np.maximum(2.0 * (A @ x) * (A @ h), 0.0)))
        assert closed == pytest.approx(mc, rel=0.01, abs=4e-3)


class TestSampling:
    def test_noiseless_exact(self):
        inst = _noiseless(ModelKind.relu(), _unit(5, 9), m=64)
        assert np.array_equal(inst.y, inst.model.values(inst.data, inst.x_star))

    def test_zero_truth_square_gives_zero_observations(self):
        inst = sample_instance(
            ModelKind.square(), np.zeros(4), 16, NoiseSpec.none(), RngStream(61)
        )
        assert np.array_equal(inst.y, np.zeros(16))

    def test_deterministic_per_stream(self):
        a = sample_instance(ModelKind.linear(), _unit(4, 10), 8, NoiseSpec("uniform", 0.1), RngStream(67))
        b = sample_instance(ModelKind.linear(), _unit(4, 10), 8, NoiseSpec("uniform", 0.1), RngStream(67))
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.noise, b.noise)

    def test_noise_closed_form_moments(self):
        u = NoiseSpec("uniform", 0.2)
        assert u.mean_abs == pytest.approx(0.1)
        assert u.mean_neg_part == pytest.approx(0.05)
        g = NoiseSpec("gaussian", 0.2)
        assert g.mean_abs == pytest.approx(0.2 * math.sqrt(2 / math.pi))
        assert g.mean_neg_part == pytest.approx(0.2 / math.sqrt(2 * math.pi))

    def test_noise_parse(self):
        assert NoiseSpec.parse("uniform:0.3") == NoiseSpec("uniform", 0.3)
        assert NoiseSpec.parse("none") == NoiseSpec.none()
        with pytest.raises(ValueError):
            NoiseSpec.parse("uniform")


def _unit(n: int, seed: int) -> np.ndarray:
    gen = RngStream(1000 + seed).generator()
    x = gen.standard_normal(n)
    return x / np.linalg.norm(x)


def _noiseless(model, x, m):
    m = max(m, 1)
    return sample_instance(model, x, m, NoiseSpec.none(), RngStream(2000).derive(model.kind, m))
