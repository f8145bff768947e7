"""Core types: deterministic streams, one-sided risk, instance round-trips."""

import json

import numpy as np
import pytest

from ancreg.core import (
    ProblemInstance,
    RngStream,
    gaussian_vector,
    one_sided_risk,
    one_sided_risk_subgradient,
)
from ancreg.models import ModelKind, NoiseSpec, sample_instance

ALL_SINGLE_LINK = [ModelKind.linear(), ModelKind.square(), ModelKind.relu(), ModelKind.softplus()]
ALL_MODELS = ALL_SINGLE_LINK + [ModelKind.one_hidden_layer([1.0, 2.0], inner="softplus")]


def _instance(model, n=6, m=12, seed=0, noise=NoiseSpec.none()):
    gen = RngStream(seed).derive("x").generator()
    x = gen.standard_normal(model.x_dim(n) if model.kind == "one_hidden_layer" else n)
    x /= np.linalg.norm(x)
    return sample_instance(model, x, m, noise, RngStream(seed).derive("inst"))


class TestRngStream:
    def test_same_stream_same_draws(self):
        s = RngStream(42, 7)
        assert np.array_equal(gaussian_vector(s, 16), gaussian_vector(s, 16))

    def test_distinct_streams_differ(self):
        a = gaussian_vector(RngStream(42, 0), 16)
        b = gaussian_vector(RngStream(42, 1), 16)
        assert not np.array_equal(a, b)

    def test_derive_is_pure(self):
        s = RngStream(3)
        assert s.derive("trial", 5) == s.derive("trial", 5)
        assert s.derive("trial", 5) != s.derive("trial", 6)

    def test_moments_of_many_draws(self):
        draws = gaussian_vector(RngStream(1), 10**6)
        assert abs(draws.mean()) < 4 / 1000  # 4 sigma of the mean of 1e6 draws
        assert abs(draws.var() - 1.0) < 0.01

    def test_independence_across_streams(self):
        a = gaussian_vector(RngStream(9, 0), 10**5)
        b = gaussian_vector(RngStream(9, 1), 10**5)
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) < 0.02

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            gaussian_vector(RngStream(0), 0)


class TestOneSidedRisk:
    def test_zero_at_truth_noiseless(self):
        inst = _instance(ModelKind.square())
        assert one_sided_risk(inst.x_star, inst) == 0.0

    def test_single_square_equation(self):
        inst = ProblemInstance(ModelKind.square(), np.array([[1.0]]), np.array([4.0]))
        assert one_sided_risk(np.array([3.0]), inst) == pytest.approx(5.0)
        assert one_sided_risk(np.array([1.0]), inst) == 0.0

    def test_dimension_mismatch(self):
        inst = _instance(ModelKind.linear())
        with pytest.raises(ValueError):
            one_sided_risk(np.zeros(inst.n + 1), inst)

    @pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.describe())
    def test_nonnegative_everywhere(self, model):
        inst = _instance(model)
        gen = RngStream(5).generator()
        probes = gen.standard_normal((1000, inst.n))
        for x in probes:
            assert one_sided_risk(x, inst) >= 0.0

    @pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.describe())
    def test_convexity_probe(self, model):
        inst = _instance(model)
        gen = RngStream(6).generator()
        for _ in range(1000):
            x, z = gen.standard_normal((2, inst.n))
            theta = gen.uniform()
            mid = one_sided_risk(theta * x + (1 - theta) * z, inst)
            chord = theta * one_sided_risk(x, inst) + (1 - theta) * one_sided_risk(z, inst)
            assert mid <= chord + 1e-10


class TestSubgradient:
    def test_zero_on_strictly_feasible(self):
        inst = ProblemInstance(ModelKind.square(), np.array([[1.0], [2.0]]), np.array([4.0, 17.0]))
        g = one_sided_risk_subgradient(np.array([1.0]), inst)
        assert np.array_equal(g, np.zeros(1))

    def test_single_violated_square(self):
        inst = ProblemInstance(ModelKind.square(), np.array([[1.0]]), np.array([4.0]))
        g = one_sided_risk_subgradient(np.array([3.0]), inst)
        assert g == pytest.approx(np.array([6.0]))

    @pytest.mark.parametrize(
        "model", [ModelKind.linear(), ModelKind.square(), ModelKind.softplus()],
        ids=lambda m: m.describe(),
    )
    def test_matches_finite_differences(self, model):
        # central differences of the risk along random directions; skip probes
        # where some residual sits within 1e-6 of the kink
        inst = _instance(model, seed=3)
        gen = RngStream(7).generator()
        eps = 1e-6
        checked = 0
        while checked < 40:
            x = gen.standard_normal(inst.n)
            residuals = inst.model.values(inst.data, x) - inst.y
            if np.any(np.abs(residuals) < 1e-6):
                continue
            d = gen.standard_normal(inst.n)
            d /= np.linalg.norm(d)
            g = one_sided_risk_subgradient(x, inst)
            fd = (one_sided_risk(x + eps * d, inst) - one_sided_risk(x - eps * d, inst)) / (2 * eps)
            assert fd == pytest.approx(float(g @ d), abs=1e-5)
            checked += 1

    @pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.describe())
    def test_subgradient_inequality(self, model):
        inst = _instance(model, seed=11)
        gen = RngStream(13).generator()
        for _ in range(200):
            x, z = gen.standard_normal((2, inst.n))
            g = one_sided_risk_subgradient(x, inst)
            lhs = one_sided_risk(z, inst)
            rhs = one_sided_risk(x, inst) + float(g @ (z - x))
            assert lhs >= rhs - 1e-10


class TestProblemInstance:
    def test_reconstruction_identity_bitwise(self):
        inst = _instance(ModelKind.relu(), noise=NoiseSpec("uniform", 0.2), seed=21)
        rebuilt = inst.model.values(inst.data, inst.x_star) + inst.noise
        assert np.array_equal(rebuilt, inst.y)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ProblemInstance(ModelKind.linear(), np.zeros((3, 2)), np.zeros(4))

    def test_json_round_trip(self):
        inst = _instance(ModelKind.square(), noise=NoiseSpec("gaussian", 0.1), seed=2)
        doc = json.loads(json.dumps(inst.to_json_dict()))
        back = ProblemInstance.from_json_dict(doc)
        assert np.array_equal(back.data, inst.data)
        assert np.array_equal(back.y, inst.y)
        assert np.array_equal(back.x_star, inst.x_star)
        assert np.array_equal(back.noise, inst.noise)
        assert back.model == inst.model
        assert back.seed_info == inst.seed_info

    def test_json_fields_present(self):
        doc = _instance(ModelKind.linear()).to_json_dict()
        assert set(doc) == {"model", "n", "m", "seed", "data", "y", "x_star", "noise"}

    def test_one_hidden_layer_dimensions(self):
        model = ModelKind.one_hidden_layer([1.0, 1.0, 1.0], inner="relu")
        inst = _instance(model, n=4)
        assert inst.n == 12
        assert inst.data.shape[1] == 4
