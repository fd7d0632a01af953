import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nirfuse import diffcore as dc
from nirfuse.config import TrainConfig
from nirfuse.fields import FieldModel, ModelSpec
from nirfuse.optim import (NS_COEFFS, AdamState, DecoupledOptimizer, MuonState, adam_step, muon_step,
                           newton_schulz_orthogonalize, route_parameters)


def scalar_ns(sigma, steps=5, coeffs=NS_COEFFS):
    """The NS polynomial acts on each singular value independently."""
    a, b, c = coeffs
    for _ in range(steps):
        sigma = a * sigma + b * sigma ** 3 + c * sigma ** 5
    return sigma


def svd_oracle(m, steps=5):
    """U diag(p(s / ||m||_F)) V^T using the scalar recurrence."""
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.array([scalar_ns(v, steps) for v in s / np.linalg.norm(m)])
    return (u * s) @ vt


def rotation(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


class TestNewtonSchulz:
    def test_rotation_is_scaled_by_scalar_orbit(self):
        r = rotation(30)
        out = newton_schulz_orthogonalize(r)
        gain = scalar_ns(1 / math.sqrt(2))
        assert gain == pytest.approx(1.1081111156829324, rel=1e-12)
        np.testing.assert_allclose(out, gain / (1 / math.sqrt(2)) * r / math.sqrt(2), atol=1e-12)
        # the orthogonal input is not a fixed point: sqrt(2) pre-scaling lands on the NS cycle
        assert 0.05 < np.abs(out - r).max() < 0.1

    def test_scaled_identity(self):
        out = newton_schulz_orthogonalize(np.diag([5.0, 5.0]))
        sv = np.linalg.svd(out, compute_uv=False)
        np.testing.assert_allclose(sv, scalar_ns(1 / math.sqrt(2)), rtol=1e-12)
        assert np.all((sv >= 0.7) & (sv <= 1.3))

    def test_zero(self):
        np.testing.assert_array_equal(newton_schulz_orthogonalize(np.zeros((3, 4))), np.zeros((3, 4)))

    @pytest.mark.parametrize("shape", [(8, 8), (16, 5), (5, 16), (64, 32)])
    def test_matches_svd_oracle(self, shape):
        m = np.random.default_rng(0).standard_normal(shape)
        np.testing.assert_allclose(newton_schulz_orthogonalize(m), svd_oracle(m), atol=1e-10)

    def test_preserves_singular_vectors(self):
        m = np.random.default_rng(1).standard_normal((12, 7))
        out = newton_schulz_orthogonalize(m)
        u, _, vt = np.linalg.svd(m, full_matrices=False)
        inner = u.T @ out @ vt.T
        np.testing.assert_allclose(inner, np.diag(np.diag(inner)), atol=1e-10)

    def test_rejects_vectors(self):
        with pytest.raises(ValueError):
            newton_schulz_orthogonalize(np.ones(4))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1), c=st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((int(rng.integers(2, 40)), int(rng.integers(2, 40))))
        diff = np.abs(newton_schulz_orthogonalize(c * m) - newton_schulz_orthogonalize(m)).max()
        assert diff < 1e-6


class TestMuon:
    def test_orthogonal_grad_step(self):
        q = rotation(30)
        state = MuonState(lr=1e-3, momentum=0.0)
        param = np.zeros((2, 2))
        new = muon_step(param, q, state, key="w")
        np.testing.assert_allclose(new, -1e-3 * svd_oracle(q), atol=1e-15)

    def test_tall_matrix_scale(self):
        g = np.random.default_rng(2).standard_normal((32, 8))
        state = MuonState(lr=1e-3, momentum=0.0)
        new = muon_step(np.zeros_like(g), g, state, key="w")
        np.testing.assert_allclose(new, -1e-3 * 2.0 * svd_oracle(g), atol=1e-14)

    def test_zero_grad_keeps_param(self):
        p = np.random.default_rng(3).standard_normal((4, 6))
        np.testing.assert_array_equal(muon_step(p, np.zeros_like(p), MuonState(), key="w"), p)

    def test_momentum_keeps_direction(self):
        g = np.random.default_rng(4).standard_normal((16, 8))
        state = MuonState(lr=1e-3, momentum=0.95)
        p0 = np.zeros_like(g)
        p1 = muon_step(p0, g, state, key="w")
        np.testing.assert_allclose(state.buffers["w"], g)
        p2 = muon_step(p1, g, state, key="w")
        np.testing.assert_allclose(state.buffers["w"], 1.95 * g)
        d1, d2 = (p1 - p0).ravel(), (p2 - p1).ravel()
        assert d1 @ d2 / (np.linalg.norm(d1) * np.linalg.norm(d2)) > 0.999

    def test_nesterov_direction(self):
        g = np.random.default_rng(5).standard_normal((6, 6))
        state = MuonState(lr=1.0, momentum=0.5, nesterov=True)
        new = muon_step(np.zeros_like(g), g, state, key="w")
        np.testing.assert_allclose(new, -newton_schulz_orthogonalize(1.5 * g), atol=1e-12)

    def test_non_matrix_rejected(self):
        with pytest.raises(ValueError, match="Muon"):
            muon_step(np.zeros(3), np.zeros(3), MuonState())

    def test_keeps_float32(self):
        g = np.ones((4, 4), np.float32)
        assert muon_step(np.zeros((4, 4), np.float32), g, MuonState(), key="w").dtype == np.float32


class TestAdam:
    def test_first_step_is_signed_lr(self):
        g = np.array([0.5, -3.0, 1e-3])
        new = adam_step(np.zeros(3), g, AdamState(lr=1e-2), key="p")
        np.testing.assert_allclose(new, -1e-2 * np.sign(g), rtol=1e-4)

    def test_zero_grad(self):
        state = AdamState(lr=1e-2)
        p = np.array([1.0, -2.0])
        for _ in range(20):
            p2 = adam_step(p, np.zeros(2), state, key="p")
            np.testing.assert_array_equal(p2, p)

    def test_quadratic_bowl(self):
        state = AdamState(lr=1e-2)
        x = np.array([1.0])
        for _ in range(500):
            x = adam_step(x, 2 * x, state, key="x")
        assert abs(x[0]) < 1e-3

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1))
    def test_step_bound(self, seed):
        # bias correction lets a step overshoot lr slightly (worst seen ~0.11%); 1% slack
        rng = np.random.default_rng(seed)
        state = AdamState(lr=1e-2)
        p = rng.standard_normal(10)
        for _ in range(40):
            g = rng.standard_normal(10) * 10.0 ** rng.uniform(-6, 4, 10)
            new = adam_step(p, g, state, key="p")
            assert np.all(np.abs(new - p) <= 1e-2 * 1.01)
            p = new

    def test_first_steps_bounded_by_lr(self):
        # with a constant gradient m_hat / sqrt(v_hat) == sign(g) exactly
        state = AdamState(lr=1e-2)
        p = np.zeros(4)
        g = np.array([1e-3, -5.0, 2.0, 7e2])
        for _ in range(10):
            new = adam_step(p, g, state, key="p")
            assert np.all(np.abs(new - p) <= 1e-2 * (1 + 1e-8))
            p = new


def tiny_model():
    return FieldModel(ModelSpec(height=32, width=32, grid_levels=2, grid_features=2, hidden=16), seed=0)


class TestRouting:
    def test_default_model(self):
        model = FieldModel(ModelSpec.from_config(TrainConfig(), 64, 64), seed=0)
        r = route_parameters(model)
        assert len(r.muon) == 6
        assert "beta" in r.adam_scalar
        assert all(k.startswith("log_var.") or k.endswith(".bias") or k == "beta" for k in r.adam_scalar)
        assert len(r.adam_grid) == 8

    def test_partition(self):
        model = tiny_model()
        r = route_parameters(model)
        sets = [set(r.muon), set(r.adam_grid), set(r.adam_scalar)]
        assert set.union(*sets) == set(model.named_parameters())
        assert sum(len(s) for s in sets) == len(model.named_parameters())

    def test_unknown_parameter(self):
        class Fake:
            def named_parameters(self):
                return {"mystery": dc.tensor(np.zeros(2), requires_grad=True)}
        with pytest.raises(ValueError, match="mystery"):
            route_parameters(Fake())


class TestDecoupledOptimizer:
    def test_frozen_parameters_do_not_move(self):
        model = tiny_model()
        opt = DecoupledOptimizer(model, TrainConfig(), frozen={"beta"})
        for p in model.parameters():
            p.grad = np.ones_like(p.value)
        before = model.state_dict()
        opt.step()
        after = model.state_dict()
        np.testing.assert_array_equal(before["beta"], after["beta"])
        moved = [k for k in before if not np.array_equal(before[k], after[k])]
        assert len(moved) == len(before) - 1

    def test_cosine_factor(self):
        model = tiny_model()
        opt = DecoupledOptimizer(model, TrainConfig(iterations=10, cosine_decay=True))
        assert opt._factor() == 1.0
        opt.t = 5
        assert opt._factor() == pytest.approx(0.5)
        opt.t = 10
        assert opt._factor() == pytest.approx(0.0, abs=1e-15)
