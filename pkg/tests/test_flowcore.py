import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relightlab import flowcore
from relightlab.flowcore import (
    ShapeMismatchError,
    StepError,
    euler_step,
    interpolate,
    sample,
    sample_pair_time,
    sample_stepsize,
    sample_time,
    shortcut_target,
    velocity_target,
)


def constant_model(c):
    def model(x, t, d, cond=None):
        return torch.full_like(x, c)

    return model


def linear_field(x0, x1):
    def model(x, t, d, cond=None):
        return x1 - x0

    return model


class TestInterpolate:
    def test_endpoints_exact(self):
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(3, 4, generator=g)
        x1 = torch.randn(3, 4, generator=g)
        assert torch.equal(interpolate(x0, x1, 0.0), x0)
        assert torch.equal(interpolate(x0, x1, 1.0), x1)

    def test_midpoint(self):
        x0 = torch.zeros(1, 2)
        x1 = torch.full((1, 2), 2.0)
        assert torch.equal(interpolate(x0, x1, 0.5), torch.ones(1, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            interpolate(torch.zeros(2, 3), torch.zeros(2, 4), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(t=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
    def test_interpolant_identity_property(self, t, seed):
        g = torch.Generator().manual_seed(seed)
        x0 = torch.randn(2, 3, generator=g, dtype=torch.float64)
        x1 = torch.randn(2, 3, generator=g, dtype=torch.float64)
        x_t = interpolate(x0, x1, t)
        assert torch.allclose(x_t, t * x1 + (1 - t) * x0)


class TestVelocityTarget:
    def test_zero_for_equal_endpoints(self):
        x = torch.randn(2, 2)
        assert torch.equal(velocity_target(x, x), torch.zeros_like(x))

    def test_simple_value(self):
        assert torch.equal(
            velocity_target(torch.zeros(1, 3), torch.full((1, 3), 3.0)),
            torch.full((1, 3), 3.0),
        )

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-3, 3), seed=st.integers(0, 1000))
    def test_linearity(self, a, seed):
        g = torch.Generator().manual_seed(seed)
        x0 = torch.randn(2, 2, generator=g, dtype=torch.float64)
        x1 = torch.randn(2, 2, generator=g, dtype=torch.float64)
        assert torch.allclose(velocity_target(a * x0, a * x1), a * velocity_target(x0, x1))

    def test_flow_loss_zero_at_optimum(self):
        g = torch.Generator().manual_seed(1)
        x0 = torch.randn(4, 5, generator=g)
        x1 = torch.randn(4, 5, generator=g)
        model = linear_field(x0, x1)
        t = torch.rand(4, generator=g)
        pred = model(interpolate(x0, x1, t), t, torch.zeros(4))
        loss = ((pred - velocity_target(x0, x1)) ** 2).mean()
        assert float(loss) == 0.0


class TestSampling:
    def test_sigmoid_center(self):
        g = torch.Generator().manual_seed(0)
        t = sample_time(g, 10, mu=0.0, sigma=0.0)
        assert torch.allclose(t, torch.full((10,), 0.5))

    def test_strictly_inside_unit_interval(self):
        g = torch.Generator().manual_seed(1)
        t = sample_time(g, 100_000)
        assert float(t.min()) > 0.0 and float(t.max()) < 1.0

    def test_median_matches_logit_normal(self):
        g = torch.Generator().manual_seed(2)
        t = sample_time(g, 100_000, mu=0.0, sigma=1.0)
        assert abs(float(t.median()) - 0.5) <= 0.01

    def test_stepsize_grid_k_max_1(self):
        g = torch.Generator().manual_seed(0)
        d = sample_stepsize(g, 500, k_max=1)
        assert set(d.tolist()) == {1.0, 0.5}

    def test_pair_uses_doubled_step_on_grid(self):
        d = torch.tensor([0.25])
        assert float(2 * d) == 0.5  # doubling rule keeps pairs on the grid
        g = torch.Generator().manual_seed(0)
        t = sample_pair_time(g, torch.tensor([0.25] * 100))
        assert set(t.tolist()) <= {0.0, 0.5}

    def test_stepsize_frequencies(self):
        g = torch.Generator().manual_seed(3)
        d = sample_stepsize(g, 10_000, k_max=3)
        values, counts = torch.unique(d, return_counts=True)
        assert len(values) == 4
        assert torch.all(torch.abs(counts / 10_000 - 0.25) <= 0.02)

    def test_pair_time_fits_interval(self):
        g = torch.Generator().manual_seed(4)
        d = sample_stepsize(g, 1000, k_max=4, min_k=1)
        t = sample_pair_time(g, d)
        assert torch.all(t + 2 * d <= 1.0 + 1e-9)
        assert torch.all(t >= 0.0)


class TestEulerStep:
    def test_constant_model_full_step(self):
        x0 = torch.zeros(2, 3)
        out = euler_step(constant_model(2.0), x0, 0.0, 1.0)
        assert torch.equal(out, torch.full((2, 3), 2.0))

    def test_rejects_leaving_interval(self):
        with pytest.raises(StepError):
            euler_step(constant_model(0.0), torch.zeros(1, 2), 0.75, 0.5)
        with pytest.raises(StepError):
            euler_step(constant_model(0.0), torch.zeros(1, 2), 0.0, 0.0)

    def test_linear_field_lands_on_data(self):
        g = torch.Generator().manual_seed(5)
        x0 = torch.randn(3, 4, generator=g)
        x1 = torch.randn(3, 4, generator=g)
        out = euler_step(linear_field(x0, x1), x0, 0.0, 1.0)
        assert torch.allclose(out, x1, atol=1e-6)


class TestShortcutTarget:
    def test_constant_field_is_consistent(self):
        x = torch.zeros(2, 3)
        target = shortcut_target(constant_model(1.5), x, 0.0, 0.5)
        assert torch.equal(target, torch.full((2, 3), 1.5))
        pred = constant_model(1.5)(x, 0.0, 1.0)
        assert float(((pred - target) ** 2).sum()) == 0.0

    def test_linear_field_is_consistent(self):
        g = torch.Generator().manual_seed(6)
        x0 = torch.randn(2, 3, generator=g)
        x1 = torch.randn(2, 3, generator=g)
        model = linear_field(x0, x1)
        target = shortcut_target(model, x0, 0.0, 0.5)
        pred = model(x0, 0.0, 1.0)
        assert float(((pred - target) ** 2).sum()) == 0.0

    def test_rejects_leaving_interval(self):
        with pytest.raises(StepError):
            shortcut_target(constant_model(0.0), torch.zeros(1, 2), 0.5, 0.5)

    def test_target_is_detached(self):
        weight = torch.randn(1, requires_grad=True)

        def model(x, t, d, cond=None):
            return weight * torch.ones_like(x)

        target = shortcut_target(model, torch.zeros(2, 3), 0.0, 0.25)
        assert not target.requires_grad

    def test_matches_hand_unrolled_oracle(self):
        # independent two-pass unroll of the same small random network
        torch.manual_seed(7)
        net = torch.nn.Sequential(torch.nn.Linear(6, 16), torch.nn.Tanh(), torch.nn.Linear(16, 4))
        net = net.double()

        def model(x, t, d, cond=None):
            inp = torch.cat([x, t[:, None], d[:, None]], dim=1)
            return net(inp)

        g = torch.Generator().manual_seed(8)
        x_t = torch.randn(3, 4, generator=g, dtype=torch.float64)
        t = torch.tensor([0.0, 0.25, 0.5], dtype=torch.float64)
        d = torch.tensor([0.25, 0.25, 0.125], dtype=torch.float64)
        target = shortcut_target(model, x_t, t, d)
        with torch.no_grad():
            v_a = model(x_t, t, d)
            x_next = x_t + d[:, None] * v_a
            v_b = model(x_next, t + d, d)
            oracle = 0.5 * (v_a + v_b)
        assert torch.allclose(target, oracle, rtol=1e-6, atol=0)


class TestSampler:
    def test_constant_velocity_endpoint_independent_of_steps(self):
        x0 = torch.zeros(1, 4)
        outs = [sample(constant_model(0.7), steps=n, x0=x0) for n in (1, 2, 8, 16)]
        for out in outs[1:]:
            assert torch.allclose(out, outs[0], atol=1e-6)

    def test_consistent_linear_model_one_vs_sixteen(self):
        g = torch.Generator().manual_seed(9)
        x0 = torch.randn(2, 4, generator=g)
        x1 = torch.randn(2, 4, generator=g)
        model = linear_field(x0, x1)
        a = sample(model, steps=1, x0=x0)
        b = sample(model, steps=16, x0=x0)
        assert torch.allclose(a, b, atol=1e-6)
        assert torch.allclose(a, x1, atol=1e-6)

    def test_rejects_invalid_step_counts(self):
        x0 = torch.zeros(1, 2)
        for bad in (0, 3, 5, 2**9):
            with pytest.raises(StepError):
                sample(constant_model(0.0), steps=bad, x0=x0, k_max=7)

    def test_time_quadratic_field_error_decreases_in_steps(self):
        # dx/dt = t^2 integrates to 1/3; Euler error shrinks monotonically with N
        def model(x, t, d, cond=None):
            return (t[:, None] ** 2).expand_as(x)

        x0 = torch.zeros(1, 1, dtype=torch.float64)
        exact = 1.0 / 3.0
        errors = []
        for n in (1, 2, 4, 8, 16, 32):
            out = sample(model, steps=n, x0=x0, dtype=torch.float64)
            errors.append(abs(float(out) - exact))
        assert all(a > b for a, b in zip(errors, errors[1:]))

    def test_requires_x0_or_shape(self):
        with pytest.raises(ShapeMismatchError):
            sample(constant_model(0.0), steps=2)
