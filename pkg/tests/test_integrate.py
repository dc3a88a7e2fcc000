import math

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings, strategies as st

from gridsplit.integrate import (IntegratorKind, LinearPropagator, NonFiniteDerivative,
                                 StepSchedule, modified_euler_step, rkf45_step, step,
                                 step_size_at)


def decay(t, x):
    return -x


def global_error(stepper, h, T=1.0):
    x, t = np.array([1.0]), 0.0
    for _ in range(round(T / h)):
        x = stepper(decay, x, t, h)
        t += h
    return abs(x[0] - math.exp(-T))


class TestSteps:
    def test_modified_euler_value(self):
        assert modified_euler_step(decay, 1.0, 0.0, 0.1) == pytest.approx(0.905, abs=1e-15)

    def test_rkf45_value(self):
        x, err = rkf45_step(decay, 1.0, 0.0, 0.1)
        assert x == pytest.approx(0.9048374, abs=1e-7)
        assert abs(x - math.exp(-0.1)) < 1e-8
        assert 0 < abs(err) < 1e-6

    def test_modified_euler_order(self):
        ratio = global_error(modified_euler_step, 0.02) / global_error(modified_euler_step, 0.01)
        assert ratio == pytest.approx(4.0, abs=0.3)

    def test_rkf45_order(self):
        f = lambda g, x, t, h: rkf45_step(g, x, t, h)[0]
        ratio = global_error(f, 0.1) / global_error(f, 0.05)
        assert ratio == pytest.approx(32, abs=4)

    def test_time_dependent_field(self):
        # dx/dt = 2t integrates exactly under both schemes
        f = lambda t, x: np.array([2 * t])
        assert modified_euler_step(f, np.zeros(1), 0.3, 0.2)[0] == pytest.approx(0.25 - 0.09)
        assert rkf45_step(f, np.zeros(1), 0.3, 0.2)[0][0] == pytest.approx(0.25 - 0.09)

    def test_non_finite(self):
        with pytest.raises(NonFiniteDerivative):
            modified_euler_step(lambda t, x: np.array([np.nan]), np.ones(1), 0.0, 0.1)
        with pytest.raises(NonFiniteDerivative):
            rkf45_step(lambda t, x: np.array([np.inf]), np.ones(1), 0.0, 0.1)

    @pytest.mark.parametrize("h", [0.0, -0.1])
    def test_bad_step(self, h):
        with pytest.raises(ValueError):
            modified_euler_step(decay, 1.0, 0.0, h)
        with pytest.raises(ValueError):
            rkf45_step(decay, 1.0, 0.0, h)

    def test_dispatch(self):
        x, err = step(IntegratorKind.MODIFIED_EULER, decay, 1.0, 0.0, 0.1)
        assert x == modified_euler_step(decay, 1.0, 0.0, 0.1) and err is None
        assert step(IntegratorKind.RKF45, decay, 1.0, 0.0, 0.1)[0] == rkf45_step(decay, 1.0, 0.0, 0.1)[0]


class TestSchedule:
    def test_windows(self):
        s = StepSchedule(0.01, 0.05, 0.5)
        assert step_size_at(s, 1.3, 1.2) == 0.01
        assert step_size_at(s, 1.7, 1.2) == 0.05
        assert step_size_at(s, 1.75, 1.25) == 0.05

    def test_lands_on_event(self):
        s = StepSchedule(0.01, 0.05, 0.5)
        assert step_size_at(s, 1.18, -10, next_event=1.2) == pytest.approx(0.02)

    @pytest.mark.parametrize("args", [(0.0, 0.05, 0.5), (0.1, 0.05, 0.5), (0.01, 0.05, -1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            StepSchedule(*args)

    def test_negative_time(self):
        with pytest.raises(ValueError):
            step_size_at(StepSchedule(), -1.0, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 10), st.floats(-10, 10), st.floats(0, 20))
    def test_never_overshoots(self, t, last, event):
        s = StepSchedule(0.01, 0.05, 0.5)
        h = step_size_at(s, t, last, next_event=max(event, t + 1e-6))
        assert 0 < h <= 0.05


class TestLinearPropagator:
    A = np.array([[-2.0, 30.0], [-30.0, -1.0]])
    B = np.array([[1.0], [0.5]])

    @pytest.mark.parametrize("kind", list(IntegratorKind))
    def test_matches_repeated_steps(self, kind):
        prop = LinearPropagator(self.A, self.B, kind, 1e-3)
        x, u = np.array([1.0, -0.5]), np.array([0.3])
        y = x.copy()
        for _ in range(10):
            y, _ = step(kind, lambda t, z: self.A @ z + self.B @ u, y, 0.0, 1e-3)
        np.testing.assert_allclose(prop.advance(x, u, 0.01), y, rtol=1e-12, atol=1e-14)

    def test_matrix_exponential(self):
        prop = LinearPropagator(self.A, self.B, IntegratorKind.RKF45, 1e-4)
        x, u = np.array([1.0, -0.5]), np.array([0.3])
        aug = np.zeros((3, 3))
        aug[:2, :2], aug[:2, 2:] = self.A, self.B
        ref = (la.expm(aug * 0.05) @ np.concatenate([x, u]))[:2]
        np.testing.assert_allclose(prop.advance(x, u, 0.05), ref, rtol=1e-10)

    def test_substep_count(self):
        prop = LinearPropagator(self.A, self.B, IntegratorKind.MODIFIED_EULER, 1e-5)
        assert prop.substeps(0.01) == 1000
        assert prop.substeps(1e-6) == 1
