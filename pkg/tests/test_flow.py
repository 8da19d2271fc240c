"""Straight-path algebra, schedules, sampling and guidance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import flow
from flowlab.flow import Schedule, euler_step, interpolate, sample, \
    score_from_velocity, velocity_target, velocity_to_x0
from flowlab.models import NetConfig, VelocityNet
from flowlab.rng import Rng
from flowlab.teacher import analytic_score_gaussian, analytic_velocity_gaussian


def test_interpolate_endpoints_and_midpoint():
    x0 = np.array([[1.0, 0.0]])
    eps = np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(interpolate(x0, eps, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, eps, 1.0), eps)
    np.testing.assert_allclose(
        interpolate(np.array([[2.0, 2.0]]), np.zeros((1, 2)), 0.25),
        [[1.5, 1.5]])


def test_interpolate_rejects_bad_t():
    with pytest.raises(ValueError):
        interpolate(np.zeros((1, 2)), np.zeros((1, 2)), 1.5)


def test_velocity_target_values():
    x0 = np.array([[1.0, 0.0]])
    eps = np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(velocity_target(x0, eps), [[-1.0, 1.0]])
    np.testing.assert_array_equal(
        velocity_target(np.zeros((1, 2)), np.zeros((1, 2))), [[0.0, 0.0]])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-0.2, 0.2), st.integers(0, 100))
def test_path_linearity(t, delta, seed):
    if not 0.0 <= t + delta <= 1.0:
        return
    rng = Rng(seed)
    x0, eps = rng.normal((3, 2)), rng.normal((3, 2))
    lhs = interpolate(x0, eps, t + delta) - interpolate(x0, eps, t)
    np.testing.assert_allclose(lhs, delta * velocity_target(x0, eps),
                               atol=1e-12)


def test_velocity_to_x0_roundtrip():
    x0 = np.array([[1.0, 0.0]])
    eps = np.array([[0.0, 1.0]])
    x_t = interpolate(x0, eps, 0.5)
    np.testing.assert_allclose(
        velocity_to_x0(x_t, velocity_target(x0, eps), 0.5), x0, atol=1e-15)
    np.testing.assert_array_equal(
        velocity_to_x0(x_t, velocity_target(x0, eps), 0.0), x_t)

    rng = Rng(9)
    worst = 0.0
    for _ in range(1000):
        x0 = rng.normal((1, 2))
        eps = rng.normal((1, 2))
        t = float(rng.uniform(0.0, 1.0))
        rec = velocity_to_x0(interpolate(x0, eps, t),
                             velocity_target(x0, eps), t)
        worst = max(worst, float(np.abs(rec - x0).max()))
    assert worst < 1e-12


def test_score_on_exact_conditional_path():
    x0 = np.array([[1.0, 0.0]])
    eps = np.array([[0.0, 1.0]])
    t = 0.5
    x_t = interpolate(x0, eps, t)
    v = velocity_target(x0, eps)
    s = score_from_velocity(x_t, v, t, t_min=0.01)
    np.testing.assert_allclose(s, -eps / t, atol=1e-14)


def test_score_guard():
    with pytest.raises(ValueError):
        score_from_velocity(np.zeros((1, 2)), np.zeros((1, 2)), 0.05, t_min=0.1)


def test_score_matches_gaussian_marginal():
    # standard-normal data in 1D: the analytic marginal velocity converts
    # to the analytic marginal score -x / ((1-t)^2 + t^2)
    grid = np.linspace(-3, 3, 41).reshape(-1, 1)
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        v = analytic_velocity_gaussian(0.0, 1.0, grid, t)
        s = score_from_velocity(grid, v, t, t_min=0.01)
        expected = -grid / ((1 - t) ** 2 + t ** 2)
        np.testing.assert_allclose(s, expected, atol=1e-10)
        np.testing.assert_allclose(
            s, analytic_score_gaussian(0.0, 1.0, grid, t), atol=1e-10)


def test_conversion_triangle():
    rng = Rng(4)
    for _ in range(200):
        x_t = rng.normal((1, 2))
        v = rng.normal((1, 2))
        t = float(rng.uniform(0.05, 1.0))
        s = score_from_velocity(x_t, v, t, t_min=0.01)
        x0_hat = velocity_to_x0(x_t, v, t)
        np.testing.assert_allclose(s, -(x_t - (1 - t) * x0_hat) / t ** 2,
                                   atol=1e-10)


def test_euler_step_values():
    x = np.array([[1.0, 1.0]])
    np.testing.assert_array_equal(euler_step(x, np.zeros((1, 2)), 1.0, 0.5), x)
    np.testing.assert_allclose(
        euler_step(x, np.array([[4.0, 0.0]]), 1.0, 0.75), [[0.0, 1.0]])
    with pytest.raises(ValueError):
        euler_step(x, x, 0.5, 0.5)


def test_one_step_exactness():
    rng = Rng(8)
    x0, eps = rng.normal((5, 2)), rng.normal((5, 2))
    rec = euler_step(eps, velocity_target(x0, eps), 1.0, 0.0)
    np.testing.assert_allclose(rec, x0, atol=1e-15)


# -- schedules ---------------------------------------------------------------

def test_uniform_schedule():
    s = Schedule.uniform(4)
    assert s.steps == (1.0, 0.75, 0.5, 0.25)
    assert Schedule.uniform(2).steps == (1.0, 0.5)
    s32 = Schedule.uniform(32)
    assert s32.steps[0] == 1.0
    diffs = np.diff(s32.steps)
    np.testing.assert_allclose(diffs, -1.0 / 32, atol=1e-15)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule((0.9, 0.5))
    with pytest.raises(ValueError):
        Schedule((1.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        Schedule((1.0, 0.0))
    assert Schedule.uniform(4).t_min == 0.125


# -- sampling ----------------------------------------------------------------

class _ZeroModel:
    class cfg:
        n_classes = 1

    def forward(self, x, t, c, params=None):
        return np.zeros_like(np.asarray(x))


def test_sample_zero_model_constant_trajectory():
    z = Rng(0).normal((6, 2))
    traj = sample(_ZeroModel(), Schedule.uniform(4), z, np.zeros(6, dtype=int))
    assert len(traj) == 5
    assert [p.t for p in traj] == [1.0, 0.75, 0.5, 0.25, 0.0]
    for p in traj:
        np.testing.assert_array_equal(p.x_t, z)


def _tiny_net(seed=0, n_classes=3):
    cfg = NetConfig(width=16, depth=12, n_classes=n_classes)
    net = VelocityNet.init(cfg, Rng(seed))
    # give the zero-initialized output layer some signal
    net.params["out.w"] = Rng(seed + 1).normal((16, 2)) * 0.1
    return net


def test_guidance_one_is_conditional_sampling():
    net = _tiny_net()
    z = Rng(3).normal((4, 2))
    c = np.array([0, 1, 2, 0])
    t1 = sample(net, Schedule.uniform(4), z, c, guidance_scale=1.0)
    t2 = sample(net, Schedule.uniform(4), z, c, guidance_scale=1.0)
    np.testing.assert_array_equal(t1[-1].x_t, t2[-1].x_t)
    guided = sample(net, Schedule.uniform(4), z, c, guidance_scale=4.0)
    assert not np.array_equal(t1[-1].x_t, guided[-1].x_t)


def test_sample_against_analytic_single_gaussian():
    # oracle velocity field, 50 uniform steps, 10k samples: empirical
    # mean/cov within Monte-Carlo error of the data distribution
    class Oracle:
        class cfg:
            n_classes = 1

        def forward(self, x, t, c, params=None):
            return analytic_velocity_gaussian(0.0, 1.0, np.asarray(x), t)

    n = 10000
    z = Rng(12).normal((n, 2))
    traj = sample(Oracle(), Schedule.uniform(50), z, np.zeros(n, dtype=int))
    x = traj[-1].x_t
    se_mean = 1.0 / np.sqrt(n)
    assert np.abs(x.mean(axis=0)).max() < 3 * se_mean
    cov = np.cov(x.T)
    # var estimator SE ~ sqrt(2/n); allow 3 SE plus Euler discretization bias
    assert np.abs(np.diag(cov) - 1.0).max() < 3 * np.sqrt(2.0 / n) + 0.02
    assert abs(cov[0, 1]) < 3 * se_mean
