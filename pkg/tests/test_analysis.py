import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from tdsdp.analysis import cdf, crlb, delay_jacobian, error_stats, logmsed, mse
from tdsdp.forward import true_delays
from tdsdp.scenario import builtin

coord = st.floats(-900, 900)
vel = st.floats(-20, 20)


def far_from_sensors(u, s, gap=10.0):
    return np.min(np.linalg.norm(s - np.asarray(u), axis=1)) >= gap


@settings(max_examples=100)
@given(st.tuples(coord, coord), st.tuples(vel, vel), st.floats(100, 1000), st.integers(5, 10))
def test_jacobian_matches_finite_differences(u, v, c, M):
    s = builtin("sim10").first(M)
    if not far_from_sensors(u, s):
        return
    z = np.array(u + v)
    J = delay_jacobian(z[:2], z[2:], c, s)
    num = central_difference(lambda z: true_delays(z[:2], z[2:], c, s), z,
                             1e-4 * np.maximum(1.0, np.abs(z)))
    assert np.allclose(J, num, rtol=1e-6, atol=1e-6 * np.abs(num).max())


def test_jacobian_at_rest():
    s = builtin("sim10").first(6)
    u = np.array([100.0, 50.0])
    J = delay_jacobian(u, [0.0, 0.0], 300.0, s)
    r = u - s
    assert np.allclose(J[:, :2], (2 / 300.0) * r / np.linalg.norm(r, axis=1)[:, None])


@given(st.tuples(coord, coord), st.tuples(vel, vel), st.tuples(coord, coord))
def test_jacobian_translation_invariant(u, v, off):
    s = builtin("sim10").first(7)
    if not far_from_sensors(u, s):
        return
    a = delay_jacobian(u, v, 350.0, s)
    b = delay_jacobian(np.add(u, off), v, 350.0, s + np.array(off))
    assert np.allclose(a[:, :2], b[:, :2], rtol=1e-9, atol=1e-12)


def test_jacobian_errors():
    with pytest.raises(ValueError):
        delay_jacobian([145.0, -385.0], [0, 0], 350.0, builtin("sim10").first(5))
    with pytest.raises(ValueError):
        delay_jacobian([0.0, 0.0], [400, 0], 350.0, builtin("sim10").first(5))


def test_crlb_linear_in_noise():
    s = builtin("sim10").first(8)
    a = crlb([200, -400], [-1, 1], 350.0, s, 1e-4 * np.eye(8))
    b = crlb([200, -400], [-1, 1], 350.0, s, 1e-2 * np.eye(8))
    assert b.crlb_u == pytest.approx(100 * a.crlb_u, rel=1e-9)
    assert b.crlb_v == pytest.approx(100 * a.crlb_v, rel=1e-9)
    assert np.allclose(a.covariance, np.linalg.inv(a.fim))


@settings(max_examples=100)
@given(st.tuples(coord, coord), st.tuples(vel, vel), st.integers(5, 9), st.floats(-60, 0))
def test_adding_a_sensor_never_hurts(u, v, M, noise_db):
    s = builtin("sim10").sensors
    if not far_from_sensors(u, s):
        return
    sigma2 = 10 ** (noise_db / 10)
    a = crlb(u, v, 350.0, s[:M], sigma2 * np.eye(M))
    b = crlb(u, v, 350.0, s[: M + 1], sigma2 * np.eye(M + 1))
    assert b.crlb_u <= a.crlb_u * (1 + 1e-9)


@settings(max_examples=20)
@given(st.tuples(coord, coord), st.tuples(vel, vel))
def test_fim_equals_log_likelihood_hessian(u, v):
    s = builtin("sim10").first(6)
    if not far_from_sensors(u, s):
        return
    z0 = np.array(u + v)
    Q = 1e-4 * np.eye(6)
    Qi = np.linalg.inv(Q)
    t = true_delays(z0[:2], z0[2:], 350.0, s)

    def grad(z):
        r = t - true_delays(z[:2], z[2:], 350.0, s)
        J = central_difference(lambda w: true_delays(w[:2], w[2:], 350.0, s), z,
                               1e-5 * np.maximum(1.0, np.abs(z)))
        return -J.T @ Qi @ r

    hess = central_difference(grad, z0, 1e-3 * np.maximum(1.0, np.abs(z0)))
    fim = crlb(z0[:2], z0[2:], 350.0, s, Q).fim
    assert np.allclose(0.5 * (hess + hess.T), fim, rtol=1e-4, atol=1e-4 * np.abs(fim).max())


def test_crlb_degenerate_geometry():
    s = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    with pytest.raises(ValueError, match="singular"):
        crlb([10.0, 0.0], [0.0, 0.0], 350.0, s, np.eye(5))


def test_mse_examples():
    truth = ([0.0, 0.0], [0.0, 0.0])
    assert mse([([0, 0], [0, 0])] * 3, truth).mse_u == 0.0
    assert mse([([3, 4], [0, 0])], truth).mse_u == 25.0
    st2 = mse([([1, 0], [0, 0]), ([0, 1], [0, 0])], truth)
    assert st2.mse_u == 1.0 and st2.K == 2
    with pytest.raises(ValueError):
        mse([], truth)


def test_logmsed_examples():
    assert logmsed(2.0, 2.0) == 0.0
    assert logmsed(0.1, 1.0) == pytest.approx(-10.0)
    with pytest.raises(ValueError):
        logmsed(0.0, 1.0)


def test_error_stats_reference():
    truth = ([0.0, 0.0], [0.0, 0.0])
    ref = mse([([10, 0], [1, 0])], truth)
    s = error_stats([([1, 0], [0.1, 0])], truth, ref)
    assert s.logmsed_u == pytest.approx(-20.0) and s.logmsed_v == pytest.approx(-20.0)


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_rmse_is_sqrt_mse(offsets):
    s = mse([(o, o) for o in offsets], ([0, 0], [0, 0]))
    assert s.rmse_u == math.sqrt(s.mse_u) and s.rmse_v == math.sqrt(s.mse_v)


def test_cdf_examples():
    c = cdf([5, 3, 1, 4, 2])
    assert c.quantile(0.8) == 4
    assert c(2.5) == 0.4
    k = cdf([7.0] * 4)
    assert k(6.99) == 0.0 and k(7.0) == 1.0
    with pytest.raises(ValueError):
        cdf([])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50), st.floats(0, 1e6))
def test_cdf_properties(errors, x):
    c = cdf(errors)
    K = len(errors)
    assert np.all(np.diff(c.values) >= 0)
    assert np.allclose(c.levels, np.arange(1, K + 1) / K)
    assert c(x) in set(np.arange(0, K + 1) / K)
    assert c(c.values[-1]) == 1.0
    # Right-continuity: the CDF at a sample point already includes it.
    assert c(c.values[0]) >= 1.0 / K
    q = c.quantile(0.5)
    assert c(q) >= 0.5
