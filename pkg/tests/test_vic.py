import math
import threading

import numpy as np
import pytest

from snapfit.numerics import RngStream
from snapfit.vic import (
    CONTROLLER_LOG_COLUMNS,
    POSITION_GAIN,
    GainState,
    ImpedanceParams,
    baseline_controller,
    baseline_gains,
    damping_at,
    gains_force,
    impedance_force,
    on_snap_detected,
    stiffness_at,
)

P = ImpedanceParams()


def test_defaults():
    assert (P.K0, P.Kf, P.lam, P.alpha_d) == (2000.0, 100.0, 10.0, 2.0)
    with pytest.raises(ValueError):
        ImpedanceParams(K0=100.0, Kf=200.0)
    with pytest.raises(ValueError):
        ImpedanceParams(insertion_axis=3)


def test_stiffness_schedule_values():
    assert stiffness_at(0.5, 1.0, P) == 2000.0
    assert stiffness_at(5.0, None, P) == 2000.0
    assert stiffness_at(1.0 + 100.0, 1.0, P) == pytest.approx(100.0, abs=1e-9)
    assert stiffness_at(1.0 + math.log(2) / P.lam, 1.0, P) == pytest.approx(1050.0, abs=1e-9)
    assert stiffness_at(1.3, 1.0, P) == pytest.approx(100 + 1900 * math.exp(-3), abs=1e-9)
    assert stiffness_at(1.3, 1.0, P) == pytest.approx(194.6, abs=0.05)


def test_schedule_continuity_and_monotone_decay():
    t_s = 0.731
    assert abs(stiffness_at(t_s, t_s, P) - P.K0) < 1e-9
    t = t_s + np.linspace(0.0, 2.0, 2001)
    K = np.array([stiffness_at(x, t_s, P) for x in t])
    assert np.all(np.diff(K) < 0) and np.all(K > P.Kf)
    slope = np.abs(np.diff(K)) / np.diff(t)
    assert np.max(slope) <= P.lam * (P.K0 - P.Kf) + 1e-6
    assert abs(K[1000] - P.Kf) / P.Kf < 1e-3


def test_printed_form_starts_at_kf():
    p = ImpedanceParams(printed_form=True)
    assert stiffness_at(1.0, 1.0, p) == pytest.approx(100.0)
    assert stiffness_at(100.0, 1.0, p) == pytest.approx(2000.0)


def test_damping_values():
    assert damping_at(2000.0, 2.0) == pytest.approx(89.4427191, abs=1e-6)
    assert damping_at(100.0, 2.0) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        damping_at(0.0, 2.0)
    t = 1.0 + np.linspace(0, 1, 500)
    D = np.array([damping_at(stiffness_at(x, 1.0, P), P.alpha_d) for x in t])
    assert np.all(np.diff(D) < 0)


def test_impedance_force():
    K, D = baseline_gains("fixed_impedance")
    x = np.array([0.1, 0.2, 0.3])
    assert np.all(impedance_force(x, np.ones(3), x, np.ones(3), K, D) == 0.0)
    e = 1e-3
    f = impedance_force(np.zeros(3), np.zeros(3), np.array([0.0, e, 0.0]), np.zeros(3), K, D)
    assert np.allclose(f, [0.0, 2000.0 * e, 0.0])
    # diagonal matrices and vectors give the same force
    assert np.allclose(impedance_force(x, 0 * x, 2 * x, x, np.diag(K), np.diag(D)),
                       impedance_force(x, 0 * x, 2 * x, x, K, D))


def test_impedance_force_superposition():
    r = RngStream(0)
    K, D = np.array([300.0, 2000.0, 50.0]), np.array([10.0, 80.0, 3.0])
    z = np.zeros(3)
    for _ in range(100):
        a, b = r.normal(size=3), r.normal(size=3)
        lhs = impedance_force(z, z, a + b, z, K, D)
        assert np.allclose(lhs, impedance_force(z, z, a, z, K, D) + impedance_force(z, z, b, z, K, D))


def test_latch_is_first_call_only():
    g = GainState(P)
    assert np.all(g.stiffness(10.0) == P.K0) and not g.triggered
    on_snap_detected(g, 1.0)
    on_snap_detected(g, 1.5)
    assert g.t_s == 1.0 and g.triggered


def test_latch_under_concurrent_calls():
    g = GainState(P)
    times = [1.0 + 0.01 * i for i in range(16)]
    threads = [threading.Thread(target=on_snap_detected, args=(g, t)) for t in times]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert g.t_s in times
    first = g.t_s
    on_snap_detected(g, 0.0)
    assert g.t_s == first


def test_axis_selectivity_and_spd():
    for axis in range(3):
        g = GainState(ImpedanceParams(insertion_axis=axis))
        on_snap_detected(g, 0.2)
        for t in np.linspace(0, 3, 61):
            K, D = g.matrices(t)
            lat = [i for i in range(3) if i != axis]
            assert np.all(np.diag(K)[lat] == P.K0)
            assert np.all(np.diag(K) > 0) and np.all(np.diag(D) > 0)
            assert np.allclose(np.diag(D), P.alpha_d * np.sqrt(np.diag(K)), atol=1e-12)
            assert np.count_nonzero(K - np.diag(np.diag(K))) == 0


def test_gains_force_uses_schedule():
    g = on_snap_detected(GainState(P), 0.0)
    f = gains_force(g, 0.3, np.zeros(3), np.zeros(3), np.array([0, 1e-3, 0.0]), np.zeros(3))
    assert f[1] == pytest.approx(stiffness_at(0.3, 0.0, P) * 1e-3)


def test_baselines():
    z = np.zeros(3)
    for kind in ("position", "fixed_impedance"):
        assert np.all(baseline_controller(kind, z, z, z, z) == 0.0)
    Kp, Dp = baseline_gains("position")
    Kf, _ = baseline_gains("fixed_impedance")
    assert np.all(Kp == 10 * Kf) and Kp[0] == POSITION_GAIN
    assert np.allclose(Dp, 2 * np.sqrt(Kp))
    with pytest.raises(ValueError):
        baseline_gains("event_vic")


def test_log_columns():
    assert CONTROLLER_LOG_COLUMNS == ("time_s", "K_axis", "D_axis", "Fx", "Fy", "Fz",
                                      "contact_force", "deflection_m", "triggered")
