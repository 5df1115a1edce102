import math

import numpy as np
import pytest

from snapfit.coordinator import (
    DegeneratePathError,
    ExecutorState,
    PathSegment,
    PhaseClampWarning,
    PhaseParams,
    PhaseState,
    TrackerParams,
    TRAJECTORY_COLUMNS,
    adaptive_gain,
    advance_gate,
    consensus_energy,
    consensus_phase,
    coupling_dynamics,
    default_keyframes,
    lyapunov_phase,
    make_executor,
    phase_of_position,
    phase_rate,
    reference_point,
    run_executor,
    self_dynamics,
    step_executor,
    tracking_error_bound,
    tracking_rate,
    write_trajectory_csv,
)
from snapfit.numerics import RngStream

UNIT = PhaseParams(k1=1.0, k2=1.0, eps=0.01, eta=0.5)


def seg(a, b):
    return PathSegment(np.array(a, float), np.array(b, float))


def test_phase_of_position_endpoints_and_midpoint():
    s = seg((0, 0, 0), (0, 2, 0))
    assert phase_of_position(s.p_start, s) == 0.0
    assert phase_of_position(s.p_end, s) == 1.0
    assert phase_of_position((0, 1, 0), s) == pytest.approx(0.5)


def test_zero_length_segment_is_degenerate():
    with pytest.raises(DegeneratePathError):
        seg((1, 1, 1), (1, 1, 1))


def test_reference_point_interpolates_and_clamps():
    s = seg((0, 0, 0), (2, 0, 0))
    assert np.array_equal(reference_point(0.0, s), s.p_start)
    assert np.array_equal(reference_point(1.0, s), s.p_end)
    assert np.allclose(reference_point(0.25, s), [0.5, 0, 0])
    with pytest.warns(PhaseClampWarning):
        assert np.allclose(reference_point(1.2, s), s.p_end)


def test_self_dynamics_values():
    assert self_dynamics(0.4, 0.4, UNIT) == 0.0
    assert self_dynamics(0.99, 0.0, UNIT) == pytest.approx(-0.99 / math.sqrt(1.0), abs=1e-15)


def test_self_dynamics_sign_sweep():
    r = RngStream(0)
    z, zd = r.uniform(0, 1, 1000), r.uniform(0, 1, 1000)
    assert np.all(np.sign(self_dynamics(z, zd, PhaseParams())) == -np.sign(z - zd))


def test_coupling_dynamics_values_and_antisymmetry():
    assert coupling_dynamics(0.3, 0.3, UNIT) == 0.0
    assert coupling_dynamics(0.0, 0.99, UNIT) == pytest.approx(0.99, abs=1e-15)
    a = RngStream(1).uniform(-1, 1, 1000)
    zc = 0.4
    p = PhaseParams()
    assert np.allclose(coupling_dynamics(zc + a, zc, p), -coupling_dynamics(zc - a, zc, p), atol=1e-15)


def test_consensus_phase():
    assert consensus_phase([0.2, 0.8]) == pytest.approx(0.5)
    assert consensus_phase([0.7, 0.7, 0.7]) == pytest.approx(0.7)
    z = RngStream(2).uniform(0, 1, 100)
    total = 0.0
    for v in z:
        total += float(v)
    assert consensus_phase(z) == pytest.approx(total / 100, abs=1e-15)
    with pytest.raises(ValueError):
        consensus_phase([])


def test_phase_rate_equilibria():
    assert np.all(phase_rate(PhaseState([0.3, 0.6], [0.3, 0.6], 0), PhaseParams()) == 0)
    assert np.all(phase_rate(PhaseState([0.5, 0.5, 0.5], [0.5] * 3, 1), PhaseParams()) == 0)


def test_phase_rate_hand_evaluation():
    # z = [0.1, 0.9], z_d = 0.5, z_c = 0.5: both terms equal -e / sqrt(|e| + 0.01)
    out = phase_rate(PhaseState([0.1, 0.9], [0.5, 0.5], 1), UNIT)
    g = 0.4 / math.sqrt(0.41)
    assert np.allclose(out, [2 * g, -2 * g], atol=1e-15)


def test_adaptive_gain():
    tp = TrackerParams(alpha_min=0.5, alpha_max=5.0, delta=0.005)
    assert adaptive_gain(0.0, tp) == 0.5
    assert adaptive_gain(0.005, tp) == pytest.approx(2.75)
    E = np.linspace(0, 10, 10 ** 4)
    a = np.array([adaptive_gain(e, tp) for e in E])
    assert np.all(np.diff(a) >= 0) and np.all(a < 5.0) and np.all(a >= 0.5)
    with pytest.raises(ValueError):
        adaptive_gain(-1e-9, tp)


def test_tracking_rate():
    s = seg((0, 0, 0), (1, 0, 0))
    tp = TrackerParams(1.0, 5.0, 1.0)
    assert np.allclose(tracking_rate(reference_point(0.3, s), 0.3, s, tp), 0.0)
    assert np.allclose(tracking_rate([1.0, 0, 0], 0.0, s, tp), [-3.0, 0, 0])
    r = RngStream(3)
    for _ in range(1000):
        p, z = r.normal(size=3), float(r.uniform())
        e = p - reference_point(z, s)
        v = tracking_rate(p, z, s, TrackerParams())
        cos = float(v @ e) / (np.linalg.norm(v) * np.linalg.norm(e))
        assert cos == pytest.approx(-1.0, abs=1e-12)


def test_lyapunov_phase():
    p = PhaseParams()
    assert lyapunov_phase(0.0, p) == 0.0
    e = np.linspace(0, 1, 1001)
    assert np.allclose(lyapunov_phase(e, p), lyapunov_phase(-e, p))
    assert np.all(np.diff(lyapunov_phase(e, p)) > 0)


def test_consensus_energy():
    assert consensus_energy([0.4, 0.4]) == 0.0
    assert consensus_energy([0.0, 1.0]) == pytest.approx(0.25)
    z = RngStream(4).uniform(0, 1, 9)
    m = sum(z) / len(z)
    assert consensus_energy(z) == pytest.approx(0.5 * sum((v - m) ** 2 for v in z), abs=1e-15)


def test_params_reject_invalid_hypotheses():
    with pytest.raises(ValueError):
        PhaseParams(eta=1.0)
    with pytest.raises(ValueError):
        TrackerParams(alpha_min=5.0, alpha_max=1.0)


def test_gate_hands_off_to_next_phase():
    ex = make_executor()
    ex.phase.z[:] = 1.0
    nxt = advance_gate(ex)
    assert nxt.theta == 2
    assert np.all(nxt.phase.z == 0.0) and nxt.phase.kappa == 1
    ex = step_executor(make_executor(), 1e-3)
    assert ex.theta == 1


def test_phase3_holding_arm_stays_put():
    ex = make_executor()
    kf = default_keyframes()
    for th in (2, 3):
        ex.phase.z[:] = 1.0
        ex = advance_gate(ex)
    assert ex.theta == 3 and ex.phase.kappa == 0
    assert ex.holding[0] and not ex.holding[1]
    ex.arms[0].p = kf[0, 3].copy()
    ex.arms[1].p = kf[1, 2].copy()
    nxt = step_executor(ex, 1e-3)
    assert np.linalg.norm(nxt.arms[0].p - ex.arms[0].p) < 1e-9


def test_full_run_reaches_phase3_and_logs_gate_crossings(tmp_path):
    ex, rows = run_executor(make_executor(), dt=1e-3, t_max=30.0, settle=0.0)
    assert ex.theta == 3 and ex.done and ex.phase.z[1] > 0.99
    # regression baseline for the default gains
    assert ex.t == pytest.approx(2.826, abs=2e-3)
    thetas = [r[2] for r in rows]
    assert thetas == sorted(thetas)
    for th in (1, 2):
        last = [r for r in rows if r[2] == th][-2:]
        assert all(r[3] > 0.99 for r in last)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, rows)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(TRAJECTORY_COLUMNS)


def test_phases_stay_confined():
    r = RngStream(5)
    p = PhaseParams()
    z = r.uniform(0, 1, (200, 3))
    zd = r.uniform(0, 1, (200, 1))
    lo, hi = np.minimum(z.min(1, keepdims=True), zd), np.maximum(z.max(1, keepdims=True), zd)
    from snapfit.numerics import rk4_step
    f = lambda s: self_dynamics(s, zd, p) + coupling_dynamics(s, s.mean(1, keepdims=True), p)
    for _ in range(3000):
        z = rk4_step(f, z, 1e-3)
        assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)


def test_tracking_error_bound_formula():
    assert tracking_error_bound(4.0, 0.0, 2.0, 0.0, 0.5) == 4.0
    assert tracking_error_bound(1.0, 2.0, 1.0, 3.0, 0.5) == pytest.approx(math.exp(-1.0) + 36.0)
