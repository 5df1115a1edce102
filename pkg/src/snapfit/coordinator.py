"""Phase-coupled dual-arm coordination.

Each arm advances along a straight path segment according to a scalar phase
``z`` in [0, 1]. Phases obey a finite-time-like attractor toward a setpoint,
optionally coupled to the consensus (mean) phase of all arms. Cartesian
positions chase the phase-indexed reference with an error-dependent gain.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .numerics import IntegrationFault, rk4_step


class DegeneratePathError(ValueError):
    pass


class ExecutorFault(RuntimeError):
    pass


class PhaseClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PhaseParams:
    k1: float = 2.0
    k2: float = 4.0
    eps: float = 0.01
    eta: float = 0.5

    def __post_init__(self):
        if not (self.k1 > 0 and self.k2 > 0 and self.eps > 0 and 0 < self.eta < 1):
            raise ValueError(f"invalid phase parameters: {self}")


@dataclass(frozen=True)
class TrackerParams:
    alpha_min: float = 0.5
    alpha_max: float = 5.0
    delta: float = 0.005

    def __post_init__(self):
        if not (0 < self.alpha_min < self.alpha_max and self.delta > 0):
            raise ValueError(f"invalid tracker parameters: {self}")


@dataclass(frozen=True)
class PathSegment:
    p_start: np.ndarray
    p_end: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.p_start, dtype=np.float64).reshape(3)
        b = np.asarray(self.p_end, dtype=np.float64).reshape(3)
        object.__setattr__(self, "p_start", a)
        object.__setattr__(self, "p_end", b)
        if not np.linalg.norm(b - a) > 0:
            raise DegeneratePathError("path segment has zero length")

    @property
    def length(self) -> float:
        """Lipschitz constant of the linear reference map."""
        return float(np.linalg.norm(self.p_end - self.p_start))


@dataclass
class PhaseState:
    z: np.ndarray
    z_d: np.ndarray
    kappa: int = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.z_d = np.asarray(self.z_d, dtype=np.float64)
        if self.kappa not in (0, 1):
            raise ValueError("kappa must be 0 or 1")
        if self.z.shape != self.z_d.shape:
            raise ValueError("z and z_d must have the same length")


@dataclass
class ArmTrackState:
    p: np.ndarray
    keyframes: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.keyframes = np.asarray(self.keyframes, dtype=np.float64).reshape(4, 3)


def phase_of_position(p, seg: PathSegment) -> float:
    p = np.asarray(p, dtype=np.float64)
    z = np.linalg.norm(p - seg.p_start) / seg.length
    return float(min(max(z, 0.0), 1.0))


def reference_point(z: float, seg: PathSegment) -> np.ndarray:
    if z < 0.0 or z > 1.0:
        warnings.warn(f"phase {z} clamped to [0, 1]", PhaseClampWarning, stacklevel=2)
        z = min(max(z, 0.0), 1.0)
    return seg.p_start + z * (seg.p_end - seg.p_start)


def _attractor(err, gain, eps, eta):
    return -gain * err / (np.abs(err) + eps) ** (1.0 - eta)


def self_dynamics(z, z_d, params: PhaseParams):
    return _attractor(np.asarray(z) - z_d, params.k1, params.eps, params.eta)


def coupling_dynamics(z, z_c, params: PhaseParams):
    return _attractor(np.asarray(z) - z_c, params.k2, params.eps, params.eta)


def consensus_phase(z: Sequence[float]) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("consensus of an empty phase list")
    return float(np.mean(z))


def phase_rate(state: PhaseState, params: PhaseParams) -> np.ndarray:
    rate = self_dynamics(state.z, state.z_d, params)
    if state.kappa:
        rate = rate + coupling_dynamics(state.z, consensus_phase(state.z), params)
    return rate


def adaptive_gain(E: float, params: TrackerParams) -> float:
    if E < 0:
        raise ValueError("tracking error norm must be non-negative")
    return params.alpha_min + (params.alpha_max - params.alpha_min) * E / (E + params.delta)


def tracking_rate(p, z: float, seg: PathSegment, params: TrackerParams) -> np.ndarray:
    e = np.asarray(p, dtype=np.float64) - reference_point(z, seg)
    return -adaptive_gain(float(np.linalg.norm(e)), params) * e


def lyapunov_phase(e, params: PhaseParams):
    """Lyapunov function certifying the decoupled phase attractor."""
    eps, eta = params.eps, params.eta
    return ((np.abs(e) + eps) ** eta - eps ** eta) / eta


def consensus_energy(z: Sequence[float]) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("consensus energy of an empty phase list")
    return float(0.5 * np.sum((z - z.mean()) ** 2))


# --------------------------------------------------------------------------
# three-phase executor

def default_keyframes() -> np.ndarray:
    """Keyframes (arm, frame, xyz) for a symmetric bench layout.

    Arm 0 holds the frame; arm 1 inserts along +y during phase 3. The last
    arm-1 keyframe is the approach point past the seat; the harness places
    the contact surface relative to it.
    """
    holder = [
        [0.45, 0.30, 0.40],
        [0.50, 0.22, 0.15],
        [0.45, 0.06, 0.30],
        [0.45, 0.06, 0.30],
    ]
    inserter = [
        [0.45, -0.30, 0.40],
        [0.50, -0.22, 0.15],
        [0.45, -0.06, 0.30],
        [0.45, 0.00, 0.30],
    ]
    return np.array([holder, inserter], dtype=np.float64)


@dataclass
class ExecutorState:
    theta: int
    phase: PhaseState
    arms: list[ArmTrackState]
    phase_params: PhaseParams = field(default_factory=PhaseParams)
    tracker_params: TrackerParams = field(default_factory=TrackerParams)
    gate: float = 0.99
    t: float = 0.0
    holding: np.ndarray | None = None

    def __post_init__(self):
        if self.theta not in (1, 2, 3):
            raise ValueError("theta must be 1, 2 or 3")
        if self.holding is None:
            self.holding = np.zeros(len(self.arms), dtype=bool)

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    def segment(self, i: int) -> PathSegment | None:
        """Active segment of arm ``i``; ``None`` while holding."""
        if self.holding[i]:
            return None
        kf = self.arms[i].keyframes
        return PathSegment(kf[self.theta - 1], kf[self.theta])

    def hold_point(self, i: int) -> np.ndarray:
        return self.arms[i].keyframes[self.theta]

    def reference(self, i: int) -> np.ndarray:
        seg = self.segment(i)
        if seg is None:
            return self.hold_point(i).copy()
        return reference_point(min(max(self.phase.z[i], 0.0), 1.0), seg)

    def tracking_error(self, i: int) -> np.ndarray:
        return self.arms[i].p - self.reference(i)

    @property
    def done(self) -> bool:
        active = ~self.holding
        return self.theta == 3 and bool(np.all(self.phase.z[active] > self.gate))


def make_executor(
    keyframes: np.ndarray | None = None,
    phase_params: PhaseParams | None = None,
    tracker_params: TrackerParams | None = None,
    gate: float = 0.99,
    p0: np.ndarray | None = None,
) -> ExecutorState:
    kf = default_keyframes() if keyframes is None else np.asarray(keyframes, dtype=np.float64)
    n = kf.shape[0]
    for arm in kf:
        for j in range(3):
            if np.allclose(arm[j], arm[j + 1]) and j < 2:
                raise DegeneratePathError("consecutive transport keyframes coincide")
    arms = [
        ArmTrackState(p=kf[i, 0] if p0 is None else p0[i], keyframes=kf[i]) for i in range(n)
    ]
    ex = ExecutorState(
        theta=1,
        phase=PhaseState(z=np.zeros(n), z_d=np.ones(n), kappa=1),
        arms=arms,
        phase_params=phase_params or PhaseParams(),
        tracker_params=tracker_params or TrackerParams(),
        gate=gate,
    )
    return _enter_phase(ex, 1)


def _enter_phase(ex: ExecutorState, theta: int) -> ExecutorState:
    n = ex.n_arms
    holding = np.zeros(n, dtype=bool)
    z = np.zeros(n)
    for i in range(n):
        kf = ex.arms[i].keyframes
        if np.linalg.norm(kf[theta] - kf[theta - 1]) == 0.0:
            holding[i] = True
            z[i] = 1.0
    kappa = 0 if theta == 3 else 1
    phase = PhaseState(z=z, z_d=np.ones(n), kappa=kappa)
    return replace(ex, theta=theta, phase=phase, holding=holding)


def _executor_rhs(ex: ExecutorState):
    n = ex.n_arms
    holding = ex.holding
    segs = [ex.segment(i) for i in range(n)]
    holds = [ex.hold_point(i) for i in range(n)]
    z_d = ex.phase.z_d
    kappa = ex.phase.kappa
    pp, tp = ex.phase_params, ex.tracker_params
    active = ~holding

    def rhs(s):
        z = s[:n]
        p = s[n:].reshape(n, 3)
        dz = self_dynamics(z, z_d, pp)
        if kappa and active.any():
            dz = dz + coupling_dynamics(z, float(np.mean(z[active])), pp)
        dz = np.where(holding, 0.0, dz)
        dp = np.empty_like(p)
        for i in range(n):
            if segs[i] is None:
                ref = holds[i]
            else:
                zi = min(max(z[i], 0.0), 1.0)
                ref = segs[i].p_start + zi * (segs[i].p_end - segs[i].p_start)
            e = p[i] - ref
            dp[i] = -adaptive_gain(float(np.linalg.norm(e)), tp) * e
        return np.concatenate([dz, dp.reshape(-1)])

    return rhs


def executor_rates(ex: ExecutorState) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous (phase rate, Cartesian velocity) of every arm."""
    s = np.concatenate([ex.phase.z, np.stack([a.p for a in ex.arms]).reshape(-1)])
    d = _executor_rhs(ex)(s)
    n = ex.n_arms
    return d[:n], d[n:].reshape(n, 3)


def integrate_executor(ex: ExecutorState, dt: float) -> ExecutorState:
    """One RK4 step of phases and positions, without applying the gate."""
    n = ex.n_arms
    s = np.concatenate([ex.phase.z, np.stack([a.p for a in ex.arms]).reshape(-1)])
    try:
        s = rk4_step(_executor_rhs(ex), s, dt)
    except IntegrationFault as exc:
        raise ExecutorFault(f"non-finite executor state at t={ex.t:.4f}") from exc
    if not np.all(np.isfinite(s)):
        raise ExecutorFault(f"non-finite executor state at t={ex.t:.4f}")
    z = np.clip(s[:n], 0.0, 1.0)
    arms = [replace(ex.arms[i], p=s[n + 3 * i : n + 3 * i + 3].copy()) for i in range(n)]
    phase = PhaseState(z=z, z_d=ex.phase.z_d.copy(), kappa=ex.phase.kappa)
    return replace(ex, phase=phase, arms=arms, t=ex.t + dt)


def step_executor(ex: ExecutorState, dt: float) -> ExecutorState:
    """Advance the executor by ``dt`` and apply the phase gate."""
    return advance_gate(integrate_executor(ex, dt))


def advance_gate(ex: ExecutorState) -> ExecutorState:
    """Apply the gate without integrating (used when phases are set externally)."""
    active = ~ex.holding
    if ex.theta < 3 and np.all(ex.phase.z[active] > ex.gate):
        return _enter_phase(ex, ex.theta + 1)
    return ex


TRAJECTORY_COLUMNS = (
    "time_s", "arm_id", "theta", "z", "z_d", "kappa",
    "px", "py", "pz", "ex", "ey", "ez", "err_norm",
)


def trajectory_rows(ex: ExecutorState) -> list[list]:
    rows = []
    for i, arm in enumerate(ex.arms):
        e = ex.tracking_error(i)
        rows.append([
            ex.t, i + 1, ex.theta, ex.phase.z[i], ex.phase.z_d[i], ex.phase.kappa,
            *arm.p, *e, float(np.linalg.norm(e)),
        ])
    return rows


def run_executor(
    ex: ExecutorState, dt: float = 1e-3, t_max: float = 30.0, log_every: int = 10,
    settle: float = 0.0,
) -> tuple[ExecutorState, list[list]]:
    """Integrate until phase 3 completes (plus ``settle`` seconds) or ``t_max``.

    Besides every ``log_every``-th step, the state that crosses a phase gate
    is always logged (under the old phase) right before the handoff.
    """
    rows = trajectory_rows(ex)
    k = 0
    t_done = None
    while ex.t < t_max - 1e-12:
        pre = integrate_executor(ex, dt)
        ex = advance_gate(pre)
        k += 1
        if ex.theta != pre.theta:
            rows.extend(trajectory_rows(pre))
        if k % log_every == 0:
            rows.extend(trajectory_rows(ex))
        if ex.done and t_done is None:
            t_done = ex.t
        if t_done is not None and ex.t >= t_done + settle - 1e-12:
            break
    return ex, rows


def write_trajectory_csv(path, rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def tracking_error_bound(e0_sq: float, t: float, L: float, sup_zdot: float, alpha_min: float) -> float:
    """Upper bound on the squared tracking error for the adaptive-gain law."""
    return e0_sq * math.exp(-alpha_min * t) + (L / alpha_min) ** 2 * sup_zdot ** 2
