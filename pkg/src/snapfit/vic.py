"""Event-triggered variable impedance control and the baseline insertion controllers."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ImpedanceParams:
    K0: float = 2000.0
    Kf: float = 100.0
    lam: float = 10.0
    alpha_d: float = 2.0
    insertion_axis: int = 1
    printed_form: bool = False

    def __post_init__(self):
        if not (self.K0 > self.Kf > 0 and self.lam > 0 and self.alpha_d > 0):
            raise ValueError(f"invalid impedance parameters: {self}")
        if self.insertion_axis not in (0, 1, 2):
            raise ValueError("insertion_axis must be 0, 1 or 2")


def stiffness_at(t: float, t_s: float | None, params: ImpedanceParams) -> float:
    """Insertion-axis stiffness at time ``t`` for a trigger latched at ``t_s``.

    With ``printed_form`` set, the decay is evaluated as
    ``K0 + (Kf - K0) exp(-lam (t - t_s))``, which starts at Kf and relaxes
    back to K0; it is kept only for side-by-side comparison.
    """
    if t_s is None or t < t_s:
        return params.K0
    decay = math.exp(-params.lam * (t - t_s))
    if params.printed_form:
        return params.K0 + (params.Kf - params.K0) * decay
    return params.Kf + (params.K0 - params.Kf) * decay


def damping_at(K, alpha_d: float):
    K = np.asarray(K, dtype=np.float64)
    if np.any(K <= 0):
        raise ValueError("stiffness must be positive for criticality-scaled damping")
    D = alpha_d * np.sqrt(K)
    return float(D) if D.ndim == 0 else D


@dataclass
class GainState:
    """Diagonal translational gains plus the trigger latch.

    ``on_snap_detected`` may run on the detector thread while the control
    loop reads gains, so the latch is guarded by a lock.
    """

    params: ImpedanceParams = field(default_factory=ImpedanceParams)
    t_s: float | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def stiffness(self, t: float) -> np.ndarray:
        with self._lock:
            t_s = self.t_s
        K = np.full(3, self.params.K0)
        K[self.params.insertion_axis] = stiffness_at(t, t_s, self.params)
        return K

    def damping(self, t: float) -> np.ndarray:
        return damping_at(self.stiffness(t), self.params.alpha_d)

    @property
    def triggered(self) -> bool:
        return self.t_s is not None

    def matrices(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        K = self.stiffness(t)
        return np.diag(K), np.diag(damping_at(K, self.params.alpha_d))


def on_snap_detected(gains: GainState, t: float) -> GainState:
    """Latch the first detection time; later calls leave the schedule untouched."""
    with gains._lock:
        if gains.t_s is None:
            gains.t_s = float(t)
    return gains


def impedance_force(x, xd, x_ref, xd_ref, K, D) -> np.ndarray:
    """Cartesian impedance law with diagonal gains (vectors or matrices)."""
    K = np.asarray(K, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    ex = np.asarray(x_ref, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    ev = np.asarray(xd_ref, dtype=np.float64) - np.asarray(xd, dtype=np.float64)
    if K.ndim == 2:
        return K @ ex + D @ ev
    return K * ex + D * ev


def gains_force(gains: GainState, t: float, x, xd, x_ref, xd_ref) -> np.ndarray:
    K = gains.stiffness(t)
    return impedance_force(x, xd, x_ref, xd_ref, K, damping_at(K, gains.params.alpha_d))


CONTROLLER_KINDS = ("position", "fixed_impedance", "event_vic")
POSITION_GAIN = 20000.0


def baseline_gains(kind: str, params: ImpedanceParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Constant diagonal gains of the two baseline schemes."""
    params = params or ImpedanceParams()
    if kind == "position":
        K = np.full(3, POSITION_GAIN)
        return K, 2.0 * np.sqrt(K)
    if kind == "fixed_impedance":
        K = np.full(3, params.K0)
        return K, damping_at(K, params.alpha_d)
    raise ValueError(f"unknown baseline controller {kind!r}")


def baseline_controller(kind: str, x, xd, x_ref, xd_ref, params: ImpedanceParams | None = None) -> np.ndarray:
    K, D = baseline_gains(kind, params)
    return impedance_force(x, xd, x_ref, xd_ref, K, D)


CONTROLLER_LOG_COLUMNS = (
    "time_s", "K_axis", "D_axis", "Fx", "Fy", "Fz",
    "contact_force", "deflection_m", "triggered",
)
