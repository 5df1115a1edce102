"""Snap-through contact plant and joint-velocity signal synthesis.

The insertion axis is modelled as a point mass against a piecewise force
law: a linear elastic rise up to the critical deflection, a latched snap
that flips the force into a weaker pull toward the detent, and an optional
stiff end stop. Joint velocities are a fixed per-joint gain times the axial
velocity, plus sensor noise and a damped oscillation released at the snap.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numerics import RngStream

FORMAT_VERSION = 1
SAMPLE_RATE = 100.0
INNER_DT = 1e-3


class PlantFault(FloatingPointError):
    pass


@dataclass(frozen=True)
class SnapForceProfile:
    k_engage: float
    d_crit: float
    drop_ratio: float
    k_lock: float
    d_detent: float
    barrier: bool = False
    d_barrier: float = math.inf

    def __post_init__(self):
        if not (self.k_engage > 0 and self.k_lock > 0 and self.d_crit > 0):
            raise ValueError("stiffnesses and critical deflection must be positive")
        if not 0 < self.drop_ratio < 1:
            raise ValueError("drop_ratio must lie in (0, 1)")
        if not self.d_detent > self.d_crit:
            raise ValueError("detent must lie beyond the critical deflection")
        if self.barrier and not self.d_barrier >= self.d_detent:
            raise ValueError("barrier must not precede the detent")

    @classmethod
    def from_drop(cls, k_engage, d_crit, drop_ratio, k_lock, barrier_gap=None):
        """Build a profile whose engaged branch starts at ``drop_ratio`` of the critical load.

        The detent is placed so that the lock spring pulls with magnitude
        ``drop_ratio * k_engage * d_crit`` right after the snap.
        """
        d_detent = d_crit + drop_ratio * k_engage * d_crit / k_lock
        if barrier_gap is None:
            return cls(k_engage, d_crit, drop_ratio, k_lock, d_detent)
        return cls(k_engage, d_crit, drop_ratio, k_lock, d_detent, True, d_detent + barrier_gap)

    @property
    def critical_load(self) -> float:
        return self.k_engage * self.d_crit

    @property
    def released_energy(self) -> float:
        return 0.5 * self.k_engage * self.d_crit ** 2 * (1.0 - self.drop_ratio ** 2)

    def without_barrier(self) -> "SnapForceProfile":
        return replace(self, barrier=False, d_barrier=math.inf)


@dataclass(frozen=True)
class TransientTemplate:
    """Damped sinusoid released at engagement (per-unit energy gain)."""

    gain: float = 60.0          # rad/s per joule at unit joint gain
    freq_hz: float = 25.0
    duration_s: float = 0.05
    decay_s: float = 0.02

    def __post_init__(self):
        if not 15.0 <= self.freq_hz <= 40.0:
            raise ValueError("transient frequency outside 15-40 Hz")
        if not 0.03 <= self.duration_s <= 0.08:
            raise ValueError("transient duration outside 30-80 ms")

    def value(self, t: float) -> float:
        if t < 0.0 or t >= self.duration_s:
            return 0.0
        # phase offset keeps the first post-snap sample away from a zero crossing
        return math.exp(-t / self.decay_s) * math.sin(2.0 * math.pi * self.freq_hz * t + 0.5 * math.pi)


@dataclass(frozen=True)
class SnapScenario:
    name: str
    profile: SnapForceProfile
    f_damage: float
    noise_std: float
    signature_gain: tuple[float, ...]
    transient: TransientTemplate = field(default_factory=TransientTemplate)
    m_eff: float = 1.0

    def __post_init__(self):
        if not self.f_damage > 0:
            raise ValueError("damage threshold must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "signature_gain", tuple(float(g) for g in self.signature_gain))

    @property
    def n_joints(self) -> int:
        return len(self.signature_gain)

    @property
    def overshoot_propensity(self) -> str:
        p = self.profile
        if not p.barrier:
            return "high"
        return "low" if p.d_barrier - p.d_detent < 1e-3 else "moderate"

    def transient_amplitude(self) -> float:
        return self.transient.gain * self.profile.released_energy


# --------------------------------------------------------------------------
# presets

def _gains(dominant: Sequence[int], scale: float, n: int = 7) -> tuple[float, ...]:
    base = np.array([0.20, 0.12, 0.18, 0.10, 0.15, 0.08, 0.12])[:n]
    g = base.copy()
    g[list(dominant)] = [1.0, 0.8][: len(dominant)]
    return tuple(float(v) for v in scale * g)


def default_presets() -> dict[str, SnapScenario]:
    """The six benchmark parts, spanning the force-sensitivity / overshoot taxonomy."""
    presets = [
        SnapScenario(
            "marker_cap",
            SnapForceProfile.from_drop(6000.0, 1.5e-3, 0.3, 8000.0, barrier_gap=0.5e-3),
            f_damage=60.0, noise_std=0.004, signature_gain=_gains([1, 3], 2.0),
            transient=TransientTemplate(gain=9.0, freq_hz=22.0, duration_s=0.08, decay_s=0.04),
        ),
        SnapScenario(
            "highlighter_cap",
            SnapForceProfile.from_drop(7000.0, 1.5e-3, 0.3, 9000.0, barrier_gap=0.5e-3),
            f_damage=60.0, noise_std=0.004, signature_gain=_gains([1, 3], 2.0),
            transient=TransientTemplate(gain=8.0, freq_hz=25.0, duration_s=0.08, decay_s=0.04),
        ),
        SnapScenario(
            "bottle_lid",
            SnapForceProfile.from_drop(5000.0, 2.0e-3, 0.4, 6000.0, barrier_gap=2.0e-3),
            f_damage=60.0, noise_std=0.004, signature_gain=_gains([0, 3], 2.0),
            transient=TransientTemplate(gain=6.0, freq_hz=18.0, duration_s=0.08, decay_s=0.04),
        ),
        SnapScenario(
            "type_c",
            SnapForceProfile.from_drop(9000.0, 0.8e-3, 0.3, 12000.0, barrier_gap=0.3e-3),
            f_damage=25.0, noise_std=0.004, signature_gain=_gains([3, 5], 2.0),
            transient=TransientTemplate(gain=12.0, freq_hz=35.0, duration_s=0.048, decay_s=0.0192),
        ),
        SnapScenario(
            "lens_frame",
            SnapForceProfile.from_drop(6000.0, 1.2e-3, 0.3, 20000.0),
            f_damage=16.0, noise_std=0.004, signature_gain=_gains([1, 3], 2.0),
            transient=TransientTemplate(gain=12.0, freq_hz=25.0, duration_s=0.08, decay_s=0.04),
        ),
        SnapScenario(
            "e_stop",
            SnapForceProfile.from_drop(8000.0, 2.0e-3, 0.3, 10000.0, barrier_gap=0.8e-3),
            f_damage=80.0, noise_std=0.004, signature_gain=_gains([0, 1], 2.0),
            transient=TransientTemplate(gain=5.0, freq_hz=20.0, duration_s=0.08, decay_s=0.04),
        ),
    ]
    return {s.name: s for s in presets}


# --------------------------------------------------------------------------
# contact and plant

def contact_force(d: float, engaged: bool, profile: SnapForceProfile) -> float:
    """Axial contact force (positive pushes further in) at deflection ``d``."""
    if d < 0:
        raise ValueError("negative deflection: no tension model")
    if engaged or d >= profile.d_crit:
        f = -profile.k_lock * (d - profile.d_detent)
    else:
        f = -profile.k_engage * d
    if profile.barrier and d >= profile.d_barrier:
        f -= 100.0 * profile.k_engage * (d - profile.d_barrier)
    return f


@dataclass(frozen=True)
class PlantState:
    d: float = 0.0
    v: float = 0.0
    m_eff: float = 1.0
    t: float = 0.0
    engaged: bool = False
    t_engage: float | None = None

    def __post_init__(self):
        if not self.m_eff > 0:
            raise ValueError("effective mass must be positive")


def plant_force(s: PlantState, profile: SnapForceProfile) -> float:
    return contact_force(s.d, s.engaged, profile) if s.d >= 0.0 else 0.0


def plant_step(s: PlantState, f_cmd: float, profile: SnapForceProfile, dt: float = INNER_DT) -> PlantState:
    """Semi-implicit Euler step of the insertion-axis point mass."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    f = f_cmd + plant_force(s, profile)
    v = s.v + dt * f / s.m_eff
    d = s.d + dt * v
    if not (math.isfinite(v) and math.isfinite(d)):
        raise PlantFault(f"non-finite plant state at t={s.t:.4f}")
    t = s.t + dt
    engaged, t_eng = s.engaged, s.t_engage
    if not engaged and d >= profile.d_crit:
        engaged, t_eng = True, t
    return PlantState(d, v, s.m_eff, t, engaged, t_eng)


def joint_signature(
    v_axial: float, scenario: SnapScenario, rng: RngStream | None, t_since_snap: float | None = None
) -> np.ndarray:
    """Joint velocities (rad/s) for one sample."""
    g = np.asarray(scenario.signature_gain)
    out = g * v_axial
    if t_since_snap is not None:
        out = out + scenario.transient_amplitude() * scenario.transient.value(t_since_snap) * g / np.max(np.abs(g))
    if scenario.noise_std > 0 and rng is not None:
        out = out + rng.normal(0.0, scenario.noise_std, size=g.size)
    return out


# --------------------------------------------------------------------------
# scripted traces

@dataclass
class LabeledTrace:
    velocities: np.ndarray
    snap_intervals: list[tuple[int, int]]
    scenario: str
    seed: int
    kind: str = "snap"
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        n = self.velocities.shape[0]
        prev = -1
        for a, b in self.snap_intervals:
            if not (0 <= a < b <= n) or a < prev:
                raise ValueError(f"invalid snap interval {(a, b)} for {n} samples")
            prev = b

    @property
    def labels(self) -> np.ndarray:
        lab = np.zeros(self.velocities.shape[0], dtype=np.int64)
        for a, b in self.snap_intervals:
            lab[a:b] = 1
        return lab


TRACE_KINDS = ("snap", "no_snap", "distractor")
SPEED_RANGE = (0.02, 0.10)


def _approach_ref(t, t_contact, speed, depth, ramps):
    """Scripted axial reference: constant-speed approach with optional speed changes."""
    x0 = -speed * t_contact
    x, v = x0, speed
    tau = 0.0
    for t_r, factor in ramps:
        if t <= t_r:
            break
        x += v * (t_r - tau)
        tau = t_r
        v = speed * factor
    x += v * (t - tau)
    if x >= depth:
        return depth, 0.0
    return x, v


def synth_trace(
    scenario: SnapScenario,
    duration_s: float,
    insertion_speed: float,
    seed: int,
    kind: str = "snap",
    depth: float | None = None,
) -> LabeledTrace:
    """Run the plant under a scripted approach and record 100 Hz joint velocities."""
    if kind not in TRACE_KINDS:
        raise ValueError(f"unknown trace kind {kind!r}")
    lo, hi = SPEED_RANGE
    if not lo - 1e-12 <= insertion_speed <= hi + 1e-12:
        raise ValueError(f"insertion speed {insertion_speed} outside [{lo}, {hi}] m/s")
    rng = RngStream(seed)
    prof = scenario.profile
    t_contact = float(rng.uniform(0.15, 0.45 * duration_s))
    ramps: list[tuple[float, float]] = []
    if depth is None:
        if kind == "snap":
            depth = prof.d_detent + 4e-3
        else:
            depth = float(rng.uniform(0.2, 0.7)) * prof.d_crit
    if kind == "distractor":
        t_r = float(rng.uniform(0.1, 0.8 * duration_s))
        ramps.append((t_r, float(rng.choice([0.25, 0.5, 1.8, 2.5]))))
        if rng.uniform() < 0.5:
            t_r2 = t_r + float(rng.uniform(0.05, 0.3))
            ramps.append((t_r2, float(rng.uniform(0.2, 2.5))))
        # ramps happen away from contact unless the approach is slowed down
        t_contact = float(rng.uniform(0.4, 1.0)) * duration_s
    noise = rng.child(1)

    k_s = 4000.0
    d_s = 2.0 * math.sqrt(k_s * scenario.m_eff)
    x_start, _ = _approach_ref(0.0, t_contact, insertion_speed, depth, ramps)
    s = PlantState(d=x_start, v=insertion_speed, m_eff=scenario.m_eff)
    n_samples = int(round(duration_s * SAMPLE_RATE))
    sub = int(round(1.0 / (SAMPLE_RATE * INNER_DT)))
    vel = np.empty((n_samples, scenario.n_joints))
    for k in range(n_samples):
        ts = None if s.t_engage is None else s.t - s.t_engage
        vel[k] = joint_signature(s.v, scenario, noise, ts)
        for _ in range(sub):
            x_ref, v_ref = _approach_ref(s.t, t_contact, insertion_speed, depth, ramps)
            f = k_s * (x_ref - s.d) + d_s * (v_ref - s.v)
            s = plant_step(s, f, prof)
    intervals = []
    if s.t_engage is not None and s.t_engage < (n_samples - 1) / SAMPLE_RATE:
        start = int(math.ceil(s.t_engage * SAMPLE_RATE - 1e-9))
        length = max(1, int(math.ceil(scenario.transient.duration_s * SAMPLE_RATE)))
        intervals.append((start, min(start + length, n_samples)))
    return LabeledTrace(vel, intervals, scenario.name, seed, kind)


def write_trace_csv(path_or_buf, trace: LabeledTrace) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        n = trace.velocities.shape[1]
        w = csv.writer(fh, lineterminator="\n")
        fh.write(f"# format_version={FORMAT_VERSION} scenario={trace.scenario} seed={trace.seed} kind={trace.kind}\n")
        w.writerow(["time_s", *[f"v_joint_{j + 1}" for j in range(n)], "label"])
        lab = trace.labels
        for k in range(trace.velocities.shape[0]):
            w.writerow([f"{k / trace.sample_rate:.2f}", *[repr(float(v)) for v in trace.velocities[k]], int(lab[k])])
    finally:
        if own:
            fh.close()


def read_trace_csv(path) -> LabeledTrace:
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            k, _, v = tok.partition("=")
            meta[k] = v
        lines = lines[1:]
    if int(meta.get("format_version", FORMAT_VERSION)) != FORMAT_VERSION:
        raise ValueError(f"unsupported trace format_version {meta['format_version']}")
    rows = list(csv.reader(io.StringIO("\n".join(lines))))
    header, body = rows[0], rows[1:]
    n = len(header) - 2
    vel = np.array([[float(x) for x in r[1 : 1 + n]] for r in body]).reshape(len(body), n)
    lab = np.array([int(r[-1]) for r in body], dtype=np.int64)
    intervals = _runs(lab)
    time = [float(r[0]) for r in body]
    rate = 1.0 / (time[1] - time[0]) if len(time) > 1 else SAMPLE_RATE
    return LabeledTrace(
        vel, intervals, meta.get("scenario", "imported"), int(meta.get("seed", 0)),
        meta.get("kind", "snap" if intervals else "no_snap"), round(rate, 6),
    )


def _runs(lab: np.ndarray) -> list[tuple[int, int]]:
    out, k = [], 0
    n = lab.size
    while k < n:
        if lab[k]:
            j = k
            while j < n and lab[j]:
                j += 1
            out.append((k, j))
            k = j
        else:
            k += 1
    return out


# --------------------------------------------------------------------------
# windowed dataset

@dataclass(frozen=True)
class DatasetConfig:
    n_traces: int = 500
    duration_s: float = 2.0
    snap_fraction: float = 0.4
    distractor_fraction: float = 0.3
    window: int = 50
    stride: int = 5
    min_overlap: float = 0.4
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    presets: tuple[str, ...] = ("marker_cap", "highlighter_cap", "bottle_lid", "type_c", "lens_frame", "e_stop")


@dataclass
class TraceSpec:
    index: int
    scenario: str
    kind: str
    speed: float
    seed: int
    split: str = "train"


def plan_corpus(config: DatasetConfig, rng: RngStream) -> list[TraceSpec]:
    """Assign scenario, kind, speed, per-trace seed and split to every trace."""
    if config.n_traces <= 0:
        raise ValueError("empty corpus")
    specs = []
    for i in range(config.n_traces):
        r = rng.child(i)
        u = float(r.uniform())
        if u < config.snap_fraction:
            kind = "snap"
        elif u < config.snap_fraction + config.distractor_fraction:
            kind = "distractor"
        else:
            kind = "no_snap"
        specs.append(TraceSpec(
            index=i,
            scenario=config.presets[i % len(config.presets)],
            kind=kind,
            speed=float(r.uniform(*SPEED_RANGE)),
            seed=int(r.integers(0, 2 ** 31 - 1)),
        ))
    n_train = int(round(config.split[0] * config.n_traces))
    n_val = int(round(config.split[1] * config.n_traces))
    order = rng.child(10 ** 6).permutation(config.n_traces)
    for rank, idx in enumerate(order):
        specs[idx].split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return specs


def generate_traces(specs: Sequence[TraceSpec], config: DatasetConfig, presets=None) -> list[LabeledTrace]:
    presets = presets or default_presets()
    return [synth_trace(presets[s.scenario], config.duration_s, s.speed, s.seed, s.kind) for s in specs]


def window_label(start: int, window: int, intervals, min_overlap: float) -> int:
    for a, b in intervals:
        inside = max(0, min(b, start + window) - max(a, start))
        if inside >= min_overlap * (b - a) - 1e-12 and inside > 0:
            return 1
    return 0


def slice_windows(trace: LabeledTrace, window: int, stride: int, min_overlap: float):
    n = trace.velocities.shape[0]
    starts = list(range(0, n - window + 1, stride))
    X = np.stack([trace.velocities[s : s + window] for s in starts]) if starts else np.zeros((0, window, trace.velocities.shape[1]))
    y = np.array([window_label(s, window, trace.snap_intervals, min_overlap) for s in starts], dtype=np.int64)
    return X, y, starts


@dataclass
class Dataset:
    X: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    specs: list[TraceSpec]
    config: DatasetConfig

    def positive_fraction(self, split: str | None = None) -> float:
        ys = [self.y[s] for s in (("train", "val", "test") if split is None else (split,))]
        y = np.concatenate(ys)
        return float(y.mean()) if y.size else 0.0


def normalization_stats(traces: Sequence[LabeledTrace]) -> tuple[np.ndarray, np.ndarray]:
    allv = np.concatenate([t.velocities for t in traces], axis=0)
    mean = allv.mean(axis=0)
    std = allv.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def make_dataset(config: DatasetConfig, rng: RngStream, traces=None, specs=None) -> Dataset:
    """Window, label, split-by-trace and z-score a synthetic corpus."""
    if specs is None:
        specs = plan_corpus(config, rng)
    if traces is None:
        traces = generate_traces(specs, config)
    if not traces:
        raise ValueError("empty corpus")
    train_traces = [t for t, s in zip(traces, specs) if s.split == "train"]
    mean, std = normalization_stats(train_traces or traces)
    X, y = {}, {}
    for split in ("train", "val", "test"):
        xs, ys = [], []
        for t, s in zip(traces, specs):
            if s.split != split:
                continue
            xw, yw, _ = slice_windows(t, config.window, config.stride, config.min_overlap)
            xs.append(xw)
            ys.append(yw)
        n_j = traces[0].velocities.shape[1]
        X[split] = ((np.concatenate(xs) - mean) / std) if xs else np.zeros((0, config.window, n_j))
        y[split] = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    return Dataset(X, y, mean, std, list(specs), config)


def write_manifest(path, specs: Sequence[TraceSpec], config: DatasetConfig, seed: int) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"format_version={FORMAT_VERSION}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"n_traces={config.n_traces}\n")
        fh.write(f"duration_s={config.duration_s!r}\n")
        fh.write(f"window={config.window}\nstride={config.stride}\nmin_overlap={config.min_overlap!r}\n")
        for s in specs:
            fh.write(
                f"trace.{s.index:04d}=scenario:{s.scenario},kind:{s.kind},speed:{s.speed!r},"
                f"seed:{s.seed},split:{s.split}\n"
            )


def read_manifest(path) -> tuple[dict[str, str], list[TraceSpec]]:
    meta, specs = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            if k.startswith("trace."):
                fields = dict(item.split(":", 1) for item in v.split(","))
                specs.append(TraceSpec(
                    int(k.split(".")[1]), fields["scenario"], fields["kind"],
                    float(fields["speed"]), int(fields["seed"]), fields["split"],
                ))
            else:
                meta[k] = v
    if int(meta.get("format_version", "0")) != FORMAT_VERSION:
        raise ValueError("unsupported manifest format_version")
    return meta, specs
