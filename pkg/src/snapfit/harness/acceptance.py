"""Acceptance checks, shared by ``snapfit selfcheck`` and the test suite.

Each check returns a :class:`CheckResult` with the measured values in
``detail`` and its own wall-clock time; a runtime budget is part of the
pass condition where one applies. Checks 7, 8 and 10 share one fast-profile
training run, which is cached per process.
"""

from __future__ import annotations

import filecmp
import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from ..coordinator import (
    PhaseParams,
    executor_rates,
    lyapunov_phase,
    make_executor,
    self_dynamics,
    coupling_dynamics,
    step_executor,
    tracking_error_bound,
)
from ..numerics import RngStream, finite_diff_grad, rk4_step
from ..snapnet.loss import focal_loss
from ..snapnet.model import ModelConfig, VARIANTS, attention_pool, flatten, init_params, loss_and_grad, unflatten
from ..vic import GainState, ImpedanceParams, damping_at, on_snap_detected, stiffness_at
from . import pipeline as pl
from .config import ExperimentConfig, make_config


@dataclass
class CheckResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.title}: {self.detail} ({self.seconds:.1f} s)"


def _timed(number, title, budget_s, fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    dt = time.perf_counter() - t0
    if budget_s is not None:
        within = dt < budget_s
        detail += f"; runtime {dt:.1f} s {'<' if within else '>='} {budget_s:.0f} s"
        ok = ok and within
    return CheckResult(number, title, bool(ok), detail, dt)


# --------------------------------------------------------------------------
# 1-3: coordination guarantees

def check_phase_attractor(n_pairs: int = 100, seed: int = 1, dt: float = 1e-3) -> tuple[bool, str]:
    pp = PhaseParams()
    r = RngStream(seed)
    z = r.uniform(0.0, 1.0, n_pairs)
    z_d = r.uniform(0.0, 1.0, n_pairs)
    f = lambda s: self_dynamics(s, z_d, pp)
    V = lyapunov_phase(z - z_d, pp)
    worst_rise = 0.0
    for _ in range(int(round(20.0 / pp.k1 / dt))):
        z = rk4_step(f, z, dt)
        V_new = lyapunov_phase(z - z_d, pp)
        worst_rise = max(worst_rise, float(np.max(V_new - V)))
        V = V_new
    err = float(np.max(np.abs(z - z_d)))
    ok = err < 1e-4 and worst_rise <= 1e-9
    return ok, f"max |z-z_d| at 20/k1 = {err:.2e}, max V increase per step = {worst_rise:.1e}"


def _batch_energy(z):
    return 0.5 * np.sum((z - z.mean(axis=-1, keepdims=True)) ** 2, axis=-1)


def check_consensus(seed: int = 2, dt: float = 1e-3, trials: int = 30) -> tuple[bool, str]:
    pp = PhaseParams()
    r = RngStream(seed)
    worst_cons = worst_set = worst_rise = 0.0
    for n in (2, 3, 5):
        # a batch of independent groups, each with its own shared setpoint
        z = r.uniform(0.0, 1.0, (trials, n))
        zd = r.uniform(0.0, 1.0, (trials, 1))

        def f(s):
            return self_dynamics(s, zd, pp) + coupling_dynamics(s, s.mean(axis=1, keepdims=True), pp)

        W = _batch_energy(z)
        for _ in range(int(round(20.0 / pp.k1 / dt))):
            z = rk4_step(f, z, dt)
            W_new = _batch_energy(z)
            worst_rise = max(worst_rise, float(np.max(W_new - W)))
            W = W_new
        worst_cons = max(worst_cons, float(np.max(np.abs(z - z.mean(axis=1, keepdims=True)))))
        worst_set = max(worst_set, float(np.max(np.abs(z - zd))))
    ok = worst_cons < 1e-4 and worst_set < 1e-4 and worst_rise <= 1e-9
    return ok, (f"N in (2,3,5), {trials} groups each: max consensus deviation {worst_cons:.2e}, "
                f"max setpoint error {worst_set:.2e}, max W increase per step {worst_rise:.1e}")


def executor_bound_margin(ex, dt: float, t_max: float = 30.0, settle: float = 3.0):
    """Walk one executor run and return (worst bound violation, settled-decay ok).

    The bound restarts at every phase handoff with that segment's initial
    error, length and running sup of the phase rate.
    """
    worst = -math.inf
    state = {}

    def restart(ex):
        for i in range(ex.n_arms):
            seg = ex.segment(i)
            if seg is None:
                state[i] = None
                continue
            state[i] = dict(t0=ex.t, e0=float(np.sum(ex.tracking_error(i) ** 2)), L=seg.length, sup=0.0)

    restart(ex)
    theta = ex.theta
    a_min = ex.tracker_params.alpha_min
    t_done, e_done = None, None
    decay_ok = True
    while ex.t < t_max:
        zdot = executor_rates(ex)[0]
        for i, s in state.items():
            if s is not None:
                s["sup"] = max(s["sup"], abs(float(zdot[i])))
        ex = step_executor(ex, dt)
        if ex.theta != theta:
            theta = ex.theta
            restart(ex)
            continue
        for i, s in state.items():
            if s is None:
                continue
            e2 = float(np.sum(ex.tracking_error(i) ** 2))
            b = tracking_error_bound(s["e0"], ex.t - s["t0"], s["L"], s["sup"], a_min)
            worst = max(worst, e2 - b)
        if ex.done and t_done is None:
            t_done = ex.t
            e_done = [float(np.linalg.norm(ex.tracking_error(i))) for i in range(ex.n_arms)]
        if t_done is not None:
            # once the phase has settled, each error contracts at least at rate alpha_min
            for i in range(ex.n_arms):
                e = float(np.linalg.norm(ex.tracking_error(i)))
                decay_ok &= e <= e_done[i] * math.exp(-a_min * (ex.t - t_done)) + 1e-12
            if ex.t >= t_done + settle:
                break
    return worst, decay_ok and t_done is not None


def check_tracking_bound(n_runs: int = 50, seed: int = 3, dt: float = 5e-3) -> tuple[bool, str]:
    r = RngStream(seed)
    worst, decay = -math.inf, True
    from ..coordinator import default_keyframes
    kf = default_keyframes()
    for k in range(n_runs):
        p0 = kf[:, 0, :] + r.child(k).normal(0.0, 0.02, size=(kf.shape[0], 3))
        w, d = executor_bound_margin(make_executor(p0=p0), dt)
        worst, decay = max(worst, w), decay and d
    ok = worst <= 1e-9 and decay
    return ok, f"{n_runs} runs: max(|e|^2 - bound) = {worst:.2e}, post-settle exponential decay {'holds' if decay else 'violated'}"


# --------------------------------------------------------------------------
# 4-6: learning components

def check_gradients(n_seeds: int = 20, h: float = 1e-5) -> tuple[bool, str]:
    # h near eps**(1/3); much smaller steps bury the tiny attention-bias
    # gradients in roundoff
    worst = 0.0
    for variant in VARIANTS:
        cfg = ModelConfig(T=10, N=2, k=5, d_c=3, d_h=4, variant=variant)
        for s in range(n_seeds):
            r = RngStream(4000 + s)
            params = init_params(cfg, r.child(0))
            # non-zero biases so every group carries a gradient
            params = {k: v + 0.1 * r.child(1, i).normal(size=np.shape(v)) for i, (k, v) in enumerate(sorted(params.items()))}
            X = r.child(2).normal(size=(3, 10, 2))
            y = np.array([1.0, 0.0, 1.0])
            _, g = loss_and_grad(X, y, params, cfg)

            def f(vec):
                return loss_and_grad(X, y, unflatten(vec, params), cfg)[0]

            num = unflatten(finite_diff_grad(f, flatten(params), h), params)
            for k in params:
                a, b = np.ravel(g[k]), np.ravel(num[k])
                scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)
                worst = max(worst, float(np.max(np.abs(a - b))) / scale)
    return worst < 1e-5, f"max relative error {worst:.2e} over {n_seeds} seeds x {len(VARIANTS)} variants, all groups"


def check_focal(seed: int = 5) -> tuple[bool, str]:
    r = RngStream(seed)
    y = r.integers(0, 2, 1000).astype(np.float64)
    p = r.uniform(1e-6, 1.0 - 1e-6, 1000)
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    gap = float(np.max(np.abs(focal_loss(y, p, 0.5, 0.0) - 0.5 * bce)))
    v = float(focal_loss(1.0, 0.5, 0.25, 2.0))
    ok = gap < 1e-12 and abs(v - 0.043322) < 1e-6
    return ok, f"max |FL(g=0,a=.5) - BCE/2| = {gap:.1e}; FL(1, 0.5) = {v:.7f}"


def check_attention(seed: int = 6) -> tuple[bool, str]:
    r = RngStream(seed)
    worst_sum = worst_perm = 0.0
    for i in range(100):
        rr = r.child(i)
        N, E = int(rr.integers(2, 9)), int(rr.integers(1, 9))
        params = {"att_W": rr.normal(size=(E, E)), "att_b": rr.normal(size=E), "att_u": rr.normal(size=E)}
        h = rr.normal(size=(N, E))
        pooled, alpha = attention_pool(h, params)
        perm = rr.permutation(N)
        pooled_p, _ = attention_pool(h[perm], params)
        worst_sum = max(worst_sum, abs(float(alpha.sum()) - 1.0))
        worst_perm = max(worst_perm, float(np.max(np.abs(pooled - pooled_p))))
    ok = worst_sum < 1e-12 and worst_perm < 1e-12
    return ok, f"max |sum(alpha)-1| = {worst_sum:.1e}, max permutation change = {worst_perm:.1e}"


# --------------------------------------------------------------------------
# 7, 8, 10: fast-profile detector

@dataclass
class FastRun:
    cfg: ExperimentConfig
    detectors: dict
    metrics: dict
    seconds: float


_FAST: dict[int, FastRun] = {}


def fast_run(seed: int = 0) -> FastRun:
    """Fast-profile corpus plus every variant trained on it (cached)."""
    if seed not in _FAST:
        cfg = make_config({"seed": seed}, "fast")
        t0 = time.perf_counter()
        specs, traces = pl.build_corpus(cfg)
        from ..plant import make_dataset
        ds = make_dataset(cfg.dataset_config(), RngStream(cfg.seed), traces, specs)
        dets, mets = {}, {}
        for v in cfg.variants:
            dets[v] = pl.train_variant(cfg, ds, v)
            mets[v] = pl.held_out_metrics(dets[v], ds)
        _FAST[seed] = FastRun(cfg, dets, mets, time.perf_counter() - t0)
    return _FAST[seed]


def check_detector_quality() -> tuple[bool, str, float]:
    fr = fast_run()
    f1 = {v: m.f1 for v, m in fr.metrics.items()}
    full = f1["full"]
    ordered = all(full >= f1[v] - 1e-12 for v in f1)
    within = fr.seconds < 300.0
    ok = full >= 0.95 and ordered and within
    table = ", ".join(f"{v} {f:.4f}" for v, f in f1.items())
    return ok, (f"F1 {table}; full >= 0.95: {full >= 0.95}; full >= every ablation: {ordered}; "
                f"runtime {fr.seconds:.1f} s {'<' if within else '>='} 300 s"), fr.seconds


def check_streaming() -> tuple[bool, str]:
    fr = fast_run()
    det = fr.detectors["full"].streaming()
    rep = pl.streaming_check(fr.cfg, det)
    floors = {name: (12 if name == "type_c" else 14) for name in rep.hits}
    hits_ok = all(rep.hits[n] >= floors[n] for n in rep.hits)
    ok = hits_ok and rep.negative_false <= 2 and rep.max_tick_s < 0.010
    hits = ", ".join(f"{n} {h}/{rep.n_seeds}" for n, h in rep.hits.items())
    return ok, (f"hits {hits}; false detections on {rep.negative_traces} constant-velocity negatives: "
                f"{rep.negative_false}; max tick {rep.max_tick_s * 1e3:.2f} ms over {rep.ticks} ticks; "
                f"(diagnostic) detections on contact-only negatives: {rep.contact_negative_false}")


def check_schemes() -> tuple[bool, str]:
    fr = fast_run()
    cfg = make_config({"seed": fr.cfg.seed}, "full")
    det = fr.detectors["full"].streaming()
    summ = {}
    for kind in cfg.schemes:
        summ[kind] = pl.summarize(kind, pl.run_trials(cfg, kind, det if kind == "event_vic" else None))
    vic, fix, pos = summ["event_vic"], summ["fixed_impedance"], summ["position"]
    ratio = vic.f_max_mean / fix.f_max_mean
    ok = (vic.successes == vic.n == cfg.n_trials and vic.successes > fix.successes > pos.successes
          and ratio <= 0.75)
    rates = ", ".join(f"{k} {s.successes}/{s.n} F_max {s.f_max_mean:.2f}+-{s.f_max_std:.2f} N" for k, s in summ.items())
    return ok, f"{rates}; VIC/fixed peak ratio {ratio:.3f}"


# --------------------------------------------------------------------------
# 9: VIC schedule

def check_vic() -> tuple[bool, str]:
    p = ImpedanceParams()
    t_s = 1.234
    jump = abs(stiffness_at(t_s, t_s, p) - p.K0)
    left = abs(stiffness_at(t_s - 1e-12, t_s, p) - p.K0)
    limit = abs(stiffness_at(t_s + 1.0, t_s, p) - p.Kf) / p.Kf
    g = GainState(p)
    on_snap_detected(g, t_s)
    worst_d, lateral = 0.0, True
    for t in np.linspace(0.0, 3.0, 301):
        K = g.stiffness(t)
        D = damping_at(K, p.alpha_d)
        worst_d = max(worst_d, float(np.max(np.abs(D - p.alpha_d * np.sqrt(K)))))
        lat = [i for i in range(3) if i != p.insertion_axis]
        lateral &= bool(np.all(K[lat] == p.K0))
    ok = jump < 1e-9 and left < 1e-9 and limit < 1e-3 and worst_d < 1e-12 and lateral
    return ok, (f"|K(t_s)-K0| = {jump:.1e}; |K(t_s+1)-Kf|/Kf = {limit:.2e}; "
                f"max |D - a_d sqrt(K)| = {worst_d:.1e}; lateral gains fixed: {lateral}")


# --------------------------------------------------------------------------
# 11: determinism

TINY = """\
n_traces=60
epochs=2
variants=full,no_gru
n_trials=2
"""

COMMAND_SEQUENCE = (
    ["gen-data"], ["train", "--all-variants"], ["eval"], ["trial"],
    ["trial", "--scheme", "fixed_impedance"], ["compare-schemes"], ["plot-data"],
)


def _run_all(root: str, cfg_path: str) -> list[int]:
    from .cli import main
    codes = []
    for cmd in COMMAND_SEQUENCE:
        codes.append(main(cmd + ["--config", cfg_path, "--seed", "7", "--run-dir", root, "--quiet"]))
    return codes


def check_determinism() -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = os.path.join(tmp, "tiny.cfg")
        with open(cfg_path, "w") as fh:
            fh.write(TINY)
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        codes = _run_all(a, cfg_path) + _run_all(b, cfg_path)
        files = sorted(
            os.path.relpath(os.path.join(d, f), a)
            for d, _, fs in os.walk(a) for f in fs if f.endswith(".csv")
        )
        diff = [f for f in files if not filecmp.cmp(os.path.join(a, f), os.path.join(b, f), shallow=False)]
    ok = not diff and all(c == 0 for c in codes) and len(files) > 0
    return ok, (f"{len(COMMAND_SEQUENCE)} commands run twice (exit codes {sorted(set(codes))}); "
                f"{len(files)} CSV files compared, {len(diff)} differ" + (f": {diff[:5]}" if diff else ""))


# --------------------------------------------------------------------------

CRITERIA = {
    1: ("phase attractor", 10.0, check_phase_attractor),
    2: ("phase consensus", 10.0, check_consensus),
    3: ("tracking-error bound", 30.0, check_tracking_bound),
    4: ("gradient oracle", 60.0, check_gradients),
    5: ("focal-loss identities", None, check_focal),
    6: ("attention properties", None, check_attention),
    7: ("detector quality (fast profile)", None, None),
    8: ("streaming detection", 120.0, check_streaming),
    9: ("VIC schedule", None, check_vic),
    10: ("scheme comparison (lens frame)", 300.0, check_schemes),
    11: ("determinism", None, check_determinism),
}


def run_check(number: int, cfg: ExperimentConfig | None = None) -> CheckResult:
    title, budget, fn = CRITERIA[number]
    if number == 7:
        t0 = time.perf_counter()
        ok, detail, _ = check_detector_quality()
        return CheckResult(7, title, ok, detail, time.perf_counter() - t0)
    return _timed(number, title, budget, fn)


def run_checks(numbers=None, cfg: ExperimentConfig | None = None) -> list[CheckResult]:
    return [run_check(n, cfg) for n in (numbers or sorted(CRITERIA))]
