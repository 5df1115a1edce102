"""Experiment building blocks shared by the CLI and the acceptance checks."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngStream
from ..plant import (
    SPEED_RANGE,
    Dataset,
    LabeledTrace,
    SnapScenario,
    TraceSpec,
    default_presets,
    generate_traces,
    joint_signature,
    make_dataset,
    plan_corpus,
    read_manifest,
    read_trace_csv,
    synth_trace,
    write_manifest,
    write_trace_csv,
)
from ..snapnet.io import load_checkpoint, save_checkpoint
from ..snapnet.model import ModelConfig
from ..snapnet.streaming import StreamingDetector, streaming_detect
from ..snapnet.training import (
    DetectionMetrics,
    DetectorThreshold,
    LearningCurves,
    calibrate_threshold,
    evaluate,
    train,
)
from .config import ExperimentConfig
from .trial import TrialRecord, TrialSetup, run_trial

log = logging.getLogger("snapfit")

POSITIVE_BAND = (0.05, 0.20)
# a streamed detection counts as a hit when it lands this soon after onset
HIT_WINDOW_S = 0.3


# --------------------------------------------------------------------------
# corpus

def trace_filename(spec: TraceSpec) -> str:
    return f"trace_{spec.index:04d}.csv"


def build_corpus(cfg: ExperimentConfig) -> tuple[list[TraceSpec], list[LabeledTrace]]:
    dcfg = cfg.dataset_config()
    specs = plan_corpus(dcfg, RngStream(cfg.seed))
    return specs, generate_traces(specs, dcfg)


def write_corpus(cfg: ExperimentConfig, data_dir: str) -> tuple[list[TraceSpec], list[LabeledTrace]]:
    specs, traces = build_corpus(cfg)
    os.makedirs(os.path.join(data_dir, "traces"), exist_ok=True)
    for s, t in zip(specs, traces):
        write_trace_csv(os.path.join(data_dir, "traces", trace_filename(s)), t)
    write_manifest(os.path.join(data_dir, "manifest.txt"), specs, cfg.dataset_config(), cfg.seed)
    return specs, traces


def load_corpus(cfg: ExperimentConfig, data_dir: str) -> Dataset:
    """Rebuild the windowed dataset from trace files on disk."""
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no dataset at {data_dir} (run gen-data first)")
    meta, specs = read_manifest(manifest)
    traces = [read_trace_csv(os.path.join(data_dir, "traces", trace_filename(s))) for s in specs]
    return make_dataset(cfg.dataset_config(), RngStream(cfg.seed), traces, specs)


def summary_rows(ds: Dataset) -> list[list]:
    rows = []
    for split in ("train", "val", "test"):
        y = ds.y[split]
        n_tr = sum(1 for s in ds.specs if s.split == split)
        rows.append([split, n_tr, int(y.size), int(y.sum()), repr(ds.positive_fraction(split))])
    y = np.concatenate([ds.y[s] for s in ("train", "val", "test")])
    rows.append(["all", len(ds.specs), int(y.size), int(y.sum()), repr(ds.positive_fraction())])
    return rows


# --------------------------------------------------------------------------
# detector training and evaluation

@dataclass
class TrainedDetector:
    params: dict
    config: ModelConfig
    curves: LearningCurves
    threshold: DetectorThreshold
    mean: np.ndarray
    std: np.ndarray

    def streaming(self, sample_rate: float = 100.0) -> StreamingDetector:
        return StreamingDetector(self.params, self.config, self.threshold, self.mean, self.std, sample_rate)

    def save(self, path: str, meta: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.config, self.mean, self.std, self.threshold, meta)


def train_variant(cfg: ExperimentConfig, ds: Dataset, variant: str, progress=None) -> TrainedDetector:
    mcfg = cfg.model_config(variant)
    params, curves = train(ds.X["train"], ds.y["train"], mcfg, cfg.train_config(),
                           ds.X["val"], ds.y["val"], progress=progress)
    th = calibrate_threshold(params, ds.X["val"], ds.y["val"], mcfg, cfg.refractory)
    return TrainedDetector(params, mcfg, curves, th, ds.mean, ds.std)


def held_out_metrics(det: TrainedDetector, ds: Dataset) -> DetectionMetrics:
    return evaluate(det.params, det.threshold.tau, ds.X["test"], ds.y["test"], det.config)


def load_detector(path: str) -> StreamingDetector:
    ck = load_checkpoint(path)
    if ck.threshold is None:
        raise ValueError(f"{path}: checkpoint has no calibrated threshold")
    return StreamingDetector(ck.params, ck.config, ck.threshold, ck.mean, ck.std)


# --------------------------------------------------------------------------
# closed-loop trials

def trial_setup(cfg: ExperimentConfig) -> TrialSetup:
    return TrialSetup(
        impedance=cfg.impedance_params(),
        overtravel_m=cfg.overtravel_m,
        axial_tolerance_std_m=cfg.axial_tolerance_std_m,
        lateral_offset_std_m=cfg.lateral_offset_std_m,
        guide_stiffness=cfg.guide_stiffness,
        chamfer_m=cfg.chamfer_m,
        jam_force=cfg.jam_force,
        jam_hold_s=cfg.jam_hold_s,
        settle_s=cfg.settle_s,
        dt=cfg.dt,
    )


def scenario_for(name: str) -> SnapScenario:
    presets = default_presets()
    if name not in presets:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(presets)}")
    return presets[name]


def trial_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.trial_seed0 + i for i in range(cfg.n_trials)]


def run_trials(cfg: ExperimentConfig, kind: str, detector: StreamingDetector | None,
               scenario: str | None = None, logs: dict | None = None) -> list[TrialRecord]:
    """Paired-seed trials in seed order. ``logs`` collects controller logs by seed."""
    sc = scenario_for(scenario or cfg.scenario)
    setup = trial_setup(cfg)
    out = []
    for seed in trial_seeds(cfg):
        rows = [] if logs is not None else None
        out.append(run_trial(sc, kind, detector, seed, setup, rows))
        if logs is not None:
            logs[seed] = rows
    return out


@dataclass
class SchemeSummary:
    scheme: str
    successes: int
    n: int
    f_max_mean: float
    f_max_std: float

    def row(self) -> list[str]:
        return [self.scheme, f"{self.successes}/{self.n}", repr(self.f_max_mean), repr(self.f_max_std)]


def summarize(kind: str, records: list[TrialRecord]) -> SchemeSummary:
    peaks = np.array([r.peak_force for r in records], dtype=np.float64)
    return SchemeSummary(kind, sum(r.success for r in records), len(records),
                         float(np.mean(peaks)), float(np.std(peaks)))


# --------------------------------------------------------------------------
# streaming checks

@dataclass
class StreamingReport:
    n_seeds: int
    hits: dict[str, int] = field(default_factory=dict)
    late_or_early: dict[str, int] = field(default_factory=dict)
    negative_false: int = 0
    negative_traces: int = 0
    contact_negative_false: int = 0
    max_tick_s: float = 0.0
    ticks: int = 0


def constant_velocity_stream(sc: SnapScenario, n: int, rng: RngStream) -> np.ndarray:
    """Spike-free stream: constant approach speed plus sensor noise."""
    v = float(rng.uniform(*SPEED_RANGE))
    return np.stack([joint_signature(v, sc, rng) for _ in range(n)])


def streaming_check(cfg: ExperimentConfig, detector: StreamingDetector,
                    contact_negatives: bool = True) -> StreamingReport:
    """Replay fresh seeded streams through the online detector.

    Snap streams come from every preset; a hit is a detection within
    ``HIT_WINDOW_S`` of the labeled onset. Negatives are constant-velocity
    streams. Contact traces without a snap are replayed as an extra
    diagnostic and only counted.
    """
    presets = default_presets()
    root = RngStream(cfg.stream_seed0)
    n = int(round(cfg.duration_s * 100))
    rep = StreamingReport(cfg.stream_seeds)
    max_tick, ticks = 0.0, 0
    for j, (name, sc) in enumerate(presets.items()):
        hits = other = 0
        for s in range(cfg.stream_seeds):
            r = root.child(j, s)
            tr = synth_trace(sc, cfg.duration_s, float(r.uniform(*SPEED_RANGE)), int(r.integers(0, 2 ** 31 - 1)), "snap")
            times = streaming_detect(tr.velocities, detector)
            max_tick, ticks = max(max_tick, detector.max_tick_seconds), ticks + len(detector.tick_seconds)
            onset = tr.snap_intervals[0][0] / tr.sample_rate if tr.snap_intervals else None
            good = [t for t in times if onset is not None and onset <= t <= onset + HIT_WINDOW_S]
            hits += bool(good)
            other += len(times) - len(good)
        rep.hits[name] = hits
        rep.late_or_early[name] = other
    names = list(presets)
    for i in range(cfg.negative_traces):
        r = root.child(len(names), i)
        v = constant_velocity_stream(presets[names[i % len(names)]], n, r)
        rep.negative_false += len(streaming_detect(v, detector))
        max_tick, ticks = max(max_tick, detector.max_tick_seconds), ticks + len(detector.tick_seconds)
    rep.negative_traces = cfg.negative_traces
    if contact_negatives:
        for i in range(cfg.negative_traces):
            r = root.child(len(names) + 1, i)
            kind = ("no_snap", "distractor")[i % 2]
            tr = synth_trace(presets[names[i % len(names)]], cfg.duration_s, float(r.uniform(*SPEED_RANGE)),
                             int(r.integers(0, 2 ** 31 - 1)), kind)
            rep.contact_negative_false += len(streaming_detect(tr.velocities, detector))
    rep.max_tick_s, rep.ticks = max_tick, ticks
    return rep
