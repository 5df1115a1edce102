"""Command-line entry point.

Every command reads the same flat config (``--config``), takes ``--seed``
and ``--fast`` overrides and writes under one run directory. Each command
leaves ``manifests/<command>.json`` listing its inputs and outputs with
sha256 hashes plus the package versions, so a rerun can be diffed
byte-for-byte.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from .. import __version__
from ..coordinator import make_executor, run_executor, write_trajectory_csv
from ..plant import read_trace_csv
from ..snapnet import kernels
from ..snapnet.io import read_curves_csv, read_eval_csv, write_curves_csv, write_eval_csv
from ..snapnet.model import VARIANTS
from ..snapnet.training import TrainingDivergence
from ..vic import CONTROLLER_KINDS
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig, load_config
from .trial import audit_log, write_controller_log, write_trials_csv

log = logging.getLogger("snapfit")

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

COMPARE_COLUMNS = ("scheme", "success", "f_max_mean", "f_max_std")
SUMMARY_COLUMNS = ("split", "traces", "windows", "positives", "positive_fraction")


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_CHECK):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# run directory bookkeeping

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    out = {"snapfit": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "kernels": kernels.BACKEND}
    try:
        import scipy
        out["scipy"] = scipy.__version__
    except ImportError:  # only needed by the compiled kernels
        pass
    return out


class Run:
    """Tracks the files one command reads and writes inside the run directory."""

    def __init__(self, root: str, command: str, cfg: ExperimentConfig, argv: list[str]):
        self.root = root
        self.command = command
        self.cfg = cfg
        self.argv = argv
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        os.makedirs(root, exist_ok=True)

    def path(self, *parts: str) -> str:
        p = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def read(self, path: str) -> str:
        if not os.path.exists(path):
            raise CommandError(f"missing input {os.path.relpath(path, self.root)}", EXIT_MISSING)
        self.inputs.append(path)
        return path

    def wrote(self, path: str) -> str:
        self.outputs.append(path)
        return path

    def finish(self, checks: dict[str, bool]) -> None:
        cfg_path = self.wrote(self.path("config.txt"))
        with open(cfg_path, "w", newline="\n") as fh:
            fh.write(self.cfg.to_text())
        rel = lambda p: os.path.relpath(p, self.root).replace(os.sep, "/")
        doc = {
            "command": self.command,
            "arguments": self.argv,
            "seed": self.cfg.seed,
            "profile": self.cfg.profile,
            "versions": versions(),
            "inputs": {rel(p): sha256_file(p) for p in sorted(set(self.inputs))},
            "outputs": {rel(p): sha256_file(p) for p in sorted(set(self.outputs))},
            "checks": checks,
        }
        with open(self.path("manifests", f"{self.command}.json"), "w", newline="\n") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _write_rows(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fail_unless(checks: dict[str, bool]) -> None:
    bad = [k for k, ok in checks.items() if not ok]
    if bad:
        raise CommandError("self-checks failed: " + ", ".join(bad))


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(run: Run, args) -> dict[str, bool]:
    cfg = run.cfg
    data = run.path("data", "manifest.txt")
    specs, _ = pl.write_corpus(cfg, os.path.dirname(data))
    for s in specs:
        run.wrote(os.path.join(run.root, "data", "traces", pl.trace_filename(s)))
    run.wrote(data)
    ds = pl.load_corpus(cfg, os.path.dirname(data))
    _write_rows(run.wrote(run.path("data", "summary.csv")), SUMMARY_COLUMNS, pl.summary_rows(ds))
    frac = ds.positive_fraction()
    log.info("wrote %d traces, positive window fraction %.3f", len(specs), frac)
    lo, hi = pl.POSITIVE_BAND
    return {"positive_fraction_in_band": lo <= frac <= hi}


def _variants(args, cfg: ExperimentConfig) -> list[str]:
    if getattr(args, "all_variants", False):
        return list(cfg.variants)
    return [args.variant or cfg.variant]


def cmd_train(run: Run, args) -> dict[str, bool]:
    cfg = run.cfg
    run.read(os.path.join(run.root, "data", "manifest.txt"))
    ds = pl.load_corpus(cfg, os.path.join(run.root, "data"))
    checks = {}
    for v in _variants(args, cfg):
        out = os.path.join("models", v)
        t0 = time.perf_counter()

        def progress(epoch, curves, v=v):
            if epoch % 25 == 0 or epoch == cfg.epochs:
                log.info("%s epoch %d train_loss %.5f val_f1 %.4f", v, epoch, curves.train_loss[-1], curves.val_f1[-1])

        try:
            det = pl.train_variant(cfg, ds, v, progress)
        except TrainingDivergence as exc:
            diag = run.wrote(run.path(out, "divergence.txt"))
            with open(diag, "w") as fh:
                fh.write(f"variant={v}\nepoch={exc.epoch}\nbatch={exc.batch}\nmessage={exc}\n")
            raise CommandError(f"{v}: {exc}", EXIT_DIVERGED) from exc
        det.save(run.wrote(run.path(out, "checkpoint.json")), {"variant": v, "seed": cfg.seed})
        write_curves_csv(run.wrote(run.path(out, "curves.csv")), det.curves)
        with open(run.wrote(run.path(out, "threshold.txt")), "w", newline="\n") as fh:
            fh.write(f"tau={det.threshold.tau!r}\nrefractory={det.threshold.refractory}\n")
        log.info("%s trained in %.1f s, tau=%.2f", v, time.perf_counter() - t0, det.threshold.tau)
        checks[f"{v}_curve_rows"] = len(det.curves.epoch) == cfg.epochs
    return checks


def cmd_eval(run: Run, args) -> dict[str, bool]:
    cfg = run.cfg
    run.read(os.path.join(run.root, "data", "manifest.txt"))
    ds = pl.load_corpus(cfg, os.path.join(run.root, "data"))
    rows = []
    for v in cfg.variants:
        ck = os.path.join(run.root, "models", v, "checkpoint.json")
        if not os.path.exists(ck):
            raise CommandError(f"no checkpoint for variant {v!r} (run train --variant {v})", EXIT_MISSING)
        det = pl.load_detector(run.read(ck))
        m = pl.evaluate(det.params, det.threshold.tau, ds.X["test"], ds.y["test"], det.config)
        rows.append((v, m))
        log.info("%-13s tau=%.2f F1=%.4f", v, det.threshold.tau, m.f1)
    path = run.wrote(run.path("eval", "ablation.csv"))
    write_eval_csv(path, rows)
    back = read_eval_csv(path)
    same = all(abs(a.f1 - b.f1) < 1e-12 for (_, a), (_, b) in zip(rows, back))
    return {"metrics_recomputable_from_counts": same}


def _detector(run: Run, cfg: ExperimentConfig, required: bool):
    ck = os.path.join(run.root, "models", cfg.variant, "checkpoint.json")
    if not os.path.exists(ck):
        if required:
            raise CommandError(f"event_vic needs a trained detector at {os.path.relpath(ck, run.root)}", EXIT_MISSING)
        return None
    return pl.load_detector(run.read(ck))


def cmd_trial(run: Run, args) -> dict[str, bool]:
    cfg = run.cfg
    kind = args.scheme or cfg.controller
    scenario = args.scenario or cfg.scenario
    det = _detector(run, cfg, kind == "event_vic")
    logs: dict[int, list] = {}
    recs = pl.run_trials(cfg, kind, det, scenario, logs)
    sub = os.path.join("trials", f"{scenario}-{kind}")
    write_trials_csv(run.wrote(run.path(sub, "trials.csv")), recs)
    sc = pl.scenario_for(scenario)
    audit = True
    for r in recs:
        write_controller_log(run.wrote(run.path(sub, f"log_{r.seed}.csv")), logs[r.seed])
        if r.fault is None:
            audit &= audit_log(logs[r.seed], sc) == r.success
    ex, rows = run_executor(make_executor(), dt=cfg.dt, log_every=10, settle=0.5)
    write_trajectory_csv(run.wrote(run.path("trials", "executor.csv")), rows)
    log.info("%s on %s: %d/%d succeeded", kind, scenario, sum(r.success for r in recs), len(recs))
    return {"success_flags_match_logs": audit}


def cmd_compare_schemes(run: Run, args) -> dict[str, bool]:
    cfg = run.cfg
    det = _detector(run, cfg, "event_vic" in cfg.schemes)
    summaries, records = [], []
    for kind in cfg.schemes:
        recs = pl.run_trials(cfg, kind, det if kind == "event_vic" else None)
        records.extend(recs)
        s = pl.summarize(kind, recs)
        summaries.append(s)
        log.info("%-16s %d/%d  F_max %.2f +- %.2f N", kind, s.successes, s.n, s.f_max_mean, s.f_max_std)
    _write_rows(run.wrote(run.path("compare", "compare_schemes.csv")), COMPARE_COLUMNS, [s.row() for s in summaries])
    write_trials_csv(run.wrote(run.path("compare", "trials.csv")), records)
    seeds = {k: [r.seed for r in records if r.controller == k] for k in cfg.schemes}
    return {"paired_seeds": len({tuple(v) for v in seeds.values()}) == 1}


def _downsample(rows, step: int):
    return rows[::step] if step > 1 else rows


def cmd_plot_data(run: Run, args) -> dict[str, bool]:
    cfg = run.cfg
    checks = {}
    # executor: phase and tracking error per arm, one row per logged time
    exe = run.read(os.path.join(run.root, "trials", "executor.csv"))
    with open(exe, newline="") as fh:
        rows = list(csv.DictReader(fh))
    # a gate crossing logs two rows at one time, under the old and the new phase
    keys = sorted({(r["time_s"], r["theta"]) for r in rows}, key=lambda k: (float(k[0]), int(k[1])))
    by_key = {k: {} for k in keys}
    for r in rows:
        by_key[(r["time_s"], r["theta"])][r["arm_id"]] = r
    arms = sorted({r["arm_id"] for r in rows}, key=int)
    phase_rows, err_rows = [], []
    for t, theta in keys:
        d = by_key[(t, theta)]
        phase_rows.append([t, theta] + [d[a]["z"] for a in arms])
        err_rows.append([t, theta] + [d[a]["err_norm"] for a in arms])
    _write_rows(run.wrote(run.path("plot", "phase.csv")), ["time_s", "theta"] + [f"z_arm{a}" for a in arms], phase_rows)
    _write_rows(run.wrote(run.path("plot", "tracking_error.csv")),
                ["time_s", "theta"] + [f"err_arm{a}" for a in arms], err_rows)
    # each phase's z series ends past the gate
    thetas = [int(r[1]) for r in phase_rows]
    ends = [r for i, r in enumerate(phase_rows) if i + 1 == len(phase_rows) or thetas[i + 1] != thetas[i]]
    checks["phases_advance"] = all(b >= a for a, b in zip(thetas, thetas[1:])) and thetas[-1] == 3
    checks["phase_ends_past_gate"] = all(min(float(z) for z in r[2:]) > 0.99 for r in ends)
    # stiffness schedule from the first event-VIC trial log
    logs = sorted(glob.glob(os.path.join(run.root, "trials", "*-event_vic", "log_*.csv")))
    if not logs:
        raise CommandError("no event_vic trial logs (run trial first)", EXIT_MISSING)
    with open(run.read(logs[0]), newline="") as fh:
        krows = list(csv.DictReader(fh))
    K = np.array([float(r["K_axis"]) for r in krows])
    t = np.array([float(r["time_s"]) for r in krows])
    imp = cfg.impedance_params()
    dt = float(np.median(np.diff(t))) if t.size > 1 else cfg.dt
    bound = imp.lam * (imp.K0 - imp.Kf) * dt * 1.1
    checks["stiffness_continuous"] = bool(np.all(np.abs(np.diff(K)) < bound)) if K.size > 1 else True
    _write_rows(run.wrote(run.path("plot", "stiffness.csv")),
                ["time_s", "K_axis", "D_axis", "contact_force", "triggered"],
                [[r["time_s"], r["K_axis"], r["D_axis"], r["contact_force"], r["triggered"]]
                 for r in _downsample(krows, cfg.downsample)])
    # joint velocities of the first snap trace in the corpus
    traces = sorted(glob.glob(os.path.join(run.root, "data", "traces", "trace_*.csv")))
    for path in traces:
        tr = read_trace_csv(path)
        if tr.snap_intervals:
            run.read(path)
            lab = tr.labels
            _write_rows(run.wrote(run.path("plot", "velocity.csv")),
                        ["time_s"] + [f"v_joint_{j + 1}" for j in range(tr.velocities.shape[1])] + ["label"],
                        [[f"{k / tr.sample_rate:.2f}"] + [repr(float(v)) for v in tr.velocities[k]] + [int(lab[k])]
                         for k in range(tr.velocities.shape[0])])
            break
    # F1 versus epoch for every trained variant
    f1_rows = []
    for v in VARIANTS:
        cp = os.path.join(run.root, "models", v, "curves.csv")
        if os.path.exists(cp):
            c = read_curves_csv(run.read(cp))
            f1_rows += [[v, e, repr(f)] for e, f in zip(c.epoch, c.val_f1)]
    if f1_rows:
        _write_rows(run.wrote(run.path("plot", "f1_curve.csv")), ["variant", "epoch", "val_f1"], f1_rows)
    return checks


def cmd_selfcheck(run: Run, args) -> dict[str, bool]:
    from .acceptance import CRITERIA, run_checks

    wanted = None
    if args.criteria:
        wanted = [int(c) for c in args.criteria.split(",")]
        unknown = set(wanted) - set(CRITERIA)
        if unknown:
            raise CommandError(f"unknown criteria {sorted(unknown)}", EXIT_USAGE)
    results = run_checks(wanted, run.cfg)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    with open(run.wrote(run.path("selfcheck.txt")), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return {f"criterion_{r.number}": r.passed for r in results}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "trial": cmd_trial,
    "compare-schemes": cmd_compare_schemes,
    "plot-data": cmd_plot_data,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--fast", action="store_true", help="fast profile: 100 traces, 100 epochs, 5 trials")
    common.add_argument("--run-dir", help="output directory (default runs/<profile>-seed<seed>)")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")

    p = argparse.ArgumentParser(prog="snapfit", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"snapfit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="synthesize the labeled trace corpus")
    t = sub.add_parser("train", parents=[common], help="train and calibrate a detector variant")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--all-variants", action="store_true", help="train every variant listed in the config")
    sub.add_parser("eval", parents=[common], help="ablation table on the held-out split")
    tr = sub.add_parser("trial", parents=[common], help="closed-loop insertion trials for one scheme")
    tr.add_argument("--scheme", choices=CONTROLLER_KINDS)
    tr.add_argument("--scenario")
    sub.add_parser("compare-schemes", parents=[common], help="paired-seed comparison of all schemes")
    sub.add_parser("plot-data", parents=[common], help="downsampled series for external plotting")
    s = sub.add_parser("selfcheck", parents=[common], help="run the acceptance checks")
    s.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, "fast" if args.fast else None, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING if isinstance(exc, FileNotFoundError) else EXIT_USAGE
    root = args.run_dir or os.path.join("runs", f"{cfg.profile}-seed{cfg.seed}")
    run = Run(root, args.command, cfg, argv)
    if args.config:
        run.read(args.config)
    try:
        checks = COMMANDS[args.command](run, args)
        run.finish(checks)
        _fail_unless(checks)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING if isinstance(exc, FileNotFoundError) else EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
