"""Compiled vs numpy kernels on training-sized batches.

    python benchmarks/bench_kernels.py [--batch 64] [--repeat 20]

Checks that both backends agree, then reports the median time per call of
each encoder kernel and of one full SnapNet loss-and-gradient step.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from snapfit.numerics import RngStream
from snapfit.snapnet import _fallback
from snapfit.snapnet.model import ModelConfig, cast_params, init_params, loss_and_grad

try:
    from snapfit.snapnet import _core
except ImportError:
    _core = None


def median_time(fn, repeat: int) -> float:
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(batch: int, dtype):
    cfg = ModelConfig()
    r = RngStream(0)
    B = batch * cfg.N
    x = r.normal(size=(B, cfg.T)).astype(dtype)
    W = (0.3 * r.normal(size=(cfg.d_c, cfg.k))).astype(dtype)
    b = (0.1 * r.normal(size=cfg.d_c)).astype(dtype)
    seq = r.normal(size=(B, cfg.T_prime, cfg.d_c)).astype(dtype)
    Wx = (0.2 * r.normal(size=(cfg.d_c, 3 * cfg.d_h))).astype(dtype)
    Wh = (0.2 * r.normal(size=(cfg.d_h, 3 * cfg.d_h))).astype(dtype)
    bg = np.zeros(3 * cfg.d_h, dtype=dtype)
    params = cast_params(init_params(cfg, r.child(1)), dtype)
    X = r.normal(size=(batch, cfg.T, cfg.N)).astype(dtype)
    y = (r.uniform(size=batch) < 0.2).astype(np.float64)

    def run(k):
        conv_out, conv_cache = k.conv_forward(x, W, b)
        h_last, gru_cache = k.gru_forward(seq, Wx, Wh, bg)
        return {
            "conv forward": lambda: k.conv_forward(x, W, b),
            "conv backward": lambda: k.conv_backward(np.ones_like(conv_out), conv_cache),
            "gru forward": lambda: k.gru_forward(seq, Wx, Wh, bg),
            "gru backward": lambda: k.gru_backward(np.ones_like(h_last), gru_cache),
            "loss+grad step": lambda: loss_and_grad(X, y, params, cfg, kern=k),
        }

    return run, (X, y, params, cfg)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _core is None:
        raise SystemExit("compiled kernels not built; run `python setup.py build_ext --inplace`")

    for dtype in (np.float32, np.float64):
        run, (X, y, params, cfg) = cases(args.batch, dtype)
        la, ga = loss_and_grad(X, y, params, cfg, kern=_fallback)
        lb, gb = loss_and_grad(X, y, params, cfg, kern=_core)
        tol = 1e-4 if dtype == np.float32 else 1e-10
        gap = max(float(np.max(np.abs(ga[n] - gb[n]))) for n in ga)
        status = "ok" if gap < tol * max(1.0, max(float(np.max(np.abs(g))) for g in ga.values())) else "MISMATCH"
        print(f"\n{np.dtype(dtype).name}, batch {args.batch}: backends agree to {gap:.1e} ({status})")
        print(f"{'kernel':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
        slow, fast = run(_fallback), run(_core)
        for name in slow:
            a = median_time(slow[name], args.repeat) * 1e3
            b = median_time(fast[name], args.repeat) * 1e3
            print(f"{name:<16}{a:>10.3f}{b:>11.3f}{a / b:>8.1f}x")


if __name__ == "__main__":
    main()
