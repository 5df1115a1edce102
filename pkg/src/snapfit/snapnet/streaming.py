"""Online snap detection over a 100 Hz joint-velocity stream.

The detector keeps the last ``T`` normalized samples in a ring buffer and
scores the full window on every tick once armed. A detection is emitted
when the probability exceeds the calibrated threshold, after which the
detector stays silent for ``refractory`` samples so one snap yields one
event.
"""

from __future__ import annotations

import time

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .model import ModelConfig, param_dtype, predict_proba
from .training import DetectorThreshold


class StreamingDetector:
    def __init__(self, params, config: ModelConfig, threshold: DetectorThreshold,
                 mean=None, std=None, sample_rate: float = 100.0, kern=None):
        self.params = params
        self.config = config
        self.threshold = threshold
        self.dtype = param_dtype(params)
        self.mean = np.zeros(config.N) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(config.N) if std is None else np.asarray(std, dtype=np.float64)
        if self.mean.shape != (config.N,) or self.std.shape != (config.N,):
            raise ValueError("normalization statistics must have one entry per joint")
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")
        self.sample_rate = float(sample_rate)
        self.kern = kern or kernels
        self.reset()

    def reset(self) -> None:
        T, N = self.config.T, self.config.N
        # doubled ring: every window is a contiguous slice, no per-tick copy
        self._ring = np.zeros((2 * T, N), dtype=self.dtype)
        self._pos = 0
        self.ticks = 0
        self.armed = False
        self._quiet_until = -1
        self.detections: list[int] = []
        self.tick_seconds: list[float] = []
        self.last_p = float("nan")

    def arm(self) -> None:
        self.armed = True

    def disarm(self) -> None:
        self.armed = False

    def push(self, sample) -> bool:
        """Feed one raw velocity sample. Returns True when a detection fires on this tick."""
        T = self.config.T
        x = (np.asarray(sample, dtype=np.float64) - self.mean) / self.std
        self._ring[self._pos] = x
        self._ring[self._pos + T] = x
        self._pos = (self._pos + 1) % T
        k = self.ticks
        self.ticks += 1
        if not self.armed or self.ticks < T or k < self._quiet_until:
            return False
        t0 = time.perf_counter()
        window = self._ring[self._pos : self._pos + T]
        p = float(predict_proba(window, self.params, self.config, self.kern)[0])
        self.tick_seconds.append(time.perf_counter() - t0)
        self.last_p = p
        if p > self.threshold.tau:
            self.detections.append(k)
            self._quiet_until = k + self.threshold.refractory
            return True
        return False

    @property
    def detection_times(self) -> list[float]:
        return [k / self.sample_rate for k in self.detections]

    @property
    def max_tick_seconds(self) -> float:
        return max(self.tick_seconds) if self.tick_seconds else 0.0


def streaming_detect(velocities, detector: StreamingDetector, arm_at: int = 0) -> list[float]:
    """Replay a (samples, joints) stream through ``detector``; return detection times in seconds.

    The detector is reset first and armed from sample ``arm_at`` onward.
    A stream shorter than the window produces no detections.
    """
    velocities = np.asarray(velocities)
    detector.reset()
    for k, row in enumerate(velocities):
        if k == arm_at:
            detector.arm()
        detector.push(row)
    return detector.detection_times


def offline_window_scores(velocities, detector: StreamingDetector) -> np.ndarray:
    """Scores of every stride-1 window, indexed by the window's last sample."""
    T = detector.config.T
    v = (np.asarray(velocities, dtype=np.float64) - detector.mean) / detector.std
    if v.shape[0] < T:
        return np.zeros(0)
    windows = sliding_window_view(v, T, axis=0).transpose(0, 2, 1)
    return predict_proba(windows, detector.params, detector.config, detector.kern)
