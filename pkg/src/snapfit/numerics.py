"""Deterministic numerical substrate shared by every other module."""

from __future__ import annotations

from typing import Callable

import numpy as np


class IntegrationFault(FloatingPointError):
    """Raised when an integrator evaluates a non-finite derivative."""

    def __init__(self, message: str, state):
        super().__init__(message)
        self.state = state


class OracleFault(FloatingPointError):
    """Raised when the finite-difference oracle sees a non-finite value."""


def rk4_step(f: Callable, s, dt: float):
    """Advance ``s`` by one classical fourth-order Runge-Kutta step.

    ``f`` maps a state (float or ndarray) to its time derivative. Any
    non-finite stage derivative raises :class:`IntegrationFault` carrying the
    state at which it was evaluated.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")

    def _eval(x):
        dx = f(x)
        if not np.all(np.isfinite(dx)):
            raise IntegrationFault("non-finite derivative", x)
        return dx

    k1 = _eval(s)
    k2 = _eval(s + 0.5 * dt * k1)
    k3 = _eval(s + 0.5 * dt * k2)
    k4 = _eval(s + dt * k3)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def finite_diff_grad(f: Callable[[np.ndarray], float], p, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``p``."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    p = np.array(p, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(p)
        flat[i] = orig - h
        fm = f(p)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFault(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)


class RngStream:
    """Seeded, splittable random stream.

    Backed by the counter-based Philox generator. ``child(*keys)`` derives an
    independent stream from the same root seed, so the stream for trace 17
    does not depend on how many traces were generated before it.
    """

    def __init__(self, seed: int, *, _keys: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in _keys)
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, _keys=self.keys + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, mean=0.0, std=1.0, size=None):
        return self._gen.normal(mean, std, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, options):
        return options[int(self._gen.integers(0, len(options)))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian(rng: RngStream, mean: float = 0.0, std: float = 1.0) -> float:
    """Draw one normal sample; ``std == 0`` returns ``mean`` exactly."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return float(mean)
    return float(rng.normal(mean, std))
