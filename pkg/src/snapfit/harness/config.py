"""Flat ``key=value`` experiment configuration with fast and full profiles.

Every key has a default. A config file may override any subset; unknown
keys are rejected so typos fail loudly. ``profile`` picks the size of the
run (trace count, epochs, trials per condition) and may itself be set in
the file or on the command line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..plant import DatasetConfig
from ..snapnet.model import VARIANTS, ModelConfig
from ..snapnet.training import PRECISIONS, TrainConfig
from ..vic import CONTROLLER_KINDS, ImpedanceParams

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


PROFILES = {
    "fast": {"n_traces": 100, "epochs": 100, "n_trials": 5},
    "full": {"n_traces": 500, "epochs": 500, "n_trials": 15},
}


@dataclass(frozen=True)
class ExperimentConfig:
    format_version: int = CONFIG_VERSION
    profile: str = "full"
    seed: int = 0
    # corpus
    n_traces: int = 500
    duration_s: float = 2.0
    snap_fraction: float = 0.4
    distractor_fraction: float = 0.3
    window: int = 50
    stride: int = 5
    min_overlap: float = 0.4
    # model and training
    variant: str = "full"
    variants: tuple[str, ...] = VARIANTS
    kernel_size: int = 5
    conv_channels: int = 16
    hidden: int = 32
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 64
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    precision: str = "float32"
    refractory: int = 50
    # closed-loop trials
    scenario: str = "lens_frame"
    controller: str = "event_vic"
    schemes: tuple[str, ...] = ("position", "fixed_impedance", "event_vic")
    n_trials: int = 15
    trial_seed0: int = 1000
    K0: float = 2000.0
    Kf: float = 100.0
    lam: float = 10.0
    alpha_d: float = 2.0
    printed_form: bool = False
    overtravel_m: float = 8.5e-3
    axial_tolerance_std_m: float = 1e-3
    lateral_offset_std_m: float = 0.5e-3
    guide_stiffness: float = 4000.0
    chamfer_m: float = 0.5e-3
    jam_force: float = 2.5
    jam_hold_s: float = 0.035
    settle_s: float = 1.5
    dt: float = 1e-3
    # streaming checks
    stream_seeds: int = 15
    negative_traces: int = 100
    stream_seed0: int = 50000
    # plot data
    downsample: int = 10

    def __post_init__(self):
        if self.format_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config format_version {self.format_version}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
        for v in (self.variant, *self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        for k in (self.controller, *self.schemes):
            if k not in CONTROLLER_KINDS:
                raise ConfigError(f"unknown controller kind {k!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.n_traces < 3 or self.n_trials < 1 or self.epochs < 0:
            raise ConfigError("n_traces >= 3, n_trials >= 1 and epochs >= 0 required")
        if self.dt <= 0 or self.dt > 1e-3:
            raise ConfigError("dt must lie in (0, 1 ms]")

    # --- derived configs -------------------------------------------------
    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            n_traces=self.n_traces, duration_s=self.duration_s, snap_fraction=self.snap_fraction,
            distractor_fraction=self.distractor_fraction, window=self.window, stride=self.stride,
            min_overlap=self.min_overlap,
        )

    def model_config(self, variant: str | None = None) -> ModelConfig:
        return ModelConfig(T=self.window, N=7, k=self.kernel_size, d_c=self.conv_channels,
                           d_h=self.hidden, variant=variant or self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           focal_alpha=self.focal_alpha, focal_gamma=self.focal_gamma,
                           seed=self.seed, precision=self.precision)

    def impedance_params(self, insertion_axis: int = 1) -> ImpedanceParams:
        return ImpedanceParams(K0=self.K0, Kf=self.Kf, lam=self.lam, alpha_d=self.alpha_d,
                               insertion_axis=insertion_axis, printed_form=self.printed_form)

    def to_text(self) -> str:
        lines = [f"format_version={self.format_version}"]
        for f in fields(self):
            if f.name == "format_version":
                continue
            lines.append(f"{f.name}={_dump(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _dump(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, raw: str):
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        default = _FIELDS[name].default_factory()
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines into a dict of typed overrides. ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse(key, value)
    return out


def make_config(overrides: dict | None = None, profile: str | None = None) -> ExperimentConfig:
    """Profile defaults first, then explicit overrides."""
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    prof = profile or overrides.get("profile", "full")
    if prof not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
    values = {**PROFILES[prof], **overrides, "profile": prof}
    return ExperimentConfig(**values)


def load_config(path=None, profile: str | None = None, seed: int | None = None) -> ExperimentConfig:
    overrides = {}
    if path is not None:
        with open(path) as fh:
            overrides = parse_config_text(fh.read())
    if seed is not None:
        overrides["seed"] = seed
    return make_config(overrides, profile)
