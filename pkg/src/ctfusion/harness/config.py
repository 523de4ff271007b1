"""Flat ``key=value`` run configuration.

One file may carry both estimator keys (:class:`RunConfig`) and simulator
keys (:class:`~ctfusion.sim.WorldConfig`); ``anchor_count`` and the IMU and
pixel noise levels are shared, so the estimator assumes what was simulated. Keys
not known to either are a :class:`ParseError`. Estimator values outside the
recommended ranges are accepted with a :class:`RangeWarning`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import InvalidArgument, ParseError
from ..factors import NoiseModel
from ..ranging import RejectionParams, VaParams
from ..sim import WorldConfig
from ..solver import SolverParams

# recommended ranges for the tunable estimator parameters
RECOMMENDED = {
    "h": (0.03, 0.10),
    "window_length": (3.0, 6.0),
    "delta": (0.3, 1.0),
    "gamma": (3.0, 4.5),
    "epsilon": (1e-4, 1e-2),
    "tau_lambda": (0.01, 0.20),
    "theta_0": (10.0, 25.0),
    "sigma_r": (0.05, 0.20),
    "sigma_va": (0.15, 0.40),
    "max_iterations": (5, 10),
}

PREDICTION_POLICIES = ("vio-then-spline", "vio", "spline")


class RangeWarning(UserWarning):
    """A parameter lies outside its recommended range."""


@dataclass(frozen=True)
class RunConfig:
    h: float = 0.05
    window_length: float = 4.0
    window_stride: float = 2.0
    delta: float = 0.5
    gamma: float = 3.5
    epsilon: float = 1e-3
    tau_lambda: float = 0.05
    theta_0: float = 15.0
    sigma_r: float = 0.10
    sigma_va: float = 0.20
    max_iterations: int = 8
    initial_damping: float = 1e-4
    damping_up: float = 4.0
    damping_down: float = 1.0 / 3.0
    cost_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    imu_decimation: int = 1
    prior_sigma_position: float = 1.0
    prior_sigma_rotation: float = 0.05
    slide_prior: str = "marginal"
    sigma_gyro: float = 0.003
    sigma_accel: float = 0.03
    sigma_pixel: float = 1.0
    anchor_count: int | None = None  # None uses every physical anchor
    ranging_enabled: bool = True
    va_enabled: bool = True
    prediction: str = "vio-then-spline"
    export_rate: float = 50.0
    association_tolerance: float = 0.01
    trajectory_file: str = "trajectory.csv"
    window_report_file: str = "windows.jsonl"
    eval_file: str = "eval.json"
    anchors_file: str = "anchors_used.csv"

    def __post_init__(self):
        if self.prediction not in PREDICTION_POLICIES:
            raise InvalidArgument(f"prediction must be one of {', '.join(PREDICTION_POLICIES)}")
        if not self.h > 0 or not self.export_rate > 0:
            raise InvalidArgument("h and export_rate must be positive")
        if self.anchor_count is not None and self.anchor_count < 0:
            raise InvalidArgument("anchor_count must be non-negative")
        # constructing the parameter objects runs their own validation
        self.solver_params()
        self.rejection_params()
        self.va_params()
        self.noise_model()
        for name, (lo, hi) in RECOMMENDED.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                warnings.warn(f"{name}={v} is outside the recommended range [{lo}, {hi}]", RangeWarning,
                              stacklevel=3)

    def solver_params(self) -> SolverParams:
        return SolverParams(
            window_length=self.window_length, window_stride=self.window_stride,
            max_iterations=self.max_iterations, initial_damping=self.initial_damping,
            damping_up=self.damping_up, damping_down=self.damping_down,
            cost_tolerance=self.cost_tolerance, step_tolerance=self.step_tolerance,
            imu_decimation=self.imu_decimation, prior_sigma_position=self.prior_sigma_position,
            prior_sigma_rotation=self.prior_sigma_rotation, slide_prior=self.slide_prior,
        )

    def rejection_params(self) -> RejectionParams:
        return RejectionParams(delta=self.delta, gamma=self.gamma, epsilon=self.epsilon)

    def va_params(self) -> VaParams:
        return VaParams(tau_lambda=self.tau_lambda, theta_0=self.theta_0, sigma_r=self.sigma_r,
                        sigma_va=self.sigma_va, epsilon=self.epsilon)

    def noise_model(self) -> NoiseModel:
        return NoiseModel(sigma_gyro=self.sigma_gyro, sigma_accel=self.sigma_accel,
                          sigma_pixel=self.sigma_pixel, sigma_r=self.sigma_r, sigma_va=self.sigma_va)

    def pipeline_kwargs(self) -> dict:
        return dict(h=self.h, solver=self.solver_params(), rejection=self.rejection_params(),
                    va=self.va_params(), noise=self.noise_model(), anchor_count=self.anchor_count,
                    ranging=self.ranging_enabled, virtual_anchors=self.va_enabled,
                    prediction=self.prediction, export_rate=self.export_rate)


RUN_KEYS = {f.name: f for f in fields(RunConfig)}
WORLD_KEYS = {f.name: f for f in fields(WorldConfig) if f.name != "camera"}


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str, default):
    if key == "anchor_count" and text.lower() in ("none", "all", ""):
        return None
    if key == "waypoints":
        if not text:
            return ()
        return tuple(tuple(float(x) for x in p.split(",")) for p in text.split(";"))
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int) or key == "anchor_count":
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(",")) if text else ()
    return text


def format_value(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ";".join(",".join(repr(float(x)) for x in p) for p in value)
    if isinstance(value, tuple):
        return ",".join(repr(float(x)) for x in value)
    if value is None:
        return "none"
    return str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)


@dataclass
class ConfigFile:
    run: RunConfig
    world: WorldConfig
    explicit: dict  # key -> parsed value, as written in the file


def _default(key):
    if key in RUN_KEYS and RUN_KEYS[key].default is not None:
        return RUN_KEYS[key].default
    return WORLD_KEYS[key].default


def parse_config(text: str, source="<config>") -> ConfigFile:
    values = {}
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ParseError(source, no, "expected key=value")
        k, v = (x.strip() for x in s.split("=", 1))
        if k not in RUN_KEYS and k not in WORLD_KEYS:
            raise ParseError(source, no, f"unknown key {k!r}")
        if k in values:
            raise ParseError(source, no, f"duplicate key {k!r}")
        try:
            values[k] = _parse_value(k, v, _default(k))
        except ValueError as exc:
            raise ParseError(source, no, f"bad value for {k}: {exc}") from None
    return build_config(values, source)


def build_config(values: dict, source="<config>") -> ConfigFile:
    """Config objects from already-typed values; invalid combinations raise ParseError."""
    try:
        run = RunConfig(**{k: v for k, v in values.items() if k in RUN_KEYS})
        world = WorldConfig(**{k: v for k, v in values.items() if k in WORLD_KEYS and v is not None})
    except (InvalidArgument, TypeError) as exc:
        raise ParseError(source, None, str(exc)) from None
    return ConfigFile(run, world, dict(values))


def load_config(path) -> ConfigFile:
    path = Path(path)
    if not path.is_file():
        raise ParseError(path, None, "file not found")
    return parse_config(path.read_text(), path)


def override(cfg: ConfigFile, key: str, text: str) -> ConfigFile:
    """Copy of ``cfg`` with one key set from its text form (used by sweeps)."""
    if key not in RUN_KEYS and key not in WORLD_KEYS:
        raise InvalidArgument(f"unknown key {key!r}")
    values = dict(cfg.explicit)
    try:
        values[key] = _parse_value(key, text, _default(key))
    except ValueError as exc:
        raise InvalidArgument(f"bad value for {key}: {exc}") from None
    return build_config(values)


def dump_config(run: RunConfig, world: WorldConfig | None = None) -> str:
    lines = [f"{f.name}={format_value(getattr(run, f.name))}" for f in fields(run)]
    if world is not None:
        lines += [f"{k}={format_value(getattr(world, k))}" for k in WORLD_KEYS if k not in RUN_KEYS]
    return "\n".join(lines) + "\n"


__all__ = ["RunConfig", "ConfigFile", "RangeWarning", "RECOMMENDED", "parse_config", "load_config",
           "build_config", "override", "dump_config"]
