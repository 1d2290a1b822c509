"""Flat ``key = value`` pipeline configuration.

One setting per line, ``#`` starts a comment.  Keys:

=====================  ==========================================  =========
key                    meaning                                     default
=====================  ==========================================  =========
clouds                 directory of scans                          (required)
cloud_format           kitti-bin | ply | xyz-text                  kitti-bin
trajectory             initial trajectory file                     (required)
trajectory_format      tum | kitti-poses                           tum
gt_trajectory          optional ground truth, enables ATE traces
gt_format              tum | kitti-poses                           tum
output                 output directory                            out
d_e                    leaf-to-surfel distance gate [m]            0.5
d_n                    normal-distance gate [m]                    1.0
d_theta                normal-angle gate [deg]                     5.0
rho_ker                Huber threshold, ``none`` disables it       0.1
b_max                  max leaf extent along the split axis [m]    0.2
b_min                  flatness threshold [m]                      0.1
sensor                 named divergence preset                     generic
divergence             beam divergence [rad], overrides ``sensor``
beam_rings             sub-beam rings                              3
rays_per_ring          sub-beams per ring                          12
sigma_floor            sigma clamp, lower [m]                      0.01
sigma_cap              sigma clamp, upper [m]                      1.0
outer_iterations       outer loop cap                              10
inner_iterations       LM iteration cap                            20
convergence_tol        LM relative cost decrease                   1e-4
outer_tol              outer relative cost change                  1e-4
uncertainty            on | off                                    on
pose_only              true | false                                false
max_dt                 ATE timestamp tolerance [s]                 0.05
seed                   recorded in the manifest                    0
workers                worker cap (runs are sequential)            1
test_mode              true | false                                false
=====================  ==========================================  =========

``preset.<name> = <divergence>`` adds or overrides a sensor preset that
``sensor`` can then select.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

from .beam_model import SENSOR_PRESETS
from .errors import ConfigError, InputError
from .pipeline import BAConfig

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _bool(key, v):
    s = str(v).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ConfigError(f"{key}: expected on/off or true/false, got {v!r}")


def _opt_float(v):
    if v is None or str(v).strip().lower() in ("none", ""):
        return None
    return float(v)


@dataclass
class PipelineConfig:
    clouds: str | None = None
    cloud_format: str = "kitti-bin"
    trajectory: str | None = None
    trajectory_format: str = "tum"
    gt_trajectory: str | None = None
    gt_format: str = "tum"
    output: str = "out"
    d_e: float = 0.5
    d_n: float = 1.0
    d_theta: float = 5.0
    rho_ker: float | None = 0.1
    b_max: float = 0.2
    b_min: float = 0.1
    sensor: str = "generic"
    divergence: float | None = None
    beam_rings: int = 3
    rays_per_ring: int = 12
    sigma_floor: float = 0.01
    sigma_cap: float = 1.0
    outer_iterations: int = 10
    inner_iterations: int = 20
    convergence_tol: float = 1e-4
    outer_tol: float = 1e-4
    uncertainty: bool = True
    pose_only: bool = False
    max_dt: float = 0.05
    seed: int = 0
    workers: int = 1
    test_mode: bool = False
    presets: dict = field(default_factory=lambda: dict(SENSOR_PRESETS))

    def resolved_divergence(self) -> float:
        if self.divergence is not None:
            return self.divergence
        try:
            return self.presets[self.sensor]
        except KeyError:
            raise ConfigError(f"unknown sensor preset {self.sensor!r}; known: {sorted(self.presets)}") from None

    def ba_config(self) -> BAConfig:
        try:
            return BAConfig(
                d_e=self.d_e, d_n=self.d_n, d_theta=math.radians(self.d_theta), rho_ker=self.rho_ker,
                b_max=self.b_max, b_min=self.b_min, divergence=self.resolved_divergence(),
                beam_rings=self.beam_rings, rays_per_ring=self.rays_per_ring,
                sigma_floor=self.sigma_floor, sigma_cap=self.sigma_cap,
                outer_iterations=self.outer_iterations, inner_iterations=self.inner_iterations,
                convergence_tol=self.convergence_tol, outer_tol=self.outer_tol,
                uncertainty=self.uncertainty, pose_only=self.pose_only, max_dt=self.max_dt,
            )
        except (InputError, ValueError) as exc:
            raise ConfigError(str(exc).removeprefix("[surfelba] ")) from None

    def validate(self):
        self.ba_config()
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.max_dt < 0:
            raise ConfigError("max_dt must be non-negative")
        return self

    def to_text(self) -> str:
        """Round-trippable flat text, the form stored in manifests."""
        lines = []
        for f in fields(self):
            if f.name == "presets":
                continue
            v = getattr(self, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        for name in sorted(self.presets):
            lines.append(f"preset.{name} = {self.presets[name]!r}")
        return "\n".join(lines) + "\n"


_CASTS = {
    "d_e": float, "d_n": float, "d_theta": float, "rho_ker": _opt_float, "b_max": float, "b_min": float,
    "divergence": _opt_float, "beam_rings": int, "rays_per_ring": int, "sigma_floor": float,
    "sigma_cap": float, "outer_iterations": int, "inner_iterations": int, "convergence_tol": float,
    "outer_tol": float, "max_dt": float, "seed": int, "workers": int,
}
_BOOLS = {"uncertainty", "pose_only", "test_mode"}
_PATHS = {"clouds", "trajectory", "gt_trajectory", "output"}
_OPTIONAL_PATHS = {"clouds", "trajectory", "gt_trajectory"}


def parse_lines(lines, source="<config>") -> dict:
    """``key = value`` lines to an ordered dict of raw strings."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def apply(config: PipelineConfig, raw: dict, base_dir=None) -> PipelineConfig:
    """Apply raw string settings; relative paths resolve against ``base_dir``."""
    known = {f.name for f in fields(PipelineConfig)} - {"presets"}
    for key, value in raw.items():
        if key.startswith("preset."):
            name = key[len("preset."):]
            try:
                config.presets[name] = float(value)
            except ValueError:
                raise ConfigError(f"{key}: not a number: {value!r}") from None
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        try:
            if key in _BOOLS:
                v = _bool(key, value)
            elif key in _CASTS:
                v = _CASTS[key](value)
            elif key in _OPTIONAL_PATHS:
                v = None if value.strip().lower() in ("none", "") else value
            else:
                v = value
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
        if key in _PATHS and v is not None and base_dir is not None and not os.path.isabs(v):
            v = os.path.join(base_dir, v)
        setattr(config, key, v)
    return config


def load_config(path=None, overrides=None) -> PipelineConfig:
    """File settings first, then ``overrides`` (e.g. from command-line flags)."""
    cfg = PipelineConfig()
    if path is not None:
        path = os.fspath(path)
        try:
            with open(path) as f:
                raw = parse_lines(f, source=path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        apply(cfg, raw, base_dir=os.path.dirname(os.path.abspath(path)))
    if overrides:
        apply(cfg, overrides)
    return cfg.validate()
