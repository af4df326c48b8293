"""Flat key=value experiment configuration.

One text file drives a whole run: demonstration paths, the learner's rope
model, the plant, cost weights, joint limits, the learning loop, and the
seed. Unknown keys are hard errors (a typo in a weight name must not fall
back silently to a default), every value is validated by the dataclass it
feeds, and serialize(parse(text)) reproduces the configuration exactly.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .arm import ChainSpec, JointLimits, default_chain
from .ilc import IlcConfig
from .inverse import QpWeights
from .plant import MeasurementModel, PlantConfig, load_preset
from .ropesim import RopeParams
from .tracking import TrackingWeights


class ConfigError(ValueError):
    """Malformed, unknown, or invalid configuration input."""


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_vec7(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    values = tuple(float(p) for p in parts)
    if len(values) == 1:
        return values * 7
    if len(values) != 7:
        raise ConfigError(f"expected 1 or 7 numbers, got {len(values)}")
    return values


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _limits_tuple(limits: JointLimits, name: str) -> tuple:
    return tuple(float(v) for v in getattr(limits, name))


_DEF_LIMITS = JointLimits.defaults()

# key -> (converter, default). None default means the key is required.
_SCHEMA = {
    # paths
    "capture_path": (str, None),
    "annotation_path": (str, None),
    "output_dir": (str, None),
    "chain_path": (str, ""),
    # learner rope model
    "rope_n_links": (int, RopeParams.n_links),
    "rope_seg_len": (float, RopeParams.seg_len),
    "rope_link_mass": (float, RopeParams.link_mass),
    "rope_end_mass": (float, RopeParams.end_mass),
    "rope_stiffness": (float, RopeParams.stiffness),
    "rope_damping": (float, RopeParams.damping),
    "rope_dt": (float, RopeParams.dt),
    # plant; preset 0 mirrors the learner rope
    "plant_preset": (int, 0),
    "plant_fine": (_parse_bool, False),
    "plant_servo_tau": (float, 0.02),
    "plant_noise_std": (float, 0.001),
    "plant_dropout": (float, 0.0),
    "plant_marker_rate": (float, 200.0),
    "plant_stiffness_scale": (float, 1.0),
    "plant_damping_scale": (float, 1.0),
    # inverse-model weights
    "w_control": (float, QpWeights.w_control),
    "w_critical_pos": (float, QpWeights.w_critical_pos),
    "w_critical_vel": (float, QpWeights.w_critical_vel),
    "w_pc": (float, QpWeights.w_pc),
    "w_vc": (float, QpWeights.w_vc),
    "w_Rc": (float, QpWeights.w_Rc),
    "w_pft": (float, QpWeights.w_pft),
    "w_vft": (float, QpWeights.w_vft),
    "w_Rft": (float, QpWeights.w_Rft),
    "w_ft_velocity": (float, QpWeights.w_ft_velocity),
    # demonstration-tracking weights
    "track_w_p": (float, TrackingWeights.w_p),
    "track_w_R": (float, TrackingWeights.w_R),
    "track_w_v": (float, TrackingWeights.w_v),
    "track_w_j": (float, TrackingWeights.w_j),
    "track_z_min": (float, TrackingWeights.z_min),
    # joint limits (1 value broadcasts to all 7 joints)
    "q_min": (_parse_vec7, _limits_tuple(_DEF_LIMITS, "q_min")),
    "q_max": (_parse_vec7, _limits_tuple(_DEF_LIMITS, "q_max")),
    "qd_max": (_parse_vec7, _limits_tuple(_DEF_LIMITS, "qd_max")),
    "qdd_max": (_parse_vec7, _limits_tuple(_DEF_LIMITS, "qdd_max")),
    "tau_max": (_parse_vec7, _limits_tuple(_DEF_LIMITS, "tau_max")),
    # learning loop
    "max_iterations": (int, IlcConfig.max_iterations),
    "success_threshold": (float, IlcConfig.success_threshold),
    "mode": (str, IlcConfig.mode),
    "stop_on_first_success": (_parse_bool, IlcConfig.stop_on_first_success),
    # randomness
    "seed": (int, 0),
}

_SECTIONS = [
    ("paths", ["capture_path", "annotation_path", "output_dir", "chain_path"]),
    ("learner rope model", [k for k in _SCHEMA if k.startswith("rope_")]),
    ("plant (preset 0 mirrors the learner rope)", [k for k in _SCHEMA if k.startswith("plant_")]),
    ("inverse-model weights", [k for k in _SCHEMA if k.startswith("w_")]),
    ("demonstration tracking", [k for k in _SCHEMA if k.startswith("track_")]),
    ("joint limits", ["q_min", "q_max", "qd_max", "qdd_max", "tau_max"]),
    ("learning loop", ["max_iterations", "success_threshold", "mode", "stop_on_first_success"]),
    ("randomness", ["seed"]),
]


@dataclass
class ExperimentConfig:
    """Validated experiment description; the key=value file's object form."""

    capture_path: str
    annotation_path: str
    output_dir: str
    chain_path: str = ""
    rope: RopeParams = field(default_factory=RopeParams)
    plant_preset: int = 0
    plant_fine: bool = False
    plant_servo_tau: float = 0.02
    plant_noise_std: float = 0.001
    plant_dropout: float = 0.0
    plant_marker_rate: float = 200.0
    plant_stiffness_scale: float = 1.0
    plant_damping_scale: float = 1.0
    weights: QpWeights = field(default_factory=QpWeights)
    tracking: TrackingWeights = field(default_factory=TrackingWeights)
    limits: JointLimits = field(default_factory=JointLimits.defaults)
    ilc: IlcConfig = field(default_factory=IlcConfig)
    seed: int = 0

    def __post_init__(self):
        self.build_plant()  # fail fast on invalid plant numbers

    def build_plant(self) -> PlantConfig:
        if self.plant_preset:
            plant = load_preset(self.plant_preset, fine=self.plant_fine)
        else:
            plant = PlantConfig(rope=self.rope, limits=self.limits)
        rope = plant.rope.replace(
            stiffness=plant.rope.stiffness * self.plant_stiffness_scale,
            damping=plant.rope.damping * self.plant_damping_scale,
        )
        return replace(
            plant,
            rope=rope,
            servo_time_constant_s=self.plant_servo_tau,
            measurement=MeasurementModel(
                sample_rate_hz=self.plant_marker_rate,
                noise_std_m=self.plant_noise_std,
                dropout_prob=self.plant_dropout,
            ),
        )

    def build_chain(self) -> ChainSpec:
        if not self.chain_path:
            return default_chain()
        with open(self.chain_path) as f:
            return ChainSpec.from_json(f.read())

    def key_values(self) -> dict:
        """Flat primitive view, the common currency of dumps() and equality."""
        out = {
            "capture_path": self.capture_path,
            "annotation_path": self.annotation_path,
            "output_dir": self.output_dir,
            "chain_path": self.chain_path,
            "plant_preset": self.plant_preset,
            "plant_fine": self.plant_fine,
            "plant_servo_tau": self.plant_servo_tau,
            "plant_noise_std": self.plant_noise_std,
            "plant_dropout": self.plant_dropout,
            "plant_marker_rate": self.plant_marker_rate,
            "plant_stiffness_scale": self.plant_stiffness_scale,
            "plant_damping_scale": self.plant_damping_scale,
            "max_iterations": self.ilc.max_iterations,
            "success_threshold": self.ilc.success_threshold,
            "mode": self.ilc.mode,
            "stop_on_first_success": self.ilc.stop_on_first_success,
            "seed": self.seed,
        }
        for f_ in fields(RopeParams):
            value = getattr(self.rope, f_.name)
            out[f"rope_{f_.name}"] = type(f_.default)(value)
        for f_ in fields(QpWeights):
            out[f_.name] = float(getattr(self.weights, f_.name))
        for f_ in fields(TrackingWeights):
            out[f"track_{f_.name}"] = float(getattr(self.tracking, f_.name))
        for name in ("q_min", "q_max", "qd_max", "qdd_max", "tau_max"):
            out[name] = _limits_tuple(self.limits, name)
        return out

    def dumps(self) -> str:
        """Serialize with every key explicit, grouped by section."""
        values = self.key_values()
        lines = []
        for title, keys in _SECTIONS:
            lines.append(f"# {title}")
            for key in keys:
                lines.append(f"{key} = {_fmt(values[key])}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())


def _raw_pairs(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in _SCHEMA:
            hint = difflib.get_close_matches(key, _SCHEMA, n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"line {lineno}: unknown key {key!r}{suffix}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = (lineno, value)
    return raw


def parse_config(text: str, *, check_files: bool = True) -> ExperimentConfig:
    raw = _raw_pairs(text)
    values = {}
    for key, (convert, default) in _SCHEMA.items():
        if key in raw:
            lineno, token = raw[key]
            try:
                values[key] = convert(token)
            except ConfigError as err:
                raise ConfigError(f"line {lineno}: {key}: {err}") from None
            except ValueError:
                raise ConfigError(f"line {lineno}: {key}: cannot parse {token!r}") from None
        elif default is None:
            raise ConfigError(f"missing required key {key!r}")
        else:
            values[key] = default

    def build(label, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(f"{label}: {err}") from None

    rope = build(
        "rope model", lambda: RopeParams(*(values[f"rope_{f_.name}"] for f_ in fields(RopeParams)))
    )
    weights = build(
        "inverse weights", lambda: QpWeights(*(values[f_.name] for f_ in fields(QpWeights)))
    )
    tracking = build(
        "tracking weights",
        lambda: TrackingWeights(*(values[f"track_{f_.name}"] for f_ in fields(TrackingWeights))),
    )
    limits = build(
        "joint limits",
        lambda: JointLimits(
            q_min=values["q_min"], q_max=values["q_max"], qd_max=values["qd_max"],
            qdd_max=values["qdd_max"], tau_max=values["tau_max"],
        ),
    )
    ilc = build(
        "learning loop",
        lambda: IlcConfig(
            max_iterations=values["max_iterations"],
            success_threshold=values["success_threshold"],
            mode=values["mode"],
            stop_on_first_success=values["stop_on_first_success"],
        ),
    )
    cfg = build(
        "plant",
        lambda: ExperimentConfig(
            capture_path=values["capture_path"],
            annotation_path=values["annotation_path"],
            output_dir=values["output_dir"],
            chain_path=values["chain_path"],
            rope=rope,
            plant_preset=values["plant_preset"],
            plant_fine=values["plant_fine"],
            plant_servo_tau=values["plant_servo_tau"],
            plant_noise_std=values["plant_noise_std"],
            plant_dropout=values["plant_dropout"],
            plant_marker_rate=values["plant_marker_rate"],
            plant_stiffness_scale=values["plant_stiffness_scale"],
            plant_damping_scale=values["plant_damping_scale"],
            weights=weights,
            tracking=tracking,
            limits=limits,
            ilc=ilc,
            seed=values["seed"],
        ),
    )

    if check_files:
        for key in ("capture_path", "annotation_path"):
            if not os.path.isfile(getattr(cfg, key)):
                raise ConfigError(f"{key}: no such file: {getattr(cfg, key)}")
        if cfg.chain_path and not os.path.isfile(cfg.chain_path):
            raise ConfigError(f"chain_path: no such file: {cfg.chain_path}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text)
