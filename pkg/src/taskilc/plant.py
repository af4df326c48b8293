"""Virtual hardware: servo dynamics, a true rope, and a marker pipeline.

The plant executes a command the way the physical arm would. Joints track
the commanded trajectory through a first-order servo lag with a rate
clamp, any limit violation in the *executed* motion faults the trial
mid-motion, forward kinematics of the executed joints drives the true
rope from its static hang, and an optical pipeline reports marker
positions at 200 Hz with additive noise and optional dropout.

The rope the plant integrates is deliberately allowed to differ from the
learner's model. Three mismatch axes are provided:

* parameter perturbation (default: stiffness and damping at twice the
  model values),
* material presets mapping real ropes (density, end weight) onto the
  model's mass units, with a stiffness/damping heuristic per material,
* a fine discretization mode that splits every link in three. Refining
  the segment length l -> l/3 triples stiffness and damping so that the
  continuum bending rigidity k*l and damping b*l are preserved: the fine
  plant is the same physical rope, better resolved, and the learner's
  coarse model picks up pure discretization error.

The material heuristic is a modeling choice, not a measurement: cotton
ropes get the default perturbed values, chain articulates freely (low
bending stiffness), surgical tubing is soft and lightly damped, and the
thick twisted rope is noticeably stiffer than the other cottons.

Faults are data, not exceptions: a trial that exceeds a limit or whose
rope integration diverges returns a truncated MeasuredRollout with the
fault flag and time set, mirroring how hardware reports a mid-motion
stop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arm import (
    ChainSpec,
    JointLimits,
    check_limits,
    default_chain,
    forward_kinematics,
    sample_command,
)
from .curves import CommandSpline
from .demoio import RawCapture, fd_velocity, rollout_to_capture
from .ropediff import resample_to_rope_grid
from .ropesim import NewtonDivergence, RopeParams, rollout, static_hanging_state

MARKER_RATE = 200.0  # Hz, optical capture rate
ROPE_LENGTH_M = 1.1  # every preset rope is cut to the same length

# Executed trajectories are checked with this much relative headroom so
# that finite-difference overshoot at the sample grid cannot fault a
# command that is analytically at a limit.
_LIMIT_PAD = 1e-3


@dataclass
class MeasurementModel:
    """Marker measurement: sample rate, additive noise, dropout."""

    sample_rate_hz: float = MARKER_RATE
    noise_std_m: float = 0.001
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.noise_std_m < 0:
            raise ValueError("noise_std_m must be non-negative")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must be in [0, 1]")


@dataclass
class PlantConfig:
    """True system parameters: rope, arm, servo, and measurement.

    rate_clamp defaults to the model's velocity limits; larger values are
    allowed (the hardware may outrun what the model assumes). A zero servo
    time constant disables the lag entirely. link_mass_kg records how many
    kilograms one model mass unit represents, so preset configurations
    keep the physical rope mass recoverable.
    """

    rope: RopeParams = field(
        default_factory=lambda: RopeParams(stiffness=2.0e5, damping=100.0)
    )
    chain: ChainSpec = field(default_factory=default_chain)
    limits: JointLimits = field(default_factory=JointLimits.defaults)
    servo_time_constant_s: float = 0.02
    rate_clamp: np.ndarray | None = None
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    marker_stride: int = 1
    link_mass_kg: float = 1.0
    preset_id: int | None = None
    label: str = ""

    def __post_init__(self):
        if self.servo_time_constant_s < 0:
            raise ValueError("servo_time_constant_s must be non-negative")
        if self.rate_clamp is None:
            self.rate_clamp = self.limits.qd_max.copy()
        else:
            self.rate_clamp = np.asarray(self.rate_clamp, dtype=float)
            if self.rate_clamp.shape != (7,):
                raise ValueError("rate_clamp must have shape (7,)")
            if np.any(self.rate_clamp <= 0):
                raise ValueError("rate_clamp must be positive")
        if self.marker_stride < 1 or self.rope.n_links % self.marker_stride:
            raise ValueError("marker_stride must divide the link count")
        if self.link_mass_kg <= 0:
            raise ValueError("link_mass_kg must be positive")

    @property
    def marker_indices(self) -> np.ndarray:
        """Rope nodes carrying markers; stride 3 on a 3x-refined rope hits
        the same arc positions as stride 1 on the coarse one."""
        return np.arange(self.marker_stride - 1, self.rope.n_links, self.marker_stride)


@dataclass
class MeasuredRollout:
    """What one trial actually produced: executed joints at the command
    rate, measured markers at the capture rate, and the fault record."""

    marker_times: np.ndarray  # (m,)
    markers: np.ndarray  # (m, M, 3), NaN where dropped
    marker_velocities: np.ndarray  # (m, M, 3), finite-differenced
    joint_times: np.ndarray  # (n,)
    joints: np.ndarray  # (n, 10), executed configuration
    fault: bool
    fault_time: float | None
    seed: int

    def to_capture(self, chain: ChainSpec, t_c: float, rest_before: float = 0.0) -> RawCapture:
        """Package as a capture (same schema the demo pipeline ingests)."""
        return rollout_to_capture(self, chain, t_c, rest_before)


def _padded_limits(limits: JointLimits) -> JointLimits:
    span = limits.q_max - limits.q_min
    return JointLimits(
        q_min=limits.q_min - _LIMIT_PAD * span,
        q_max=limits.q_max + _LIMIT_PAD * span,
        qd_max=limits.qd_max * (1.0 + _LIMIT_PAD),
        qdd_max=limits.qdd_max * (1.0 + _LIMIT_PAD),
        tau_max=limits.tau_max * (1.0 + _LIMIT_PAD),
    )


def _servo_track(times: np.ndarray, q_des: np.ndarray, tau: float, clamp: np.ndarray):
    """Backward-Euler first-order lag plus per-step rate clamp on the seven
    joints. Base channels are ideal: the base is a virtual frame, not a
    motor. The executed trajectory starts exactly on the command.

    Returns the executed (n, 10) trajectory and the index of the first
    sample whose demanded step exceeded the rate clamp, or None. Asking a
    drive to outrun its rate cap is an overspeed fault on real hardware,
    so the caller treats saturation as a fault even though the clamped
    motion itself never violates a velocity limit.
    """
    q = q_des.copy()
    saturated: int | None = None
    for i in range(1, len(times)):
        dt = times[i] - times[i - 1]
        prev = q[i - 1, :7]
        if tau > 0.0:
            alpha = dt / (tau + dt)
            target = prev + alpha * (q_des[i, :7] - prev)
        else:
            target = q_des[i, :7]
        step = target - prev
        if saturated is None and np.any(np.abs(step) > clamp * dt * (1.0 + _LIMIT_PAD)):
            saturated = i
        clipped = np.clip(step, -clamp * dt, clamp * dt)
        # unclamped channels take the target bitwise (prev + (t - prev) != t)
        q[i, :7] = np.where(clipped == step, target, prev + clipped)
    return q, saturated


def execute_trial(command: CommandSpline, cfg: PlantConfig, seed: int = 0) -> MeasuredRollout:
    """Run one trial: servo, fault check, rope, measurement.

    Faults come from three sources, all reported as data: the servo drive
    saturating its rate clamp (overspeed), the executed joints violating a
    limit (checked finite-differenced, with a small pad so grid effects
    cannot fault an exactly-at-limit command), or the rope integrator
    giving up. Everything after the earliest fault is discarded.
    """
    times, q_des, _, _ = sample_command(command)
    q_act, saturated = _servo_track(times, q_des, cfg.servo_time_constant_s, cfg.rate_clamp)

    fault_candidates = []
    if saturated is not None:
        fault_candidates.append(float(times[saturated]))
    report = check_limits(cfg.chain, _padded_limits(cfg.limits), times, q_act[:, :7])
    if not report.ok:
        fault_candidates.append(report.first().time)
    fault = bool(fault_candidates)
    fault_time: float | None = None
    if fault:
        fault_time = min(fault_candidates)
        keep = times <= fault_time + 1e-12
        times, q_act = times[keep], q_act[keep]

    tips = np.stack([forward_kinematics(cfg.chain, qi).position for qi in q_act])
    t_rope, tip_rope = resample_to_rope_grid(cfg.rope, times, tips)
    z0 = static_hanging_state(cfg.rope, tip_rope[0])
    try:
        roll = rollout(cfg.rope, z0, tip_rope)
    except NewtonDivergence as err:
        stop = err.step if err.step is not None else 1
        roll = rollout(cfg.rope, z0, tip_rope[:stop])
        fault = True
        fault_time = float(t_rope[min(stop, len(t_rope) - 1)])
        keep = times <= fault_time + 1e-12
        times, q_act = times[keep], q_act[keep]

    rate = cfg.measurement.sample_rate_hz
    n_m = int(np.floor(roll.times[-1] * rate + 1e-9)) + 1
    m_times = np.arange(n_m) / rate
    idx = cfg.marker_indices
    markers = np.empty((n_m, len(idx), 3))
    for a, node in enumerate(idx):
        for c in range(3):
            markers[:, a, c] = np.interp(m_times, roll.times, roll.pos[:, node, c])

    rng = np.random.default_rng(seed)
    if cfg.measurement.noise_std_m > 0.0:
        markers = markers + rng.normal(0.0, cfg.measurement.noise_std_m, markers.shape)
    if cfg.measurement.dropout_prob > 0.0:
        drop = rng.random((n_m, len(idx))) < cfg.measurement.dropout_prob
        markers[drop] = np.nan
    if n_m >= 2:
        vel = fd_velocity(m_times, markers)
    else:
        vel = np.zeros_like(markers)

    return MeasuredRollout(m_times, markers, vel, times, q_act, fault, fault_time, seed)


# Rope presets: seven real ropes, all 1.1 m long, described by diameter,
# linear density, and the weight knotted into the free end.
PRESET_TABLE = {
    1: ("Sash Spot Cord", "cotton", 9, 0.040, 18.0),
    2: ("#14 Spot Cord", "cotton", 12, 0.081, 80.0),
    3: ("Soft Braided Cotton Rope", "cotton", 15, 0.076, 80.0),
    4: ("Shoe Lace", "cotton", 7, 0.014, 5.0),
    5: ("Thick Twisted Cotton Rope", "cotton", 25, 0.139, 50.0),
    6: ('3/8" Chain', "steel", 20, 0.514, 50.0),
    7: ("Surgical Tubing", "latex", 9, 0.026, 18.0),
}

# (stiffness, damping) per material, in model units; see module docstring.
_MATERIAL_KB = {
    "cotton": (2.0e5, 100.0),
    "steel": (2.0e4, 100.0),
    "latex": (5.0e4, 10.0),
}
_STIFFNESS_OVERRIDE = {5: 4.0e5}


def load_preset(preset_id: int, fine: bool = False) -> PlantConfig:
    """Plant configuration for one of the preset ropes.

    The rope keeps the model's unit system (link mass 1): one link of the
    1.1 m rope weighs density * 0.1 kg, the end mass is the end weight in
    those units, and link_mass_kg records the conversion. fine=True splits
    every link in three (same rope, finer grid, markers at the original
    arc positions).
    """
    if preset_id not in PRESET_TABLE:
        raise ValueError(f"unknown rope preset {preset_id!r}; choose 1..7")
    label, material, _, density, end_g = PRESET_TABLE[preset_id]
    per_link_kg = density * ROPE_LENGTH_M / 11
    m_e = end_g * 1e-3 / per_link_kg
    k, b = _MATERIAL_KB[material]
    k = _STIFFNESS_OVERRIDE.get(preset_id, k)
    rope = RopeParams(end_mass=m_e, stiffness=k, damping=b)
    stride = 1
    if fine:
        # refine time with space: shorter, stiffer segments carry faster
        # bending waves, and the implicit solver needs the smaller step
        rope = rope.replace(
            n_links=3 * rope.n_links,
            seg_len=rope.seg_len / 3,
            link_mass=rope.link_mass / 3,
            stiffness=3 * rope.stiffness,
            damping=3 * rope.damping,
            dt=rope.dt / 3,
        )
        stride = 3
    return PlantConfig(
        rope=rope,
        link_mass_kg=per_link_kg,
        marker_stride=stride,
        preset_id=preset_id,
        label=label,
    )
