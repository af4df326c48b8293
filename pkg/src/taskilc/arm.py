"""Kinematic chain model: forward kinematics, tip Jacobian, point-mass
inverse dynamics, and joint-limit checking.

The configuration vector follows the command channel order: 7 revolute
joints, then 3 base translation channels (a workspace alignment offset,
constant during a trial). Inverse dynamics treats the base as fixed; a
rigid translation changes no joint torque.

Frames are z-up with gravity (0, 0, -9.81).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .curves import CommandSpline, eval_spline, rot_axis_angle

GRAVITY = 9.81
COMMAND_RATE = 250.0  # Hz, execution and measurement rate of the arm


@dataclass
class TipPose:
    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3)


@dataclass
class JointLimits:
    q_min: np.ndarray
    q_max: np.ndarray
    qd_max: np.ndarray  # symmetric
    qdd_max: np.ndarray  # symmetric
    tau_max: np.ndarray  # symmetric

    def __post_init__(self):
        for name in ("q_min", "q_max", "qd_max", "qdd_max", "tau_max"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (7,):
                raise ValueError(f"{name} must have shape (7,)")
            setattr(self, name, arr)
        if np.any(self.q_min >= self.q_max):
            raise ValueError("q_min must be strictly below q_max")

    @staticmethod
    def defaults() -> "JointLimits":
        return JointLimits(
            q_min=[-6.28, -1.8, -6.28, -0.19, -6.28, -1.69, -6.28],
            q_max=[6.28, 1.9, 6.28, 3.92, 6.28, 3.14, 6.28],
            qd_max=[3.14] * 7,
            qdd_max=[100.0] * 7,
            tau_max=[130.0, 130.0, 40.0, 40.0, 40.0, 20.0, 20.0],
        )


@dataclass
class ChainSpec:
    """7-joint serial chain of point-mass links.

    axes[i] is joint i's rotation axis in its parent frame, offsets[i] the
    parent-frame translation from joint i-1 to joint i, masses[i]/coms[i]
    the link's point mass and its offset in the link frame, tip_offset the
    fingertip in the last link frame.
    """

    axes: np.ndarray  # (7, 3) unit vectors
    offsets: np.ndarray  # (7, 3)
    masses: np.ndarray  # (7,)
    coms: np.ndarray  # (7, 3)
    tip_offset: np.ndarray  # (3,)

    def __post_init__(self):
        self.axes = np.asarray(self.axes, dtype=float).reshape(7, 3)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(7, 3)
        self.masses = np.asarray(self.masses, dtype=float).reshape(7)
        self.coms = np.asarray(self.coms, dtype=float).reshape(7, 3)
        self.tip_offset = np.asarray(self.tip_offset, dtype=float).reshape(3)
        norms = np.linalg.norm(self.axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("joint axes must be unit vectors")
        if np.any(self.masses < 0.0):
            raise ValueError("negative link mass")

    def to_json(self) -> str:
        joints = [
            {
                "axis": self.axes[i].tolist(),
                "offset": self.offsets[i].tolist(),
                "mass": float(self.masses[i]),
                "com": self.coms[i].tolist(),
            }
            for i in range(7)
        ]
        return json.dumps({"joints": joints, "tip_offset": self.tip_offset.tolist()}, indent=2)

    @staticmethod
    def from_json(text: str) -> "ChainSpec":
        obj = json.loads(text)
        joints = obj["joints"]
        if len(joints) != 7:
            raise ValueError(f"expected 7 joints, got {len(joints)}")
        return ChainSpec(
            axes=[j["axis"] for j in joints],
            offsets=[j["offset"] for j in joints],
            masses=[j["mass"] for j in joints],
            coms=[j["com"] for j in joints],
            tip_offset=obj["tip_offset"],
        )


def default_chain() -> ChainSpec:
    """Stand-in 7-DOF arm: alternating yaw/pitch axes, about 0.7 m of reach
    past the shoulder, 13 kg of link mass, mounted 1.0 m above the floor so
    a 1.1 m rope can hang from the tip with clearance."""
    return ChainSpec(
        axes=[
            [0, 0, 1],
            [0, 1, 0],
            [0, 0, 1],
            [0, 1, 0],
            [0, 0, 1],
            [0, 1, 0],
            [0, 0, 1],
        ],
        offsets=[
            [0, 0, 1.00],  # pedestal mount up to the shoulder yaw
            [0, 0, 0.10],
            [0, 0, 0.25],
            [0.05, 0, 0],
            [0, 0, 0.25],
            [0, 0, 0],
            [0.06, 0, 0],
        ],
        masses=[2.5, 2.5, 2.0, 2.0, 1.5, 1.5, 1.0],
        coms=[
            [0, 0, 0.05],
            [0, 0, 0.12],
            [0.02, 0, 0],
            [0, 0, 0.12],
            [0, 0, 0],
            [0.03, 0, 0],
            [0, 0, 0.05],
        ],
        tip_offset=[0, 0, 0.10],
    )


def _frames(chain: ChainSpec, q: np.ndarray):
    """World joint origins (7,3), world axes (7,3), world link rotations
    (7,3,3), and the tip pose, for a full 10-dim configuration."""
    q = np.asarray(q, dtype=float)
    if q.shape != (10,):
        raise ValueError(f"configuration must be 10-dim, got {q.shape}")
    pos = q[7:10].copy()
    rot = np.eye(3)
    origins = np.empty((7, 3))
    axes_w = np.empty((7, 3))
    rots = np.empty((7, 3, 3))
    for i in range(7):
        pos = pos + rot @ chain.offsets[i]
        origins[i] = pos
        axes_w[i] = rot @ chain.axes[i]
        rot = rot @ rot_axis_angle(chain.axes[i], q[i])
        rots[i] = rot
    tip = pos + rot @ chain.tip_offset
    return origins, axes_w, rots, TipPose(tip, rot)


def forward_kinematics(chain: ChainSpec, q: np.ndarray) -> TipPose:
    return _frames(chain, q)[3]


def tip_jacobian(chain: ChainSpec, q: np.ndarray) -> np.ndarray:
    """6x10 tip Jacobian: rows 0:3 linear velocity, rows 3:6 world angular
    velocity; columns follow the channel order (7 joints, then base)."""
    origins, axes_w, _, tip = _frames(chain, q)
    jac = np.zeros((6, 10))
    for i in range(7):
        jac[0:3, i] = np.cross(axes_w[i], tip.position - origins[i])
        jac[3:6, i] = axes_w[i]
    jac[0:3, 7:10] = np.eye(3)
    return jac


def inverse_dynamics(
    chain: ChainSpec, q: np.ndarray, qd: np.ndarray, qdd: np.ndarray
) -> np.ndarray:
    """Joint torques by recursive Newton-Euler over point-mass links.

    Args:
        q, qd, qdd: 7-vectors (base held fixed).

    Returns:
        (7,) torques about each joint axis. Gravity is folded in by giving
        the base an upward 9.81 m/s^2 pseudo-acceleration.
    """
    q = np.asarray(q, dtype=float).reshape(7)
    qd = np.asarray(qd, dtype=float).reshape(7)
    qdd = np.asarray(qdd, dtype=float).reshape(7)
    full = np.concatenate([q, np.zeros(3)])
    origins, axes_w, rots, tip = _frames(chain, full)

    omega = np.zeros(3)
    alpha = np.zeros(3)
    a_origin = np.array([0.0, 0.0, GRAVITY])  # base pseudo-acceleration
    prev_origin = np.concatenate([full[7:10]])
    com_acc = np.empty((7, 3))
    com_pos = np.empty((7, 3))
    for i in range(7):
        d = origins[i] - prev_origin
        a_origin = a_origin + np.cross(alpha, d) + np.cross(omega, np.cross(omega, d))
        prev_origin = origins[i]
        omega_prev = omega
        omega = omega + axes_w[i] * qd[i]
        alpha = alpha + axes_w[i] * qdd[i] + np.cross(omega_prev, axes_w[i]) * qd[i]
        r = rots[i] @ chain.coms[i]
        com_pos[i] = origins[i] + r
        com_acc[i] = a_origin + np.cross(alpha, r) + np.cross(omega, np.cross(omega, r))

    tau = np.zeros(7)
    f_child = np.zeros(3)
    n_child = np.zeros(3)
    child_origin = tip.position  # arbitrary distal reference for the last link
    for i in range(6, -1, -1):
        f_link = chain.masses[i] * com_acc[i]
        n_i = (
            np.cross(com_pos[i] - origins[i], f_link)
            + n_child
            + np.cross(child_origin - origins[i], f_child)
        )
        f_child = f_link + f_child
        n_child = n_i
        child_origin = origins[i]
        tau[i] = axes_w[i] @ n_i
    return tau


@dataclass
class LimitViolation:
    time: float
    joint: int
    kind: str  # "position" | "velocity" | "acceleration" | "torque"
    value: float
    bound: float
    margin: float  # how far past the bound, always positive


@dataclass
class LimitReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def first(self):
        return min(self.violations, key=lambda v: v.time) if self.violations else None

    def by_kind(self, kind: str):
        return [v for v in self.violations if v.kind == kind]


def _fd_derivative(values: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * dt)
    out[0] = (values[1] - values[0]) / dt
    out[-1] = (values[-1] - values[-2]) / dt
    return out


def check_limits(
    chain: ChainSpec,
    limits: JointLimits,
    times: np.ndarray,
    q: np.ndarray,
    qd: np.ndarray | None = None,
    qdd: np.ndarray | None = None,
    check_torque: bool = True,
) -> LimitReport:
    """Check a sampled joint trajectory (n, 7) against all limit kinds.

    Missing derivatives are finite-differenced from q. Torques come from
    inverse_dynamics at every sample.
    """
    times = np.asarray(times, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[1] != 7:
        raise ValueError("trajectory must be (n, 7)")
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    if qd is None:
        qd = _fd_derivative(q, dt)
    if qdd is None:
        qdd = _fd_derivative(np.asarray(qd), dt)
    report = LimitReport()

    def scan(vals, low, high, kind):
        for j in range(7):
            over = vals[:, j] > high[j]
            under = vals[:, j] < low[j]
            for idx in np.flatnonzero(over):
                report.violations.append(
                    LimitViolation(
                        float(times[idx]), j, kind, float(vals[idx, j]), float(high[j]),
                        float(vals[idx, j] - high[j]),
                    )
                )
            for idx in np.flatnonzero(under):
                report.violations.append(
                    LimitViolation(
                        float(times[idx]), j, kind, float(vals[idx, j]), float(low[j]),
                        float(low[j] - vals[idx, j]),
                    )
                )

    scan(q, limits.q_min, limits.q_max, "position")
    scan(np.asarray(qd), -limits.qd_max, limits.qd_max, "velocity")
    scan(np.asarray(qdd), -limits.qdd_max, limits.qdd_max, "acceleration")
    if check_torque:
        tau = np.stack([inverse_dynamics(chain, q[i], qd[i], qdd[i]) for i in range(len(q))])
        scan(tau, -limits.tau_max, limits.tau_max, "torque")
    return report


def sample_command(command: CommandSpline, rate: float = COMMAND_RATE):
    """Sample a command at the execution rate: times plus analytic q, qd,
    qdd arrays of shape (n, 10). The final sample lands on t = duration."""
    n = int(np.floor(command.duration * rate)) + 1
    times = np.arange(n) / rate
    if times[-1] < command.duration - 1e-12:
        times = np.append(times, command.duration)
    q = eval_spline(command, times, 0)
    qd = eval_spline(command, times, 1)
    qdd = eval_spline(command, times, 2)
    return times, q, qd, qdd


def check_command(
    chain: ChainSpec,
    limits: JointLimits,
    command: CommandSpline,
    rate: float = COMMAND_RATE,
    check_torque: bool = True,
) -> LimitReport:
    """check_limits on the analytic 250 Hz sampling of a command spline."""
    times, q, qd, qdd = sample_command(command, rate)
    return check_limits(
        chain, limits, times, q[:, :7], qd[:, :7], qdd[:, :7], check_torque=check_torque
    )
