"""Demonstration tracking: fit a feasible command to a recorded hand path.

Solves for the spline command whose tip pose and velocity follow the
demonstrated hand trajectory over the whole trial, with a small jerk
penalty, joint position/velocity/acceleration boxes, zero commanded
velocity at both ends, and a minimum tip height at the start. The result
seeds iterative learning, so it only needs to be a good open-loop match
to the hand path; rope behavior is intentionally out of scope here.

The demonstration object just needs `duration`, `hand_pose_at(t)` and
`hand_velocity_at(t)` on trial-relative time [0, duration].

Structure notes. The boundary conditions and the base channels are not
handled with equality rows: a cone solver meets equalities only to its
tolerance, which would leave ~1e-9 residual boundary velocities after the
first accepted step. Instead the QP runs in a reduced variable set and the
full update is recovered through a duplication map, so the first/last two
knots per joint stay identical and base knots stay constant in time by
construction. A Bezier curve starts and ends with zero velocity exactly
when those knot pairs coincide, so the conditions hold bitwise at every
iterate. Base translation therefore enters only as a constant offset
chosen by the fit (learning later holds it fixed), which also keeps the
base out of the joint limit model, where it has no entries.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .arm import ChainSpec, JointLimits, forward_kinematics, tip_jacobian
from .curves import (
    CommandSpline,
    KNOT_COUNT,
    N_CHANNELS,
    N_JOINTS,
    eval_spline,
    spline_knot_jacobian,
)
from .inverse import (
    QpProblem,
    collocation_times,
    follow_through_error,
    hand_tracking_terms,
    pose_box_rows,
    solve_qp_raw,
)

# neutral elbow-bent seed posture for the IK initializer
_Q_SEED = np.array([0.0, 0.35, 0.0, 1.3, 0.0, 0.9, 0.0])

_REL_DECREASE = 1e-6
_MAX_OUTER = 50
# exact-penalty weight for the start-height constraint; large against the
# hand-error gradients so the penalized optimum sits on the feasible side
_Z_PENALTY = 1e4


class NoProgress(RuntimeError):
    """Tracking stalled above the configured error ceiling.

    Carries the best iterate so callers can inspect or reuse it.
    """

    def __init__(self, message: str, command: CommandSpline, objective: float):
        super().__init__(message)
        self.command = command
        self.objective = objective


@dataclass
class TrackingWeights:
    """Demonstration-tracking weights; defaults follow the production tuning."""

    w_p: float = 10.0
    w_R: float = 0.2
    w_v: float = 0.5
    w_j: float = 5e-7
    z_min: float = 1.2

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")


def _reduction_map(knot_count: int) -> np.ndarray:
    """Duplication matrix E with du_flat = E z.

    Joints keep knot_count - 2 free values each (the first two and last two
    knots move together); base channels keep one shared value for all knots.
    """
    if knot_count < 4:
        raise ValueError("need at least 4 knots for boundary conditions")
    free = knot_count - 2
    n_u = N_CHANNELS * knot_count
    n_z = N_JOINTS * free + 3
    e = np.zeros((n_u, n_z))
    for ch in range(N_JOINTS):
        col = ch * free
        row = ch * knot_count
        e[row, col] = 1.0
        e[row + 1, col] = 1.0
        for k in range(2, knot_count - 2):
            e[row + k, col + k - 1] = 1.0
        e[row + knot_count - 2, col + free - 1] = 1.0
        e[row + knot_count - 1, col + free - 1] = 1.0
    for ch in range(N_JOINTS, N_CHANNELS):
        col = N_JOINTS * free + (ch - N_JOINTS)
        e[ch * knot_count : (ch + 1) * knot_count, col] = 1.0
    return e


def _apply_update(command: CommandSpline, e_map: np.ndarray, z: np.ndarray, step: float) -> CommandSpline:
    du = (e_map @ (step * z)).reshape(N_CHANNELS, command.knot_count)
    return CommandSpline(command.duration, command.knots + du)


def tracking_objective(
    chain: ChainSpec,
    command: CommandSpline,
    demo,
    weights: TrackingWeights | None = None,
    times: np.ndarray | None = None,
) -> float:
    """Weighted hand-error plus jerk cost, summed over the collocation grid."""
    weights = weights or TrackingWeights()
    if times is None:
        times = collocation_times(command.duration)
    wdiag = np.repeat([weights.w_p, weights.w_R, weights.w_v], 3)
    total = 0.0
    for t in times:
        err = follow_through_error(chain, command, demo, t)
        total += float(err @ (wdiag * err))
        jerk = eval_spline(command, t, order=3)[:N_JOINTS]
        total += weights.w_j * float(jerk @ jerk)
    return total


def start_height_violation(chain: ChainSpec, command: CommandSpline, z_min: float) -> float:
    """How far the commanded start pose sits below the tip-height floor."""
    z0 = forward_kinematics(chain, eval_spline(command, 0.0)).position[2]
    return max(0.0, z_min - z0)


def _dls_ik(
    chain: ChainSpec,
    target: np.ndarray,
    q_seed: np.ndarray,
    limits: JointLimits,
    base: np.ndarray,
    iterations: int = 300,
    damping: float = 0.05,
) -> np.ndarray:
    """Damped least-squares position IK over the joints, box-clipped."""
    q = np.clip(q_seed, limits.q_min, limits.q_max)
    for _ in range(iterations):
        full = np.concatenate([q, base])
        err = target - forward_kinematics(chain, full).position
        if np.linalg.norm(err) < 1e-8:
            break
        jac = tip_jacobian(chain, full)[:3, :N_JOINTS]
        dq = jac.T @ np.linalg.solve(jac @ jac.T + damping**2 * np.eye(3), err)
        q = np.clip(q + dq, limits.q_min, limits.q_max)
    return q


def initial_guess(
    demo,
    chain: ChainSpec,
    limits: JointLimits,
    knot_count: int = KNOT_COUNT,
    z_floor: float | None = None,
) -> CommandSpline:
    """Straight-line joint path between IK fits of the demo endpoints.

    The base offset absorbs whatever the joints cannot reach at the start,
    so demonstrations recorded away from the arm's home workspace still
    initialize sensibly. End knots are duplicated for zero boundary
    velocity; interior knots follow a smoothstep profile. When the demo
    starts below the configured tip-height floor, the start target is
    lifted onto it so the optimization begins near feasibility.
    """
    duration = float(demo.duration)
    h_start = demo.hand_pose_at(0.0)
    h_end = demo.hand_pose_at(duration)
    start_target = h_start.position.copy()
    if z_floor is not None and start_target[2] < z_floor:
        start_target[2] = z_floor + 1e-6
    q_start = _dls_ik(chain, start_target, _Q_SEED, limits, np.zeros(3))
    reached = forward_kinematics(chain, np.concatenate([q_start, np.zeros(3)])).position
    base = start_target - reached
    q_end = _dls_ik(chain, h_end.position - base, q_start, limits, np.zeros(3))

    knots = np.zeros((N_CHANNELS, knot_count))
    tau = np.linspace(0.0, 1.0, knot_count)
    profile = 3.0 * tau**2 - 2.0 * tau**3
    for j in range(N_JOINTS):
        knots[j] = q_start[j] + profile * (q_end[j] - q_start[j])
        knots[j, 1] = knots[j, 0]
        knots[j, knot_count - 2] = knots[j, knot_count - 1]
    knots[N_JOINTS:] = base[:, None]
    guess = CommandSpline(duration, knots)

    # the sweep scales linearly in (q_end - q_start), so shrinking it pulls
    # velocity and acceleration inside the boxes when the endpoints are too
    # far apart for the trial duration; the fit then works from a feasible
    # start and pushes against the caps only where the demo demands it
    grid = collocation_times(duration)
    qd = np.array([eval_spline(guess, t, order=1)[:N_JOINTS] for t in grid])
    qdd = np.array([eval_spline(guess, t, order=2)[:N_JOINTS] for t in grid])
    ratio = max(
        float(np.max(np.abs(qd) / limits.qd_max)),
        float(np.max(np.abs(qdd) / limits.qdd_max)),
    )
    if ratio > 0.9:
        scale = 0.9 / ratio
        start_col = knots[:N_JOINTS, :1]
        knots[:N_JOINTS] = start_col + scale * (knots[:N_JOINTS] - start_col)
        guess = CommandSpline(duration, knots)
    return guess


def _tracking_qp(
    chain: ChainSpec,
    command: CommandSpline,
    demo,
    limits: JointLimits,
    weights: TrackingWeights,
    times: np.ndarray,
    e_map: np.ndarray,
) -> QpProblem:
    n_u = N_CHANNELS * command.knot_count
    triples = [(weights.w_p, weights.w_R, weights.w_v)] * len(times)
    hess = np.zeros((n_u, n_u))
    linear = np.zeros(n_u)
    for term in hand_tracking_terms(chain, command, demo, times, triples):
        hess += 2.0 * term.quadratic
        linear += term.linear
    # jerk of the updated command is linear in du, so this block is exact
    for t in times:
        s3 = spline_knot_jacobian(command, t, order=3)[:N_JOINTS]
        jerk = eval_spline(command, t, order=3)[:N_JOINTS]
        hess += 2.0 * weights.w_j * (s3.T @ s3)
        linear += 2.0 * weights.w_j * (s3.T @ jerk)

    rows, rhs, tags = pose_box_rows(command, limits, times)
    q0 = eval_spline(command, 0.0)
    tip0 = forward_kinematics(chain, q0)
    jz = tip_jacobian(chain, q0)[2] @ spline_knot_jacobian(command, 0.0)
    rows.append(-jz)
    rhs.append(tip0.position[2] - weights.z_min)
    tags.append("z0")

    n_z = e_map.shape[1]
    a_in = np.vstack(rows) @ e_map
    return QpProblem(
        hessian=e_map.T @ hess @ e_map,
        linear=e_map.T @ linear,
        a_eq=np.zeros((0, n_z)),
        b_eq=np.zeros(0),
        a_in=a_in,
        b_in=np.asarray(rhs, dtype=float),
        n_u=n_z,
        n_x=0,
        row_kinds=tags,
    )


def track_demonstration(
    demo,
    chain: ChainSpec,
    limits: JointLimits,
    weights: TrackingWeights | None = None,
    *,
    knot_count: int = KNOT_COUNT,
    error_ceiling: float | None = None,
    max_outer: int = _MAX_OUTER,
    on_iterate=None,
) -> CommandSpline:
    """Fit a command to the demonstrated hand path by sequential QPs.

    Each outer iteration linearizes the hand error about the current
    command, solves the constrained QP, and backtracks on a merit function
    (the true objective plus an exact penalty on start-height violation),
    so accepted iterates are strictly improving and stay feasible: the box
    rows are exact in the knots, and the penalty drives the one linearized
    constraint to feasibility. Stops when the relative decrease falls below
    1e-6 or after max_outer iterations. If an error ceiling is configured
    and the final merit sits above it, raises NoProgress carrying the best
    command found.
    """
    weights = weights or TrackingWeights()
    times = collocation_times(float(demo.duration))
    e_map = _reduction_map(knot_count)
    current = initial_guess(demo, chain, limits, knot_count, z_floor=weights.z_min)

    def merit(cmd: CommandSpline) -> float:
        return tracking_objective(chain, cmd, demo, weights, times) + _Z_PENALTY * (
            start_height_violation(chain, cmd, weights.z_min)
        )

    objective = merit(current)
    if on_iterate is not None:
        on_iterate(0, objective)
    for outer in range(max_outer):
        problem = _tracking_qp(chain, current, demo, limits, weights, times, e_map)
        raw = solve_qp_raw(problem, require_feasible_start=False)
        if np.max(np.abs(raw.z)) < 1e-12:
            break
        step = 1.0
        candidate = None
        cand_objective = objective
        while step >= 2.0**-8:
            trial = _apply_update(current, e_map, raw.z, step)
            trial_objective = merit(trial)
            if trial_objective < objective:
                candidate = trial
                cand_objective = trial_objective
                break
            step *= 0.5
        if candidate is None:
            break
        relative_drop = (objective - cand_objective) / max(objective, 1e-300)
        current, objective = candidate, cand_objective
        if on_iterate is not None:
            on_iterate(outer + 1, objective)
        if relative_drop < _REL_DECREASE:
            break
    if error_ceiling is not None and objective > error_ceiling:
        raise NoProgress(
            f"tracking objective stalled at {objective:.6g}, above the "
            f"ceiling {error_ceiling:.6g}",
            command=current,
            objective=objective,
        )
    return current


def tracking_error_report(
    chain: ChainSpec,
    command: CommandSpline,
    demo,
    times: np.ndarray | None = None,
) -> str:
    """Per-sample hand position/orientation error as CSV text."""
    if times is None:
        times = collocation_times(command.duration)
    buf = io.StringIO()
    buf.write("time_s,pos_err_m,rot_err_rad\n")
    for t in times:
        err = follow_through_error(chain, command, demo, t)
        buf.write(
            f"{t:.6f},{np.linalg.norm(err[:3]):.9f},{np.linalg.norm(err[3:6]):.9f}\n"
        )
    return buf.getvalue()
