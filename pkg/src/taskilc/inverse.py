"""Critical-point inverse model: a convex QP mapping a measured rope-state
error at the critical time to a constrained command update.

Variables are z = [du; dx] with dx the predicted rope-state change at the
critical time. Internally the QP uses the additive convention: dx = M du
models x(u + du) - x(u), the tracked target is the state change we want,
and the follow-through terms penalize hand-path deviation from the
demonstration after the critical time, linearized about the current
command. inverse_model is the single place that owns the sign flip: it
passes -x_err as the target and negates the solution so callers can apply
u_next = u - update.du for both cost families to improve.

Limits are enforced at collocation samples. Position, velocity and
acceleration rows are exact (the spline is linear in its knots); torque
rows use the inverse-dynamics linearization at the current command.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

import clarabel

from .arm import ChainSpec, JointLimits, forward_kinematics, inverse_dynamics, tip_jacobian
from .curves import (
    CommandSpline,
    N_CHANNELS,
    N_JOINTS,
    eval_spline,
    so3_log,
    so3_right_jacobian_inv,
    spline_knot_jacobian,
)
from .ropediff import LinearizedSystem, initial_state_for, linearize_system
from .ropesim import RopeParams

PVA_COLLOCATION = 64  # interior samples; both endpoints are added
TORQUE_COLLOCATION = 16
KKT_TOL = 1e-7


class InfeasibleQp(RuntimeError):
    """The current command itself violates a limit; no update can help."""


class QpConstructionError(ValueError):
    pass


@dataclass
class QpWeights:
    """Inverse-model weights; defaults follow the production tuning.

    w_ft_velocity is accepted for config compatibility but takes part in
    no cost term (the follow-through velocity weight is w_vft).
    """

    w_control: float = 0.5
    w_critical_pos: float = 25.0
    w_critical_vel: float = 0.00375
    w_pc: float = 100.0
    w_vc: float = 0.1
    w_Rc: float = 5.0
    w_pft: float = 1.0
    w_vft: float = 0.1
    w_Rft: float = 0.1
    w_ft_velocity: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")

    def critical_diagonal(self, n_x: int) -> np.ndarray:
        half = n_x // 2
        return np.concatenate(
            [np.full(half, self.w_critical_pos), np.full(half, self.w_critical_vel)]
        )


@dataclass
class FollowThroughTerm:
    time: float
    quadratic: np.ndarray  # (n_u, n_u)
    linear: np.ndarray  # (n_u,)


@dataclass
class QpProblem:
    hessian: np.ndarray  # symmetric PSD, over z = [du; dx]
    linear: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    a_in: np.ndarray  # a_in z <= b_in
    b_in: np.ndarray
    n_u: int
    n_x: int
    row_kinds: list = field(default_factory=list)  # one tag per inequality row

    def __post_init__(self):
        n = self.n_u + self.n_x
        if self.hessian.shape != (n, n) or self.linear.shape != (n,):
            raise QpConstructionError("cost dimensions inconsistent")
        if self.a_eq.shape[1] != n or self.a_in.shape[1] != n:
            raise QpConstructionError("constraint dimensions inconsistent")
        if len(self.b_eq) != len(self.a_eq) or len(self.b_in) != len(self.a_in):
            raise QpConstructionError("constraint right-hand sides inconsistent")
        asym = np.max(np.abs(self.hessian - self.hessian.T))
        if asym > 1e-9 * max(1.0, np.max(np.abs(self.hessian))):
            raise QpConstructionError("Hessian not symmetric")
        self.hessian = 0.5 * (self.hessian + self.hessian.T)


@dataclass
class RawQpSolution:
    """Verified solver output before any command-update interpretation."""

    z: np.ndarray
    duals_eq: np.ndarray
    duals_in: np.ndarray
    status: str  # "optimal" or "max-iter"
    objective: float
    kkt_residual: float


@dataclass
class CommandUpdate:
    du: np.ndarray  # (channels, knots); base rows exactly zero
    predicted_dx: np.ndarray  # rope-state change at t_c once du is applied
    status: str
    objective: float
    kkt_residual: float


@dataclass
class InverseContext:
    """Everything inverse_model needs besides the measured error."""

    chain: ChainSpec
    command: CommandSpline
    rope_params: RopeParams
    demo: object  # Demonstration: critical_time, hand_pose_at, hand_velocity_at
    limits: JointLimits
    weights: QpWeights = field(default_factory=QpWeights)
    mode: str = "weighted"  # or "equal"
    measured_states: object = None  # callable t -> stacked [p; v], equal mode

    def with_command(self, command: CommandSpline) -> "InverseContext":
        return replace(self, command=command)


def collocation_times(duration: float, interior: int = PVA_COLLOCATION) -> np.ndarray:
    """interior uniformly spaced samples plus both endpoints."""
    return np.linspace(0.0, duration, interior + 2)


def follow_through_error(chain: ChainSpec, command: CommandSpline, demo, t: float) -> np.ndarray:
    """Stacked hand error (position, log-orientation, linear velocity)."""
    q = eval_spline(command, t)
    qd = eval_spline(command, t, order=1)
    pose = forward_kinematics(chain, q)
    jac = tip_jacobian(chain, q)
    target = demo.hand_pose_at(t)
    e_pos = pose.position - target.position
    e_rot = so3_log(target.rotation.T @ pose.rotation)
    e_vel = jac[:3] @ qd - demo.hand_velocity_at(t)
    return np.concatenate([e_pos, e_rot, e_vel])


def _tip_velocity_q_jacobian(chain: ChainSpec, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """d(J_p(q) qd)/dq by central differences, (3, 10).

    The configuration dependence of the tip Jacobian matters for the
    velocity rows of the hand-tracking linearization; without it the
    quadratic model misses a first-order term proportional to qd.
    """
    h = 1e-6
    out = np.empty((3, 10))
    for j in range(10):
        e = np.zeros(10)
        e[j] = h
        vp = tip_jacobian(chain, q + e)[:3] @ qd
        vm = tip_jacobian(chain, q - e)[:3] @ qd
        out[:, j] = (vp - vm) / (2 * h)
    return out


def hand_tracking_terms(
    chain: ChainSpec,
    command: CommandSpline,
    demo,
    times,
    weight_triples,
) -> list:
    """Quadratic hand-error terms, one per sample time.

    Each term models e(u + du) ~ e + J_u du with J_u assembled from the tip
    Jacobian and the spline knot Jacobian: position rows J_p S0, orientation
    rows Jr_inv(e_R) R^T J_w S0, velocity rows J_p S1 plus the configuration
    dependence of J_p. weight_triples gives (w_pos, w_rot, w_vel) per sample.
    """
    terms = []
    for t, w in zip(times, weight_triples):
        q = eval_spline(command, t)
        qd = eval_spline(command, t, order=1)
        pose = forward_kinematics(chain, q)
        jac = tip_jacobian(chain, q)
        target = demo.hand_pose_at(t)
        e_pos = pose.position - target.position
        e_rot = so3_log(target.rotation.T @ pose.rotation)
        e_vel = jac[:3] @ qd - demo.hand_velocity_at(t)
        err = np.concatenate([e_pos, e_rot, e_vel])

        s0 = spline_knot_jacobian(command, t)
        s1 = spline_knot_jacobian(command, t, order=1)
        j_u = np.vstack(
            [
                jac[:3] @ s0,
                so3_right_jacobian_inv(e_rot) @ pose.rotation.T @ jac[3:] @ s0,
                jac[:3] @ s1 + _tip_velocity_q_jacobian(chain, q, qd) @ s0,
            ]
        )
        wdiag = np.repeat(w, 3)
        terms.append(
            FollowThroughTerm(
                time=float(t),
                quadratic=j_u.T @ (wdiag[:, None] * j_u),
                linear=2.0 * j_u.T @ (wdiag * err),
            )
        )
    return terms


def build_follow_through_cost(
    chain: ChainSpec,
    command: CommandSpline,
    demo,
    t_c: float,
    weights: QpWeights | None = None,
    times: np.ndarray | None = None,
) -> list:
    """Per-sample quadratic hand-tracking terms for t in [t_c, T].

    Weights are (w_pc, w_Rc, w_vc) at the critical sample and
    (w_pft, w_Rft, w_vft) strictly after it.
    """
    weights = weights or QpWeights()
    if not t_c < command.duration:
        raise ValueError("critical time must precede the command end")
    if times is None:
        grid = collocation_times(command.duration)
        times = np.concatenate([[t_c], grid[grid > t_c + 1e-12]])
    triples = [
        (weights.w_pc, weights.w_Rc, weights.w_vc)
        if abs(t - t_c) <= 1e-12
        else (weights.w_pft, weights.w_Rft, weights.w_vft)
        for t in times
    ]
    return hand_tracking_terms(chain, command, demo, times, triples)


def pose_box_rows(command: CommandSpline, limits: JointLimits, times):
    """Two-sided joint position/velocity/acceleration box rows over du.

    Spline derivatives are linear in the knots, so these rows are exact.
    Returns (rows, rhs, tags) with rows as (n_u,) vectors; A du <= b keeps
    the updated command inside the limits at every sample.
    """
    rows, rhs, tags = [], [], []
    kinds = (
        ("pos", 0, limits.q_min, limits.q_max),
        ("vel", 1, -limits.qd_max, limits.qd_max),
        ("acc", 2, -limits.qdd_max, limits.qdd_max),
    )
    for t in times:
        for tag, order, lo, hi in kinds:
            s = spline_knot_jacobian(command, t, order=order)[:N_JOINTS]
            cur = eval_spline(command, t, order=order)[:N_JOINTS]
            for j in range(N_JOINTS):
                rows.append(s[j])
                rhs.append(hi[j] - cur[j])
                tags.append(tag)
                rows.append(-s[j])
                rhs.append(cur[j] - lo[j])
                tags.append(tag)
    return rows, rhs, tags


def _torque_rows(chain, command, limits, times, n_u):
    """Linearized torque box rows: (A, b, tags). Exact in the acceleration
    argument (inverse dynamics is affine in qdd), finite differences in q
    and qd."""
    rows, rhs, tags = [], [], []
    h = 1e-6
    for t in times:
        q = eval_spline(command, t)
        qd = eval_spline(command, t, order=1)
        qdd = eval_spline(command, t, order=2)
        q7, qd7, qdd7 = q[:N_JOINTS], qd[:N_JOINTS], qdd[:N_JOINTS]
        tau0 = inverse_dynamics(chain, q7, qd7, qdd7)
        jq = np.empty((N_JOINTS, N_JOINTS))
        jqd = np.empty((N_JOINTS, N_JOINTS))
        jqdd = np.empty((N_JOINTS, N_JOINTS))
        for j in range(N_JOINTS):
            e = np.zeros(N_JOINTS)
            e[j] = h
            jq[:, j] = (
                inverse_dynamics(chain, q7 + e, qd7, qdd7)
                - inverse_dynamics(chain, q7 - e, qd7, qdd7)
            ) / (2 * h)
            jqd[:, j] = (
                inverse_dynamics(chain, q7, qd7 + e, qdd7)
                - inverse_dynamics(chain, q7, qd7 - e, qdd7)
            ) / (2 * h)
            e[j] = 1.0
            jqdd[:, j] = inverse_dynamics(chain, q7, qd7, qdd7 + e) - tau0
        s0 = spline_knot_jacobian(command, t)[:N_JOINTS]
        s1 = spline_knot_jacobian(command, t, order=1)[:N_JOINTS]
        s2 = spline_knot_jacobian(command, t, order=2)[:N_JOINTS]
        dtau = jq @ s0 + jqd @ s1 + jqdd @ s2  # (7, n_u)
        for j in range(N_JOINTS):
            rows.append(dtau[j])
            rhs.append(limits.tau_max[j] - tau0[j])
            tags.append("tau")
            rows.append(-dtau[j])
            rhs.append(limits.tau_max[j] + tau0[j])
            tags.append("tau")
    return rows, rhs, tags


def build_qp(
    target: np.ndarray,
    lin: LinearizedSystem,
    ft_costs: list,
    command: CommandSpline,
    limits: JointLimits,
    weights: QpWeights | None = None,
    state_terms: list | None = None,
    chain: ChainSpec | None = None,
) -> QpProblem:
    """Assemble the critical-point QP.

    target is the desired rope-state change at t_c under the additive
    convention dx = M du. state_terms optionally adds pre-critical tracked
    states as (matrix, target) pairs, folded into the du block (they carry
    no constraints of their own, so eliminating them is exact). Torque
    rows are built only when the chain is provided.
    """
    weights = weights or QpWeights()
    matrix = lin.matrix
    n_x, n_u = matrix.shape
    target = np.asarray(target, dtype=float)
    if target.shape != (n_x,):
        raise QpConstructionError("target dimension mismatch")
    n = n_u + n_x
    hess = np.zeros((n, n))
    linear = np.zeros(n)

    qdiag = weights.critical_diagonal(n_x)
    hess[n_u:, n_u:] = 2.0 * np.diag(qdiag)
    linear[n_u:] = -2.0 * qdiag * target

    for term in ft_costs:
        if term.quadratic.shape != (n_u, n_u):
            raise QpConstructionError("follow-through term dimension mismatch")
        hess[:n_u, :n_u] += 2.0 * term.quadratic
        linear[:n_u] += term.linear

    knot_count = command.knot_count
    joint_flat = np.concatenate(
        [np.arange(ch * knot_count, (ch + 1) * knot_count) for ch in range(N_JOINTS)]
    )
    hess[joint_flat, joint_flat] += 2.0 * weights.w_control

    if state_terms:
        qd = np.diag(qdiag)
        for m_k, e_k in state_terms:
            hess[:n_u, :n_u] += 2.0 * (m_k.T @ qd @ m_k)
            linear[:n_u] += -2.0 * (m_k.T @ (qdiag * e_k))

    # dynamics coupling dx = M du, then base pinning
    a_eq = np.zeros((n_x + 3 * knot_count, n))
    a_eq[:n_x, :n_u] = matrix
    a_eq[:n_x, n_u:] = -np.eye(n_x)
    base_flat = np.arange(N_JOINTS * knot_count, N_CHANNELS * knot_count)
    for i, idx in enumerate(base_flat):
        a_eq[n_x + i, idx] = 1.0
    b_eq = np.zeros(n_x + 3 * knot_count)

    rows, rhs, tags = pose_box_rows(command, limits, collocation_times(command.duration))
    if chain is not None:
        tau_times = np.linspace(0.0, command.duration, TORQUE_COLLOCATION)
        t_rows, t_rhs, t_tags = _torque_rows(chain, command, limits, tau_times, n_u)
        rows.extend(t_rows)
        rhs.extend(t_rhs)
        tags.extend(t_tags)

    a_in = np.zeros((len(rows), n))
    if rows:
        a_in[:, :n_u] = np.vstack(rows)
    b_in = np.asarray(rhs, dtype=float)
    return QpProblem(hess, linear, a_eq, b_eq, a_in, b_in, n_u, n_x, tags)


def kkt_residuals(problem: QpProblem, z: np.ndarray, y_eq: np.ndarray, y_in: np.ndarray):
    """Independent stationarity/feasibility/complementarity check."""
    grad = problem.hessian @ z + problem.linear
    if len(y_eq):
        grad = grad + problem.a_eq.T @ y_eq
    if len(y_in):
        grad = grad + problem.a_in.T @ y_in
    scale = max(1.0, float(np.max(np.abs(problem.linear))))
    stationarity = float(np.max(np.abs(grad))) / scale
    primal_eq = float(np.max(np.abs(problem.a_eq @ z - problem.b_eq))) if len(problem.b_eq) else 0.0
    slack = problem.b_in - problem.a_in @ z if len(problem.b_in) else np.zeros(0)
    primal_in = float(max(0.0, -np.min(slack))) if len(slack) else 0.0
    dual = float(max(0.0, -np.min(y_in))) if len(y_in) else 0.0
    comp = float(np.max(np.abs(y_in * slack))) / scale if len(y_in) else 0.0
    return {
        "stationarity": stationarity,
        "primal_eq": primal_eq,
        "primal_in": primal_in,
        "dual": dual,
        "complementarity": comp,
    }


def solve_qp_raw(problem: QpProblem, require_feasible_start: bool = True) -> RawQpSolution:
    """Solve with Clarabel; verify KKT residuals independently.

    With require_feasible_start the zero update must be inequality-feasible
    (the current command satisfies limits); otherwise the problem is
    reported infeasible. Callers whose outer loop is allowed to restore
    feasibility (linearized nonlinear constraints) turn the check off.
    When z = 0 is feasible, the optimum can never exceed the zero-update
    objective, and an optimum above it flags untrustworthy solver output.
    """
    if require_feasible_start and len(problem.b_in) and np.min(problem.b_in) < -1e-9:
        raise InfeasibleQp(
            "current command violates a limit even with a zero update "
            f"(worst margin {np.min(problem.b_in):.3e})"
        )
    p = sparse.csc_matrix(np.triu(problem.hessian))
    a = sparse.csc_matrix(np.vstack([problem.a_eq, problem.a_in]))
    b = np.concatenate([problem.b_eq, problem.b_in])
    cones = []
    if len(problem.b_eq):
        cones.append(clarabel.ZeroConeT(len(problem.b_eq)))
    if len(problem.b_in):
        cones.append(clarabel.NonnegativeConeT(len(problem.b_in)))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    # Default static regularization (1e-8) caps the attainable precision on
    # the weight spread used here; shrinking it lets the zero-error problem
    # solve to ~1e-11 instead of stalling near 1e-9.
    settings.tol_gap_abs = 1e-9
    settings.tol_gap_rel = 1e-9
    settings.tol_feas = 1e-9
    settings.static_regularization_constant = 1e-10
    solver = clarabel.DefaultSolver(p, problem.linear, a, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        label = "optimal"
    elif "Infeasible" in status:
        raise InfeasibleQp(f"solver reported {status}")
    else:
        label = "max-iter"
    z = np.asarray(sol.x)
    if not np.all(np.isfinite(z)):
        raise RuntimeError(f"solver returned non-finite iterate (status {status})")
    duals = np.asarray(sol.z)
    y_eq = duals[: len(problem.b_eq)].copy()
    y_in = duals[len(problem.b_eq) :].copy()
    res = kkt_residuals(problem, z, y_eq, y_in)
    kkt = max(res.values())
    objective = float(sol.obj_val)
    zero_feasible = (len(problem.b_eq) == 0 or np.max(np.abs(problem.b_eq)) == 0.0) and (
        len(problem.b_in) == 0 or np.min(problem.b_in) >= 0.0
    )
    if label == "optimal" and zero_feasible and objective > 1e-9:
        raise RuntimeError(
            f"QP optimum above the zero-update objective ({objective:.3e}); "
            "solver output untrustworthy"
        )
    return RawQpSolution(
        z=z.copy(),
        duals_eq=y_eq,
        duals_in=y_in,
        status=label,
        objective=objective,
        kkt_residual=float(kkt),
    )


def solve_qp(problem: QpProblem) -> CommandUpdate:
    """Solve and interpret the iterate as a pinned-base command update."""
    raw = solve_qp_raw(problem)
    du = raw.z[: problem.n_u].copy()
    knot_count = problem.n_u // N_CHANNELS
    du = du.reshape(N_CHANNELS, knot_count)
    if raw.status == "optimal" and np.max(np.abs(du[N_JOINTS:])) > 1e-9:
        raise RuntimeError("base rows escaped the pinning constraints")
    du[N_JOINTS:] = 0.0
    return CommandUpdate(
        du=du,
        predicted_dx=raw.z[problem.n_u :].copy(),
        status=raw.status,
        objective=raw.objective,
        kkt_residual=raw.kkt_residual,
    )


def inverse_model(x_err: np.ndarray, ctx: InverseContext) -> CommandUpdate:
    """Map a critical-point error to a command update for u_next = u - du.

    Sign convention lives here and only here: the QP tracks the additive
    state change -x_err (driving the plant toward the demonstration), and
    the solution is negated so the ILC convention u - du applies it.
    """
    if ctx.mode not in ("weighted", "equal"):
        raise ValueError(f"unknown objective mode {ctx.mode!r}")
    collect = ctx.mode == "equal"
    if collect and ctx.measured_states is None:
        raise ValueError("equal mode needs measured_states in the context")
    z0 = initial_state_for(ctx.chain, ctx.command, ctx.rope_params)
    lin = linearize_system(
        ctx.chain,
        ctx.command,
        ctx.rope_params,
        z0,
        ctx.demo.critical_time,
        collect_pre=collect,
    )
    ft = build_follow_through_cost(
        ctx.chain, ctx.command, ctx.demo, ctx.demo.critical_time, ctx.weights
    )
    state_terms = None
    if collect:
        state_terms = []
        for k, m_k in lin.pre_matrices:
            t_k = k * ctx.rope_params.dt
            measured = np.asarray(ctx.measured_states(t_k), dtype=float)
            demo_state = np.asarray(ctx.demo.rope_state_at(t_k), dtype=float)
            state_terms.append((m_k, -(measured - demo_state)))
    qp = build_qp(
        -np.asarray(x_err, dtype=float),
        lin,
        ft,
        ctx.command,
        ctx.limits,
        ctx.weights,
        state_terms=state_terms,
        chain=ctx.chain,
    )
    upd = solve_qp(qp)
    return CommandUpdate(
        du=-upd.du,
        predicted_dx=upd.predicted_dx,
        status=upd.status,
        objective=upd.objective,
        kkt_residual=upd.kkt_residual,
    )
