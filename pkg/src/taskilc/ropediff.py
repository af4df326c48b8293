"""Sensitivities of the rope rollout, via the implicit function theorem.

Each integrator step is an implicit residual r_k(z_k, z_{k-1}, tip_k) = 0
in z = (p, v, lam). Differentiating the stacked system instead of the
solver iterates gives exact derivatives of the converged trajectory:

    A_k dz_k + B_k dz_{k-1} + C_k dtip_k = 0
    dz_k/dtips = -A_k^{-1} (B_k dz_{k-1}/dtips + C_k e_k^T)

with A_k the converged Newton matrix of step k. The recursion runs
forward; only per-step linear solves are formed, never a full inverse.

linearize_system chains these tip sensitivities with the arm kinematics
and the spline's knot Jacobian to obtain the derivative of the rope state
at the critical time with respect to the flattened command knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arm import ChainSpec, forward_kinematics, sample_command, tip_jacobian
from .curves import CommandSpline, N_CHANNELS, spline_knot_jacobian
from .ropesim import (
    Rollout,
    RopeParams,
    RopeState,
    rollout,
    static_hanging_state,
    step_jacobian,
)


class SingularKKT(RuntimeError):
    """Step Jacobian is rank deficient; the linearization is invalid here."""


@dataclass
class LinearizedSystem:
    """Local linear model x(t_c) = x0 + M (u - u0) around a rollout.

    matrix rows stack positions then velocities at the critical index;
    columns follow the channel-major knot flattening of CommandSpline.
    pre_matrices optionally holds (step, matrix) pairs for the simulator
    samples before the critical index.
    """

    matrix: np.ndarray  # (6N, channels * knots)
    command: CommandSpline
    rollout: Rollout
    critical_index: int
    pre_matrices: list | None = None

    def state_at_critical(self) -> np.ndarray:
        k = self.critical_index
        return np.concatenate(
            [self.rollout.pos[k].ravel(), self.rollout.vel[k].ravel()]
        )


def hang_sensitivity(params: RopeParams) -> np.ndarray:
    """d(static hanging state)/d(tip): every link position follows the tip
    one-to-one; velocities and multipliers do not depend on it."""
    n = params.n_links
    out = np.zeros((7 * n, 3))
    for i in range(n):
        out[3 * i : 3 * i + 3] = np.eye(3)
    return out


def _ift_sweep(params: RopeParams, roll: Rollout, k_max: int, dz0_dtip0):
    """Yield (k, dz_k/dtips) for k = 0..k_max, full 7N rows each."""
    n = params.n_links
    n_samples = len(roll.tips)
    sens = np.zeros((7 * n, 3 * n_samples))
    if dz0_dtip0 is not None:
        sens[:, :3] = dz0_dtip0
    yield 0, sens
    mdiag = np.repeat(params.masses, 3)
    dt = params.dt
    for k in range(1, k_max + 1):
        rhs = np.zeros_like(sens)
        # B dz_{k-1}: r_pos depends on old p, r_dyn on old v, r_con on neither
        rhs[: 3 * n] = -sens[: 3 * n]
        rhs[3 * n : 6 * n] = -mdiag[:, None] * sens[3 * n : 6 * n]
        # C dtip_k: only the first constraint touches the driven tip
        lam1 = roll.lam[k][0]
        d1 = roll.pos[k][0] - roll.tips[k]
        cols = slice(3 * k, 3 * k + 3)
        rhs[3 * n : 3 * n + 3, cols] += 2.0 * dt * lam1 * np.eye(3)
        rhs[6 * n, cols] += -2.0 * d1
        a_k = step_jacobian(params, roll.pos[k], roll.vel[k], roll.lam[k], roll.tips[k])
        try:
            sens = -np.linalg.solve(a_k, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKKT(f"step {k}: {exc}")
        yield k, sens


def linearize_rollout(
    params: RopeParams,
    z0: RopeState,
    tip_traj: np.ndarray,
    critical_index: int,
    *,
    precomputed: Rollout | None = None,
    dz0_dtip0: np.ndarray | None = None,
) -> np.ndarray:
    """d[p(t_c); v(t_c)] / d(tip_traj flattened), shape (6N, 3 len).

    z0 is held fixed unless dz0_dtip0 supplies its sensitivity to the
    initial tip sample (used when trials re-hang the rope at the start
    tip). Columns for tips after the critical index are exactly zero.
    """
    tip_traj = np.asarray(tip_traj, dtype=float)
    n_samples = len(tip_traj)
    if not 0 <= critical_index <= n_samples - 1:
        raise ValueError("critical index outside the rollout")
    roll = precomputed if precomputed is not None else rollout(params, z0, tip_traj)
    sens = None
    for _, sens in _ift_sweep(params, roll, critical_index, dz0_dtip0):
        pass
    return sens[: 6 * params.n_links]


def command_tip_path(chain: ChainSpec, command: CommandSpline):
    """Tip positions on the command-rate grid: (times, tips (n,3))."""
    times, q, _, _ = sample_command(command)
    tips = np.empty((len(times), 3))
    for i in range(len(times)):
        tips[i] = forward_kinematics(chain, q[i]).position
    return times, tips


def resample_to_rope_grid(params: RopeParams, times: np.ndarray, tips: np.ndarray):
    """Linear resampling from the command grid to the simulator grid."""
    duration = times[-1]
    n_rope = int(np.floor(duration / params.dt + 1e-9))
    t_rope = params.dt * np.arange(n_rope + 1)
    out = np.empty((n_rope + 1, 3))
    for c in range(3):
        out[:, c] = np.interp(t_rope, times, tips[:, c])
    return t_rope, out


def linearize_system(
    chain: ChainSpec,
    command: CommandSpline,
    params: RopeParams,
    z0: RopeState,
    t_c: float,
    *,
    rehang: bool = True,
    collect_pre: bool = False,
) -> LinearizedSystem:
    """Derivative of the rope state at t_c with respect to command knots.

    Chains drollout/dtips with dtip/dq (arm Jacobian, position rows) and
    dq/dknots (the spline is linear in its knots), with the tip path
    linearly resampled onto the simulator grid. rehang includes the
    dependence of the initial hanging state on the start tip, matching
    trials that re-hang the rope before each execution. collect_pre also
    returns the per-sample matrices for every simulator step before the
    critical index (used by the equal-weighting objective).
    """
    times_cmd, q, _, _ = sample_command(command)
    n_cmd = len(times_cmd)
    tips_cmd = np.empty((n_cmd, 3))
    blocks = []  # per command sample: d tip / d knots, (3, 10K)
    for i in range(n_cmd):
        tips_cmd[i] = forward_kinematics(chain, q[i]).position
        j_p = tip_jacobian(chain, q[i])[:3]
        blocks.append(j_p @ spline_knot_jacobian(command, times_cmd[i]))
    t_rope, tips_rope = resample_to_rope_grid(params, times_cmd, tips_cmd)
    n_rope = len(t_rope) - 1
    k_c = int(round(t_c / params.dt))
    if not 0 <= k_c <= n_rope:
        raise ValueError("critical time outside the command duration")

    n_knots = N_CHANNELS * command.knot_count
    tmat = np.zeros((3 * (n_rope + 1), n_knots))
    j_idx = np.clip(np.searchsorted(times_cmd, t_rope, side="right") - 1, 0, n_cmd - 2)
    for k in range(n_rope + 1):
        j = j_idx[k]
        w = (t_rope[k] - times_cmd[j]) / (times_cmd[j + 1] - times_cmd[j])
        tmat[3 * k : 3 * k + 3] = (1.0 - w) * blocks[j] + w * blocks[j + 1]

    roll = rollout(params, z0, tips_rope)
    dz0 = hang_sensitivity(params) if rehang else None
    rows = 6 * params.n_links
    matrix = None
    pre = [] if collect_pre else None
    for k, sens in _ift_sweep(params, roll, k_c, dz0):
        if k == k_c:
            matrix = sens[:rows] @ tmat
        elif collect_pre:
            pre.append((k, sens[:rows] @ tmat))
    if not np.all(np.isfinite(matrix)):
        raise SingularKKT("non-finite entries in the linearized model")
    return LinearizedSystem(matrix, command.copy(), roll, k_c, pre)


def initial_state_for(chain: ChainSpec, command: CommandSpline, params: RopeParams) -> RopeState:
    """Rope hanging from the arm tip at the command's start posture."""
    q0 = command.knots[:, 0]
    tip0 = forward_kinematics(chain, q0).position
    return static_hanging_state(params, tip0)
