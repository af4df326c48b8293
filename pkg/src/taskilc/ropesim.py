"""Constrained point-mass rope simulator.

The rope is a serial chain: a kinematically driven tip point followed by
N free point masses, joined by N squared-distance constraints

    g_1 = |p_1 - tip|^2 - l^2,   g_i = |p_i - p_{i-1}|^2 - l^2.

One step of the first-order variational integrator solves, implicitly in
(p', v', lam'):

    p' - p - dt v'                                   = 0
    M (v' - v) - dt f(p', v') - dt G(p', tip)^T lam' = 0
    g(p', tip)                                       = 0

by Newton iteration with analytic Jacobians. f is gravity plus bending.

Bending sits at interior joints whose both segments connect free masses
(the driven tip is a free hinge, like a pinch grip). Stiffness follows a
discrete elastica, torque = stiffness * theta, expressed through
xi = 1 - cos(theta) so force and Jacobian stay smooth at the straight
rest shape. Damping acts on the relative angular velocity of adjacent
segments (omega = u x u_dot), which equals theta_dot in the bending
plane to first order and dissipates exactly:
power = -damping * |omega_2 - omega_1|^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

GRAVITY = 9.81

NEWTON_TOL = 1e-10  # max-norm over all residual blocks
NEWTON_MAX_ITERS = 50
RETRY_SUBSTEPS = 10


class NewtonDivergence(RuntimeError):
    """Implicit step failed to converge (timestep or command too aggressive)."""

    def __init__(self, message: str, step: int | None = None, residual: float = np.nan):
        super().__init__(message)
        self.step = step
        self.residual = residual


@dataclass
class RopeParams:
    """Model rope. Masses are in units of the link mass; stiffness and
    damping are per-joint coefficients in those units."""

    n_links: int = 11
    seg_len: float = 0.1
    link_mass: float = 1.0
    end_mass: float = 5.0
    stiffness: float = 1.0e5
    damping: float = 50.0
    dt: float = 0.005

    def __post_init__(self):
        if self.n_links < 1:
            raise ValueError("need at least one link")
        for name in ("seg_len", "link_mass", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.end_mass <= 0:
            raise ValueError("end_mass must be positive")
        if self.stiffness < 0 or self.damping < 0:
            raise ValueError("stiffness and damping must be non-negative")

    @property
    def masses(self) -> np.ndarray:
        m = np.full(self.n_links, self.link_mass)
        m[-1] = self.end_mass
        return m

    def replace(self, **kw) -> "RopeParams":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class RopeState:
    pos: np.ndarray  # (N, 3)
    vel: np.ndarray  # (N, 3)
    lam: np.ndarray  # (N,) constraint multipliers
    tip: np.ndarray  # (3,) driven point this state is consistent with

    def copy(self) -> "RopeState":
        return RopeState(self.pos.copy(), self.vel.copy(), self.lam.copy(), self.tip.copy())


@dataclass
class Rollout:
    times: np.ndarray  # (n+1,)
    pos: np.ndarray  # (n+1, N, 3)
    vel: np.ndarray  # (n+1, N, 3)
    lam: np.ndarray  # (n+1, N)
    tips: np.ndarray  # (n+1, 3)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def state_at(self, k: int) -> RopeState:
        return RopeState(self.pos[k].copy(), self.vel[k].copy(), self.lam[k].copy(), self.tips[k].copy())

    def interp(self, t: float):
        """Linearly interpolated (positions, velocities) at time t."""
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), self.steps - 1) if self.steps > 0 else 0
        if self.steps == 0:
            return self.pos[0].copy(), self.vel[0].copy()
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (
            (1 - w) * self.pos[k] + w * self.pos[k + 1],
            (1 - w) * self.vel[k] + w * self.vel[k + 1],
        )


# ---------------------------------------------------------------------------
# forces


def _hat_batch(v: np.ndarray) -> np.ndarray:
    """(J,3) -> (J,3,3) skew matrices."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


def _bend_geometry(params: RopeParams, p: np.ndarray):
    """Shared quantities for the J = N-2 bending triples (p_j, p_j+1, p_j+2)."""
    e1 = p[1:-1] - p[:-2]
    e2 = p[2:] - p[1:-1]
    l1 = np.linalg.norm(e1, axis=1)
    l2 = np.linalg.norm(e2, axis=1)
    u1 = e1 / l1[:, None]
    u2 = e2 / l2[:, None]
    m = np.clip(np.einsum("ij,ij->i", u1, u2), -1.0 + 1e-12, 1.0)
    theta = np.arccos(m)
    return e1, e2, l1, l2, u1, u2, m, theta


def _elastica_scalars(theta: np.ndarray):
    """r = dA/dxi and r' = d2A/dxi2 for A(xi) = theta(xi)^2, xi = 1 - cos(theta).

    Series switch keeps both smooth through theta = 0.
    """
    s = np.sin(theta)
    small = theta < 1e-4
    safe = np.where(small, 1.0, s)
    r = np.where(small, 2.0 * (1.0 + theta**2 / 6.0), 2.0 * theta / safe)
    rp = np.where(
        small,
        2.0 / 3.0 + (4.0 / 15.0) * theta**2,
        2.0 * (s - theta * np.cos(theta)) / safe**3,
    )
    return r, rp


def bending_forces(params: RopeParams, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bending stiffness + damping forces on the free masses, shape (N, 3).

    Internal forces: each triple's three contributions sum to zero, so the
    total over all masses is exactly zero.
    """
    n = params.n_links
    forces = np.zeros((n, 3))
    if n < 3 or (params.stiffness == 0.0 and params.damping == 0.0):
        return forces
    e1, e2, l1, l2, u1, u2, m, theta = _bend_geometry(params, p)
    r, _ = _elastica_scalars(theta)

    # stiffness: F = -(k/2) r(xi) grad(xi), grad(xi) = -grad(u1.u2)
    q1 = (u2 - m[:, None] * u1) / l1[:, None]
    q2 = (u1 - m[:, None] * u2) / l2[:, None]
    coef = 0.5 * params.stiffness * r
    fa = -coef[:, None] * q1
    fc = coef[:, None] * q2
    np.add.at(forces, np.arange(n - 2), fa)
    np.add.at(forces, np.arange(2, n), fc)
    np.add.at(forces, np.arange(1, n - 1), -(fa + fc))

    if params.damping > 0.0:
        c1 = u1 / l1[:, None]
        c2 = u2 / l2[:, None]
        w1 = v[1:-1] - v[:-2]
        w2 = v[2:] - v[1:-1]
        d = np.cross(c2, w2) - np.cross(c1, w1)
        da = params.damping * np.cross(c1, d)
        dc = params.damping * np.cross(c2, d)
        np.add.at(forces, np.arange(n - 2), da)
        np.add.at(forces, np.arange(2, n), dc)
        np.add.at(forces, np.arange(1, n - 1), -(da + dc))
    return forces


def bending_jacobians(params: RopeParams, p: np.ndarray, v: np.ndarray):
    """Analytic (dF/dp, dF/dv), each (3N, 3N), for the bending forces."""
    n = params.n_links
    dfp = np.zeros((3 * n, 3 * n))
    dfv = np.zeros((3 * n, 3 * n))
    if n < 3 or (params.stiffness == 0.0 and params.damping == 0.0):
        return dfp, dfv
    e1, e2, l1, l2, u1, u2, m, theta = _bend_geometry(params, p)
    r, rp = _elastica_scalars(theta)
    nj = n - 2
    eye = np.broadcast_to(np.eye(3), (nj, 3, 3))

    q1 = (u2 - m[:, None] * u1) / l1[:, None]
    q2 = (u1 - m[:, None] * u2) / l2[:, None]
    p1 = eye - _outer(u1, u1)
    p2 = eye - _outer(u2, u2)

    # second derivatives of m = u1.u2 w.r.t. segment vectors
    m11 = (
        -(_outer(u1, q1) + _outer(q1, u1)) / l1[:, None, None]
        - m[:, None, None] * p1 / (l1**2)[:, None, None]
    )
    m12 = (p2 / l2[:, None, None] - _outer(u1, q2)) / l1[:, None, None]
    m21 = np.swapaxes(m12, 1, 2)
    m22 = (
        -(_outer(u2, q2) + _outer(q2, u2)) / l2[:, None, None]
        - m[:, None, None] * p2 / (l2**2)[:, None, None]
    )

    # gradients of xi = 1 - m: grad_a = q1, grad_b = q2 - q1, grad_c = -q2
    ga = q1
    gb = q2 - q1
    gc = -q2

    # Hessian of xi = -Hessian of m, chained through e1 = b - a, e2 = c - b
    haa = -m11
    hab = m11 - m12
    hac = m12
    hbb = -(m11 - m12 - m21 + m22)
    hbc = m22 - m12
    hcc = -m22
    hba = np.swapaxes(hab, 1, 2)
    hca = np.swapaxes(hac, 1, 2)
    hcb = np.swapaxes(hbc, 1, 2)

    k2 = 0.5 * params.stiffness
    grads = {"a": ga, "b": gb, "c": gc}
    hess = {
        ("a", "a"): haa, ("a", "b"): hab, ("a", "c"): hac,
        ("b", "a"): hba, ("b", "b"): hbb, ("b", "c"): hbc,
        ("c", "a"): hca, ("c", "b"): hcb, ("c", "c"): hcc,
    }
    offset = {"a": 0, "b": 1, "c": 2}
    stiff_blocks = {}
    for x in "abc":
        for y in "abc":
            stiff_blocks[(x, y)] = -k2 * (
                rp[:, None, None] * _outer(grads[x], grads[y]) + r[:, None, None] * hess[(x, y)]
            )

    # damping blocks
    damp_p = {}
    damp_v = {}
    if params.damping > 0.0:
        bd = params.damping
        c1 = u1 / l1[:, None]
        c2 = u2 / l2[:, None]
        w1 = v[1:-1] - v[:-2]
        w2 = v[2:] - v[1:-1]
        d = np.cross(c2, w2) - np.cross(c1, w1)
        hc1, hc2 = _hat_batch(c1), _hat_batch(c2)
        hw1, hw2 = _hat_batch(w1), _hat_batch(w2)
        hd = _hat_batch(d)
        k1 = (eye - 2.0 * _outer(u1, u1)) / (l1**2)[:, None, None]
        k2m = (eye - 2.0 * _outer(u2, u2)) / (l2**2)[:, None, None]

        dfa_e1 = bd * ((hc1 @ hw1 - hd) @ k1)
        dfa_e2 = bd * (-(hc1 @ hw2) @ k2m)
        dfc_e1 = bd * ((hc2 @ hw1) @ k1)
        dfc_e2 = bd * ((-(hc2 @ hw2) - hd) @ k2m)
        for key, d_e1, d_e2 in (("a", dfa_e1, dfa_e2), ("c", dfc_e1, dfc_e2)):
            damp_p[(key, "a")] = -d_e1
            damp_p[(key, "b")] = d_e1 - d_e2
            damp_p[(key, "c")] = d_e2
        for y in "abc":
            damp_p[("b", y)] = -(damp_p[("a", y)] + damp_p[("c", y)])

        dd_va = hc1
        dd_vb = -(hc1 + hc2)
        dd_vc = hc2
        for key, hc in (("a", hc1), ("c", hc2)):
            damp_v[(key, "a")] = bd * (hc @ dd_va)
            damp_v[(key, "b")] = bd * (hc @ dd_vb)
            damp_v[(key, "c")] = bd * (hc @ dd_vc)
        for y in "abc":
            damp_v[("b", y)] = -(damp_v[("a", y)] + damp_v[("c", y)])

    # scatter-add; adjacent triples share points so blocks overlap
    idx = np.arange(nj)
    span = np.arange(3)
    for x in "abc":
        for y in "abc":
            block = stiff_blocks[(x, y)]
            if damp_p:
                block = block + damp_p[(x, y)]
            rows = (3 * (idx + offset[x])[:, None] + span[None, :])[:, :, None]
            cols = (3 * (idx + offset[y])[:, None] + span[None, :])[:, None, :]
            np.add.at(dfp, (rows, cols), block)
            if damp_v:
                np.add.at(dfv, (rows, cols), damp_v[(x, y)])
    return dfp, dfv


def gravity_forces(params: RopeParams) -> np.ndarray:
    f = np.zeros((params.n_links, 3))
    f[:, 2] = -GRAVITY * params.masses
    return f


def total_forces(params: RopeParams, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    return bending_forces(params, p, v) + gravity_forces(params)


# ---------------------------------------------------------------------------
# constraints


def constraint_values(params: RopeParams, p: np.ndarray, tip: np.ndarray) -> np.ndarray:
    prev = np.vstack([tip, p[:-1]])
    diff = p - prev
    return np.einsum("ij,ij->i", diff, diff) - params.seg_len**2


def constraint_jacobian(params: RopeParams, p: np.ndarray, tip: np.ndarray) -> np.ndarray:
    """G = dg/dp, shape (N, 3N)."""
    n = params.n_links
    prev = np.vstack([tip, p[:-1]])
    diff = 2.0 * (p - prev)
    jac = np.zeros((n, n, 3))
    idx = np.arange(n)
    jac[idx, idx] = diff
    jac[idx[1:], idx[1:] - 1] = -diff[1:]
    return jac.reshape(n, 3 * n)


def constraint_force_position_jacobian(
    params: RopeParams, lam: np.ndarray
) -> np.ndarray:
    """d(G^T lam)/dp, shape (3N, 3N); blocks are constant since g is quadratic.

    Constraint i couples masses i-1 and i (mass -1 is the driven tip, not a
    variable), giving a symmetric block tridiagonal.
    """
    diag = 2.0 * lam.copy()
    diag[:-1] += 2.0 * lam[1:]
    tri = np.diag(diag) - np.diag(2.0 * lam[1:], 1) - np.diag(2.0 * lam[1:], -1)
    return np.kron(tri, np.eye(3))


# ---------------------------------------------------------------------------
# implicit step


def _mass_diagonal(params: RopeParams) -> np.ndarray:
    return np.repeat(params.masses, 3)


def step_residual(
    params: RopeParams,
    p_new: np.ndarray,
    v_new: np.ndarray,
    lam_new: np.ndarray,
    p_old: np.ndarray,
    v_old: np.ndarray,
    tip_new: np.ndarray,
) -> np.ndarray:
    """Stacked residual [r_pos (3N), r_dyn (3N), r_con (N)]."""
    dt = params.dt
    r_pos = (p_new - p_old - dt * v_new).ravel()
    f = total_forces(params, p_new, v_new).ravel()
    gmat = constraint_jacobian(params, p_new, tip_new)
    r_dyn = _mass_diagonal(params) * (v_new - v_old).ravel() - dt * f - dt * (gmat.T @ lam_new)
    r_con = constraint_values(params, p_new, tip_new)
    return np.concatenate([r_pos, r_dyn, r_con])


def step_jacobian(
    params: RopeParams,
    p_new: np.ndarray,
    v_new: np.ndarray,
    lam_new: np.ndarray,
    tip_new: np.ndarray,
) -> np.ndarray:
    """d(residual)/d(p', v', lam'), shape (7N, 7N)."""
    n = params.n_links
    dt = params.dt
    dfp, dfv = bending_jacobians(params, p_new, v_new)
    gmat = constraint_jacobian(params, p_new, tip_new)
    gforce = constraint_force_position_jacobian(params, lam_new)
    jac = np.zeros((7 * n, 7 * n))
    i3 = np.eye(3 * n)
    jac[: 3 * n, : 3 * n] = i3
    jac[: 3 * n, 3 * n : 6 * n] = -dt * i3
    jac[3 * n : 6 * n, : 3 * n] = -dt * (dfp + gforce)
    jac[3 * n : 6 * n, 3 * n : 6 * n] = np.diag(_mass_diagonal(params)) - dt * dfv
    jac[3 * n : 6 * n, 6 * n :] = -dt * gmat.T
    jac[6 * n :, : 3 * n] = gmat
    return jac


def _newton_solve(params: RopeParams, state: RopeState, tip_new: np.ndarray):
    """One implicit step. Returns (state', final residual norm) or raises."""
    n = params.n_links
    dt = params.dt
    p_old, v_old = state.pos, state.vel
    p = p_old + dt * v_old
    v = v_old.copy()
    lam = state.lam.copy()
    res = step_residual(params, p, v, lam, p_old, v_old, tip_new)
    norm = float(np.max(np.abs(res)))
    initial = max(norm, 1.0)
    for _ in range(NEWTON_MAX_ITERS):
        if not np.isfinite(norm) or norm > 1e6 * initial:
            raise NewtonDivergence("Newton iteration diverged", residual=norm)
        if norm <= NEWTON_TOL:
            break
        jac = step_jacobian(params, p, v, lam, tip_new)
        try:
            delta = lu_solve(lu_factor(jac), res)
        except np.linalg.LinAlgError as exc:
            raise NewtonDivergence(f"singular step Jacobian: {exc}", residual=norm)
        p = p - delta[: 3 * n].reshape(n, 3)
        v = v - delta[3 * n : 6 * n].reshape(n, 3)
        lam = lam - delta[6 * n :]
        res = step_residual(params, p, v, lam, p_old, v_old, tip_new)
        norm = float(np.max(np.abs(res)))
    if norm > NEWTON_TOL:
        raise NewtonDivergence(
            f"no convergence in {NEWTON_MAX_ITERS} Newton iterations", residual=norm
        )
    return RopeState(p, v, lam, np.asarray(tip_new, dtype=float).copy())


def rope_step(params: RopeParams, state: RopeState, tip_new: np.ndarray) -> RopeState:
    """Advance one dt toward the next tip sample.

    On Newton failure the step is retried once with RETRY_SUBSTEPS linear
    tip substeps; a second failure raises NewtonDivergence.
    """
    try:
        return _newton_solve(params, state, tip_new)
    except NewtonDivergence:
        pass
    sub = params.replace(dt=params.dt / RETRY_SUBSTEPS)
    cur = state
    tip0 = state.tip
    for i in range(1, RETRY_SUBSTEPS + 1):
        frac = i / RETRY_SUBSTEPS
        cur = _newton_solve(sub, cur, (1.0 - frac) * tip0 + frac * np.asarray(tip_new))
    return RopeState(cur.pos, cur.vel, cur.lam * 1.0, np.asarray(tip_new, dtype=float).copy())


def static_hanging_state(params: RopeParams, tip: np.ndarray) -> RopeState:
    """Straight rope hanging below the tip, with multipliers in static
    balance: each constraint carries the weight below it."""
    tip = np.asarray(tip, dtype=float)
    n = params.n_links
    pos = np.tile(tip, (n, 1))
    pos[:, 2] -= params.seg_len * np.arange(1, n + 1)
    masses = params.masses
    below = np.cumsum(masses[::-1])[::-1]  # mass supported by constraint i
    lam = -GRAVITY * below / (2.0 * params.seg_len)
    return RopeState(pos, np.zeros((n, 3)), lam, tip.copy())


def rollout(params: RopeParams, z0: RopeState, tip_traj: np.ndarray) -> Rollout:
    """Integrate along a tip trajectory sampled on the rope grid.

    tip_traj has shape (n+1, 3) and tip_traj[0] must be consistent with z0
    (constraints satisfied). NewtonDivergence from a failed step carries
    the step index.
    """
    tip_traj = np.asarray(tip_traj, dtype=float)
    if tip_traj.ndim != 2 or tip_traj.shape[1] != 3:
        raise ValueError("tip trajectory must be (n+1, 3)")
    g0 = constraint_values(params, z0.pos, tip_traj[0])
    if np.max(np.abs(g0)) > 1e-6:
        raise ValueError("tip_traj[0] inconsistent with the initial state")
    steps = len(tip_traj) - 1
    n = params.n_links
    pos = np.empty((steps + 1, n, 3))
    vel = np.empty((steps + 1, n, 3))
    lam = np.empty((steps + 1, n))
    pos[0], vel[0], lam[0] = z0.pos, z0.vel, z0.lam
    state = z0.copy()
    state.tip = tip_traj[0].copy()
    for k in range(steps):
        try:
            state = rope_step(params, state, tip_traj[k + 1])
        except NewtonDivergence as exc:
            raise NewtonDivergence(str(exc), step=k + 1, residual=exc.residual)
        pos[k + 1], vel[k + 1], lam[k + 1] = state.pos, state.vel, state.lam
    times = params.dt * np.arange(steps + 1)
    return Rollout(times, pos, vel, lam, tip_traj.copy())


def rope_energy(params: RopeParams, p: np.ndarray, v: np.ndarray) -> float:
    """Kinetic + gravitational + elastic bending energy (elastic part is
    (k/2) theta^2 per interior joint)."""
    masses = params.masses
    kinetic = 0.5 * float(np.sum(masses[:, None] * v**2))
    potential = GRAVITY * float(np.sum(masses * p[:, 2]))
    elastic = 0.0
    if params.n_links >= 3 and params.stiffness > 0.0:
        _, _, _, _, _, _, _, theta = _bend_geometry(params, p)
        elastic = 0.5 * params.stiffness * float(np.sum(theta**2))
    return kinetic + potential + elastic
