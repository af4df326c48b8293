import numpy as np
import pytest

from taskilc.arm import (
    ChainSpec,
    JointLimits,
    check_command,
    check_limits,
    default_chain,
    forward_kinematics,
    inverse_dynamics,
    sample_command,
    tip_jacobian,
)
from taskilc.curves import CommandSpline


def planar_2r_chain(l1=0.4, l2=0.3):
    # joints 1, 2 about +y in the xz-plane; joints 3..7 parked at the tip
    return ChainSpec(
        axes=[[0, 1, 0]] * 7,
        offsets=[[0, 0, 0], [l1, 0, 0]] + [[0, 0, 0]] * 5,
        masses=[0.0] * 7,
        coms=[[0, 0, 0]] * 7,
        tip_offset=[l2, 0, 0],
    )


def test_fk_planar_2r_closed_form():
    l1, l2 = 0.4, 0.3
    chain = planar_2r_chain(l1, l2)
    for q1, q2 in [(0.3, -0.7), (1.2, 0.4), (-0.5, 2.0)]:
        q = np.zeros(10)
        q[0], q[1] = q1, q2
        tip = forward_kinematics(chain, q)
        # +y rotation maps +x to (cos, 0, -sin)
        expect = np.array(
            [
                l1 * np.cos(q1) + l2 * np.cos(q1 + q2),
                0.0,
                -l1 * np.sin(q1) - l2 * np.sin(q1 + q2),
            ]
        )
        np.testing.assert_allclose(tip.position, expect, atol=1e-12)


def test_fk_home_pose_of_default_chain():
    tip = forward_kinematics(default_chain(), np.zeros(10))
    np.testing.assert_allclose(tip.position, [0.11, 0.0, 1.70], atol=1e-12)
    np.testing.assert_allclose(tip.rotation, np.eye(3), atol=1e-12)


def test_fk_base_translation_equivariance():
    chain = default_chain()
    rng = np.random.default_rng(0)
    q = rng.normal(scale=0.5, size=10)
    shift = np.array([0.3, -0.2, 0.5])
    q2 = q.copy()
    q2[7:10] += shift
    a, b = forward_kinematics(chain, q), forward_kinematics(chain, q2)
    np.testing.assert_allclose(b.position, a.position + shift, atol=1e-12)
    np.testing.assert_allclose(b.rotation, a.rotation, atol=1e-12)


def test_tip_jacobian_matches_finite_differences():
    chain = default_chain()
    rng = np.random.default_rng(1)
    h = 1e-7
    for _ in range(5):
        q = rng.normal(scale=0.6, size=10)
        jac = tip_jacobian(chain, q)
        for col in range(10):
            dq = np.zeros(10)
            dq[col] = h
            hi = forward_kinematics(chain, q + dq)
            lo = forward_kinematics(chain, q - dq)
            lin_fd = (hi.position - lo.position) / (2 * h)
            np.testing.assert_allclose(jac[0:3, col], lin_fd, atol=1e-6)
            omega_fd = (hi.rotation - lo.rotation) / (2 * h) @ lo.rotation.T
            w = np.array([omega_fd[2, 1], omega_fd[0, 2], omega_fd[1, 0]])
            np.testing.assert_allclose(jac[3:6, col], w, atol=1e-6)


def single_mass_chain(mass=1.0, arm=0.5):
    return ChainSpec(
        axes=[[0, 1, 0]] * 7,
        offsets=[[0, 0, 0]] * 7,
        masses=[mass, 0, 0, 0, 0, 0, 0],
        coms=[[arm, 0, 0]] + [[0, 0, 0]] * 6,
        tip_offset=[0, 0, 0],
    )


def test_static_torque_single_point_mass():
    # 1 kg at 0.5 m horizontal lever: |tau| = m g L = 4.905
    chain = single_mass_chain()
    tau = inverse_dynamics(chain, np.zeros(7), np.zeros(7), np.zeros(7))
    assert abs(tau[0]) == pytest.approx(4.905, abs=1e-12)
    np.testing.assert_allclose(tau[1:], 0.0, atol=1e-12)


def test_torque_sign_opposes_gravity_descent():
    # +y axis, +q moves the horizontal mass downward, so gravity pulls
    # toward +q and the holding torque must be negative
    chain = single_mass_chain()
    tau = inverse_dynamics(chain, np.zeros(7), np.zeros(7), np.zeros(7))
    q = np.zeros(10)
    q[0] = 0.1
    tip_low = forward_kinematics(chain, q)
    assert tip_low.rotation[2, 0] < 0.0  # +x maps below the horizon
    assert tau[0] < 0.0


def test_inverse_dynamics_linear_in_acceleration():
    chain = default_chain()
    rng = np.random.default_rng(2)
    q, qd = rng.normal(scale=0.4, size=(2, 7))
    a, b = rng.normal(size=(2, 7))
    t0 = inverse_dynamics(chain, q, qd, np.zeros(7))
    ta = inverse_dynamics(chain, q, qd, a)
    tb = inverse_dynamics(chain, q, qd, b)
    tab = inverse_dynamics(chain, q, qd, 2.0 * a - 3.0 * b)
    np.testing.assert_allclose(
        tab - t0, 2.0 * (ta - t0) - 3.0 * (tb - t0), rtol=1e-9, atol=1e-9
    )


def _com_frames(chain, q7):
    from taskilc.arm import _frames

    full = np.concatenate([q7, np.zeros(3)])
    origins, axes, rots, _ = _frames(chain, full)
    com = origins + np.einsum("ijk,ik->ij", rots, chain.coms)
    jac = np.zeros((7, 3, 7))  # exact geometric com Jacobians
    for i in range(7):
        for j in range(i + 1):
            jac[i, :, j] = np.cross(axes[j], com[i] - origins[j])
    return com, jac


def _mechanical_energy(chain, q7, qd7):
    from taskilc.arm import GRAVITY

    com, jac = _com_frames(chain, q7)
    vel = np.einsum("ikj,j->ik", jac, qd7)
    kinetic = 0.5 * np.sum(chain.masses[:, None] * vel**2)
    potential = GRAVITY * np.sum(chain.masses * com[:, 2])
    return kinetic + potential


def test_inverse_dynamics_energy_balance():
    # power delivered at the joints equals d/dt of total mechanical energy;
    # dE/dt by Richardson-extrapolated central differences along the path
    chain = default_chain()
    amp = np.array([0.5, 0.4, -0.3, 0.6, -0.2, 0.3, 0.4])
    freq = np.array([1.0, 1.7, 0.9, 1.3, 2.1, 0.7, 1.1])

    def energy_at(t):
        return _mechanical_energy(
            chain, amp * np.sin(freq * t), amp * freq * np.cos(freq * t)
        )

    def e_dot(t, h):
        return (energy_at(t + h) - energy_at(t - h)) / (2 * h)

    for t in (0.2, 0.5, 0.9):
        q = amp * np.sin(freq * t)
        qd = amp * freq * np.cos(freq * t)
        qdd = -amp * freq**2 * np.sin(freq * t)
        power = inverse_dynamics(chain, q, qd, qdd) @ qd
        rich = (4.0 * e_dot(t, 5e-5) - e_dot(t, 1e-4)) / 3.0
        assert power == pytest.approx(rich, rel=1e-8, abs=1e-8)


def test_limit_defaults_match_table():
    lim = JointLimits.defaults()
    np.testing.assert_array_equal(
        lim.q_min, [-6.28, -1.8, -6.28, -0.19, -6.28, -1.69, -6.28]
    )
    np.testing.assert_array_equal(
        lim.q_max, [6.28, 1.9, 6.28, 3.92, 6.28, 3.14, 6.28]
    )
    np.testing.assert_array_equal(lim.qd_max, [3.14] * 7)
    np.testing.assert_array_equal(lim.qdd_max, [100.0] * 7)
    np.testing.assert_array_equal(lim.tau_max, [130, 130, 40, 40, 40, 20, 20])


def test_check_limits_flags_single_velocity_violation():
    lim = JointLimits.defaults()
    chain = default_chain()
    n = 50
    times = np.arange(n) / 250.0
    q = np.zeros((n, 7))
    q[:, 3] = 1.0  # keep joint 4 inside its asymmetric range
    qd = np.zeros((n, 7))
    qd[20, 1] = 3.2
    report = check_limits(chain, lim, times, q, qd, np.zeros((n, 7)), check_torque=False)
    assert len(report.violations) == 1
    v = report.violations[0]
    assert v.kind == "velocity" and v.joint == 1
    assert v.time == pytest.approx(times[20])
    assert v.margin == pytest.approx(0.06, abs=1e-12)


def test_check_limits_clean_trajectory():
    lim = JointLimits.defaults()
    chain = default_chain()
    times = np.arange(100) / 250.0
    q = np.zeros((100, 7))
    q[:, 3] = 1.0
    report = check_limits(chain, lim, times, q, np.zeros((100, 7)), np.zeros((100, 7)))
    assert report.ok


def test_check_command_on_gentle_spline():
    chain = default_chain()
    lim = JointLimits.defaults()
    knots = np.zeros((10, 8))
    knots[3] = 1.0
    knots[0] = np.linspace(0.0, 0.4, 8)
    cmd = CommandSpline(1.0, knots)
    assert check_command(chain, lim, cmd).ok


def test_sample_command_grid_hits_endpoint():
    cmd = CommandSpline(0.8, np.zeros((10, 8)))
    times, q, qd, qdd = sample_command(cmd)
    assert times[0] == 0.0
    assert times[-1] == pytest.approx(0.8)
    assert len(times) == 201
    assert q.shape == (201, 10)
