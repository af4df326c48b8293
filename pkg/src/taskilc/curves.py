"""Bezier command splines and small SO(3) utilities.

A command is a 10-channel degree-(K-1) Bezier curve on [0, duration]:
7 arm joint angles followed by 3 base translation channels. Knots are
stored as a (10, K) array, channel-major, and every evaluation is linear
in the knots, which is what makes the learning QP's constraint rows exact.

Flattened knot vectors (used by the QP and the knot Jacobians) follow the
same channel-major order: flat index = channel * K + knot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

N_CHANNELS = 10
N_JOINTS = 7
KNOT_COUNT = 8  # production knot count; reduced counts allowed for small tests

_T_SLACK = 1e-9


def bernstein(i: int, n: int, s):
    """Bernstein basis value b_i^n(s) = C(n,i) s^i (1-s)^(n-i) for s in [0, 1]."""
    if not 0 <= i <= n:
        raise ValueError(f"bernstein index i={i} outside 0..{n}")
    s = np.asarray(s, dtype=float)
    if np.any(s < -_T_SLACK) or np.any(s > 1.0 + _T_SLACK):
        raise ValueError("bernstein parameter outside [0, 1]")
    s = np.clip(s, 0.0, 1.0)
    return comb(n, i) * s**i * (1.0 - s) ** (n - i)


def _bernstein_row(n: int, s: np.ndarray) -> np.ndarray:
    """All basis values, shape (n+1, len(s))."""
    i = np.arange(n + 1)
    s = np.atleast_1d(s)
    return (
        comb(n, i)[:, None]
        * s[None, :] ** i[:, None]
        * (1.0 - s[None, :]) ** (n - i)[:, None]
    )


def _difference_matrix(count: int, order: int) -> np.ndarray:
    """Forward-difference operator of the given order, shape (count-order, count)."""
    d = np.eye(count)
    for _ in range(order):
        d = d[1:] - d[:-1]
    return d


def basis_weights(count: int, duration: float, t, order: int = 0) -> np.ndarray:
    """Per-knot weights so that d^r/dt^r B(t) = knots @ weights.

    Args:
        count: number of knots K (curve degree K-1).
        duration: curve duration in seconds.
        t: scalar or array of times in [0, duration].
        order: derivative order, 0..3.

    Returns:
        (count,) for scalar t, else (count, len(t)).
    """
    if order not in (0, 1, 2, 3):
        raise ValueError(f"unsupported derivative order {order}")
    n = count - 1
    if order > n:
        scalar = np.isscalar(t)
        m = 1 if scalar else len(np.atleast_1d(t))
        w = np.zeros((count, m))
        return w[:, 0] if scalar else w
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < -_T_SLACK * max(1.0, duration)) or np.any(
        t_arr > duration * (1.0 + _T_SLACK) + _T_SLACK
    ):
        raise ValueError("spline evaluated outside [0, duration]")
    s = np.clip(t_arr / duration, 0.0, 1.0)
    # d^r B = n!/(n-r)! / T^r * sum_i (D_r knots)_i b_i^(n-r)(s)
    scale = np.prod(np.arange(n - order + 1, n + 1)) / duration**order
    dmat = _difference_matrix(count, order)
    w = scale * (dmat.T @ _bernstein_row(n - order, s))
    return w[:, 0] if np.isscalar(t) else w


@dataclass
class CommandSpline:
    """10-channel Bezier command. knots has shape (10, K), duration in seconds."""

    duration: float
    knots: np.ndarray = field(default_factory=lambda: np.zeros((N_CHANNELS, KNOT_COUNT)))

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if self.knots.ndim != 2 or self.knots.shape[0] != N_CHANNELS:
            raise ValueError(f"knots must be (10, K), got {self.knots.shape}")
        if self.knots.shape[1] < 2:
            raise ValueError("need at least 2 knots")
        if not np.all(np.isfinite(self.knots)):
            raise ValueError("non-finite knot values")
        if not (np.isfinite(self.duration) and self.duration > 0):
            raise ValueError(f"bad duration {self.duration}")

    @property
    def knot_count(self) -> int:
        return self.knots.shape[1]

    def copy(self) -> "CommandSpline":
        return CommandSpline(self.duration, self.knots.copy())

    def to_json(self) -> str:
        return json.dumps(
            {"duration_s": self.duration, "knots": self.knots.T.tolist()}, indent=2
        )

    @staticmethod
    def from_json(text: str) -> "CommandSpline":
        obj = json.loads(text)
        knots = np.asarray(obj["knots"], dtype=float)
        if knots.ndim != 2 or knots.shape[1] != N_CHANNELS:
            raise ValueError(f"knot rows must each hold 10 channels, got {knots.shape}")
        return CommandSpline(float(obj["duration_s"]), knots.T)


def eval_spline(command: CommandSpline, t, order: int = 0) -> np.ndarray:
    """Evaluate the command or one of its time derivatives (order 0..3).

    Returns (10,) for scalar t, else (len(t), 10).
    """
    w = basis_weights(command.knot_count, command.duration, t, order)
    out = command.knots @ w
    return out if np.isscalar(t) else out.T


def spline_knot_jacobian(command: CommandSpline, t: float, order: int = 0) -> np.ndarray:
    """d(eval_spline)/d(flattened knots) at scalar t, shape (10, 10*K).

    Block structure: channel i only depends on its own K knots, so each row
    has at most K nonzeros at columns i*K .. i*K+K-1.
    """
    k = command.knot_count
    w = basis_weights(k, command.duration, float(t), order)
    jac = np.zeros((N_CHANNELS, N_CHANNELS * k))
    for ch in range(N_CHANNELS):
        jac[ch, ch * k : (ch + 1) * k] = w
    return jac


# ---------------------------------------------------------------------------
# SO(3) helpers


def hat(v: np.ndarray) -> np.ndarray:
    """Skew matrix with hat(v) @ w = v x w."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unhat(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def rot_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = hat(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + hat(w)
    return rot_axis_angle(np.asarray(w, dtype=float) / theta, theta)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation-vector log of a rotation matrix.

    Stable at both ends: series near identity, diagonal-based axis
    extraction near a half turn (where R - R^T loses the axis).
    """
    c = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(c))
    anti = unhat(rot - rot.T) / 2.0  # = sin(theta) * axis
    if theta < 1e-6:
        return anti  # w + O(|w|^3)
    if theta < np.pi - 1e-4:
        return theta / np.sin(theta) * anti
    # near pi: R ~ 2 a a^T - I, recover axis from the dominant diagonal entry
    i = int(np.argmax(np.diag(rot)))
    a = np.empty(3)
    a[i] = np.sqrt(max((rot[i, i] + 1.0) / 2.0, 0.0))
    for j in range(3):
        if j != i:
            a[j] = (rot[i, j] + rot[j, i]) / (4.0 * a[i])
    a /= np.linalg.norm(a)
    if np.dot(a, anti) < 0.0:
        a = -a
    return theta * a


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the exponential map.

    Satisfies so3_log(so3_exp(phi) @ so3_exp(delta)) = phi + Jr_inv(phi) delta
    + O(|delta|^2); used to differentiate log-space orientation errors under
    body-frame perturbations.
    """
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    ph = hat(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * ph + ph @ ph / 12.0
    s = np.sin(theta)
    if abs(s) < 1e-12:  # theta -> pi limit of the closed form
        coeff = 1.0 / theta**2
    else:
        coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * s)
    return np.eye(3) + 0.5 * ph + coeff * (ph @ ph)
