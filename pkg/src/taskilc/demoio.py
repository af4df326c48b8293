"""Demonstration ingestion: capture files, timing selection, and the
trial-relative demonstration object consumed by tracking and learning.

A capture is raw recorded data: hand pose plus rope marker positions on a
common 200 Hz clock, with an annotated collision time t_c. The timing
search picks the active segment [t0, t_f] around the throw; building a
demonstration crops to it, fills short marker dropouts, estimates
velocities, and re-times everything so trial time runs from 0 to
T = t_f - t0 with the collision at critical_time = t_c - t0. Rope data is
kept only up to the collision, where marker tracking becomes unreliable.

File formats: captures are CSV (t, hand position, hand quaternion wxyz,
then 3 columns per marker; empty marker cells mean dropout) with a sidecar
JSON annotation {"t_c": ..., "coarse_window": [a, b]}.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp

from .arm import TipPose

FOLLOW_THROUGH_S = 0.035  # capture keeps this much motion past the collision
SLOW_SPEED_FRACTION = 0.03
ARC_LENGTH_FRACTION = 0.05
MAX_GAP_SAMPLES = 3


class DemoIngestError(Exception):
    """Common base for capture-ingestion failures."""


class EmptyWindow(DemoIngestError, ValueError):
    """The coarse window contains no capture samples."""


class NoSlowPoint(DemoIngestError, RuntimeError):
    """Hand speed never falls to the slow threshold inside the window.

    Carries the best available timing candidate (slowest sample found).
    """

    def __init__(self, message: str, t0_candidate: float, t_f: float):
        super().__init__(message)
        self.t0_candidate = t0_candidate
        self.t_f = t_f


class GapTooLarge(DemoIngestError, ValueError):
    """A marker is missing for more than MAX_GAP_SAMPLES consecutive samples
    before the collision."""


def fd_velocity(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Central-difference velocities with a phase-neutral two-sample moving
    average (applied forward then backward, i.e. a [1,2,1]/4 kernel) on the
    interior; one-sided differences at the ends."""
    out = np.gradient(values, times, axis=0)
    if len(times) >= 3:
        smoothed = out.copy()
        smoothed[1:-1] = 0.25 * out[:-2] + 0.5 * out[1:-1] + 0.25 * out[2:]
        out = smoothed
    return out


@dataclass
class RawCapture:
    """Recorded hand and rope-marker trajectories with the annotated
    collision time. Marker samples may be NaN (dropout)."""

    times: np.ndarray  # (n,), strictly increasing
    hand_positions: np.ndarray  # (n, 3)
    hand_rotations: np.ndarray  # (n, 3, 3)
    markers: np.ndarray  # (n, N, 3), NaN where missing
    t_c: float
    coarse_window: tuple | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.hand_positions = np.asarray(self.hand_positions, dtype=float)
        self.hand_rotations = np.asarray(self.hand_rotations, dtype=float)
        self.markers = np.asarray(self.markers, dtype=float)
        n = len(self.times)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.hand_positions.shape != (n, 3):
            raise ValueError("hand positions must be (n, 3)")
        if self.hand_rotations.shape != (n, 3, 3):
            raise ValueError("hand rotations must be (n, 3, 3)")
        if self.markers.ndim != 3 or self.markers.shape[0] != n or self.markers.shape[2] != 3:
            raise ValueError("markers must be (n, N, 3)")
        if not np.all(np.isfinite(self.hand_positions)):
            raise ValueError("hand positions must be complete")

    @property
    def marker_count(self) -> int:
        return self.markers.shape[1]

    def hand_speeds(self) -> np.ndarray:
        return np.linalg.norm(fd_velocity(self.times, self.hand_positions), axis=1)

    def to_csv(self) -> str:
        n_markers = self.marker_count
        header = ["t", "hand_x", "hand_y", "hand_z", "q_w", "q_x", "q_y", "q_z"]
        for j in range(n_markers):
            header += [f"m{j}_x", f"m{j}_y", f"m{j}_z"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        quats = Rotation.from_matrix(self.hand_rotations).as_quat()  # xyzw
        for i in range(len(self.times)):
            row = [f"{self.times[i]:.9g}"]
            row += [f"{v:.12g}" for v in self.hand_positions[i]]
            q = quats[i]
            row += [f"{v:.12g}" for v in (q[3], q[0], q[1], q[2])]
            for j in range(n_markers):
                for v in self.markers[i, j]:
                    row.append("" if np.isnan(v) else f"{v:.12g}")
            writer.writerow(row)
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, t_c: float, coarse_window=None) -> "RawCapture":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty capture file")
        header = rows[0]
        if len(header) < 8 or (len(header) - 8) % 3 != 0:
            raise ValueError("capture header must be t, hand pose, then marker triples")
        n_markers = (len(header) - 8) // 3
        data = rows[1:]
        n = len(data)
        times = np.empty(n)
        hand_pos = np.empty((n, 3))
        quats = np.empty((n, 4))
        markers = np.empty((n, n_markers, 3))
        for i, row in enumerate(data):
            if len(row) != len(header):
                raise ValueError(f"row {i + 2}: expected {len(header)} cells")
            times[i] = float(row[0])
            hand_pos[i] = [float(v) for v in row[1:4]]
            w, x, y, z = (float(v) for v in row[4:8])
            quats[i] = (x, y, z, w)  # scipy scalar-last
            for j in range(n_markers):
                cell = row[8 + 3 * j : 11 + 3 * j]
                markers[i, j] = [float(v) if v != "" else np.nan for v in cell]
        rotations = Rotation.from_quat(quats).as_matrix()
        return RawCapture(times, hand_pos, rotations, markers, t_c, coarse_window)

    def annotation_json(self) -> str:
        obj = {"t_c": self.t_c}
        if self.coarse_window is not None:
            obj["coarse_window"] = list(self.coarse_window)
        return json.dumps(obj, indent=2)

    def save(self, csv_path, annotation_path) -> None:
        with open(csv_path, "w") as f:
            f.write(self.to_csv())
        with open(annotation_path, "w") as f:
            f.write(self.annotation_json())

    @staticmethod
    def load(csv_path, annotation_path) -> "RawCapture":
        with open(annotation_path) as f:
            ann = json.load(f)
        window = tuple(ann["coarse_window"]) if "coarse_window" in ann else None
        with open(csv_path) as f:
            return RawCapture.from_csv(f.read(), float(ann["t_c"]), window)


@dataclass
class TimingResult:
    t0: float
    t_f: float
    t_peak: float
    t_slow: float  # the slow-speed walk-back point the arc length starts from
    peak_speed: float


def timing_details(raw: RawCapture, coarse_window=None) -> TimingResult:
    """Full timing search: peak speed, slow-point walk-back, follow-through
    end, and the 5% arc-length start."""
    window = coarse_window if coarse_window is not None else raw.coarse_window
    if window is None:
        raise ValueError("no coarse window given or annotated")
    a, b = float(window[0]), float(window[1])
    if not a <= raw.t_c <= b:
        raise ValueError(f"annotated t_c={raw.t_c} outside coarse window [{a}, {b}]")
    idx = np.flatnonzero((raw.times >= a) & (raw.times <= b))
    if len(idx) == 0:
        raise EmptyWindow(f"no samples in [{a}, {b}]")
    speeds = raw.hand_speeds()
    i_peak = idx[int(np.argmax(speeds[idx]))]
    peak = float(speeds[i_peak])

    t_f = raw.t_c + FOLLOW_THROUGH_S
    if t_f > raw.times[-1] + 1e-9:
        raise ValueError("capture ends before the follow-through window")

    threshold = SLOW_SPEED_FRACTION * peak
    i_slow = None
    for i in range(i_peak, idx[0] - 1, -1):
        if speeds[i] <= threshold:
            i_slow = i
            break
    if i_slow is None:
        walk = np.arange(idx[0], i_peak + 1)
        best = walk[int(np.argmin(speeds[walk]))]
        raise NoSlowPoint(
            f"hand speed never fell to {100 * SLOW_SPEED_FRACTION:.0f}% of the "
            f"peak ({peak:.3f} m/s) inside the window",
            t0_candidate=float(raw.times[best]),
            t_f=t_f,
        )
    t_slow = float(raw.times[i_slow])

    seg = np.flatnonzero((raw.times >= t_slow) & (raw.times <= t_f + 1e-9))
    pos = raw.hand_positions[seg]
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    total = arc[-1]
    i0 = int(np.argmax(arc >= ARC_LENGTH_FRACTION * total)) if total > 0 else 0
    t0 = float(raw.times[seg[i0]])
    return TimingResult(t0=t0, t_f=float(t_f), t_peak=float(raw.times[i_peak]),
                        t_slow=t_slow, peak_speed=peak)


def select_timing(raw: RawCapture, coarse_window=None):
    """(t0, t_f) for the active demonstration segment around the throw."""
    res = timing_details(raw, coarse_window)
    return res.t0, res.t_f


def _fill_marker_gaps(times: np.ndarray, track: np.ndarray, pre_critical: np.ndarray,
                      marker_index: int) -> np.ndarray:
    """Cubic-fill NaN runs of up to MAX_GAP_SAMPLES; longer pre-critical runs
    are an error, longer post-critical runs are left missing."""
    missing = np.any(np.isnan(track), axis=1)
    if not np.any(missing):
        return track
    runs = []
    start = None
    for i, m in enumerate(missing):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(missing)))
    valid = ~missing
    if valid.sum() < 4:
        raise GapTooLarge(f"marker {marker_index}: too few valid samples to interpolate")
    out = track.copy()
    spline = CubicSpline(times[valid], track[valid], axis=0)
    for lo, hi in runs:
        length = hi - lo
        if length > MAX_GAP_SAMPLES:
            if np.any(pre_critical[lo:hi]):
                raise GapTooLarge(
                    f"marker {marker_index}: {length} consecutive samples missing "
                    f"before the collision (limit {MAX_GAP_SAMPLES})"
                )
            continue  # long post-collision gap: data is discarded anyway
        out[lo:hi] = spline(times[lo:hi])
    return out


@dataclass
class Demonstration:
    """Trial-relative demonstration: hand trajectory on [0, T], rope state on
    [0, critical_time]. All query methods take trial time."""

    times: np.ndarray  # (n,), starts at 0, ends at T
    hand_positions: np.ndarray  # (n, 3)
    hand_rotations: np.ndarray  # (n, 3, 3)
    hand_velocities: np.ndarray  # (n, 3)
    marker_times: np.ndarray  # (m,), subset of times up to critical_time
    marker_positions: np.ndarray  # (m, N, 3), gap-filled, complete
    marker_velocities: np.ndarray  # (m, N, 3)
    critical_time: float
    capture_offset: float = 0.0  # t0 in the original capture clock

    _pos_spline: CubicSpline = field(init=False, repr=False)
    _slerp: Slerp = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.critical_time < self.times[-1]:
            raise ValueError("critical time must lie strictly inside the trial")
        if np.any(np.isnan(self.marker_positions)):
            raise ValueError("marker data must be complete up to the collision")
        self._pos_spline = CubicSpline(self.times, self.hand_positions, axis=0)
        self._slerp = Slerp(self.times, Rotation.from_matrix(self.hand_rotations))

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    @property
    def marker_count(self) -> int:
        return self.marker_positions.shape[1]

    def _clip(self, t: float) -> float:
        if not -1e-9 <= t <= self.duration + 1e-9:
            raise ValueError(f"t={t} outside the trial [0, {self.duration}]")
        return float(np.clip(t, 0.0, self.duration))

    def hand_pose_at(self, t: float) -> TipPose:
        t = self._clip(t)
        return TipPose(
            position=self._pos_spline(t),
            rotation=self._slerp(t).as_matrix(),
        )

    def hand_velocity_at(self, t: float) -> np.ndarray:
        t = self._clip(t)
        out = np.empty(3)
        for k in range(3):
            out[k] = np.interp(t, self.times, self.hand_velocities[:, k])
        return out

    def rope_state_at(self, t: float) -> np.ndarray:
        """Stacked marker positions then velocities, (6N,), linear in time."""
        grid = self.marker_times
        if not -1e-9 <= t <= grid[-1] + 1e-9:
            raise ValueError(
                f"rope data ends at the collision ({grid[-1]:.4f}); queried t={t}"
            )
        t = float(np.clip(t, 0.0, grid[-1]))
        i = min(max(int(np.searchsorted(grid, t)), 1), len(grid) - 1)
        w = (t - grid[i - 1]) / (grid[i] - grid[i - 1])
        pos = (1.0 - w) * self.marker_positions[i - 1] + w * self.marker_positions[i]
        vel = (1.0 - w) * self.marker_velocities[i - 1] + w * self.marker_velocities[i]
        return np.concatenate([pos.ravel(), vel.ravel()])


def build_demonstration(raw: RawCapture, t0: float, t_f: float, t_c: float) -> Demonstration:
    """Crop to [t0, t_f], fill short marker gaps, estimate velocities, and
    re-time to the trial clock. Rope data is truncated at the collision."""
    if not t0 < t_c < t_f:
        raise ValueError(f"need t0 < t_c < t_f, got {t0}, {t_c}, {t_f}")
    sel = np.flatnonzero((raw.times >= t0 - 1e-9) & (raw.times <= t_f + 1e-9))
    if len(sel) < 4:
        raise ValueError("crop window contains too few samples")
    times = raw.times[sel]
    pre_critical = times <= t_c + 1e-9
    markers = np.stack(
        [
            _fill_marker_gaps(times, raw.markers[sel, j], pre_critical, j)
            for j in range(raw.marker_count)
        ],
        axis=1,
    )
    hand_pos = raw.hand_positions[sel]
    hand_vel = fd_velocity(times, hand_pos)
    marker_vel = fd_velocity(times, markers)
    keep = np.flatnonzero(pre_critical)
    return Demonstration(
        times=times - t0,
        hand_positions=hand_pos,
        hand_rotations=raw.hand_rotations[sel],
        hand_velocities=hand_vel,
        marker_times=times[keep] - t0,
        marker_positions=markers[keep],
        marker_velocities=marker_vel[keep],
        critical_time=float(t_c - t0),
        capture_offset=float(t0),
    )


def rollout_to_capture(roll, chain, t_c: float, rest_before: float = 0.0) -> RawCapture:
    """Package a measured plant rollout as a capture.

    Hand poses come from forward kinematics of the executed joints,
    interpolated onto the marker clock. rest_before prepends a static hold,
    which gives the timing search a genuine slow region to find.
    """
    from .arm import forward_kinematics  # here to keep import graph acyclic

    times = roll.marker_times
    n = len(times)
    hand_pos = np.empty((n, 3))
    hand_rot = np.empty((n, 3, 3))
    for i, t in enumerate(times):
        q = np.array(
            [np.interp(t, roll.joint_times, roll.joints[:, c]) for c in range(roll.joints.shape[1])]
        )
        pose = forward_kinematics(chain, q)
        hand_pos[i] = pose.position
        hand_rot[i] = pose.rotation
    markers = roll.markers
    if rest_before > 0.0:
        dt = times[1] - times[0]
        n_pad = int(round(rest_before / dt))
        times = np.concatenate([np.arange(n_pad) * dt, times + n_pad * dt])
        hand_pos = np.concatenate([np.repeat(hand_pos[:1], n_pad, axis=0), hand_pos])
        hand_rot = np.concatenate([np.repeat(hand_rot[:1], n_pad, axis=0), hand_rot])
        markers = np.concatenate([np.repeat(markers[:1], n_pad, axis=0), markers])
        t_c += n_pad * dt
    window = (float(times[0]), float(times[-1]))
    return RawCapture(times, hand_pos, hand_rot, markers, float(t_c), window)


def synthesize_demo(command, plant_config, t_c_fraction: float, rest_before: float = 0.0) -> RawCapture:
    """Run the plant on a command and package the measurements as a capture,
    stamping the collision at the given fraction of the motion."""
    from .plant import execute_trial

    if not 0.0 < t_c_fraction < 1.0:
        raise ValueError("t_c_fraction must be in (0, 1)")
    roll = execute_trial(command, plant_config)
    if roll.fault:
        raise RuntimeError(f"plant faulted at t={roll.fault_time:.4f}; no demo")
    t_c = t_c_fraction * command.duration
    return rollout_to_capture(roll, plant_config.chain, t_c, rest_before)
