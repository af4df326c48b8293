"""Demonstration ingestion: timing search, gap filling, file formats.

The timing oracle is a literal five-step recomputation on the capture's
sample grid (argmax, backward threshold walk, follow-through offset,
arc-length accumulation), written as plain loops so the implementation's
vectorized search is checked against an independent transcription.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from taskilc.arm import forward_kinematics
from taskilc.curves import CommandSpline
from taskilc.demoio import (
    ARC_LENGTH_FRACTION,
    FOLLOW_THROUGH_S,
    SLOW_SPEED_FRACTION,
    Demonstration,
    EmptyWindow,
    GapTooLarge,
    NoSlowPoint,
    RawCapture,
    build_demonstration,
    fd_velocity,
    select_timing,
    synthesize_demo,
    timing_details,
)

DT = 0.005  # 200 Hz capture clock


def bell_positions(times, t_on=0.2, span=0.6, peak=3.0):
    """Hand x-position whose speed is a sin^2 bump: 0 at rest, peak at the
    bump center. Closed-form integral of peak * sin^2(pi (t - t_on)/span)."""
    s = np.clip(times - t_on, 0.0, span)
    return peak * (s / 2.0 - (span / (4.0 * np.pi)) * np.sin(2.0 * np.pi * s / span))


def make_capture(times, x, t_c, window, n_markers=2, rotations=None):
    n = len(times)
    hand = np.zeros((n, 3))
    hand[:, 0] = x
    hand[:, 2] = 1.0
    if rotations is None:
        rotations = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    markers = np.zeros((n, n_markers, 3))
    for j in range(n_markers):
        markers[:, j, 0] = x + 0.1 * j
        markers[:, j, 1] = 0.05 * np.sin(2.0 * np.pi * times + j)
        markers[:, j, 2] = 1.0 - 0.1 * (j + 1)
    return RawCapture(times, hand, rotations, markers, t_c, window)


@pytest.fixture(scope="module")
def bell():
    times = np.arange(241) * DT  # [0, 1.2]
    return make_capture(times, bell_positions(times), t_c=0.62, window=(0.1, 0.9))


# ---------------------------------------------------------------------------
# timing search


def test_bell_timing_matches_dense_scan_oracle(bell):
    res = timing_details(bell)

    speeds = np.linalg.norm(fd_velocity(bell.times, bell.hand_positions), axis=1)
    in_window = [i for i, t in enumerate(bell.times) if 0.1 <= t <= 0.9]
    i_peak = max(in_window, key=lambda i: speeds[i])
    assert res.t_peak == bell.times[i_peak]
    assert res.t_peak == pytest.approx(0.5, abs=1e-12)  # bump center
    assert res.peak_speed == pytest.approx(3.0, rel=1e-3)

    i_slow = next(
        i for i in range(i_peak, -1, -1) if speeds[i] <= SLOW_SPEED_FRACTION * speeds[i_peak]
    )
    assert res.t_slow == bell.times[i_slow]

    assert res.t_f == bell.t_c + FOLLOW_THROUGH_S

    seg = [i for i, t in enumerate(bell.times) if res.t_slow <= t <= res.t_f + 1e-9]
    total, cum = 0.0, [0.0]
    for a, b in zip(seg[:-1], seg[1:]):
        total += float(np.linalg.norm(bell.hand_positions[b] - bell.hand_positions[a]))
        cum.append(total)
    i0 = seg[next(i for i, c in enumerate(cum) if c >= ARC_LENGTH_FRACTION * total)]
    assert res.t0 == bell.times[i0]
    assert res.t0 < bell.t_c < res.t_f

    assert select_timing(bell) == (res.t0, res.t_f)


def test_follow_through_offset_is_exact(bell):
    res = timing_details(bell)
    assert res.t_f == bell.t_c + FOLLOW_THROUGH_S
    assert abs((res.t_f - bell.t_c) - 0.035) < 1e-12


def test_constant_speed_profile_raises_no_slow_point():
    times = np.arange(241) * DT
    cap = make_capture(times, 1.0 * times, t_c=0.5, window=(0.2, 0.8))
    with pytest.raises(NoSlowPoint) as info:
        timing_details(cap)
    err = info.value
    assert 0.2 <= err.t0_candidate <= 0.8
    assert err.t_f == pytest.approx(0.535, abs=1e-12)


def test_empty_window_and_bad_annotations():
    # capture with a hole in time around the annotated collision
    times = np.concatenate([np.arange(81) * DT, 0.8 + np.arange(81) * DT])
    cap = make_capture(times, 1.0 + 0.0 * times, t_c=0.6, window=(0.45, 0.75))
    with pytest.raises(EmptyWindow):
        timing_details(cap)

    bell_times = np.arange(241) * DT
    x = bell_positions(bell_times)
    outside = make_capture(bell_times, x, t_c=0.62, window=(0.1, 0.4))
    with pytest.raises(ValueError, match="outside coarse window"):
        timing_details(outside)

    late = make_capture(bell_times, x, t_c=1.19, window=(1.0, 1.2))
    with pytest.raises(ValueError, match="follow-through"):
        timing_details(late)

    unannotated = make_capture(bell_times, x, t_c=0.62, window=None)
    with pytest.raises(ValueError, match="window"):
        timing_details(unannotated)


def test_timing_idempotent_on_active_segment(bell):
    res = timing_details(bell)
    sel = (bell.times >= res.t_slow - 1e-9) & (bell.times <= res.t_f + 1e-9)
    crop = RawCapture(
        bell.times[sel],
        bell.hand_positions[sel],
        bell.hand_rotations[sel],
        bell.markers[sel],
        bell.t_c,
        (res.t_slow, res.t_f),
    )
    again = timing_details(crop)
    assert abs(again.t0 - res.t0) <= DT + 1e-9
    assert again.t_f == res.t_f


def test_tight_crop_reports_no_slow_point_with_candidate(bell):
    # from t0 on, the hand is already moving; the search reports the best
    # candidate instead of silently inventing a start
    res = timing_details(bell)
    sel = (bell.times >= res.t0 - 1e-9) & (bell.times <= res.t_f + 1e-9)
    crop = RawCapture(
        bell.times[sel],
        bell.hand_positions[sel],
        bell.hand_rotations[sel],
        bell.markers[sel],
        bell.t_c,
        (res.t0, res.t_f),
    )
    with pytest.raises(NoSlowPoint) as info:
        timing_details(crop)
    assert info.value.t0_candidate <= res.t0 + 3 * DT


# ---------------------------------------------------------------------------
# building demonstrations


def test_gap_free_build_equals_cropped_input(bell):
    t0, t_f = select_timing(bell)
    demo = build_demonstration(bell, t0, t_f, bell.t_c)

    sel = (bell.times >= t0 - 1e-9) & (bell.times <= t_f + 1e-9)
    np.testing.assert_allclose(demo.times, bell.times[sel] - t0, atol=1e-12)
    np.testing.assert_array_equal(demo.hand_positions, bell.hand_positions[sel])
    np.testing.assert_array_equal(demo.hand_rotations, bell.hand_rotations[sel])
    pre = bell.times[sel] <= bell.t_c + 1e-9
    np.testing.assert_array_equal(demo.marker_positions, bell.markers[sel][pre])
    assert demo.critical_time == pytest.approx(bell.t_c - t0, abs=1e-12)
    assert demo.duration == pytest.approx(t_f - t0, abs=1e-12)
    assert demo.capture_offset == t0
    assert demo.marker_count == 2


def test_single_gap_filled_within_tolerance(bell):
    t0, t_f = select_timing(bell)
    sel = np.flatnonzero((bell.times >= t0 - 1e-9) & (bell.times <= t_f + 1e-9))
    mid = sel[len(sel) // 3]
    markers = bell.markers.copy()
    truth = markers[mid, 1].copy()
    markers[mid, 1] = np.nan
    # a three-sample run elsewhere, still within the fillable limit
    markers[sel[10] : sel[10] + 3, 0] = np.nan
    holed = RawCapture(
        bell.times, bell.hand_positions, bell.hand_rotations, markers, bell.t_c, (0.1, 0.9)
    )
    demo = build_demonstration(holed, t0, t_f, bell.t_c)
    assert not np.any(np.isnan(demo.marker_positions))
    k = mid - sel[0]
    assert np.linalg.norm(demo.marker_positions[k, 1] - truth) <= 1e-3


def test_long_pre_critical_gap_rejected_post_critical_tolerated(bell):
    t0, t_f = select_timing(bell)
    sel = np.flatnonzero((bell.times >= t0 - 1e-9) & (bell.times <= t_f + 1e-9))

    markers = bell.markers.copy()
    bad = sel[len(sel) // 3]
    markers[bad : bad + 4, 0] = np.nan  # 4 > MAX_GAP_SAMPLES, before t_c
    holed = RawCapture(
        bell.times, bell.hand_positions, bell.hand_rotations, markers, bell.t_c, (0.1, 0.9)
    )
    with pytest.raises(GapTooLarge, match="marker 0"):
        build_demonstration(holed, t0, t_f, bell.t_c)

    # the same run length well after the collision is discarded, not fatal
    markers = bell.markers.copy()
    post = sel[np.searchsorted(bell.times[sel], bell.t_c)] + 3
    markers[post : post + 4, 0] = np.nan
    late = RawCapture(
        bell.times, bell.hand_positions, bell.hand_rotations, markers, bell.t_c, (0.1, 0.9)
    )
    demo = build_demonstration(late, t0, t_f, bell.t_c)
    assert not np.any(np.isnan(demo.marker_positions))
    assert not np.any(np.isnan(demo.marker_velocities))


def test_velocity_estimator_tracks_analytic_derivative():
    times = np.arange(241) * DT
    amp, freq = 0.1, 2.0
    values = np.stack(
        [amp * np.sin(2 * np.pi * freq * times), amp * np.cos(2 * np.pi * freq * times)], axis=1
    )
    truth = np.stack(
        [
            2 * np.pi * freq * amp * np.cos(2 * np.pi * freq * times),
            -2 * np.pi * freq * amp * np.sin(2 * np.pi * freq * times),
        ],
        axis=1,
    )
    est = fd_velocity(times, values)
    scale = 2 * np.pi * freq * amp
    assert np.max(np.abs(est - truth)) <= 0.05 * scale


def test_build_rejects_bad_timing_triple(bell):
    with pytest.raises(ValueError):
        build_demonstration(bell, 0.3, 0.5, 0.62)  # t_c after t_f
    with pytest.raises(ValueError):
        build_demonstration(bell, 0.7, 0.9, 0.62)  # t_c before t0


# ---------------------------------------------------------------------------
# demonstration queries


def test_demonstration_queries_and_bounds(bell):
    t0, t_f = select_timing(bell)
    demo = build_demonstration(bell, t0, t_f, bell.t_c)

    pose = demo.hand_pose_at(demo.duration)
    assert pose.position.shape == (3,)
    with pytest.raises(ValueError):
        demo.hand_pose_at(demo.duration + 0.1)
    with pytest.raises(ValueError):
        demo.hand_pose_at(-0.1)

    # on-grid queries reproduce the samples
    k = len(demo.times) // 2
    np.testing.assert_allclose(
        demo.hand_pose_at(float(demo.times[k])).position, demo.hand_positions[k], atol=1e-9
    )
    np.testing.assert_allclose(
        demo.hand_velocity_at(float(demo.times[k])), demo.hand_velocities[k], atol=1e-12
    )

    # rope state: linear interpolation between marker samples, dead past t_c
    g = demo.marker_times
    mid = 0.5 * (g[3] + g[4])
    state = demo.rope_state_at(float(mid))
    n = demo.marker_count
    expect_pos = 0.5 * (demo.marker_positions[3] + demo.marker_positions[4])
    np.testing.assert_allclose(state[: 3 * n].reshape(n, 3), expect_pos, atol=1e-12)
    state_tc = demo.rope_state_at(demo.critical_time)
    assert state_tc.shape == (6 * n,)
    with pytest.raises(ValueError, match="rope data ends"):
        demo.rope_state_at(demo.critical_time + 2 * DT)


def test_demonstration_validation():
    times = np.arange(41) * DT
    hand = np.zeros((41, 3))
    rot = np.broadcast_to(np.eye(3), (41, 3, 3)).copy()
    vel = np.zeros((41, 3))
    markers = np.zeros((5, 1, 3))
    with pytest.raises(ValueError, match="critical time"):
        Demonstration(times, hand, rot, vel, times[:5], markers, np.zeros((5, 1, 3)),
                      critical_time=0.3)
    holed = markers.copy()
    holed[2, 0, 1] = np.nan
    with pytest.raises(ValueError, match="complete"):
        Demonstration(times, hand, rot, vel, times[:5], holed, np.zeros((5, 1, 3)),
                      critical_time=0.1)


# ---------------------------------------------------------------------------
# file round trip


def test_csv_and_annotation_round_trip(tmp_path):
    times = np.arange(61) * DT
    x = bell_positions(times, t_on=0.05, span=0.2, peak=1.0)
    key_rots = Rotation.from_euler("xyz", [[0, 0, 0], [0.4, -0.3, 1.1]])
    weights = times / times[-1]
    rots = Rotation.concatenate(
        [Rotation.from_rotvec(w * key_rots[1].as_rotvec()) for w in weights]
    ).as_matrix()
    cap = make_capture(times, x, t_c=0.21, window=(0.0, 0.3), n_markers=3, rotations=rots)
    cap.markers[7, 1] = np.nan
    cap.markers[20:22, 2] = np.nan

    text = cap.to_csv()
    assert text.splitlines()[0] == (
        "t,hand_x,hand_y,hand_z,q_w,q_x,q_y,q_z,"
        "m0_x,m0_y,m0_z,m1_x,m1_y,m1_z,m2_x,m2_y,m2_z"
    )
    back = RawCapture.from_csv(text, cap.t_c, cap.coarse_window)
    np.testing.assert_allclose(back.times, cap.times, atol=1e-9)
    np.testing.assert_allclose(back.hand_positions, cap.hand_positions, atol=1e-9)
    np.testing.assert_allclose(back.hand_rotations, cap.hand_rotations, atol=1e-9)
    np.testing.assert_array_equal(np.isnan(back.markers), np.isnan(cap.markers))
    ok = ~np.isnan(cap.markers)
    np.testing.assert_allclose(back.markers[ok], cap.markers[ok], atol=1e-9)

    cap.save(tmp_path / "cap.csv", tmp_path / "cap.json")
    loaded = RawCapture.load(tmp_path / "cap.csv", tmp_path / "cap.json")
    assert loaded.t_c == cap.t_c
    assert loaded.coarse_window == cap.coarse_window
    np.testing.assert_allclose(loaded.markers[ok], cap.markers[ok], atol=1e-9)


def test_capture_validation():
    times = np.array([0.0, 0.01, 0.01])  # not strictly increasing
    with pytest.raises(ValueError, match="strictly increasing"):
        make_capture(times, np.zeros(3), 0.005, None)
    good = np.array([0.0, 0.01, 0.02])
    hand = np.zeros((3, 3))
    hand[1, 0] = np.nan
    with pytest.raises(ValueError, match="complete"):
        RawCapture(good, hand, np.broadcast_to(np.eye(3), (3, 3, 3)), np.zeros((3, 1, 3)), 0.01)


# ---------------------------------------------------------------------------
# synthesized demonstrations (plant round trip)


def lunge_command(duration=0.9):
    """Base-channel lunge: most of the first knot interval's arc happens in
    the first few milliseconds, so the 5% arc-length start lands within one
    sample of motion onset."""
    q0 = np.array([0.0, 0.35, 0.0, 1.3, 0.0, 0.9, 0.0])
    s = np.linspace(0.0, 1.0, 8)
    prof = s * s * (3.0 - 2.0 * s)
    knots = np.zeros((10, 8))
    knots[:7] = q0[:, None]
    knots[1] = 0.35 + 0.1 * prof
    knots[1, 1] = knots[1, 0]
    knots[1, -2] = knots[1, -1]
    knots[7] = [0.0, 0.45, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2]  # overshoot front-loads arc
    return CommandSpline(duration, knots)


@pytest.fixture(scope="module")
def synth():
    from taskilc.plant import MeasurementModel, PlantConfig

    cmd = lunge_command()
    cfg = PlantConfig(
        servo_time_constant_s=0.0,
        measurement=MeasurementModel(noise_std_m=0.0),
        rate_clamp=np.full(7, 50.0),
    )
    frac = 1.0 - FOLLOW_THROUGH_S / cmd.duration
    cap = synthesize_demo(cmd, cfg, t_c_fraction=frac, rest_before=0.2)
    return cmd, cfg, cap


def test_synthesized_capture_shape(synth):
    cmd, cfg, cap = synth
    assert cap.marker_count == 11
    np.testing.assert_allclose(np.diff(cap.times), DT, atol=1e-12)  # 200 Hz
    assert cap.t_c == pytest.approx(0.2 + (cmd.duration - FOLLOW_THROUGH_S), abs=1e-9)
    # the rest hold really is static
    np.testing.assert_array_equal(cap.hand_positions[0], cap.hand_positions[39])
    q0 = np.concatenate([lunge_command().knots[:7, 0], lunge_command().knots[7:, 0]])
    np.testing.assert_allclose(
        cap.hand_positions[0], forward_kinematics(cfg.chain, q0).position, atol=1e-12
    )


def test_round_trip_duration_within_one_sample(synth):
    cmd, cfg, cap = synth
    t0, t_f = select_timing(cap)
    demo = build_demonstration(cap, t0, t_f, cap.t_c)
    assert abs(demo.duration - cmd.duration) <= DT + 1e-9
    assert 0.0 < demo.critical_time < demo.duration
    assert demo.marker_count == 11


def test_synthesize_demo_rejects_bad_fraction_and_faults(synth):
    cmd, cfg, _ = synth
    with pytest.raises(ValueError):
        synthesize_demo(cmd, cfg, t_c_fraction=1.2)
    from taskilc.plant import MeasurementModel, PlantConfig

    strict = PlantConfig(
        servo_time_constant_s=0.0,
        measurement=MeasurementModel(noise_std_m=0.0),
        rate_clamp=np.full(7, 0.05),  # lunge demands more than this
    )
    with pytest.raises(RuntimeError, match="fault"):
        synthesize_demo(cmd, strict, t_c_fraction=0.9)
