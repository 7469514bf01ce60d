"""Trajectory file round-trips, windowing, resampling, and generators."""

import numpy as np
import pytest

from clothmpc.trajectories import (
    Trajectory,
    excitation_trajectory,
    load_trajectory,
    ref_window,
    resample,
    save_trajectory,
    sinusoid_x_approach,
    smooth3d_trajectory,
)

BASE = np.array([0.15, 0.0, 0.3, -0.15, 0.0, 0.3])


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    traj = Trajectory(rng.standard_normal((40, 6)), ts=0.02)
    path = tmp_path / "traj.txt"
    save_trajectory(path, traj)
    back = load_trajectory(path)
    assert back.ts == traj.ts
    assert np.array_equal(back.points, traj.points)


def test_file_stores_left_corner_first(tmp_path):
    right = [1.0, 2.0, 3.0]
    left = [4.0, 5.0, 6.0]
    traj = Trajectory(np.array([right + left]))
    path = tmp_path / "traj.txt"
    save_trajectory(path, traj)
    row = [float(tok) for tok in path.read_text().strip().split()]
    assert row == left + right


def test_load_reports_bad_row_by_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# ts 0.02\n0 0 0 0 0 0\n1 2 3 4 5\n")
    with pytest.raises(ValueError, match="line 3"):
        load_trajectory(path)
    path.write_text("0 0 0 0 0 oops\n")
    with pytest.raises(ValueError, match="line 1"):
        load_trajectory(path)


def test_load_rejects_empty_and_nonfinite(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("# ts 0.02\n")
    with pytest.raises(ValueError, match="no trajectory rows"):
        load_trajectory(path)
    path.write_text("0 0 0 0 0 nan\n")
    with pytest.raises(ValueError, match="line 1"):
        load_trajectory(path)


def test_ref_window_holds_final_point():
    traj = Trajectory(np.arange(30, dtype=float).reshape(5, 6))
    win = ref_window(traj, 3, 4)
    assert win.shape == (4, 6)
    assert np.array_equal(win[0], traj.points[3])
    assert np.array_equal(win[1], traj.points[4])
    assert np.array_equal(win[2], traj.points[4])
    assert np.array_equal(win[3], traj.points[4])


def test_ref_window_clamps_negative_start():
    traj = Trajectory(np.arange(12, dtype=float).reshape(2, 6))
    win = ref_window(traj, -2, 3)
    assert np.array_equal(win[0], traj.points[0])
    assert np.array_equal(win[2], traj.points[0])


def test_resample_recovers_linear_ramp():
    t = np.arange(11) * 0.1
    pts = np.outer(t, np.arange(1.0, 7.0))
    traj = Trajectory(pts, ts=0.1)
    fine = resample(traj, 0.025)
    assert fine.ts == 0.025
    t_new = np.arange(len(fine)) * 0.025
    assert np.allclose(fine.points, np.outer(t_new, np.arange(1.0, 7.0)), atol=1e-12)
    assert fine.duration == pytest.approx(traj.duration)


def test_resample_requires_time_metadata():
    traj = Trajectory(np.zeros((4, 6)))
    with pytest.raises(ValueError, match="without a recorded ts"):
        resample(traj, 0.01)


@pytest.mark.parametrize("axis,col", [("x", 0), ("y", 1), ("z", 2)])
def test_excitation_moves_one_axis_only(axis, col):
    traj = excitation_trajectory(BASE, axis, ts=0.02)
    delta = traj.points - BASE
    moving = {col, col + 3}
    for j in range(6):
        if j in moving:
            assert np.max(np.abs(delta[:, j])) > 0.03
        else:
            assert np.max(np.abs(delta[:, j])) == 0.0
    # both corners translate together, so the grasp separation is preserved
    gap = traj.points[:, 0:3] - traj.points[:, 3:6]
    assert np.allclose(gap, gap[0], atol=1e-12)


def test_excitation_starts_at_base_and_ramps():
    traj = excitation_trajectory(BASE, "x", ts=0.02, amplitude=0.05, ramp=1.0)
    assert np.allclose(traj.points[0], BASE)
    t = np.arange(len(traj)) * 0.02
    early = np.abs(traj.points[t < 0.3, 0] - BASE[0])
    assert np.max(early) < 0.05 * np.sin(2 * np.pi * 0.4 * 0.3) * 0.6


def test_smooth3d_returns_to_base_with_zero_rate():
    traj = smooth3d_trajectory(BASE, ts=0.02, duration=10.0)
    assert np.allclose(traj.points[0], BASE, atol=1e-12)
    assert np.allclose(traj.points[-1], BASE, atol=1e-12)
    # envelope kills the end-point rate as well
    assert np.max(np.abs(traj.points[-1] - traj.points[-2])) < 1e-4
    delta = traj.points - BASE
    assert all(np.max(np.abs(delta[:, j])) > 0.005 for j in range(3))


def test_sinusoid_x_approach_phases():
    traj = sinusoid_x_approach(BASE, ts=0.02, duration=12.0,
                               approach=(0.0, 0.06, -0.03), approach_time=2.0)
    assert np.allclose(traj.points[0], BASE, atol=1e-12)
    k_end = int(round(2.0 / 0.02))
    displaced = BASE + np.tile([0.0, 0.06, -0.03], 2)
    assert np.allclose(traj.points[k_end], displaced, atol=1e-9)
    # after the approach, y and z hold while x oscillates
    tail = traj.points[k_end:]
    assert np.allclose(tail[:, 1], displaced[1], atol=1e-12)
    assert np.allclose(tail[:, 2], displaced[2], atol=1e-12)
    assert np.max(tail[:, 0]) - np.min(tail[:, 0]) > 0.05


def test_trajectory_validation():
    with pytest.raises(ValueError, match=r"\(T, 6\)"):
        Trajectory(np.zeros((3, 5)))
    with pytest.raises(ValueError, match="at least one row"):
        Trajectory(np.zeros((0, 6)))
    bad = np.zeros((3, 6))
    bad[1, 2] = np.inf
    with pytest.raises(ValueError, match="row 2"):
        Trajectory(bad)
    with pytest.raises(ValueError, match="ts must be positive"):
        Trajectory(np.zeros((2, 6)), ts=-0.01)
