"""Corner trajectory files and generators.

A trajectory is a sequence of 6-vectors, one per control step, giving target
positions for a pair of cloth corners in the in-memory order [right; left].
The text format stores the left corner first (columns ``rlx rly rlz rrx rry
rrz``), so load and save swap the two halves.  An optional header line
``# ts <seconds>`` records the step length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


def _axis_index(axis) -> int:
    try:
        return _AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be x, y, z or 0..2, got {axis!r}") from None


@dataclass
class Trajectory:
    """Per-step corner targets, shape (T, 6), order [right; left]."""

    points: np.ndarray
    ts: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 6:
            raise ValueError(f"trajectory must be (T, 6), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("trajectory needs at least one row")
        if not np.all(np.isfinite(self.points)):
            bad = int(np.flatnonzero(~np.isfinite(self.points).all(axis=1))[0])
            raise ValueError(f"trajectory row {bad + 1} contains non-finite values")
        if self.ts is not None and self.ts <= 0.0:
            raise ValueError(f"ts must be positive, got {self.ts}")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def duration(self) -> float | None:
        """Total time span in s, or None when no step length is recorded."""
        if self.ts is None:
            return None
        return (len(self) - 1) * self.ts


def _swap_halves(rows: np.ndarray) -> np.ndarray:
    return np.concatenate([rows[:, 3:], rows[:, :3]], axis=1)


def save_trajectory(path, traj: Trajectory) -> None:
    """Write left-corner-first rows with 17 significant digits."""
    rows = _swap_halves(traj.points)
    with open(path, "w") as f:
        if traj.ts is not None:
            f.write(f"# ts {traj.ts:.17g}\n")
        for row in rows:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_trajectory(path) -> Trajectory:
    """Read a trajectory file; malformed rows are reported by line number."""
    ts = None
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "ts":
                    ts = float(parts[1])
                continue
            toks = line.split()
            if len(toks) != 6:
                raise ValueError(
                    f"{path}: row at line {lineno} has {len(toks)} values, expected 6")
            try:
                vals = [float(tok) for tok in toks]
            except ValueError:
                raise ValueError(
                    f"{path}: row at line {lineno} contains a non-numeric value") from None
            if not all(np.isfinite(vals)):
                raise ValueError(f"{path}: row at line {lineno} contains non-finite values")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no trajectory rows found")
    return Trajectory(_swap_halves(np.asarray(rows, dtype=float)), ts)


def ref_window(traj: Trajectory, start: int, horizon: int) -> np.ndarray:
    """Rows start .. start+horizon-1, holding the final point past the end."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    idx = np.clip(np.arange(start, start + horizon), 0, len(traj) - 1)
    return traj.points[idx]


def resample(traj: Trajectory, ts_new: float) -> Trajectory:
    """Linearly interpolate onto a new step length (same total duration)."""
    if traj.ts is None:
        raise ValueError("cannot resample a trajectory without a recorded ts")
    if ts_new <= 0.0:
        raise ValueError(f"ts_new must be positive, got {ts_new}")
    t_old = np.arange(len(traj)) * traj.ts
    t_end = t_old[-1]
    steps = max(int(round(t_end / ts_new)), 0)
    t_new = np.minimum(np.arange(steps + 1) * ts_new, t_end)
    cols = [np.interp(t_new, t_old, traj.points[:, j]) for j in range(6)]
    return Trajectory(np.column_stack(cols), ts_new)


def _smoothstep(s: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _pair(offsets: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Apply one (T, 3) offset path to both corners of a base 6-vector."""
    base = np.asarray(base, dtype=float).reshape(6)
    pts = np.tile(base, (offsets.shape[0], 1))
    pts[:, 0:3] += offsets
    pts[:, 3:6] += offsets
    return pts


def excitation_trajectory(base, axis, ts: float, duration: float = 6.0,
                          amplitude: float = 0.05, frequency: float = 0.4,
                          ramp: float = 1.0) -> Trajectory:
    """Single-axis sinusoid about a base pose, amplitude ramped in over `ramp` s.

    Both corners move in phase, so the grasp separation is preserved.  Used to
    drive the grasped corners open loop when generating training data.
    """
    j = _axis_index(axis)
    t = np.arange(int(round(duration / ts)) + 1) * ts
    env = _smoothstep(t / ramp) if ramp > 0.0 else np.ones_like(t)
    offsets = np.zeros((t.size, 3))
    offsets[:, j] = amplitude * env * np.sin(2.0 * np.pi * frequency * t)
    return Trajectory(_pair(offsets, base), ts)


def smooth3d_trajectory(base, ts: float, duration: float = 10.0,
                        amplitude=(0.04, 0.03, 0.03)) -> Trajectory:
    """Smooth 3-D path: incommensurate low-frequency sinusoids per axis.

    The envelope eases in over the first 1.5 s and eases out over the last
    1.5 s, so the path starts and ends at the base pose with zero rate.
    """
    amp = np.asarray(amplitude, dtype=float).reshape(3)
    t = np.arange(int(round(duration / ts)) + 1) * ts
    env = _smoothstep(t / 1.5) * _smoothstep((duration - t) / 1.5)
    offsets = np.column_stack([
        amp[0] * np.sin(2.0 * np.pi * 0.20 * t),
        amp[1] * np.sin(2.0 * np.pi * 0.15 * t + 0.7),
        amp[2] * np.sin(2.0 * np.pi * 0.10 * t + 1.9),
    ])
    offsets -= offsets[:1]          # start exactly at the base pose
    offsets *= env[:, None]
    return Trajectory(_pair(offsets, base), ts)


def sinusoid_x_approach(base, ts: float, duration: float = 12.0,
                        approach=(0.0, 0.06, -0.03), approach_time: float = 2.0,
                        amplitude: float = 0.05, frequency: float = 0.4) -> Trajectory:
    """Approach move followed by a sustained sinusoid in x.

    The pair glides from the base pose to base+approach over `approach_time`
    (smoothstep), then oscillates in x about the displaced pose.
    """
    if not 0.0 < approach_time < duration:
        raise ValueError("approach_time must lie inside (0, duration)")
    shift = np.asarray(approach, dtype=float).reshape(3)
    t = np.arange(int(round(duration / ts)) + 1) * ts
    offsets = _smoothstep(t / approach_time)[:, None] * shift[None, :]
    t_osc = np.maximum(t - approach_time, 0.0)
    env = _smoothstep(t_osc / 1.0)
    offsets[:, 0] += amplitude * env * np.sin(2.0 * np.pi * frequency * t_osc)
    return Trajectory(_pair(offsets, base), ts)
