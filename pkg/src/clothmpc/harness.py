"""Closed-loop runner: linear-model MPC steering the nonlinear mesh.

One virtual-time tick advances the plant by the control period, steps a
linear backup propagator with the same input, folds in delayed and noisy
position measurements when they arrive, and hands the fused state to the
controller for the next solve.  Everything a run produces lands in a
per-step log from which the performance numbers are recomputable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .fitting import SOM_DT, SOM_MAX_STRAIN, excitation_bases
from .mesh import MeshState, build_mesh, corner_vector, submesh_indices
from .model import (
    ClothParams,
    LinearClothModel,
    assemble_linear_model,
    hanging_equilibrium,
    scale_params_for_resolution,
    state_to_vector,
    step_nonlinear,
)
from .mpc import (
    ControlSequence,
    MpcConfig,
    MpcSolver,
    MpcWorker,
    SequenceBuffer,
    StaleBufferError,
    build_ocp,
    next_control,
)
from .trajectories import Trajectory, ref_window

DISTURBANCE_KINDS = ("camera-block", "corner-push", "state-offset")


@dataclass
class FeedbackConfig:
    """Simulated measurement channel: sampling, transport, filtering, gates."""

    rate: float = 0.1          # s between position captures
    delay: float = 0.08        # s fixed transport delay
    jitter: float = 0.04       # s, uniform extra delay on top
    noise_sigma: float = 0.005  # m, i.i.d. Gaussian per node per axis
    alpha: float = 0.66        # EMA coefficient on raw captures
    w_v: float = 0.2           # blend weight of the measured state
    dt_max: float = 0.5        # s, staleness gate
    dd_max: float = 0.10       # m, distance gate on positions

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.w_v <= 1.0:
            raise ValueError(f"w_v must be in [0, 1], got {self.w_v}")
        for name in ("rate", "dt_max", "dd_max"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("delay", "jitter", "noise_sigma"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class Disturbance:
    """One scripted upset: kind, active time window (s), and magnitude.

    camera-block ignores magnitude and discards every sample delivered in
    the window.  corner-push applies a force of |magnitude| N (scalar: along
    -y; 3-vector: as given) spread over the free nodes near the right
    grasped corner.  state-offset displaces the backup state's positions by
    the 3-vector magnitude once, when the window opens.
    """

    kind: str
    window: tuple[float, float]
    magnitude: object = 0.0

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(
                f"unknown disturbance kind {self.kind!r}; "
                f"expected one of {DISTURBANCE_KINDS}")
        t0, t1 = self.window
        if not t1 > t0 >= 0.0:
            raise ValueError(f"window must satisfy 0 <= t0 < t1, got {self.window}")
        if self.kind == "state-offset" and np.asarray(self.magnitude).size != 3:
            raise ValueError("state-offset magnitude must be a 3-vector")

    def force_vector(self) -> np.ndarray:
        mag = np.asarray(self.magnitude, dtype=float)
        if mag.ndim == 0:
            return np.array([0.0, -float(mag), 0.0])
        return mag.reshape(3)


@dataclass
class Scenario:
    """Everything one closed-loop run needs besides learned parameters."""

    reference: Trajectory       # lower-corner targets, [right; left]
    ts: float
    duration: int               # steps
    com_n: int
    bsom_n: int
    som_n: int
    side_length: float
    total_mass: float
    mpc: MpcConfig
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    disturbances: list = field(default_factory=list)
    plant: str = "nonlinear"    # "nonlinear" | "linear" (model-match checks)

    def __post_init__(self):
        if self.ts <= 0.0:
            raise ValueError(f"ts must be positive, got {self.ts}")
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1 step, got {self.duration}")
        if self.plant not in ("nonlinear", "linear"):
            raise ValueError(f"plant must be nonlinear or linear, got {self.plant}")
        for fine, coarse, what in ((self.bsom_n, self.com_n, "backup/control"),
                                   (self.som_n, self.bsom_n, "plant/backup")):
            if fine < coarse or (fine - 1) % (coarse - 1) != 0:
                raise ValueError(
                    f"{what} mesh sizes {fine}/{coarse} are not submesh-compatible")
        if self.feedback.rate < self.ts:
            raise ValueError(
                f"feedback rate {self.feedback.rate} must be >= ts {self.ts}")
        if self.reference.ts is not None and \
                abs(self.reference.ts - self.ts) > 1e-12:
            raise ValueError(
                f"reference period {self.reference.ts} != scenario ts {self.ts}")
        horizon = self.duration * self.ts
        for d in self.disturbances:
            if d.window[0] >= horizon:
                raise ValueError(
                    f"disturbance window {d.window} starts past the run end "
                    f"{horizon}")


@dataclass
class FeedbackSample:
    """One filtered measurement at backup-mesh scale, stamped at capture."""

    positions: np.ndarray      # (N_b, 3)
    velocities: np.ndarray     # (N_b, 3) finite-difference reconstruction
    t_c: float


@dataclass
class FeedbackEvent:
    """Outcome of one delivered sample, with the numbers behind the gates."""

    t: float                   # processing time
    t_c: float                 # capture time
    decision: str              # "accepted" | "discarded"
    reason: str                # "-" | "stale" | "distance" | "blocked" | "history"
    dt: float                  # t - t_c
    dist: float                # largest per-node gap at the gate, nan if unreached


@dataclass
class LoopRecord:
    """State of one tick after it completed."""

    k: int
    t: float
    r: np.ndarray              # (6,) reference
    y_som: np.ndarray          # (6,) true plant lower corners
    y_fed: np.ndarray          # (6,) last filtered feedback corners, nan early
    u: np.ndarray              # (6,) applied control
    fresh: bool
    offset: int
    issued_at: int
    status: str                # solver status of the sequence in use, or "fault"
    tau: float                 # solve time finished this tick, nan if none
    bsom_err: float            # position gap backup vs subsampled plant
    events: list = field(default_factory=list)


@dataclass
class LoopLog:
    """Everything one run recorded; exactly one record per executed tick."""

    records: list
    sequences: list            # every ControlSequence produced, in order
    solve_times: list          # s, one entry per solve (bootstrap included)
    meta: dict                 # ts, deadline, gates, blend, mesh sizes
    aborted: bool = False


@dataclass
class KpiReport:
    """Tracking and timing numbers of one run."""

    e: np.ndarray              # (6,) per-coordinate RMSE of y - r
    kpi1: float                # m, mean of the two corner error norms
    kpi2: float                # s, mean solve time
    max_error: np.ndarray      # (6,) worst per-coordinate |y - r|
    timeout_count: int
    accepted_count: int
    discards: dict             # reason -> count
    dt_max: float
    dd_max: float
    aborted: bool = False


def ema_filter(y_raw: np.ndarray, y_prev: np.ndarray | None,
               alpha: float) -> np.ndarray:
    """Convex blend y_f = alpha y + (1 - alpha) y_f_prev, elementwise."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    y_raw = np.asarray(y_raw, dtype=float)
    if y_prev is None:
        return y_raw.copy()
    return alpha * y_raw + (1.0 - alpha) * np.asarray(y_prev, dtype=float)


def ingest_feedback(sample: FeedbackSample, now: float, bsom_x: np.ndarray,
                    control_history: list, cfg: FeedbackConfig,
                    model: LinearClothModel) -> tuple[np.ndarray, FeedbackEvent]:
    """Fold one delivered sample into the backup state.

    Stale samples (now - t_c > dt_max) are discarded.  Otherwise the sample
    state is replayed ceil((now - t_c)/ts) linear steps with the controls
    recorded over that span, rejected if any node lands further than dd_max
    from the current backup positions, and blended in with weight w_v
    otherwise.  The per-node gate tolerates the model's standing shape bias
    (centimetres spread over the whole mesh) while still catching a single
    corrupted marker.  Returns the (possibly updated) state vector and the
    decision record.
    """
    dt = now - sample.t_c
    if dt > cfg.dt_max:
        return bsom_x, FeedbackEvent(now, sample.t_c, "discarded", "stale",
                                     dt, float("nan"))
    ts = model.ts
    steps = max(int(math.ceil(dt / ts - 1e-9)), 0)
    x_v = np.concatenate([sample.positions.ravel(), sample.velocities.ravel()])
    for i in range(steps):
        j = int(math.floor((sample.t_c + i * ts) / ts + 1e-9))
        if not 0 <= j < len(control_history):
            return bsom_x, FeedbackEvent(now, sample.t_c, "discarded",
                                         "history", dt, float("nan"))
        x_v = model.A @ x_v + model.B @ control_history[j] + model.f_ct
    half = bsom_x.size // 2
    gaps = (x_v[:half] - bsom_x[:half]).reshape(-1, 3)
    dist = float(np.linalg.norm(gaps, axis=1).max())
    if dist > cfg.dd_max:
        return bsom_x, FeedbackEvent(now, sample.t_c, "discarded", "distance",
                                     dt, dist)
    fused = cfg.w_v * x_v + (1.0 - cfg.w_v) * bsom_x
    return fused, FeedbackEvent(now, sample.t_c, "accepted", "-", dt, dist)


def default_mpc_config(ts: float, hp: int, side_length: float = 0.30,
                       **kw) -> MpcConfig:
    """Baseline controller settings: q=1, r=0.2, 0.5 m/s hand speed limit,
    half a side length of travel per grasped corner."""
    u0 = excitation_bases(side_length)
    defaults = dict(hp=hp, ts=ts, q=1.0, r=0.2,
                    u_min=u0 - 0.5 * side_length, u_max=u0 + 0.5 * side_length,
                    slew=np.full(6, 0.5 * ts),
                    pos_min=np.array([-1.0, -1.0, -1.0]),
                    pos_max=np.array([1.0, 1.0, 1.0]))
    defaults.update(kw)
    return MpcConfig(**defaults)


# ---------------------------------------------------------------------------
# Closed-loop run
# ---------------------------------------------------------------------------

_SETTLED: dict = {}


def _settled_plant_state(mesh, params, u_hold) -> MeshState:
    key = (mesh.n, mesh.side_length, mesh.node_mass,
           tuple(np.round(params.as_vector(), 12)), tuple(np.round(u_hold, 12)))
    state = _SETTLED.get(key)
    if state is None:
        from .fitting import settle_nonlinear
        state = settle_nonlinear(mesh, params, u_hold)
        _SETTLED[key] = state
    return state.copy()


def calibrate_rest_shape(model: LinearClothModel, resting: np.ndarray,
                         u_hold: np.ndarray) -> LinearClothModel:
    """Anchor the model's constant forcing at an observed resting shape.

    The per-axis spring model settles into a hanging shape that differs from
    the real sheet by a standing offset (most visibly the bottom edge pulling
    inward), and a controller that trusts the uncorrected model burns its
    authority fighting that unreachable gap.  Adding the one-step residual of
    the observed rest state as a constant forcing makes that state the
    model's exact equilibrium under the holding grasp, the discrete analogue
    of calibrating gravity against one static capture.
    """
    x_rest = np.concatenate([np.asarray(resting, dtype=float).ravel(),
                             np.zeros(3 * len(resting))])
    w = x_rest - (model.A @ x_rest + model.B @ np.asarray(u_hold, float)
                  + model.f_ct)
    return replace(model, f_ct=model.f_ct + w)


class _FeedbackChannel:
    """Captures, corrupts, filters, and schedules measurement deliveries."""

    def __init__(self, cfg: FeedbackConfig, rng: np.random.Generator,
                 som_to_bsom: np.ndarray):
        self.cfg = cfg
        self.rng = rng
        self.idx = som_to_bsom
        self.next_capture = cfg.rate
        self.filtered_prev: np.ndarray | None = None
        self.pending: list = []            # (t_deliver, t_c, filtered full mesh)
        self.anchor: tuple[float, np.ndarray] | None = None  # accepted (t_c, pos)

    def capture_due(self, positions: np.ndarray, now: float) -> None:
        # captures snap to the tick boundary where the snapshot is taken, so
        # a sample timestamp always names an exact simulated plant state
        while self.next_capture <= now + 1e-12:
            self.next_capture += self.cfg.rate
            t_c = now
            raw = positions + self.rng.normal(0.0, self.cfg.noise_sigma,
                                              positions.shape)
            filtered = ema_filter(raw, self.filtered_prev, self.cfg.alpha)
            self.filtered_prev = filtered
            t_deliver = t_c + self.cfg.delay + \
                self.rng.uniform(0.0, self.cfg.jitter)
            self.pending.append((t_deliver, t_c, filtered))

    def deliveries_due(self, now: float) -> list:
        due = [p for p in self.pending if p[0] <= now + 1e-12]
        self.pending = [p for p in self.pending if p[0] > now + 1e-12]
        due.sort(key=lambda p: p[0])
        return due

    def to_sample(self, t_c: float, filtered: np.ndarray) -> FeedbackSample:
        pos = filtered[self.idx]
        if self.anchor is None:
            vel = np.zeros_like(pos)
        else:
            t_prev, pos_prev = self.anchor
            vel = (pos - pos_prev) / (t_c - t_prev)
        return FeedbackSample(pos, vel, t_c)

    def mark_accepted(self, sample: FeedbackSample) -> None:
        self.anchor = (sample.t_c, sample.positions)


def _blocked(disturbances: list, t: float) -> bool:
    return any(d.kind == "camera-block" and d.window[0] <= t < d.window[1]
               for d in disturbances)


def _push_region(mesh) -> np.ndarray:
    """Free nodes within 0.35 side lengths of the right grasped corner."""
    target = mesh.rest_positions[mesh.grasped_indices[0]]
    dist = np.linalg.norm(mesh.rest_positions - target, axis=1)
    region = np.where(dist <= 0.35 * mesh.side_length)[0]
    return np.setdiff1d(region, np.array(mesh.grasped_indices))


def _push_forces(mesh, disturbances: list, t: float) -> np.ndarray | None:
    total = None
    for d in disturbances:
        if d.kind != "corner-push" or not d.window[0] <= t < d.window[1]:
            continue
        region = _push_region(mesh)
        if total is None:
            total = np.zeros((mesh.num_nodes, 3))
        total[region] += d.force_vector() / max(len(region), 1)
    return total


def run_closed_loop(scenario: Scenario, params_com: ClothParams, seed: int = 0,
                    params_bsom: ClothParams | None = None, serial: bool = True,
                    deadline: float | None = None,
                    pacing: str = "virtual") -> tuple[LoopLog, KpiReport]:
    """Run one scenario and return its log and performance report.

    Serial mode solves synchronously at the end of each tick on a virtual
    clock: solve time is measured and reported, but the sequence lands in
    the buffer at the next tick regardless, which keeps runs reproducible
    for a fixed seed on any machine.  Passing a deadline turns lateness
    emulation on: a solve measuring m deadlines long is withheld for m - 1
    extra ticks, so the loop has to live off shifted elements of the older
    sequence meanwhile.  serial=False uses the background solver thread and
    real wall-clock arrival instead; pacing="wall" additionally sleeps each
    tick to the control period.
    """
    ts = scenario.ts
    emulate_lateness = deadline is not None
    if deadline is None:
        deadline = ts
    rng = np.random.default_rng(seed)

    side, mass = scenario.side_length, scenario.total_mass
    mesh_com = build_mesh(scenario.com_n, side, mass)
    mesh_bsom = build_mesh(scenario.bsom_n, side, mass)
    mesh_som = build_mesh(scenario.som_n, side, mass)
    if params_bsom is None:
        params_bsom = params_com if scenario.bsom_n == scenario.com_n else \
            scale_params_for_resolution(params_com, scenario.com_n,
                                        scenario.bsom_n)
    model_com = assemble_linear_model(mesh_com, params_com, ts)
    model_bsom = assemble_linear_model(mesh_bsom, params_bsom, ts)

    idx_som_bsom = submesh_indices(scenario.som_n, scenario.bsom_n)
    idx_som_com = submesh_indices(scenario.som_n, scenario.com_n)
    nb = mesh_bsom.num_nodes

    u0 = excitation_bases(side)
    if scenario.plant == "nonlinear":
        from .fitting import default_initial_params
        params_som = default_initial_params(mesh_som)
        som_state = _settled_plant_state(mesh_som, params_som, u0)
        substeps = max(int(round(ts / SOM_DT)), 1)
        # one static calibration against the resting sheet pins both linear
        # models' equilibria to the true hanging shape under the start grasp
        model_bsom = calibrate_rest_shape(model_bsom,
                                          som_state.positions[idx_som_bsom], u0)
        model_com = calibrate_rest_shape(model_com,
                                         som_state.positions[idx_som_com], u0)
        x_bsom = np.concatenate([som_state.positions[idx_som_bsom].ravel(),
                                 np.zeros(3 * nb)])
    else:
        params_som = scale_params_for_resolution(
            params_com, scenario.com_n, scenario.som_n) \
            if scenario.som_n != scenario.com_n else params_com
        model_som = assemble_linear_model(mesh_som, params_som, ts)
        som_state = state_to_vector(hanging_equilibrium(model_som, u0))
        x_bsom = state_to_vector(hanging_equilibrium(model_bsom, u0))

    idx_bsom_com = submesh_indices(scenario.bsom_n, scenario.com_n)

    def subvector_com(x_b: np.ndarray) -> np.ndarray:
        pos = x_b[:3 * nb].reshape(nb, 3)[idx_bsom_com]
        vel = x_b[3 * nb:].reshape(nb, 3)[idx_bsom_com]
        return np.concatenate([pos.ravel(), vel.ravel()])

    channel = _FeedbackChannel(scenario.feedback, rng, idx_som_bsom)
    solver = MpcSolver(model_com, scenario.mpc)
    worker = None if serial else MpcWorker(solver)
    buffer = worker.buffer if worker else SequenceBuffer()

    history: list = []
    records: list = []
    sequences: list = []
    solve_times: list = []
    u_prev = u0.copy()
    aborted = False
    faults = 0
    pending_seq: tuple[int, ControlSequence] | None = None

    def submit_from(k_next: int) -> ControlSequence | None:
        problem = build_ocp(model_com, scenario.mpc, subvector_com(x_bsom),
                            u_prev, ref_window(scenario.reference, k_next,
                                               scenario.mpc.hp),
                            issued_at_step=k_next)
        if worker is not None:
            worker.submit(problem)
            return None
        seq = solver.solve(problem)
        solve_times.append(seq.solve_time)
        sequences.append(seq)
        return seq

    # bootstrap: the loop cannot start without one solved sequence
    boot = submit_from(0)
    if boot is not None:
        buffer.push(boot)
    elif worker is not None:
        while worker.buffer.newest() is None:
            time.sleep(1e-4)

    try:
        for k in range(scenario.duration):
            t_now = k * ts
            t_next = (k + 1) * ts
            wall_start = time.perf_counter()

            if pending_seq is not None and pending_seq[0] <= k:
                buffer.push(pending_seq[1])
                pending_seq = None

            tau_this_tick = float("nan")
            try:
                pick = next_control(buffer, k)
                u_k = pick.u
                fresh, offset, issued = pick.fresh, pick.offset, pick.issued_at_step
                status = buffer.newest().status
                faults = 0
            except StaleBufferError:
                u_k = u_prev.copy()
                fresh, offset, issued = False, -1, -1
                status = "fault"
                faults += 1

            if faults > scenario.mpc.hp:
                aborted = True
                records.append(LoopRecord(
                    k, t_now, ref_window(scenario.reference, k, 1)[0],
                    corner_vector(mesh_som, _plant_positions(som_state),
                                  "lower"),
                    np.full(6, np.nan), u_k, fresh, offset, issued, status,
                    tau_this_tick, float("nan")))
                break

            # plant advance
            if scenario.plant == "nonlinear":
                forces = _push_forces(mesh_som, scenario.disturbances, t_now)
                state = som_state
                for s in range(1, substeps + 1):
                    frac = s / substeps
                    u_sub = (1.0 - frac) * u_prev + frac * u_k
                    state = step_nonlinear(mesh_som, params_som, state, u_sub,
                                           SOM_DT, max_strain=SOM_MAX_STRAIN,
                                           external=forces)
                som_state = state
                plant_pos = som_state.positions
            else:
                som_state = model_som.A @ som_state + model_som.B @ u_k \
                    + model_som.f_ct
                plant_pos = som_state[:3 * mesh_som.num_nodes].reshape(-1, 3)

            history.append(u_k)
            u_prev = u_k

            # backup propagation with the same input
            x_bsom = model_bsom.A @ x_bsom + model_bsom.B @ u_k + model_bsom.f_ct

            for d in scenario.disturbances:
                if d.kind == "state-offset" and t_now <= d.window[0] < t_next:
                    x_bsom = x_bsom.copy()
                    x_bsom[:3 * nb] += np.tile(np.asarray(d.magnitude,
                                                          float).reshape(3), nb)

            # measurements
            channel.capture_due(plant_pos, t_next)
            events = []
            y_fed = np.full(6, np.nan)
            for t_deliver, t_c, filtered in channel.deliveries_due(t_next):
                if _blocked(scenario.disturbances, t_deliver):
                    events.append(FeedbackEvent(t_next, t_c, "discarded",
                                                "blocked", t_next - t_c,
                                                float("nan")))
                    continue
                sample = channel.to_sample(t_c, filtered)
                x_bsom, event = ingest_feedback(sample, t_next, x_bsom,
                                                history, scenario.feedback,
                                                model_bsom)
                events.append(event)
                if event.decision == "accepted":
                    channel.mark_accepted(sample)
            if channel.filtered_prev is not None:
                y_fed = corner_vector(mesh_som, channel.filtered_prev, "lower")

            # next solve, one in flight at a time
            if serial:
                if pending_seq is None and k + 1 < scenario.duration:
                    seq = submit_from(k + 1)
                    tau_this_tick = seq.solve_time
                    late = 0
                    if emulate_lateness:
                        late = max(0, math.ceil(seq.solve_time / deadline
                                                - 1e-9) - 1)
                    pending_seq = (k + 1 + late, seq)
            else:
                newest = worker.buffer.newest()
                if newest is not None and (not sequences
                                           or sequences[-1] is not newest):
                    sequences.append(newest)
                    solve_times.append(newest.solve_time)
                    tau_this_tick = newest.solve_time
                if worker.idle():
                    submit_from(k + 1)

            bsom_pos = x_bsom[:3 * nb].reshape(nb, 3)
            bsom_err = float(np.linalg.norm(bsom_pos
                                            - plant_pos[idx_som_bsom]))
            records.append(LoopRecord(
                k, t_next, ref_window(scenario.reference, k + 1, 1)[0],
                corner_vector(mesh_som, plant_pos, "lower"), y_fed, u_k,
                fresh, offset, issued, status, tau_this_tick, bsom_err,
                events))

            if pacing == "wall":
                leftover = ts - (time.perf_counter() - wall_start)
                if leftover > 0:
                    time.sleep(leftover)
    finally:
        if worker is not None:
            worker.stop()
            newest = worker.buffer.newest()
            if newest is not None and (not sequences
                                       or sequences[-1] is not newest):
                sequences.append(newest)
                solve_times.append(newest.solve_time)

    meta = {
        "ts": ts, "deadline": deadline, "dt_max": scenario.feedback.dt_max,
        "dd_max": scenario.feedback.dd_max, "w_v": scenario.feedback.w_v,
        "alpha": scenario.feedback.alpha, "com_n": scenario.com_n,
        "bsom_n": scenario.bsom_n, "som_n": scenario.som_n, "seed": seed,
    }
    log = LoopLog(records, sequences, solve_times, meta, aborted)
    return log, compute_kpis(log)


def _plant_positions(state) -> np.ndarray:
    if isinstance(state, MeshState):
        return state.positions
    return state[:state.size // 2].reshape(-1, 3)


def compute_kpis(log: LoopLog) -> KpiReport:
    """Recompute the report from the per-step records alone."""
    if not log.records:
        raise ValueError("log has no records")
    y = np.array([rec.y_som for rec in log.records])
    ref = np.array([rec.r for rec in log.records])
    diff = y - ref
    e = np.sqrt(np.mean(diff ** 2, axis=0))
    kpi1 = 0.5 * (float(np.linalg.norm(e[:3])) + float(np.linalg.norm(e[3:])))
    kpi2 = float(np.mean(log.solve_times)) if log.solve_times else float("nan")
    max_error = np.max(np.abs(diff), axis=0)
    deadline = log.meta.get("deadline", log.meta.get("ts", float("inf")))
    timeout_count = sum(1 for t in log.solve_times[1:] if t > deadline)
    discards: dict = {}
    accepted = 0
    for rec in log.records:
        for ev in rec.events:
            if ev.decision == "accepted":
                accepted += 1
            else:
                discards[ev.reason] = discards.get(ev.reason, 0) + 1
    return KpiReport(e, kpi1, kpi2, max_error, timeout_count, accepted,
                     discards, log.meta.get("dt_max", float("nan")),
                     log.meta.get("dd_max", float("nan")), log.aborted)


# ---------------------------------------------------------------------------
# Horizon sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    hp: int
    kpi1: float
    kpi2: float
    aborted: bool


@dataclass
class SweepResult:
    rows: list
    window: list               # hp values satisfying both selection rules
    diagnostics: str = ""


def sweep_hp(scenario: Scenario, hp_range, params_com: ClothParams,
             seed: int = 0, params_bsom: ClothParams | None = None) -> SweepResult:
    """Re-run the scenario across horizon lengths and pick the usable band.

    The recommended window keeps horizons whose tracking error is within
    10% of the best and whose mean solve time stays under the control
    period.
    """
    hps = list(hp_range)
    if not hps:
        raise ValueError("hp_range is empty")
    rows = []
    for hp in hps:
        cfg = scenario.mpc
        mpc = MpcConfig(hp=int(hp), ts=cfg.ts, q=cfg.q, r=cfg.r,
                        u_min=cfg.u_min, u_max=cfg.u_max, slew=cfg.slew,
                        pos_min=cfg.pos_min, pos_max=cfg.pos_max,
                        adaptive_q=cfg.adaptive_q, epsilon=cfg.epsilon,
                        penalize_slew=cfg.penalize_slew,
                        arm_link_length=cfg.arm_link_length,
                        soft_penalty=cfg.soft_penalty)
        run_scenario = Scenario(
            reference=scenario.reference, ts=scenario.ts,
            duration=scenario.duration, com_n=scenario.com_n,
            bsom_n=scenario.bsom_n, som_n=scenario.som_n,
            side_length=scenario.side_length, total_mass=scenario.total_mass,
            mpc=mpc, feedback=scenario.feedback,
            disturbances=scenario.disturbances, plant=scenario.plant)
        _, report = run_closed_loop(run_scenario, params_com, seed=seed,
                                    params_bsom=params_bsom)
        rows.append(SweepRow(int(hp), report.kpi1, report.kpi2,
                             report.aborted))
    usable = [row for row in rows if not row.aborted]
    if not usable:
        return SweepResult(rows, [], "every horizon aborted")
    best = min(row.kpi1 for row in usable)
    window = [row.hp for row in usable
              if row.kpi1 <= 1.1 * best and row.kpi2 < scenario.ts]
    diag = "" if window else (
        f"no horizon satisfies both rules: best kpi1={best:.4f}, "
        f"min kpi2={min(row.kpi2 for row in usable):.4f} vs ts={scenario.ts}")
    return SweepResult(rows, window, diag)


# ---------------------------------------------------------------------------
# Log and report files
# ---------------------------------------------------------------------------

_LOG_COLUMNS = ("k t fresh offset issued status tau bsom_err "
                "rrx rry rrz rlx rly rlz "
                "yrx yry yrz ylx yly ylz "
                "frx fry frz flx fly flz "
                "urx ury urz ulx uly ulz events")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_loop_log(path, log: LoopLog) -> None:
    """One row per step; events packed as decision,reason,t_c,dt,dist."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in sorted(log.meta.items()):
            fh.write(f"# {key} {_fmt(val) if isinstance(val, float) else val}\n")
        fh.write(f"# aborted {int(log.aborted)}\n")
        fh.write(f"# columns {_LOG_COLUMNS}\n")
        for rec in log.records:
            parts = [str(rec.k), _fmt(rec.t), str(int(rec.fresh)),
                     str(rec.offset), str(rec.issued_at), rec.status,
                     _fmt(rec.tau), _fmt(rec.bsom_err)]
            for vec in (rec.r, rec.y_som, rec.y_fed, rec.u):
                parts.extend(_fmt(v) for v in vec)
            if rec.events:
                parts.append(";".join(
                    f"{ev.decision},{ev.reason},{_fmt(ev.t_c)},{_fmt(ev.dt)},"
                    f"{_fmt(ev.dist)}" for ev in rec.events))
            else:
                parts.append("none")
            fh.write(" ".join(parts) + "\n")


def load_loop_log(path) -> LoopLog:
    meta: dict = {}
    records: list = []
    aborted = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                _, key, *rest = line.split(None, 2)
                if key == "columns":
                    continue
                if key == "aborted":
                    aborted = bool(int(rest[0]))
                    continue
                val = rest[0]
                try:
                    num = float(val)
                    meta[key] = int(num) if num == int(num) and \
                        "." not in val and "e" not in val.lower() else num
                except ValueError:
                    meta[key] = val
                continue
            parts = line.split()
            k = int(parts[0])
            t = float(parts[1])
            fresh = bool(int(parts[2]))
            offset = int(parts[3])
            issued = int(parts[4])
            status = parts[5]
            tau = float(parts[6])
            bsom_err = float(parts[7])
            vecs = np.array([float(v) for v in parts[8:32]]).reshape(4, 6)
            events = []
            if parts[32] != "none":
                for token in parts[32].split(";"):
                    dec, reason, t_c, dt, dist = token.split(",")
                    events.append(FeedbackEvent(t, float(t_c), dec, reason,
                                                float(dt), float(dist)))
            records.append(LoopRecord(k, t, vecs[0], vecs[1], vecs[2],
                                      vecs[3], fresh, offset, issued, status,
                                      tau, bsom_err, events))
    return LoopLog(records, [], [], meta, aborted)


def save_kpi_report(path, report: KpiReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("e " + " ".join(_fmt(v) for v in report.e) + "\n")
        fh.write(f"kpi1 {_fmt(report.kpi1)}\n")
        fh.write(f"kpi2 {_fmt(report.kpi2)}\n")
        fh.write("max_error " + " ".join(_fmt(v) for v in report.max_error)
                 + "\n")
        fh.write(f"timeout_count {report.timeout_count}\n")
        fh.write(f"accepted_count {report.accepted_count}\n")
        fh.write(f"dt_max {_fmt(report.dt_max)}\n")
        fh.write(f"dd_max {_fmt(report.dd_max)}\n")
        fh.write(f"aborted {int(report.aborted)}\n")
        for reason, count in sorted(report.discards.items()):
            fh.write(f"discarded_{reason} {count}\n")


def load_kpi_report(path) -> KpiReport:
    vals: dict = {}
    discards: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key, rest = parts[0], parts[1:]
            if key.startswith("discarded_"):
                discards[key[len("discarded_"):]] = int(rest[0])
            else:
                vals[key] = rest
    return KpiReport(
        e=np.array([float(v) for v in vals["e"]]),
        kpi1=float(vals["kpi1"][0]), kpi2=float(vals["kpi2"][0]),
        max_error=np.array([float(v) for v in vals["max_error"]]),
        timeout_count=int(vals["timeout_count"][0]),
        accepted_count=int(vals["accepted_count"][0]), discards=discards,
        dt_max=float(vals["dt_max"][0]), dd_max=float(vals["dd_max"][0]),
        aborted=bool(int(vals.get("aborted", ["0"])[0])))
