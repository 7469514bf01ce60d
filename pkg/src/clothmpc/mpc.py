"""Receding-horizon MPC over the linear cloth model.

The optimal control problem tracks the two lower corners over a horizon Hp:

    J = sum_{i=0..Hp-1} |y_{k+i+1} - r_{k+i+1}|^2_Q + |du_{k+i}|^2_R

with du the grasped-corner slew (u_k = u_{k-1} + du_k), box constraints on u
and on the slew, and soft position boxes on the predicted mesh. Everything is
condensed into a dense QP on the stacked slews and handed to the ADMM solver;
a sparse encoding (dynamics kept as equality rows) is provided as a
cross-check. An optional rigid-link equality between the grasped corners is
enforced by successive linearisation (a short SQP loop).
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .model import LinearClothModel
from .qp import CANCELLED, MAX_ITER, OPTIMAL, TIME_LIMITED, QpSolver

FALLBACK_LIMIT_STATUSES = (OPTIMAL, TIME_LIMITED, MAX_ITER)


class StaleBufferError(RuntimeError):
    """The newest control sequence has run out of elements."""


@dataclass
class MpcConfig:
    """Controller settings; weights are 6x6 matrices (diagonal in practice)."""

    hp: int
    ts: float
    q: np.ndarray                    # 6x6 PSD output weight
    r: np.ndarray                    # 6x6 PD slew weight
    u_min: np.ndarray                # (6,) m
    u_max: np.ndarray                # (6,) m
    slew: np.ndarray                 # (6,) m per step (= v_max * ts)
    pos_min: np.ndarray              # (3,) world box for node positions, m
    pos_max: np.ndarray              # (3,)
    adaptive_q: bool = False
    epsilon: float = 1e-6            # adaptive-weight regulariser
    penalize_slew: bool = True       # False: cost |u|^2_R instead of |du|^2_R
    arm_link_length: Optional[float] = None
    soft_penalty: float = 1e4
    time_budget: Optional[float] = None   # s, defaults to ts * hp / 4

    def __post_init__(self):
        self.q = _as_weight(self.q)
        self.r = _as_weight(self.r)
        for name in ("u_min", "u_max", "slew"):
            setattr(self, name, np.asarray(getattr(self, name), float).reshape(6))
        self.pos_min = np.asarray(self.pos_min, float).reshape(3)
        self.pos_max = np.asarray(self.pos_max, float).reshape(3)
        if self.hp < 1:
            raise ValueError(f"hp must be >= 1, got {self.hp}")
        if self.ts <= 0:
            raise ValueError(f"ts must be positive, got {self.ts}")
        if np.any(np.linalg.eigvalsh(self.q) < -1e-12):
            raise ValueError("Q must be positive semidefinite")
        if np.any(np.linalg.eigvalsh(self.r) <= 0):
            raise ValueError("R must be positive definite")
        if np.any(self.slew <= 0):
            raise ValueError("slew bound must be positive")
        if np.any(self.u_min >= self.u_max) or np.any(self.pos_min >= self.pos_max):
            raise ValueError("box bounds must satisfy min < max")
        if self.time_budget is None:
            self.time_budget = self.ts * self.hp / 4.0


def _as_weight(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        w = np.eye(6) * float(w)
    elif w.ndim == 1:
        w = np.diag(w)
    if w.shape != (6, 6):
        raise ValueError(f"weight must be scalar, 6-vector or 6x6, got {w.shape}")
    return w


@dataclass
class OcpProblem:
    """One tick's optimisation data: initial state, held input, references."""

    x0: np.ndarray                   # (6N,)
    u_prev: np.ndarray               # (6,)
    ref_window: np.ndarray           # (hp, 6) targets r_{k+1} .. r_{k+hp}
    model: LinearClothModel
    config: MpcConfig
    issued_at_step: int = 0          # step index the first control applies to

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float).ravel()
        self.u_prev = np.asarray(self.u_prev, float).reshape(6)
        self.ref_window = np.asarray(self.ref_window, float).reshape(-1, 6)


def build_ocp(model: LinearClothModel, config: MpcConfig, x0, u_prev, ref_window,
              issued_at_step: int = 0) -> OcpProblem:
    """Validate shapes/finiteness and freeze one tick's OCP."""
    prob = OcpProblem(x0=x0, u_prev=u_prev, ref_window=ref_window, model=model,
                      config=config, issued_at_step=issued_at_step)
    if prob.x0.shape[0] != model.state_dim:
        raise ValueError(f"x0 has dim {prob.x0.shape[0]}, model wants {model.state_dim}")
    if prob.ref_window.shape[0] != config.hp:
        raise ValueError(
            f"reference window has {prob.ref_window.shape[0]} rows, hp={config.hp}")
    if not (np.all(np.isfinite(prob.x0)) and np.all(np.isfinite(prob.ref_window))
            and np.all(np.isfinite(prob.u_prev))):
        raise ValueError("OCP data contains non-finite values")
    return prob


@dataclass
class ControlSequence:
    controls: np.ndarray             # (hp, 6) absolute corner targets
    issued_at_step: int
    status: str
    solve_time: float                # s
    objective: float = float("nan")
    iterations: int = 0
    link_residual: float = float("nan")


def adaptive_q(ref_far: np.ndarray, y_now: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Direction-of-motion output weights beta in [0, 1)^6.

    beta_j = |r_j - y_j| / (|r - y|_2 + epsilon) so coordinates with most of
    the remaining displacement get most of the tracking weight.
    """
    diff = np.asarray(ref_far, float).reshape(6) - np.asarray(y_now, float).reshape(6)
    return np.abs(diff) / (float(np.linalg.norm(diff)) + epsilon)


# ---------------------------------------------------------------------------
# Condensed prediction matrices (cached per model + horizon)
# ---------------------------------------------------------------------------

class _Prediction:
    """Stacked prediction operators for outputs and node positions."""

    def __init__(self, model: LinearClothModel, hp: int):
        a, b, c, f = model.A, model.B, model.C, model.f_ct
        s = a.shape[0]
        n_pos = s // 2                      # position coordinates sit first
        self.hp = hp
        self.n_pos = n_pos

        powers = [np.eye(s)]
        for _ in range(hp):
            powers.append(a @ powers[-1])
        phi_f = [np.zeros(s)]
        for i in range(hp):
            phi_f.append(a @ phi_f[-1] + f)

        p_dim = c.shape[0]
        self.phi_y = np.vstack([c @ powers[i] for i in range(1, hp + 1)])
        self.cf_y = np.concatenate([c @ phi_f[i] for i in range(1, hp + 1)])
        cab = [c @ powers[d] @ b for d in range(hp)]
        gamma_y = np.zeros((p_dim * hp, 6 * hp))
        for i in range(1, hp + 1):
            for j in range(i):
                gamma_y[p_dim * (i - 1):p_dim * i, 6 * j:6 * (j + 1)] = cab[i - 1 - j]

        sel = np.zeros((n_pos, s))
        sel[:, :n_pos] = np.eye(n_pos)
        self.phi_p = np.vstack([sel @ powers[i] for i in range(1, hp + 1)])
        self.cf_p = np.concatenate([sel @ phi_f[i] for i in range(1, hp + 1)])
        pab = [sel @ powers[d] @ b for d in range(hp)]
        gamma_p = np.zeros((n_pos * hp, 6 * hp))
        for i in range(1, hp + 1):
            for j in range(i):
                gamma_p[n_pos * (i - 1):n_pos * i, 6 * j:6 * (j + 1)] = pab[i - 1 - j]

        t_mat = np.kron(np.tril(np.ones((hp, hp))), np.eye(6))
        self.t_mat = t_mat
        self.g_y = gamma_y @ t_mat
        self.g_p = gamma_p @ t_mat
        self.gy_usum = gamma_y @ np.tile(np.eye(6), (hp, 1))
        self.gp_usum = gamma_p @ np.tile(np.eye(6), (hp, 1))
        # constant constraint matrix: slew box, input box, soft position box
        self.a_base = np.vstack([np.eye(6 * hp), t_mat, self.g_p])
        self.soft_base = np.concatenate([
            np.zeros(12 * hp, dtype=bool), np.ones(n_pos * hp, dtype=bool)])

    def free_response(self, x0, u_prev):
        y_free = self.phi_y @ x0 + self.gy_usum @ u_prev + self.cf_y
        p_free = self.phi_p @ x0 + self.gp_usum @ u_prev + self.cf_p
        return y_free, p_free


class MpcSolver:
    """Stateful per-run solver: cached condensation, warm starts, SQP link loop."""

    def __init__(self, model: LinearClothModel, config: MpcConfig):
        self.model = model
        self.config = config
        self.pred = _Prediction(model, config.hp)
        hp = config.hp
        self._r_bar = self._build_r_term()
        self._qdiag = np.diag(config.q)
        self._qp: QpSolver | None = None
        self._h_static: np.ndarray | None = None
        self._warm_z = np.zeros(6 * hp)
        self._warm_y: np.ndarray | None = None
        self._last_u_seq: np.ndarray | None = None

    def _build_r_term(self) -> np.ndarray:
        hp = self.config.hp
        r_bar = np.kron(np.eye(hp), self.config.r)
        if self.config.penalize_slew:
            return r_bar
        t = self.pred.t_mat
        return t.T @ r_bar @ t

    def _cost(self, y_free, ref_flat, u_prev):
        """Hessian and gradient of the condensed objective (times 1)."""
        cfg = self.config
        hp = cfg.hp
        if cfg.adaptive_q:
            y_now = self.model.C @ self._x0
            beta = adaptive_q(ref_flat[-6:], y_now, cfg.epsilon)
            q_vec = np.tile(self._qdiag * beta, hp)
        else:
            q_vec = np.tile(self._qdiag, hp)
        g_y = self.pred.g_y
        h = 2.0 * ((g_y.T * q_vec) @ g_y + self._r_bar)
        grad = 2.0 * (g_y.T @ (q_vec * (y_free - ref_flat)))
        if not cfg.penalize_slew:
            r_vec = np.tile(np.diag(cfg.r), hp)
            grad = grad + 2.0 * (self.pred.t_mat.T @ (r_vec * np.tile(u_prev, hp)))
        return h, grad

    def _bounds(self, p_free, u_prev):
        cfg = self.config
        hp = cfg.hp
        n_pos = self.pred.n_pos
        nodes = n_pos // 3
        l = np.concatenate([
            np.tile(-cfg.slew, hp),
            np.tile(cfg.u_min - u_prev, hp),
            np.tile(np.tile(cfg.pos_min, nodes), hp) - p_free,
        ])
        u = np.concatenate([
            np.tile(cfg.slew, hp),
            np.tile(cfg.u_max - u_prev, hp),
            np.tile(np.tile(cfg.pos_max, nodes), hp) - p_free,
        ])
        return l, u

    def _link_rows(self, d_hat, u_prev):
        """Linearised |u_r - u_l| = L equality rows over the stacked slews."""
        cfg = self.config
        hp = cfg.hp
        length = cfg.arm_link_length
        rows = np.zeros((hp, 6 * hp))
        rhs = np.zeros(hp)
        for i in range(hp):
            d = d_hat[i]
            nrm = float(np.linalg.norm(d))
            if nrm < 1e-9:
                d = np.array([1.0, 0.0, 0.0])
                nrm = 1.0
            coeff = np.concatenate([d, -d])          # d' (u_r - u_l)
            for j in range(i + 1):
                rows[i, 6 * j:6 * (j + 1)] = coeff
            rhs[i] = length * nrm - coeff @ u_prev
        return rows, rhs

    def solve(self, problem: OcpProblem, budget: Optional[float] = None,
              cancel=None) -> ControlSequence:
        t_start = time.perf_counter()
        cfg = self.config
        hp = cfg.hp
        if budget is None:
            budget = cfg.time_budget
        self._x0 = problem.x0
        y_free, p_free = self.pred.free_response(problem.x0, problem.u_prev)
        ref_flat = problem.ref_window.ravel()
        h, grad = self._cost(y_free, ref_flat, problem.u_prev)
        l, u = self._bounds(p_free, problem.u_prev)

        link_on = cfg.arm_link_length is not None
        if link_on:
            if self._last_u_seq is not None:
                d_hat = self._last_u_seq[:, :3] - self._last_u_seq[:, 3:]
            else:
                d0 = problem.u_prev[:3] - problem.u_prev[3:]
                d_hat = np.tile(d0, (hp, 1))

        if self._qp is None:
            self._qp = QpSolver(h, self.pred.a_base, l, u, q=grad,
                                soft=self.pred.soft_base, penalty=cfg.soft_penalty)
            self._h_static = h if not cfg.adaptive_q else None
        elif not link_on:
            if cfg.adaptive_q or self._h_static is None \
                    or not np.array_equal(h, self._h_static):
                self._qp.update_hessian(h)
                if not cfg.adaptive_q:
                    self._h_static = h
            self._qp.update(q=grad, l=l, u=u)

        warm_z = self._warm_z
        warm_y = self._warm_y

        status = MAX_ITER
        iters = 0
        link_resid = float("nan")
        outer = 3 if link_on else 1
        for sqp_it in range(outer):
            if link_on:
                rows, rhs = self._link_rows(d_hat, problem.u_prev)
                a_full = np.vstack([self.pred.a_base, rows])
                soft = np.concatenate([self.pred.soft_base,
                                       np.zeros(hp, dtype=bool)])
                self._qp.update_matrices(h, a_full, soft)
                self._qp.update(q=grad,
                                l=np.concatenate([l, rhs]),
                                u=np.concatenate([u, rhs]))
                if warm_y is not None and warm_y.shape[0] != a_full.shape[0]:
                    warm_y = None
            self._qp.warm_start(z=warm_z, y=warm_y)
            remaining = budget - (time.perf_counter() - t_start)
            if remaining <= 0 and sqp_it > 0:
                break
            res = self._qp.solve(time_budget=max(remaining, 1e-4), cancel=cancel)
            status = res.status
            iters += res.iterations
            warm_z, warm_y = res.z, res.y
            delta = res.z.reshape(hp, 6)
            u_seq = problem.u_prev + np.cumsum(delta, axis=0)
            if not link_on:
                break
            d_new = u_seq[:, :3] - u_seq[:, 3:]
            link_resid = float(np.max(np.abs(np.linalg.norm(d_new, axis=1)
                                             - cfg.arm_link_length)))
            d_hat = d_new
            if link_resid <= 1e-3 * cfg.arm_link_length:
                break
            if status in (TIME_LIMITED, CANCELLED):
                break

        # keep warm state for the next tick: shift everything one step left
        delta = warm_z.reshape(hp, 6)
        self._warm_z = np.concatenate([warm_z[6:], np.zeros(6)])
        self._warm_y = warm_y
        # enforce the sequence invariants exactly (slew box, then input box)
        delta = np.clip(delta, -cfg.slew, cfg.slew)
        u_seq = np.empty((hp, 6))
        prev = problem.u_prev
        for i in range(hp):
            prev = np.clip(prev + delta[i], cfg.u_min, cfg.u_max)
            u_seq[i] = prev
        self._last_u_seq = u_seq

        return ControlSequence(
            controls=u_seq,
            issued_at_step=problem.issued_at_step,
            status=status,
            solve_time=time.perf_counter() - t_start,
            objective=res.objective,
            iterations=iters,
            link_residual=link_resid,
        )


def solve_ocp(problem: OcpProblem, solver: MpcSolver | None = None,
              budget: Optional[float] = None) -> ControlSequence:
    """One-shot solve (fresh condensation unless a persistent solver is given)."""
    if solver is None:
        solver = MpcSolver(problem.model, problem.config)
    return solver.solve(problem, budget=budget)


def apply_arm_link(problem: OcpProblem, length: float,
                   solver: MpcSolver | None = None) -> ControlSequence:
    """Solve the OCP with the rigid-link corner constraint active."""
    cfg = problem.config
    linked = MpcConfig(
        hp=cfg.hp, ts=cfg.ts, q=cfg.q, r=cfg.r, u_min=cfg.u_min, u_max=cfg.u_max,
        slew=cfg.slew, pos_min=cfg.pos_min, pos_max=cfg.pos_max,
        adaptive_q=cfg.adaptive_q, epsilon=cfg.epsilon,
        penalize_slew=cfg.penalize_slew, arm_link_length=float(length),
        soft_penalty=cfg.soft_penalty, time_budget=cfg.time_budget)
    prob = OcpProblem(x0=problem.x0, u_prev=problem.u_prev,
                      ref_window=problem.ref_window, model=problem.model,
                      config=linked, issued_at_step=problem.issued_at_step)
    if solver is None or solver.config is not linked:
        solver = MpcSolver(problem.model, linked)
    return solver.solve(prob)


# ---------------------------------------------------------------------------
# Sparse encoding (dynamics as equality rows) used as a formulation cross-check
# ---------------------------------------------------------------------------

def sparse_qp_data(problem: OcpProblem):
    """Encode the same OCP with states kept as decision variables.

    Variables: [du_0..du_{hp-1}; x_1..x_hp]. Returns (P, q, A, l, u, soft)
    for the ADMM solver; the du block of the optimiser must match the
    condensed solution.
    """
    model, cfg = problem.model, problem.config
    hp = cfg.hp
    s = model.state_dim
    n_du = 6 * hp
    dim = n_du + s * hp
    n_pos = s // 2
    nodes = n_pos // 3

    q_diag = np.diag(cfg.q)
    r_diag = np.diag(cfg.r)
    p_mat = np.zeros((dim, dim))
    q_vec = np.zeros(dim)
    if cfg.penalize_slew:
        p_mat[:n_du, :n_du] = 2.0 * np.kron(np.eye(hp), np.diag(r_diag))
    else:
        t_mat = np.kron(np.tril(np.ones((hp, hp))), np.eye(6))
        r_bar = np.kron(np.eye(hp), np.diag(r_diag))
        p_mat[:n_du, :n_du] = 2.0 * t_mat.T @ r_bar @ t_mat
        q_vec[:n_du] = 2.0 * t_mat.T @ (np.tile(r_diag, hp) * np.tile(problem.u_prev, hp))
    ctqc = 2.0 * model.C.T @ np.diag(q_diag) @ model.C
    for i in range(hp):
        sl = slice(n_du + s * i, n_du + s * (i + 1))
        p_mat[sl, sl] = ctqc
        q_vec[sl] = -2.0 * model.C.T @ (q_diag * problem.ref_window[i])

    # dynamics equalities: x_{i+1} - A x_i - B sum_{t<=i} du_t = B u_prev + f
    rows = []
    l_parts, u_parts = [], []
    soft_parts = []
    for i in range(hp):
        row = np.zeros((s, dim))
        row[:, n_du + s * i: n_du + s * (i + 1)] = np.eye(s)
        if i > 0:
            row[:, n_du + s * (i - 1): n_du + s * i] = -model.A
        for t in range(i + 1):
            row[:, 6 * t:6 * (t + 1)] -= model.B
        rhs = model.f_ct + model.B @ problem.u_prev
        if i == 0:
            rhs = rhs + model.A @ problem.x0
        rows.append(row)
        l_parts.append(rhs)
        u_parts.append(rhs)
        soft_parts.append(np.zeros(s, dtype=bool))

    # slew box on du, input box on cumulated du, soft position box on states
    rows.append(np.hstack([np.eye(n_du), np.zeros((n_du, s * hp))]))
    l_parts.append(np.tile(-cfg.slew, hp))
    u_parts.append(np.tile(cfg.slew, hp))
    soft_parts.append(np.zeros(n_du, dtype=bool))

    t_mat = np.kron(np.tril(np.ones((hp, hp))), np.eye(6))
    rows.append(np.hstack([t_mat, np.zeros((n_du, s * hp))]))
    l_parts.append(np.tile(cfg.u_min - problem.u_prev, hp))
    u_parts.append(np.tile(cfg.u_max - problem.u_prev, hp))
    soft_parts.append(np.zeros(n_du, dtype=bool))

    sel = np.zeros((n_pos, s))
    sel[:, :n_pos] = np.eye(n_pos)
    for i in range(hp):
        row = np.zeros((n_pos, dim))
        row[:, n_du + s * i: n_du + s * (i + 1)] = sel
        rows.append(row)
        l_parts.append(np.tile(cfg.pos_min, nodes))
        u_parts.append(np.tile(cfg.pos_max, nodes))
        soft_parts.append(np.ones(n_pos, dtype=bool))

    return (p_mat, q_vec, np.vstack(rows), np.concatenate(l_parts),
            np.concatenate(u_parts), np.concatenate(soft_parts))


# ---------------------------------------------------------------------------
# Control sequence buffer and asynchronous worker
# ---------------------------------------------------------------------------

class NextControl(NamedTuple):
    u: np.ndarray
    fresh: bool
    offset: int
    issued_at_step: int


class SequenceBuffer:
    """Latest-value mailbox for control sequences (last write wins)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._newest: ControlSequence | None = None

    def push(self, seq: ControlSequence) -> None:
        with self._lock:
            if self._newest is None or seq.issued_at_step >= self._newest.issued_at_step:
                self._newest = seq

    def newest(self) -> ControlSequence | None:
        with self._lock:
            return self._newest


def next_control(buffer: SequenceBuffer, k: int) -> NextControl:
    """Control for step k: fresh first element, or a shifted stale element.

    Raises StaleBufferError when the newest sequence is exhausted
    (k - issued_at_step >= hp) or no sequence was ever produced.
    """
    seq = buffer.newest()
    if seq is None:
        raise StaleBufferError("no control sequence has been produced yet")
    offset = k - seq.issued_at_step
    if offset < 0:
        raise StaleBufferError(
            f"newest sequence starts at future step {seq.issued_at_step} > {k}")
    if offset >= seq.controls.shape[0]:
        raise StaleBufferError(
            f"sequence issued at {seq.issued_at_step} exhausted at step {k}")
    return NextControl(u=seq.controls[offset].copy(), fresh=offset == 0,
                       offset=offset, issued_at_step=seq.issued_at_step)


class MpcWorker:
    """Single background solver thread fed through a latest-value mailbox.

    submit() replaces any pending problem; the worker always picks the newest
    one when free and publishes results into a SequenceBuffer. stop() cancels
    the in-flight solve (honoured within one solver iteration block).
    """

    def __init__(self, solver: MpcSolver):
        self.solver = solver
        self.buffer = SequenceBuffer()
        self._pending: OcpProblem | None = None
        self._cond = threading.Condition()
        self._cancel = threading.Event()
        self._stop = False
        self._busy = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def submit(self, problem: OcpProblem) -> None:
        with self._cond:
            self._pending = problem
            self._cond.notify()

    def latest(self) -> ControlSequence | None:
        return self.buffer.newest()

    def idle(self) -> bool:
        with self._cond:
            return not self._busy and self._pending is None

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cancel.set()
            self._cond.notify()
        self._thread.join(timeout=5.0)

    def _run(self) -> None:
        while True:
            with self._cond:
                while self._pending is None and not self._stop:
                    self._cond.wait()
                if self._stop:
                    return
                problem = self._pending
                self._pending = None
                self._busy = True
            try:
                seq = self.solver.solve(problem, cancel=self._cancel)
                if not self._cancel.is_set():
                    self.buffer.push(seq)
            finally:
                with self._cond:
                    self._busy = False
