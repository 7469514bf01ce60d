"""Dense operator-splitting QP solver with warm start and a time budget.

Solves
    minimize    1/2 z' P z + q' z  +  mu * sum_soft dist_[l,u](a_i' z)
    subject to  l_i <= a_i' z <= u_i          (hard rows, l_i == u_i allowed)

with the OSQP-style ADMM splitting. Soft rows carry an exact L1 penalty
instead of an indicator, so disturbed initial states cannot make the
problem infeasible. The iterate is usable at any iteration (anytime
property); an optional wall-clock budget or cancel event stops the loop
between iterations. Converged solutions are polished on the detected
active set and certified through their KKT residuals.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
TIME_LIMITED = "time-limited"
CANCELLED = "cancelled"

_CHECK_INTERVAL = 25    # iterations between convergence / budget checks
_RHO_EQ_SCALE = 1e3     # stiffer step on equality rows, as in OSQP
_RHO_ADAPT_RATIO = 5.0  # rebalance rho when the residual ratio drifts this far
_RHO_ADAPT_MAX = 4      # refactorisations allowed per solve


@dataclass
class QpResult:
    z: np.ndarray
    y: np.ndarray               # constraint-space multipliers
    status: str
    iterations: int
    solve_time: float
    objective: float
    kkt: dict = field(default_factory=dict)


def quad_objective(P, q, z) -> float:
    return 0.5 * float(z @ (P @ z)) + float(q @ z)


def penalty_objective(P, q, A, l, u, soft, penalty, z) -> float:
    """Objective including the exact penalty on soft rows."""
    val = quad_objective(P, q, z)
    if np.any(soft):
        az = A[soft] @ z
        val += penalty * float(np.sum(np.maximum(az - u[soft], 0.0)
                                      + np.maximum(l[soft] - az, 0.0)))
    return val


def kkt_residuals(P, q, A, l, u, soft, penalty, z, y) -> dict:
    """Stationarity, primal feasibility and complementarity residuals.

    Soft rows follow the exact-penalty subdifferential: the multiplier must
    stay inside [-mu, mu], pin to +-mu when the row is strictly violated and
    vanish when the row is strictly inside its box.
    """
    az = A @ z
    stationarity = float(np.max(np.abs(P @ z + q + A.T @ y))) if A.size else \
        float(np.max(np.abs(P @ z + q)))
    hard = ~soft
    primal = 0.0
    comp = 0.0
    if np.any(hard):
        viol = np.maximum(az[hard] - u[hard], 0.0) + np.maximum(l[hard] - az[hard], 0.0)
        primal = float(np.max(viol)) if viol.size else 0.0
        yh = y[hard]
        gap_u = np.abs(u[hard] - az[hard])
        gap_l = np.abs(az[hard] - l[hard])
        comp_rows = np.where(yh > 0, np.minimum(np.abs(yh), gap_u),
                             np.where(yh < 0, np.minimum(np.abs(yh), gap_l), 0.0))
        eq = l[hard] == u[hard]
        comp_rows[eq] = 0.0         # equality rows: multiplier free
        comp = float(np.max(comp_rows)) if comp_rows.size else 0.0
    if np.any(soft):
        ys = y[soft]
        over = np.maximum(np.abs(ys) - penalty, 0.0)          # |y| <= mu
        above = az[soft] > u[soft] + 1e-12
        below = az[soft] < l[soft] - 1e-12
        pin = np.zeros_like(ys)
        pin[above] = np.abs(ys[above] - penalty)              # y = +mu outside
        pin[below] = np.abs(ys[below] + penalty)
        inside = ~above & ~below
        slack = np.minimum(np.abs(u[soft] - az[soft]), np.abs(az[soft] - l[soft]))
        pin[inside] = np.minimum(np.abs(ys[inside]), slack[inside])
        comp = max(comp, float(np.max(over)) if over.size else 0.0,
                   float(np.max(pin)) if pin.size else 0.0)
    return {"stationarity": stationarity, "primal": primal, "complementarity": comp}


class QpSolver:
    """ADMM solver instance; keeps the factorisation and warm state alive.

    The constraint matrix and Hessian are set once (update_matrices refactors
    when they change); per-call data (q, l, u) moves through update(). The
    previous solution is reused as the warm start unless one is passed in.
    """

    def __init__(self, P, A, l, u, q=None, soft=None, penalty=1e4,
                 rho=0.1, sigma=1e-6, alpha=1.6,
                 eps_abs=1e-6, eps_rel=1e-6, max_iter=20000):
        self.sigma = sigma
        self.alpha = alpha
        self.eps_abs = eps_abs
        self.eps_rel = eps_rel
        self.max_iter = max_iter
        self.base_rho = rho
        self.penalty = float(penalty)
        self._z = None
        self._y = None
        self._w = None
        self.update_matrices(P, A, soft)
        self.q = np.zeros(self.n) if q is None else np.asarray(q, float).copy()
        self.l = np.asarray(l, float).copy()
        self.u = np.asarray(u, float).copy()
        self._refresh_rho()

    # -- problem data ------------------------------------------------------

    def update_matrices(self, P, A, soft=None):
        self.P = np.asarray(P, float)
        self.A = np.asarray(A, float)
        self._AT = np.ascontiguousarray(self.A.T)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        if soft is None:
            soft = np.zeros(self.m, dtype=bool)
        self.soft = np.asarray(soft, dtype=bool)
        self._soft_idx = np.flatnonzero(self.soft)
        # rho takes only two values (base and equality-scaled), so caching the
        # Gram matrices makes a rho change an O(n^2) update plus one Cholesky
        self._gram = self._AT @ self.A
        self._gram_eq = None
        self._gram_eq_pattern = None
        self._factor = None

    def update(self, q=None, l=None, u=None):
        if q is not None:
            self.q = np.asarray(q, float).copy()
        if l is not None:
            self.l = np.asarray(l, float).copy()
        if u is not None:
            self.u = np.asarray(u, float).copy()
        # equality pattern feeds the per-row rho, so bounds changes may refactor
        eq = (self.l == self.u) & ~self.soft
        if self._factor is not None and not np.array_equal(eq, self._eq):
            self._refresh_rho()

    def update_hessian(self, P):
        self.P = np.asarray(P, float)
        self._factor = None

    def warm_start(self, z=None, y=None):
        self._z = None if z is None else np.asarray(z, float).copy()
        self._y = None if y is None else np.asarray(y, float).copy()
        self._w = None

    def _refresh_rho(self):
        self._eq = (self.l == self.u) & ~self.soft
        rho = np.full(self.m, self.base_rho)
        rho[self._eq] *= _RHO_EQ_SCALE
        self.rho = rho
        self._inv_rho = 1.0 / rho
        self._factor = None

    def _factorize(self):
        if self._gram_eq is None or not np.array_equal(self._gram_eq_pattern, self._eq):
            a_eq = self.A[self._eq]
            self._gram_eq = a_eq.T @ a_eq
            self._gram_eq_pattern = self._eq.copy()
        K = self.P + self.sigma * np.eye(self.n) + self.base_rho * self._gram
        if self._gram_eq.size and np.any(self._eq):
            K += self.base_rho * (_RHO_EQ_SCALE - 1.0) * self._gram_eq
        self._factor = cho_factor(K, lower=True, check_finite=False)

    # -- solve -------------------------------------------------------------

    def _prox(self, v):
        w = np.minimum(np.maximum(v, self.l), self.u)
        s = self._soft_idx
        if s.size:
            t = self.penalty * self._inv_rho[s]
            vs, ls, us = v[s], self.l[s], self.u[s]
            ws = w[s]
            ws = np.where(vs > us, np.maximum(us, vs - t), ws)
            ws = np.where(vs < ls, np.minimum(ls, vs + t), ws)
            w[s] = ws
        return w

    def solve(self, time_budget=None, cancel=None) -> QpResult:
        t0 = time.perf_counter()
        if self._factor is None:
            if self.rho.shape[0] != self.m:
                self._refresh_rho()
            self._factorize()
        z = np.zeros(self.n) if self._z is None else self._z
        y = np.zeros(self.m) if self._y is None else self._y
        w = self._prox(self.A @ z) if self._w is None else self._w

        # run to a loose tolerance first and let polishing reach machine
        # precision; only grind the ADMM further if polishing cannot certify
        status = MAX_ITER
        iters = 0
        eps_abs, eps_rel = self.eps_abs, self.eps_rel
        res = None
        for _stage in range(3):
            z, y, w, status, stage_iters, res = self._iterate(
                z, y, w, eps_abs, eps_rel, t0, time_budget, cancel)
            iters += stage_iters
            if res is not None:     # certified through an early polish
                break
            if status != OPTIMAL:
                break
            z_p, y_p, res_p = self._polish(z, y)
            if res_p is not None and max(res_p.values()) <= 1e-6:
                z, y, res = z_p, y_p, res_p
                break
            res_cur = kkt_residuals(self.P, self.q, self.A, self.l, self.u,
                                    self.soft, self.penalty, z, y)
            if res_p is not None and max(res_p.values()) < max(res_cur.values()):
                z, y, res = z_p, y_p, res_p
            else:
                res = res_cur
            if max(res.values()) <= 1e-6:
                break
            eps_abs *= 1e-3
            eps_rel *= 1e-3
            res = None
        if res is None:
            res = kkt_residuals(self.P, self.q, self.A, self.l, self.u,
                                self.soft, self.penalty, z, y)
        if status == OPTIMAL and max(res.values()) > 1e-6:
            status = MAX_ITER      # do not certify a sloppy solution as optimal
        self._z, self._y, self._w = z, y, w
        return QpResult(z=z.copy(), y=y.copy(), status=status, iterations=iters,
                        solve_time=time.perf_counter() - t0,
                        objective=penalty_objective(self.P, self.q, self.A, self.l,
                                                    self.u, self.soft, self.penalty, z),
                        kkt=res)

    def _iterate(self, z, y, w, eps_abs, eps_rel, t0, time_budget, cancel):
        status = MAX_ITER
        iters = 0
        adapts = 0
        A, AT, P, q = self.A, self._AT, self.P, self.q
        rho, inv_rho = self.rho, self._inv_rho
        sigma, alpha = self.sigma, self.alpha
        beta = 1.0 - alpha
        factor = self._factor
        certified = None
        for it in range(1, self.max_iter + 1):
            iters = it
            rhs = sigma * z - q + AT @ (rho * w - y)
            z_t = cho_solve(factor, rhs, check_finite=False)
            az_t = A @ z_t
            z = alpha * z_t + beta * z
            relaxed = alpha * az_t + beta * w
            w_new = self._prox(relaxed + y * inv_rho)
            y = y + rho * (relaxed - w_new)
            w = w_new
            # warm-started calls often converge within a few steps, so check
            # early twice before settling into the periodic schedule
            if it == 4 or it == 12 or it % _CHECK_INTERVAL == 0 or it == self.max_iter:
                az = A @ z
                pz = P @ z
                aty = AT @ y
                r_prim = float(np.max(np.abs(az - w))) if self.m else 0.0
                r_dual = float(np.max(np.abs(pz + q + aty)))
                scale_p = max(float(np.max(np.abs(az))) if self.m else 0.0,
                              float(np.max(np.abs(w))) if self.m else 0.0)
                scale_d = max(float(np.max(np.abs(pz))), float(np.max(np.abs(q))),
                              float(np.max(np.abs(aty))) if self.m else 0.0)
                if r_prim <= eps_abs + eps_rel * scale_p and \
                        r_dual <= eps_abs + eps_rel * scale_d:
                    status = OPTIMAL
                    break
                if cancel is not None and cancel.is_set():
                    status = CANCELLED
                    break
                if time_budget is not None and time.perf_counter() - t0 > time_budget:
                    status = TIME_LIMITED
                    break
                # the active set usually settles long before the iterates do,
                # so try an exact solve on the detected set and exit early
                # whenever its KKT residuals certify
                if it >= 12:
                    z_p, y_p, res_p = self._polish(z, y)
                    if res_p is not None and max(res_p.values()) <= 1e-6:
                        z, y = z_p, y_p
                        status = OPTIMAL
                        certified = res_p
                        break
                # rebalance the step size when primal and dual progress diverge
                if adapts < _RHO_ADAPT_MAX and r_dual > 0.0:
                    ratio = np.sqrt((r_prim / max(scale_p, 1e-12))
                                    / (r_dual / max(scale_d, 1e-12)))
                    if ratio > _RHO_ADAPT_RATIO or ratio < 1.0 / _RHO_ADAPT_RATIO:
                        self.base_rho = float(np.clip(self.base_rho * ratio, 1e-6, 1e6))
                        self._refresh_rho()
                        self._factorize()
                        rho, inv_rho = self.rho, self._inv_rho
                        factor = self._factor
                        adapts += 1
        return z, y, w, status, iters, certified

    def _polish(self, z, y):
        """Equality-solve on the detected active set, as in OSQP polishing."""
        tol_y = 1e-8 * max(1.0, float(np.max(np.abs(y))) if y.size else 0.0)
        sat = self.penalty * (1.0 - 1e-6)
        soft = self.soft
        sat_hi = soft & (y >= sat)
        sat_lo = soft & (y <= -sat)
        # saturated soft rows contribute a fixed +-mu * a_i to the gradient;
        # the remaining positive / negative multipliers mark active bounds
        at_upper = (y > tol_y) & ~sat_hi & ~sat_lo
        at_lower = (y < -tol_y) & ~sat_hi & ~sat_lo
        eq = ~soft & (self.l == self.u)
        at_upper &= ~eq
        at_lower &= ~eq
        q_pol = self.q.copy()
        if np.any(sat_hi):
            q_pol += self.penalty * np.sum(self.A[sat_hi], axis=0)
        if np.any(sat_lo):
            q_pol -= self.penalty * np.sum(self.A[sat_lo], axis=0)
        act_rows = np.flatnonzero(eq | at_upper | at_lower)
        act_rhs = np.where(eq | at_lower, self.l, self.u)[act_rows]
        a_act = self.A[act_rows]
        k = act_rows.size
        delta = 1e-9
        kkt = np.zeros((self.n + k, self.n + k))
        kkt[:self.n, :self.n] = self.P
        kkt[:self.n, :self.n][np.diag_indices(self.n)] += delta
        if k:
            kkt[:self.n, self.n:] = a_act.T
            kkt[self.n:, :self.n] = a_act
            kkt[self.n:, self.n:][np.diag_indices(k)] = -delta
        rhs = np.concatenate([-q_pol, act_rhs])
        try:
            factor = lu_factor(kkt, check_finite=False)
            sol = lu_solve(factor, rhs, check_finite=False)
            for _ in range(2):      # iterative refinement against the exact system
                resid = rhs - kkt @ sol
                resid[:self.n] += delta * sol[:self.n]
                if k:
                    resid[self.n:] -= delta * sol[self.n:]
                sol += lu_solve(factor, resid, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return z, y, None
        z_pol = sol[:self.n]
        y_pol = np.zeros(self.m)
        y_pol[sat_hi] = self.penalty
        y_pol[sat_lo] = -self.penalty
        y_pol[act_rows] = sol[self.n:]
        res = kkt_residuals(self.P, self.q, self.A, self.l, self.u,
                            self.soft, self.penalty, z_pol, y_pol)
        return z_pol, y_pol, res


def solve_qp(P, q, A, l, u, soft=None, penalty=1e4, **kw) -> QpResult:
    """One-shot convenience wrapper around QpSolver."""
    solver = QpSolver(P, A, l, u, q=q, soft=soft, penalty=penalty, **kw)
    return solver.solve()


# ---------------------------------------------------------------------------
# Debug dump format: sections of delimited text, one value row per line.
# Layout: `# section <name> <rows> <cols>` then the matrix rows; sections are
# hessian, gradient, constraints, lower, upper, soft (0/1 mask), penalty.
# ---------------------------------------------------------------------------

def dump_problem(path, P, q, A, l, u, soft=None, penalty=1e4) -> None:
    if soft is None:
        soft = np.zeros(len(l), dtype=bool)

    def write_block(f, name, mat):
        mat = np.atleast_2d(np.asarray(mat, float))
        f.write(f"# section {name} {mat.shape[0]} {mat.shape[1]}\n")
        for row in mat:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")

    with open(path, "w") as f:
        write_block(f, "hessian", P)
        write_block(f, "gradient", q)
        write_block(f, "constraints", A)
        write_block(f, "lower", l)
        write_block(f, "upper", u)
        write_block(f, "soft", np.asarray(soft, float))
        write_block(f, "penalty", [[float(penalty)]])


def load_problem(path) -> dict:
    sections = {}
    name = None
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# section"):
                if name is not None:
                    sections[name] = np.asarray(rows, float)
                name = line.split()[2]
                rows = []
            else:
                rows.append([float(t) for t in line.split()])
    if name is not None:
        sections[name] = np.asarray(rows, float)
    out = {
        "P": sections["hessian"],
        "q": sections["gradient"].ravel(),
        "A": sections["constraints"],
        "l": sections["lower"].ravel(),
        "u": sections["upper"].ravel(),
        "soft": sections["soft"].ravel().astype(bool),
        "penalty": float(sections["penalty"].ravel()[0]),
    }
    return out
