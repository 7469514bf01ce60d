"""QP solver tests against grid-search and active-set enumeration oracles."""
from itertools import product

import numpy as np
import pytest

from clothmpc.qp import (QpSolver, dump_problem, kkt_residuals, load_problem,
                         penalty_objective, quad_objective, solve_qp)


def brute_force_qp(P, q, A, l, u):
    """Enumerate active sets; returns (value, z) or (inf, None) if infeasible."""
    n, m = P.shape[0], A.shape[0]
    best, best_z = np.inf, None
    for pattern in product((0, 1, 2), repeat=m):
        rows = [i for i in range(m) if pattern[i]]
        rhs = np.array([l[i] if pattern[i] == 1 else u[i] for i in rows])
        a_act = A[rows]
        if rows:
            kkt = np.block([[P, a_act.T],
                            [a_act, np.zeros((len(rows), len(rows)))]])
            full_rhs = np.concatenate([-q, rhs])
        else:
            kkt, full_rhs = P, -q
        try:
            sol = np.linalg.solve(kkt, full_rhs)
        except np.linalg.LinAlgError:
            continue
        z = sol[:n]
        az = A @ z
        if np.all(az >= l - 1e-9) and np.all(az <= u + 1e-9):
            val = 0.5 * z @ P @ z + q @ z
            if val < best - 1e-12:
                best, best_z = val, z
    return best, best_z


def random_feasible_qp(rng, n=4, m=5):
    """Random strictly convex QP whose box surrounds a known point."""
    mat = rng.normal(size=(n, n))
    P = mat @ mat.T + 0.1 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    z_inner = rng.normal(size=n)
    c = A @ z_inner
    w = np.abs(rng.normal(size=m)) + 0.2
    return P, q, A, c - w, c + w


def test_matches_active_set_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(30):
        P, q, A, l, u = random_feasible_qp(rng)
        res = solve_qp(P, q, A, l, u)
        want, _ = brute_force_qp(P, q, A, l, u)
        assert res.status == "optimal"
        got = quad_objective(P, q, res.z)
        assert got == pytest.approx(want, abs=1e-7)


def test_one_node_tracking_toy_matches_grid_search():
    # one cloth node on a spring tracked over two steps with |u| <= 1;
    # decision variables are the two controls, cost is tracking + effort
    k, b, m, ts = 2.0, 0.2, 0.05, 0.05
    a1 = 1.0 - ts * ts * k / m
    b1 = ts * ts * k / m

    def predict(u1, u2, p0):
        p1 = a1 * p0 + b1 * u1
        p2 = a1 * p1 + b1 * u2
        return p1, p2

    p0, target = 0.0, 0.8
    r_weight = 0.05

    def cost(u1, u2):
        p1, p2 = predict(u1, u2, p0)
        return ((p1 - target) ** 2 + (p2 - target) ** 2
                + r_weight * (u1 ** 2 + u2 ** 2))

    # condensed quadratic form of the same cost
    g1 = np.array([b1, 0.0])
    g2 = np.array([a1 * b1, b1])
    P = 2.0 * (np.outer(g1, g1) + np.outer(g2, g2) + r_weight * np.eye(2))
    q = 2.0 * ((a1 * p0 - target) * g1 + (a1 * a1 * p0 - target) * g2)
    A = np.eye(2)
    l, u = -np.ones(2), np.ones(2)

    res = solve_qp(P, q, A, l, u)
    assert res.status == "optimal"

    grid = np.arange(-1.0, 1.0 + 1e-12, 1e-3)
    best = None
    for u1 in grid:
        c_vec = cost(u1, grid)
        j = int(np.argmin(c_vec))
        if best is None or c_vec[j] < best[0]:
            best = (float(c_vec[j]), u1, float(grid[j]))
    assert abs(res.z[0] - best[1]) <= 2e-3
    assert abs(res.z[1] - best[2]) <= 2e-3
    assert cost(res.z[0], res.z[1]) <= best[0] + 1e-9


def test_kkt_residuals_certify_optimal_solutions():
    rng = np.random.default_rng(7)
    for _ in range(10):
        P, q, A, l, u = random_feasible_qp(rng, n=6, m=8)
        res = solve_qp(P, q, A, l, u)
        assert res.status == "optimal"
        assert max(res.kkt.values()) <= 1e-6
        # recompute independently
        again = kkt_residuals(P, q, A, l, u, np.zeros(8, bool), 1e4,
                              res.z, res.y)
        assert max(again.values()) <= 1e-6


def test_equality_rows_hold_tightly():
    rng = np.random.default_rng(17)
    P, q, A, l, u = random_feasible_qp(rng, n=5, m=6)
    target = 0.5 * (l[2] + u[2])       # inside the slab, so still feasible
    l[2] = u[2] = target
    res = solve_qp(P, q, A, l, u)
    assert res.status == "optimal"
    assert abs(A[2] @ res.z - target) <= 1e-8


def test_deterministic_and_warm_start_consistent():
    rng = np.random.default_rng(5)
    P, q, A, l, u = random_feasible_qp(rng, n=6, m=9)
    first = solve_qp(P, q, A, l, u)
    second = solve_qp(P, q, A, l, u)
    assert np.array_equal(first.z, second.z)

    solver = QpSolver(P, A, l, u, q=q)
    cold = solver.solve()
    warm = solver.solve()          # reuses the previous solution
    assert warm.iterations <= cold.iterations
    assert np.max(np.abs(warm.z - cold.z)) <= 1e-8


def test_soft_rows_yield_exact_penalty_solution():
    # a soft row forced into violation must settle at the penalty balance
    # point; with a huge penalty it behaves like the hard constraint
    P = np.eye(1) * 2.0
    q = np.array([-2.0 * 5.0])     # pulls z toward 5
    A = np.eye(1)
    l, u = np.array([-1.0]), np.array([1.0])
    soft = np.array([True])
    mu_small = 1.0                 # weaker than the pull, row gets violated
    res = solve_qp(P, q, A, l, u, soft=soft, penalty=mu_small)
    # minimise (z-5)^2 + 1 * (z-1) for z > 1: z* = 5 - 0.5/1... balance at
    # gradient 2(z-5) + 1 = 0 -> z = 4.5
    assert res.z[0] == pytest.approx(4.5, abs=1e-6)

    res_hard = solve_qp(P, q, A, l, u)
    res_big = solve_qp(P, q, A, l, u, soft=soft, penalty=1e6)
    assert res_big.z[0] == pytest.approx(res_hard.z[0], abs=1e-6)


def test_soft_penalty_objective_reported():
    P = np.eye(1) * 2.0
    q = np.array([-10.0])
    A = np.eye(1)
    l, u = np.array([-1.0]), np.array([1.0])
    soft = np.array([True])
    res = solve_qp(P, q, A, l, u, soft=soft, penalty=1.0)
    want = penalty_objective(P, q, A, l, u, soft, 1.0, res.z)
    assert res.objective == pytest.approx(want, rel=1e-12)


def test_infeasible_hard_problem_does_not_certify():
    # contradictory hard rows: z <= -1 and z >= 1
    P = np.eye(1)
    q = np.zeros(1)
    A = np.array([[1.0], [1.0]])
    l = np.array([-5.0, 1.0])
    u = np.array([-1.0, 5.0])
    res = solve_qp(P, q, A, l, u, max_iter=3000)
    assert res.status != "optimal"


def test_time_budget_and_cancel_stop_early():
    import threading
    rng = np.random.default_rng(23)
    P, q, A, l, u = random_feasible_qp(rng, n=40, m=60)
    solver = QpSolver(P, A, l, u, q=q)
    res = solver.solve(time_budget=0.0)
    assert res.status in ("time-limited", "optimal")

    solver2 = QpSolver(P, A, l, u, q=q)
    flag = threading.Event()
    flag.set()
    res2 = solver2.solve(cancel=flag)
    assert res2.status in ("cancelled", "optimal")
    # the anytime iterate is still finite and usable
    assert np.all(np.isfinite(res2.z))


def test_max_iter_cap_reports_honestly():
    rng = np.random.default_rng(29)
    P, q, A, l, u = random_feasible_qp(rng, n=12, m=18)
    res = solve_qp(P, q, A, l, u, max_iter=2)
    assert res.status in ("max_iter", "optimal")
    if res.status == "max_iter":
        assert res.iterations <= 3 * 2   # staged restarts may re-enter


def test_dump_load_roundtrip(tmp_path):
    rng = np.random.default_rng(31)
    P, q, A, l, u = random_feasible_qp(rng, n=5, m=7)
    soft = np.zeros(7, bool)
    soft[4] = True
    path = tmp_path / "problem.txt"
    dump_problem(path, P, q, A, l, u, soft=soft, penalty=123.5)
    data = load_problem(path)
    assert np.array_equal(data["P"], P)
    assert np.array_equal(data["q"], q)
    assert np.array_equal(data["A"], A)
    assert np.array_equal(data["l"], l)
    assert np.array_equal(data["u"], u)
    assert np.array_equal(data["soft"], soft)
    assert data["penalty"] == 123.5
    # the reloaded problem solves to the same point
    res = solve_qp(P, q, A, l, u, soft=soft)
    res2 = solve_qp(data["P"], data["q"], data["A"], data["l"], data["u"],
                    soft=data["soft"])
    assert np.array_equal(res.z, res2.z)


def test_updating_bounds_keeps_factorisation():
    rng = np.random.default_rng(37)
    P, q, A, l, u = random_feasible_qp(rng, n=6, m=8)
    solver = QpSolver(P, A, l, u, q=q)
    first = solver.solve()
    solver.update(q=q * 0.5, l=l - 0.1, u=u + 0.1)
    second = solver.solve()
    assert second.status == "optimal"
    check = solve_qp(P, q * 0.5, A, l - 0.1, u + 0.1)
    assert np.max(np.abs(second.z - check.z)) <= 1e-7
