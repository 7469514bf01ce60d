"""Cloth dynamics: nonlinear simulation model and linear control model.

The nonlinear model is the classic mass-spring-damper cloth: L2-norm springs
along structural edges, linear dampers on relative velocity, gravity, plain
explicit Euler (position advances with the old velocity), plus an optional
10% max-elongation clamp that keeps it from going super-elastic.

The linear control model replaces each spring by three independent per-axis
springs around signed rest offsets, which makes the dynamics LTI per axis:

    x_{k+1} = A x_k + B u_k + f_ct,    y_k = C x_k

with x = [positions (3N); velocities (3N)], u the absolute positions of the
two grasped upper corners [right; left], and y the two lower corners.
Gravity sag of the vertical per-axis springs is compensated by shortening
their rest length by delta_l0z.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import GRAVITY, Mesh, MeshState, _unchecked_state, corner_vector


class SingularDirectionError(ValueError):
    """Two connected nodes coincide; the spring direction is undefined."""


class NoEquilibriumError(RuntimeError):
    """The linear fixed-point solve did not converge."""


class DegenerateFrameError(ValueError):
    """The grasped corners are too close or their axis is near vertical."""


@dataclass
class ClothParams:
    """Learnable parameters of the linear cloth model.

    k : per-axis spring constants (kx, ky, kz) in N/m
    b : per-axis damping (bx, by, bz) in N s/m
    delta_l0z : vertical rest-length shortening in m (gravity compensation)
    """

    k: np.ndarray
    b: np.ndarray
    delta_l0z: float = 0.0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float).reshape(3)
        self.b = np.asarray(self.b, dtype=float).reshape(3)
        self.delta_l0z = float(self.delta_l0z)
        if not np.all(self.k > 0.0):
            raise ValueError(f"spring constants must be positive, got {self.k}")
        if not np.all(self.b >= 0.0):
            raise ValueError(f"damping must be non-negative, got {self.b}")
        if self.delta_l0z < 0.0:
            raise ValueError(f"delta_l0z must be non-negative, got {self.delta_l0z}")

    def isotropic(self) -> tuple[float, float]:
        """Single (K, b) pair used by the nonlinear simulation model."""
        k, b = self.k, self.b
        return (k[0] + k[1] + k[2]) / 3.0, (b[0] + b[1] + b[2]) / 3.0

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.k, self.b, [self.delta_l0z]])

    @staticmethod
    def from_vector(v) -> "ClothParams":
        v = np.asarray(v, dtype=float).reshape(7)
        return ClothParams(k=v[:3], b=v[3:6], delta_l0z=v[6])


def scale_params_for_resolution(params: ClothParams, n_from: int, n_to: int) -> ClothParams:
    """Rescale per-spring constants so sheet-level stiffness is unchanged.

    A side of the sheet is n parallel columns of (n - 1) series springs, so
    per-spring k and b scale by (n_to - 1)/n_to * n_from/(n_from - 1).  The
    rest shortening tracks the static column load, which shrinks with the
    spacing, so it scales by (n_from - 1)/(n_to - 1); that also keeps it
    below the finer mesh's rest length.
    """
    ratio = (n_to - 1) / n_to * n_from / (n_from - 1)
    return ClothParams(k=params.k * ratio, b=params.b * ratio,
                       delta_l0z=params.delta_l0z * (n_from - 1) / (n_to - 1))


def delta_l0z_static(mesh: Mesh, k_z: float) -> float:
    """Static column-load initialiser for the vertical rest shortening.

    In a hanging column the spring below row r carries the weight of the
    nodes under it; the mean tension over the n - 1 springs is m g n / 2.
    Shortening every vertical rest length by that tension / k_z makes the
    column span its rest height exactly (REPS refines the value later).
    """
    return mesh.node_mass * GRAVITY * mesh.n / (2.0 * k_z)


# ---------------------------------------------------------------------------
# Nonlinear simulation model
# ---------------------------------------------------------------------------

_INCIDENCE: dict = {}


def _incidence(mesh: Mesh):
    """Sparse (N, E) node-edge incidence (+1 at edge tail, -1 at head)."""
    inc = _INCIDENCE.get(mesh.n)
    if inc is None:
        e = mesh.edges.shape[0]
        cols = np.tile(np.arange(e), 2)
        rows = np.concatenate([mesh.edges[:, 0], mesh.edges[:, 1]])
        vals = np.concatenate([np.ones(e), -np.ones(e)])
        inc = sparse.csr_matrix((vals, (rows, cols)), shape=(mesh.num_nodes, e))
        _INCIDENCE[mesh.n] = inc
    return inc


def nonlinear_forces(mesh: Mesh, params: ClothParams, state: MeshState) -> np.ndarray:
    """Per-node forces (N, 3): L2 springs + linear dampers + gravity.

    Uses the isotropic (K, b) reduction of params. Raises
    SingularDirectionError if two connected nodes coincide.
    """
    big_k, b = params.isotropic()
    p, v = state.positions, state.velocities
    a_idx, b_idx = mesh.edges[:, 0], mesh.edges[:, 1]

    d = p[a_idx] - p[b_idx]
    length = np.sqrt(np.einsum("ij,ij->i", d, d))
    if np.any(length < 1e-12):
        bad = int(np.argmin(length))
        raise SingularDirectionError(
            f"nodes {mesh.edges[bad]} coincide; spring direction undefined")
    # spring force on node a: -K (|d| - l0) * d/|d|; reaction on node b
    coef = -big_k * (length - mesh.spacing) / length
    f_edge = coef[:, None] * d - b * (v[a_idx] - v[b_idx])

    forces = _incidence(mesh) @ f_edge
    forces[:, 2] -= mesh.node_mass * GRAVITY
    return forces


_CLAMP_WEIGHTS: dict = {}


def _clamp_weights(mesh: Mesh) -> np.ndarray:
    """Per-edge endpoint weights (E, 2) for the projection sweeps.

    A free-free edge splits its correction evenly; an edge into a grasped
    node puts the whole correction on the free endpoint. Cached per mesh
    size (topology depends only on n).
    """
    w = _CLAMP_WEIGHTS.get(mesh.n)
    if w is None:
        grasped = np.isin(mesh.edges, mesh.grasped_indices)
        w = np.where(grasped, 0.0, np.where(grasped[:, ::-1], 1.0, 0.5))
        _CLAMP_WEIGHTS[mesh.n] = w
    return w


def _clamp_elongation(mesh: Mesh, positions: np.ndarray, max_strain: float,
                      sweeps: int = 4, relax: float = 0.6) -> None:
    """Damped-Jacobi projection capping edge elongation at max_strain.

    Each sweep computes every edge's violation at once and scatters
    under-relaxed corrections to the endpoints; grasped nodes never move.
    The relaxation factor keeps corrections from neighbouring edges from
    over-shooting each other, so repeated steps hold a steady hang instead
    of sloshing around the constraint surface.
    """
    limit = (1.0 + max_strain) * mesh.spacing
    w = _clamp_weights(mesh)
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    for _ in range(sweeps):
        d = positions[a] - positions[b]
        length = np.sqrt(np.einsum("ij,ij->i", d, d))
        excess = np.maximum(length - limit, 0.0) / np.maximum(length, 1e-12)
        if not excess.any():
            break
        corr = d * (relax * excess)[:, None]
        np.subtract.at(positions, a, w[:, 0:1] * corr)
        np.add.at(positions, b, w[:, 1:2] * corr)


def step_nonlinear(mesh: Mesh, params: ClothParams, state: MeshState,
                   u: np.ndarray, dt: float,
                   max_strain: float | None = None,
                   external: np.ndarray | None = None) -> MeshState:
    """One explicit-Euler step; grasped corners track u kinematically.

    u is the 6-vector [right; left] of absolute grasped-corner positions.
    Free nodes: p <- p + dt v (old v), v <- v + dt F/m. Grasped nodes:
    p <- u, v <- (u - p_prev)/dt. With max_strain set, edge elongation is
    clamped afterwards; a node the clamp moved gets its velocity re-derived
    from the projected displacement (inelastic constraint contact), so
    nodes resting on the clamp neither accumulate speed nor bounce.
    external, if given, adds per-node forces (N, 3) for this step (pushes,
    presses); it has no effect on the kinematic grasped corners.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    u = np.asarray(u, dtype=float).reshape(6)
    forces = nonlinear_forces(mesh, params, state)
    if external is not None:
        forces = forces + external

    p_new = state.positions + dt * state.velocities
    v_new = state.velocities + (dt / mesh.node_mass) * forces
    gi = mesh.grasped_indices
    for slot, node in enumerate(gi):
        target = u[3 * slot:3 * slot + 3]
        v_new[node] = (target - state.positions[node]) / dt
        p_new[node] = target
    if max_strain is not None:
        p_pre = p_new.copy()
        _clamp_elongation(mesh, p_new, max_strain)
        delta = p_new - p_pre
        moved = np.einsum("ij,ij->i", delta, delta) > 0.0
        if moved.any():
            v_new[moved] = (p_new[moved] - state.positions[moved]) / dt
    return _unchecked_state(p_new, v_new, state.t + dt)


# ---------------------------------------------------------------------------
# Linear control model
# ---------------------------------------------------------------------------

@dataclass
class LinearClothModel:
    """Discrete LTI cloth model x+ = A x + B u + f_ct, y = C x."""

    A: np.ndarray       # (6N, 6N)
    B: np.ndarray       # (6N, 6)
    C: np.ndarray       # (6, 6N)
    f_ct: np.ndarray    # (6N,)
    ts: float           # s
    mesh: Mesh
    params: ClothParams

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]


def pos_index(node: int, axis: int) -> int:
    return 3 * node + axis


def vel_index(num_nodes: int, node: int, axis: int) -> int:
    return 3 * num_nodes + 3 * node + axis


def state_to_vector(state: MeshState) -> np.ndarray:
    return np.concatenate([state.positions.ravel(), state.velocities.ravel()])


def vector_to_state(x: np.ndarray, t: float = 0.0) -> MeshState:
    x = np.asarray(x, dtype=float)
    half = x.size // 2
    return MeshState(x[:half].reshape(-1, 3), x[half:].reshape(-1, 3), t)


def linear_rest_offsets(mesh: Mesh, delta_l0z: float) -> np.ndarray:
    """(E, 3) signed per-axis rest offsets with vertical shortening applied."""
    off = mesh.rest_offsets.copy()
    vertical = np.abs(off[:, 2]) > 1e-12
    off[vertical, 2] -= np.sign(off[vertical, 2]) * delta_l0z
    return off


def assemble_linear_model(mesh: Mesh, params: ClothParams, ts: float) -> LinearClothModel:
    """Build the per-axis linear state-space model at sample time ts.

    Free node, axis a:  m dv = -k_a sum_j (p_i - p_j - l0_ij) - b_a sum_j (v_i - v_j)
    plus gravity on z, discretised by plain explicit Euler. Grasped nodes are
    kinematic: p+ = u, v+ = (u - p)/ts, so B only touches their rows.
    """
    if ts <= 0.0:
        raise ValueError(f"ts must be positive, got {ts}")
    if params.delta_l0z >= mesh.spacing:
        raise ValueError(
            f"delta_l0z={params.delta_l0z} must stay below the vertical rest "
            f"length {mesh.spacing}")

    num = mesh.num_nodes
    dim = 6 * num
    m = mesh.node_mass
    a_mat = np.zeros((dim, dim))
    b_mat = np.zeros((dim, 6))
    f_ct = np.zeros(dim)
    offsets = linear_rest_offsets(mesh, params.delta_l0z)

    grasped = {node: slot for slot, node in enumerate(mesh.grasped_indices)}
    for i in range(num):
        for ax in range(3):
            pi, vi = pos_index(i, ax), vel_index(num, i, ax)
            if i in grasped:
                slot = grasped[i]
                b_mat[pi, 3 * slot + ax] = 1.0
                a_mat[vi, pi] = -1.0 / ts
                b_mat[vi, 3 * slot + ax] = 1.0 / ts
            else:
                a_mat[pi, pi] = 1.0
                a_mat[pi, vi] = ts
                a_mat[vi, vi] = 1.0
                if ax == 2:
                    f_ct[vi] -= ts * GRAVITY

    # spring/damper coupling acts on free rows only (grasped rows are kinematic)
    free = [i for i in range(num) if i not in grasped]
    free_set = set(free)
    for (a, b), off in zip(mesh.edges, offsets):
        for i, j, sgn in ((a, b, 1.0), (b, a, -1.0)):
            if i not in free_set:
                continue
            for ax in range(3):
                vi = vel_index(num, i, ax)
                coef = ts / m
                a_mat[vi, pos_index(i, ax)] -= coef * params.k[ax]
                a_mat[vi, pos_index(j, ax)] += coef * params.k[ax]
                f_ct[vi] += coef * params.k[ax] * sgn * off[ax]
                a_mat[vi, vel_index(num, i, ax)] -= coef * params.b[ax]
                a_mat[vi, vel_index(num, j, ax)] += coef * params.b[ax]

    c_mat = np.zeros((6, dim))
    for slot, node in enumerate(mesh.output_indices):
        for ax in range(3):
            c_mat[3 * slot + ax, pos_index(node, ax)] = 1.0

    return LinearClothModel(A=a_mat, B=b_mat, C=c_mat, f_ct=f_ct, ts=ts,
                            mesh=mesh, params=params)


def step_linear(model: LinearClothModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return model.A @ x + model.B @ u + model.f_ct


def hanging_equilibrium(model: LinearClothModel, u: np.ndarray,
                        max_refine: int = 20, tol: float = 1e-9) -> MeshState:
    """Steady state of the linear model under constant u.

    Solves (I - A) x = B u + f_ct, polishes by iterative refinement against
    step_linear and raises NoEquilibriumError if the residual will not drop
    below tol * max(1, |x|).
    """
    u = np.asarray(u, dtype=float).reshape(6)
    eye = np.eye(model.state_dim)
    rhs = model.B @ u + model.f_ct
    try:
        x = np.linalg.solve(eye - model.A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NoEquilibriumError(f"fixed-point system is singular: {exc}") from exc
    scale = max(1.0, float(np.max(np.abs(x))))
    for _ in range(max_refine):
        resid = step_linear(model, x, u) - x
        if np.max(np.abs(resid)) <= tol * scale:
            return vector_to_state(x)
        x = x + np.linalg.solve(eye - model.A, resid)
    raise NoEquilibriumError(
        f"fixed point did not converge below {tol * scale} after {max_refine} refinements")


# ---------------------------------------------------------------------------
# Energy diagnostics
# ---------------------------------------------------------------------------

def mechanical_energy(mesh: Mesh, params: ClothParams, state: MeshState) -> float:
    """Energy of the per-axis linear model: kinetic + springs + gravity (J)."""
    m = mesh.node_mass
    ke = 0.5 * m * float(np.sum(state.velocities ** 2))
    d = state.positions[mesh.edges[:, 0]] - state.positions[mesh.edges[:, 1]]
    stretch = d - linear_rest_offsets(mesh, params.delta_l0z)
    pe = 0.5 * float(np.sum(stretch ** 2 @ params.k))
    pg = m * GRAVITY * float(np.sum(state.positions[:, 2]))
    return ke + pe + pg


def nonlinear_mechanical_energy(mesh: Mesh, params: ClothParams,
                                state: MeshState) -> float:
    """Energy of the L2-spring simulation model (J), isotropic parameters."""
    big_k, _ = params.isotropic()
    m = mesh.node_mass
    ke = 0.5 * m * float(np.sum(state.velocities ** 2))
    d = state.positions[mesh.edges[:, 0]] - state.positions[mesh.edges[:, 1]]
    lengths = np.linalg.norm(d, axis=1)
    pe = 0.5 * big_k * float(np.sum((lengths - mesh.spacing) ** 2))
    pg = m * GRAVITY * float(np.sum(state.positions[:, 2]))
    return ke + pe + pg


def stability_margin(model: LinearClothModel) -> float:
    """1 - spectral radius of the free-node block of A.

    Positive means the autonomous cloth dynamics contract at this step size;
    negative means explicit Euler diverges for these parameters. A one-step
    decay certificate on the physical energy cannot exist here: the first
    step from a pure displacement always converts spring force into kinetic
    energy before any position moves, so the spectral radius is the honest
    stability test.
    """
    mesh = model.mesh
    num = mesh.num_nodes
    free = np.array([i for i in range(num) if i not in mesh.grasped_indices])
    idx = np.concatenate([
        (3 * free[:, None] + np.arange(3)).ravel(),
        (3 * num + 3 * free[:, None] + np.arange(3)).ravel(),
    ])
    a_ff = model.A[np.ix_(idx, idx)]
    return 1.0 - float(np.max(np.abs(np.linalg.eigvals(a_ff))))


_MODE_LIMIT: dict = {}


def laplacian_mode_limit(mesh: Mesh) -> float:
    """Largest eigenvalue of the free-node neighbor Laplacian.

    Every axis block of A couples nodes through the same unweighted grid
    Laplacian (grasped rows removed), so this single number bounds the
    stiffest mode of all three axes.
    """
    mu = _MODE_LIMIT.get(mesh.n)
    if mu is None:
        free = np.array([i for i in range(mesh.num_nodes)
                         if i not in mesh.grasped_indices])
        pos = {node: slot for slot, node in enumerate(free)}
        lap = np.zeros((len(free), len(free)))
        for a, b in mesh.edges:
            ia, ib = pos.get(a), pos.get(b)
            if ia is not None:
                lap[ia, ia] += 1.0
            if ib is not None:
                lap[ib, ib] += 1.0
            if ia is not None and ib is not None:
                lap[ia, ib] -= 1.0
                lap[ib, ia] -= 1.0
        mu = float(np.linalg.eigvalsh(lap)[-1])
        _MODE_LIMIT[mesh.n] = mu
    return mu


def stability_window(mesh: Mesh, ts: float, k: float) -> tuple[float, float]:
    """Damping interval (b_lo, b_hi) that keeps one axis stable, or (0, 0).

    Diagonalizing an axis block on the Laplacian modes gives a 2x2 map per
    mode mu: position row (1, ts), velocity row (-ts k mu / m, 1 - ts b mu / m).
    Its eigenvalues sit inside the unit circle for every mode exactly when
        k ts < b < k ts / 2 + 2 m / (ts mu_max),
    the lower bound from det < 1 (mu cancels), the upper from the real-root
    boundary at mu_max.  The interval is empty once k > 4 m / (ts^2 mu_max):
    past that stiffness no damping value rescues explicit Euler.
    """
    mu_max = laplacian_mode_limit(mesh)
    b_lo = k * ts
    b_hi = k * ts / 2.0 + 2.0 * mesh.node_mass / (ts * mu_max)
    if b_hi <= b_lo:
        return (0.0, 0.0)
    return (b_lo, b_hi)


def stabilized_params(mesh: Mesh, params: ClothParams, ts: float) -> ClothParams:
    """Nearest parameter set sitting inside the explicit-Euler stable region.

    Per axis, stiffness above the hard cap 4 m / (ts^2 mu_max) is pulled to
    80% of the cap and damping is placed at the middle of its admissible
    window.  The rest shortening is refreshed from the (possibly softened)
    vertical stiffness and kept below the rest length.  Parameters already
    stable are returned unchanged.
    """
    try:
        if stability_margin(assemble_linear_model(mesh, params, ts)) > 0.0:
            return params
    except ValueError:
        pass
    mu_max = laplacian_mode_limit(mesh)
    k_cap = 0.8 * 4.0 * mesh.node_mass / (ts ** 2 * mu_max)
    k_new = np.minimum(np.asarray(params.k, dtype=float), k_cap)
    b_new = np.empty(3)
    for a in range(3):
        lo, hi = stability_window(mesh, ts, k_new[a])
        b_new[a] = 0.5 * (lo + hi)
    delta = min(delta_l0z_static(mesh, k_new[2]), 0.9 * mesh.spacing)
    return ClothParams(k=k_new, b=b_new, delta_l0z=delta)

@dataclass(frozen=True)
class LocalFrame:
    """Cloth-aligned orthonormal frame (columns are world-frame unit vectors)."""

    x_axis: np.ndarray  # along u_r - u_l
    y_axis: np.ndarray  # horizontal, z x X
    z_axis: np.ndarray  # X x Y
    origin: np.ndarray  # midpoint of the grasped corners

    def rotation(self) -> np.ndarray:
        return np.column_stack([self.x_axis, self.y_axis, self.z_axis])


@dataclass(frozen=True)
class TcpPose:
    position: np.ndarray   # (3,) m
    rotation: np.ndarray   # (3, 3) world_R_tcp


_VERTICAL_COS = np.cos(np.deg2rad(1.0))


def compute_local_frame(u_r: np.ndarray, u_l: np.ndarray) -> LocalFrame:
    """Frame spanned by the grasped corners: X along r-l, Y horizontal.

    Raises DegenerateFrameError when the corners are closer than 1e-6 m or
    the corner axis is within 1 degree of vertical.
    """
    u_r = np.asarray(u_r, dtype=float).reshape(3)
    u_l = np.asarray(u_l, dtype=float).reshape(3)
    d = u_r - u_l
    norm = float(np.linalg.norm(d))
    if norm <= 1e-6:
        raise DegenerateFrameError(f"grasped corners coincide (|d|={norm:.2e})")
    x_axis = d / norm
    if abs(x_axis[2]) > _VERTICAL_COS:
        raise DegenerateFrameError("corner axis within 1 degree of vertical")
    y = np.cross([0.0, 0.0, 1.0], x_axis)
    y_axis = y / np.linalg.norm(y)
    z_axis = np.cross(x_axis, y_axis)
    return LocalFrame(x_axis=x_axis, y_axis=y_axis, z_axis=z_axis,
                      origin=0.5 * (u_r + u_l))


def tcp_pose(u_abs: np.ndarray, delta_h: float = 0.09) -> TcpPose:
    """Tool-centre pose for the rigid bar grasping both corners.

    Position is the corner midpoint raised by delta_h along the local Z;
    orientation columns are [Y_L, X_L, -Z_L] (tool x along the bar normal,
    tool z pointing down at the cloth).
    """
    u_abs = np.asarray(u_abs, dtype=float).reshape(6)
    frame = compute_local_frame(u_abs[:3], u_abs[3:])
    position = frame.origin + frame.rotation() @ np.array([0.0, 0.0, delta_h])
    rotation = np.column_stack([frame.y_axis, frame.x_axis, -frame.z_axis])
    return TcpPose(position=position, rotation=rotation)


def lower_corner_outputs(model: LinearClothModel, x: np.ndarray) -> np.ndarray:
    return model.C @ x


def grasped_positions(mesh: Mesh, state: MeshState) -> np.ndarray:
    return corner_vector(mesh, state.positions, "upper")
