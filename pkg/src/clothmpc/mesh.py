"""Square cloth meshes and their states.

Node ordering is row-major from the bottom-left: index = row * n + col with
row 0 at the bottom and col 0 on the left (x grows with col, z with row).
Every 6-vector that pairs the two corners (controls, outputs, references)
stacks the right corner first: [rx, ry, rz, lx, ly, lz].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81  # m/s^2, +z is up


@dataclass(frozen=True)
class Mesh:
    """Topology and rest geometry of an n x n cloth mesh.

    Attributes
    ----------
    n : nodes per side (>= 2)
    side_length : cloth edge length in m
    node_mass : mass of one node in kg (total mass / n^2)
    spacing : rest distance between 4-neighbours in m
    edges : (E, 2) int array, each row (a, b) with a < b
    rest_offsets : (E, 3) rest displacement rest[a] - rest[b] in m
    rest_positions : (N, 3) rest grid, centred in x, bottom row at z = 0
    neighbors : per-node int arrays (structural 4-neighbourhood)
    grasped_indices : (upper-right, upper-left) node indices
    output_indices : (lower-right, lower-left) node indices
    """

    n: int
    side_length: float
    node_mass: float
    spacing: float
    edges: np.ndarray
    rest_offsets: np.ndarray
    rest_positions: np.ndarray
    neighbors: tuple = field(repr=False, default=())
    grasped_indices: tuple = (0, 0)
    output_indices: tuple = (0, 0)

    @property
    def num_nodes(self) -> int:
        return self.n * self.n

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])


def build_mesh(n: int, side_length: float, total_mass: float) -> Mesh:
    """Build a square n x n mesh with structural (4-neighbour) springs.

    Raises ValueError for n < 2 or non-positive side length / mass.
    """
    if n < 2:
        raise ValueError(f"mesh needs at least 2 nodes per side, got n={n}")
    if side_length <= 0.0:
        raise ValueError(f"side_length must be positive, got {side_length}")
    if total_mass <= 0.0:
        raise ValueError(f"total_mass must be positive, got {total_mass}")

    h = side_length / (n - 1)
    rows, cols = np.divmod(np.arange(n * n), n)
    rest = np.column_stack([
        cols * h - side_length / 2.0,   # x, centred
        np.zeros(n * n),                # y
        rows * h,                       # z, bottom row at 0
    ])

    edges = []
    for i in range(n * n):
        r, c = divmod(i, n)
        if c + 1 < n:
            edges.append((i, i + 1))        # horizontal, right neighbour
        if r + 1 < n:
            edges.append((i, i + n))        # vertical, upper neighbour
    edges = np.asarray(edges, dtype=np.intp)
    rest_offsets = rest[edges[:, 0]] - rest[edges[:, 1]]

    neighbors = [[] for _ in range(n * n)]
    for a, b in edges:
        neighbors[a].append(b)
        neighbors[b].append(a)
    neighbors = tuple(np.asarray(v, dtype=np.intp) for v in neighbors)

    return Mesh(
        n=n,
        side_length=float(side_length),
        node_mass=float(total_mass) / (n * n),
        spacing=h,
        edges=edges,
        rest_offsets=rest_offsets,
        rest_positions=rest,
        neighbors=neighbors,
        grasped_indices=(n * n - 1, n * (n - 1)),   # upper-right, upper-left
        output_indices=(n - 1, 0),                  # lower-right, lower-left
    )


@dataclass
class MeshState:
    """Positions and velocities of every node at time t."""

    positions: np.ndarray   # (N, 3) m
    velocities: np.ndarray  # (N, 3) m/s
    t: float = 0.0          # s

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape or self.positions.ndim != 2 \
                or self.positions.shape[1] != 3:
            raise ValueError("positions and velocities must both be (N, 3)")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise ValueError("state contains non-finite values")

    def copy(self) -> "MeshState":
        return MeshState(self.positions.copy(), self.velocities.copy(), self.t)


def _unchecked_state(positions: np.ndarray, velocities: np.ndarray,
                     t: float) -> MeshState:
    """MeshState without validation, for inner simulation loops only."""
    state = object.__new__(MeshState)
    state.positions = positions
    state.velocities = velocities
    state.t = t
    return state


def initial_state(mesh: Mesh, offset=(0.0, 0.0, 0.0)) -> MeshState:
    """Flat hanging grid at rest (rest geometry shifted by offset)."""
    p = mesh.rest_positions + np.asarray(offset, dtype=float)
    return MeshState(p, np.zeros_like(p), 0.0)


def corner_vector(mesh: Mesh, positions: np.ndarray, which: str) -> np.ndarray:
    """6-vector [right; left] of grasped ('upper') or output ('lower') corners."""
    idx = mesh.grasped_indices if which == "upper" else mesh.output_indices
    return np.concatenate([positions[idx[0]], positions[idx[1]]])


def submesh_indices(fine_n: int, coarse_n: int) -> np.ndarray:
    """Fine-mesh node indices that form the coarse_n x coarse_n submesh.

    Requires (fine_n - 1) divisible by (coarse_n - 1); corners map to corners.
    """
    if coarse_n < 2 or fine_n < coarse_n:
        raise ValueError(f"invalid submesh sizes fine={fine_n} coarse={coarse_n}")
    if (fine_n - 1) % (coarse_n - 1) != 0:
        raise ValueError(
            f"({fine_n} - 1) nodes per side not divisible into ({coarse_n} - 1) intervals")
    p = (fine_n - 1) // (coarse_n - 1)
    rows = np.arange(coarse_n) * p
    return (rows[:, None] * fine_n + rows[None, :]).ravel()


def extract_submesh(mesh: Mesh, state: MeshState, coarse_n: int,
                    total_mass: float | None = None):
    """Sample a coarse mesh and its state out of a finer one.

    The coarse nodes coincide with fine nodes (no interpolation); the default
    total mass keeps the full cloth mass so node masses rescale with n^2.
    """
    idx = submesh_indices(mesh.n, coarse_n)
    if total_mass is None:
        total_mass = mesh.node_mass * mesh.num_nodes
    coarse = build_mesh(coarse_n, mesh.side_length, total_mass)
    return coarse, MeshState(state.positions[idx], state.velocities[idx], state.t)


def save_state(path, state: MeshState) -> None:
    """Write one `px py pz vx vy vz` row per node (17 significant digits)."""
    with open(path, "w") as f:
        f.write(f"# t {state.t:.17g}\n")
        for p, v in zip(state.positions, state.velocities):
            f.write(" ".join(f"{x:.17g}" for x in (*p, *v)) + "\n")


def load_state(path) -> MeshState:
    t = 0.0
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "t":
                    t = float(parts[1])
                continue
            vals = [float(tok) for tok in line.split()]
            if len(vals) != 6:
                raise ValueError(f"state row needs 6 values, got {len(vals)}")
            rows.append(vals)
    arr = np.asarray(rows, dtype=float)
    return MeshState(arr[:, :3], arr[:, 3:], t)
