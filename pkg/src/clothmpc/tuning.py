"""Controller structure comparison and weight tuning via episodic search.

The controller leaves several structural choices open: penalizing input
increments or absolute inputs, adapting the output weights to the motion
direction or keeping them constant, and three shapes for the weight
matrices.  Crossed with two reward functions this gives a 24-cell study
grid.  Each cell runs an episodic search over its weight values in log
space and reports the best closed-loop tracking error it found, so cells
are compared at their own best tuning rather than at a shared default.

A separate one-dimensional sweep over the r/q ratio (scalar weights,
increment penalty, constant output weight) locates the tracking optimum
and the ratio below which the loop falls apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .harness import run_closed_loop
from .mpc import MpcConfig
from .reps import GaussianPolicy, RepsConfig, run_reps

PENALTY_KINDS = ("slew", "absolute")          # du vs u in the cost
Q_MODES = ("constant", "adaptive")
WEIGHT_STRUCTURES = ("scalar", "axis-q", "proportional")
REWARD_KINDS = ("kpi1", "kpi1+tov")

DEFAULT_RATIOS = (1.0, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005)
FLOOR_REWARD = -1.0     # reward for aborted runs; far below any finished one
DEFAULT_TOV_WEIGHT = 0.05


def default_weights() -> tuple[float, float]:
    """Scalar (q, r) used when the study is skipped."""
    return 1.0, 0.2


@dataclass(frozen=True)
class StructureCell:
    """One option combination of the study grid."""

    structure: str          # weight-matrix shape
    penalty: str            # "slew" or "absolute"
    q_mode: str             # "constant" or "adaptive"
    reward: str             # "kpi1" or "kpi1+tov"

    def __post_init__(self):
        if self.structure not in WEIGHT_STRUCTURES:
            raise ValueError(f"unknown weight structure {self.structure!r}")
        if self.penalty not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.penalty!r}")
        if self.q_mode not in Q_MODES:
            raise ValueError(f"unknown q mode {self.q_mode!r}")
        if self.reward not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.reward!r}")

    def label(self) -> str:
        return f"{self.structure}/{self.penalty}/{self.q_mode}/{self.reward}"


def full_grid() -> list[StructureCell]:
    """All 24 option combinations, grouped by structure then reward."""
    return [StructureCell(s, p, q, rw)
            for s in WEIGHT_STRUCTURES
            for rw in REWARD_KINDS
            for q in Q_MODES
            for p in PENALTY_KINDS]


def theta_dim(structure: str) -> int:
    return {"scalar": 2, "axis-q": 4, "proportional": 4}[structure]


def weights_from_theta(structure: str, theta) -> tuple[np.ndarray, np.ndarray]:
    """Map a log-space parameter vector to 6-vector (q, r) diagonals.

    scalar        theta = (log q, log r)
    axis-q        theta = (log qx, log qy, log qz, log r)
    proportional  theta = (log qx, log qy, log qz, log k), r = q / k
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != theta_dim(structure):
        raise ValueError(f"{structure} wants {theta_dim(structure)} "
                         f"parameters, got {theta.shape[0]}")
    vals = np.exp(theta)
    if structure == "scalar":
        q_axis = np.full(3, vals[0])
        r_axis = np.full(3, vals[1])
    elif structure == "axis-q":
        q_axis = vals[:3]
        r_axis = np.full(3, vals[3])
    else:
        q_axis = vals[:3]
        r_axis = q_axis / vals[3]
    return np.tile(q_axis, 2), np.tile(r_axis, 2)


def initial_tuning_policy(structure: str, q0: float = 1.0,
                          r0: float = 0.2) -> GaussianPolicy:
    """Log-space search prior centred on the default weights.

    The spread on the last coordinate (the r value, or the q/r proportion)
    is wide: the absolute-input cells only become competitive at much
    smaller r than the increment cells, and the prior has to reach there.
    """
    d = theta_dim(structure)
    mean = np.zeros(d)
    std = np.full(d, 0.5)
    if structure == "scalar":
        mean[:] = (np.log(q0), np.log(r0))
    elif structure == "axis-q":
        mean[:3] = np.log(q0)
        mean[3] = np.log(r0)
    else:
        mean[:3] = np.log(q0)
        mean[3] = np.log(q0 / r0)
    std[-1] = 1.2
    return GaussianPolicy(mean, np.diag(std ** 2))


def apply_weights(mpc: MpcConfig, cell: StructureCell, q, r) -> MpcConfig:
    """Rebuild the controller config for one cell's weight values."""
    return replace(mpc, q=np.asarray(q, float), r=np.asarray(r, float),
                   adaptive_q=(cell.q_mode == "adaptive"),
                   penalize_slew=(cell.penalty == "slew"))


@dataclass
class CellResult:
    """Best tuning found for one cell, with its closed-loop scores."""

    cell: StructureCell
    kpi1: float
    kpi2: float
    tov: float
    q: np.ndarray           # (6,) diagonal
    r: np.ndarray           # (6,)
    reward_value: float
    aborted: bool = False


@dataclass
class TuningReport:
    """All cell results plus the overall winner."""

    cells: list = field(default_factory=list)
    selected: CellResult | None = None

    def group(self, structure: str, reward: str) -> list:
        return [c for c in self.cells
                if c.cell.structure == structure and c.cell.reward == reward]

    def best_in_group(self, structure: str, reward: str) -> CellResult:
        rows = self.group(structure, reward)
        if not rows:
            raise KeyError(f"no cells for {structure}/{reward}")
        return min(rows, key=lambda c: c.kpi1)


def _as_runs(scenario, params) -> list:
    """Normalize single-or-list scenario/parameter arguments to pairs."""
    scenarios = list(scenario) if isinstance(scenario, (list, tuple)) \
        else [scenario]
    if not scenarios:
        raise ValueError("need at least one scenario")
    if isinstance(params, (list, tuple)):
        if len(params) != len(scenarios):
            raise ValueError(f"{len(params)} parameter sets for "
                             f"{len(scenarios)} scenarios")
        return list(zip(scenarios, params))
    return [(sc, params) for sc in scenarios]


def evaluate_weights(scenario, params_com, cell: StructureCell, theta,
                     seed: int, tov_weight: float = DEFAULT_TOV_WEIGHT) -> dict:
    """Score a cell's candidate weights over one scenario or a set.

    Scores average across the set; one aborted run floors the reward.
    """
    q, r = weights_from_theta(cell.structure, theta)
    kpi1s, kpi2s, tovs = [], [], []
    aborted = False
    for sc, params in _as_runs(scenario, params_com):
        run = replace(sc, mpc=apply_weights(sc.mpc, cell, q, r))
        log, rep = run_closed_loop(run, params, seed=seed)
        kpi1s.append(rep.kpi1)
        kpi2s.append(rep.kpi2)
        tovs.append(max(rep.kpi2 / sc.ts - 1.0, 0.0)
                    if np.isfinite(rep.kpi2) else 0.0)
        aborted = aborted or rep.aborted
    kpi1 = float(np.mean(kpi1s))
    kpi2 = float(np.mean(kpi2s))
    tov = float(np.mean(tovs))
    if aborted or not np.isfinite(kpi1):
        reward = FLOOR_REWARD
    else:
        reward = -kpi1
        if cell.reward == "kpi1+tov":
            reward -= tov_weight * tov
    return {"reward": reward, "kpi1": kpi1, "kpi2": kpi2,
            "tov": tov, "q": q, "r": r, "aborted": aborted}


def run_tuning_study(scenario, params_com, cells: list | None = None,
                     config: RepsConfig | None = None, seed: int = 0,
                     tov_weight: float = DEFAULT_TOV_WEIGHT) -> TuningReport:
    """Search each cell's weights and assemble the comparison table.

    `scenario` is one Scenario or a list scored together (matching
    `params_com` broadcast or listed alongside).  Every candidate runs with
    the same seed, so rewards differ only through the weights; the per-cell
    search uses its own deterministic sample stream and the whole study is
    reproducible from `seed`.
    """
    if cells is None:
        cells = full_grid()
    if not cells:
        raise ValueError("need at least one cell to study")
    if config is None:
        config = RepsConfig(samples=8, iterations=3)
    report = TuningReport()
    for index, cell in enumerate(cells):
        cache: dict[bytes, dict] = {}

        def reward_fn(samples: np.ndarray) -> np.ndarray:
            out = np.empty(len(samples))
            for i, theta in enumerate(samples):
                metrics = evaluate_weights(scenario, params_com, cell, theta,
                                           seed, tov_weight)
                cache[np.asarray(theta, float).tobytes()] = metrics
                out[i] = metrics["reward"]
            return out

        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        result = run_reps(reward_fn, initial_tuning_policy(cell.structure),
                          config, rng)
        best = cache[np.asarray(result.best_params, float).tobytes()]
        report.cells.append(CellResult(
            cell=cell, kpi1=best["kpi1"], kpi2=best["kpi2"], tov=best["tov"],
            q=best["q"], r=best["r"], reward_value=best["reward"],
            aborted=best["aborted"]))
    finished = [c for c in report.cells if not c.aborted]
    if finished:
        report.selected = min(finished, key=lambda c: c.kpi1)
    return report


@dataclass
class RatioRow:
    ratio: float
    kpi1: float
    kpi2: float
    aborted: bool
    destabilized: bool = False


@dataclass
class RatioSweep:
    """r/q ratio sweep at fixed structure (scalar, increment, constant q)."""

    rows: list = field(default_factory=list)
    baseline_ratio: float = 0.2
    destab_factor: float = 3.0

    @property
    def threshold(self) -> float | None:
        """Largest ratio whose run destabilized, if any."""
        bad = [r.ratio for r in self.rows if r.destabilized]
        return max(bad) if bad else None


def ratio_sweep(scenario, params_com, ratios=DEFAULT_RATIOS,
                q0: float = 1.0, seed: int = 0, destab_factor: float = 3.0,
                baseline_ratio: float = 0.2) -> RatioSweep:
    """Sweep r = ratio * q at fixed q and flag destabilized runs.

    A run is destabilized when it aborts or its tracking error exceeds
    `destab_factor` times the error at the baseline ratio.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ValueError("ratio list is empty")
    if any(r <= 0.0 for r in ratios):
        raise ValueError("ratios must be positive")
    sweep = RatioSweep(baseline_ratio=baseline_ratio,
                       destab_factor=destab_factor)
    cell = StructureCell("scalar", "slew", "constant", "kpi1")
    for ratio in sorted(ratios, reverse=True):
        theta = (np.log(q0), np.log(q0 * ratio))
        m = evaluate_weights(scenario, params_com, cell, theta, seed)
        sweep.rows.append(RatioRow(ratio=ratio, kpi1=m["kpi1"],
                                   kpi2=m["kpi2"], aborted=m["aborted"]))
    anchor = min(sweep.rows, key=lambda r: abs(r.ratio - baseline_ratio))
    for row in sweep.rows:
        row.destabilized = row.aborted or (
            np.isfinite(anchor.kpi1)
            and row.kpi1 > destab_factor * anchor.kpi1)
    return sweep


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def save_tuning_report(path, report: TuningReport) -> None:
    """One row per cell; per-axis diagonals, 17 significant digits."""
    with open(path, "w") as f:
        f.write("# structure study\n")
        f.write("# columns: structure penalty q_mode reward kpi1 kpi2 tov "
                "qx qy qz rx ry rz aborted\n")
        for c in report.cells:
            nums = [c.kpi1, c.kpi2, c.tov, *c.q[:3], *c.r[:3]]
            f.write(" ".join([c.cell.structure, c.cell.penalty, c.cell.q_mode,
                              c.cell.reward]
                             + [f"{v:.17g}" for v in nums]
                             + [str(int(c.aborted))]) + "\n")
        if report.selected is not None:
            f.write(f"# selected {report.selected.cell.label()}\n")


def load_tuning_report(path) -> TuningReport:
    report = TuningReport()
    selected_label = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# selected "):
                    selected_label = line[len("# selected "):]
                continue
            parts = line.split()
            if len(parts) != 14:
                raise ValueError(f"malformed study row: {line!r}")
            cell = StructureCell(*parts[:4])
            vals = [float(v) for v in parts[4:13]]
            report.cells.append(CellResult(
                cell=cell, kpi1=vals[0], kpi2=vals[1], tov=vals[2],
                q=np.tile(vals[3:6], 2), r=np.tile(vals[6:9], 2),
                reward_value=-vals[0], aborted=bool(int(parts[13]))))
    if selected_label is not None:
        for c in report.cells:
            if c.cell.label() == selected_label:
                report.selected = c
                break
    return report


def save_ratio_sweep(path, sweep: RatioSweep) -> None:
    with open(path, "w") as f:
        f.write("# rq ratio sweep\n")
        f.write(f"# baseline_ratio {sweep.baseline_ratio:.17g}\n")
        f.write(f"# destab_factor {sweep.destab_factor:.17g}\n")
        f.write("# columns: ratio kpi1 kpi2 aborted destabilized\n")
        for r in sweep.rows:
            f.write(f"{r.ratio:.17g} {r.kpi1:.17g} {r.kpi2:.17g} "
                    f"{int(r.aborted)} {int(r.destabilized)}\n")


def load_ratio_sweep(path) -> RatioSweep:
    sweep = RatioSweep()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# baseline_ratio "):
                    sweep.baseline_ratio = float(line.split()[-1])
                elif line.startswith("# destab_factor "):
                    sweep.destab_factor = float(line.split()[-1])
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"malformed sweep row: {line!r}")
            sweep.rows.append(RatioRow(
                ratio=float(parts[0]), kpi1=float(parts[1]),
                kpi2=float(parts[2]), aborted=bool(int(parts[3])),
                destabilized=bool(int(parts[4]))))
    return sweep
