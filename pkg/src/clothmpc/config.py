"""Run-configuration files and the small text formats around them.

A scenario config is plain `key = value` text.  Unknown and duplicate keys
are hard errors naming the key, so a typo never silently falls back to a
default.  Learned parameters travel in their own seven-line file, and
recorded open-loop rollouts in a delimited table, both written with 17
significant digits so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .fitting import Rollout
from .harness import Disturbance, FeedbackConfig, Scenario, default_mpc_config
from .model import ClothParams
from .trajectories import Trajectory, load_trajectory


class ConfigError(Exception):
    """A configuration file problem the user has to fix."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_axis_weight(text: str) -> np.ndarray:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        return np.full(6, vals[0])
    if len(vals) == 3:
        return np.tile(vals, 2)
    raise ValueError(f"expected 1 or 3 weight values, got {len(vals)}")


# key -> (converter, target section)
_SCHEMA = {
    "ts": (float, "scenario"),
    "duration": (int, "scenario"),
    "com_n": (int, "scenario"),
    "bsom_n": (int, "scenario"),
    "som_n": (int, "scenario"),
    "side_length": (float, "scenario"),
    "total_mass": (float, "scenario"),
    "plant": (str, "scenario"),
    "trajectory": (str, "scenario"),
    "params_file": (str, "scenario"),
    "hp": (int, "mpc"),
    "q": (_parse_axis_weight, "mpc"),
    "r": (_parse_axis_weight, "mpc"),
    "adaptive_q": (_parse_bool, "mpc"),
    "penalize_slew": (_parse_bool, "mpc"),
    "epsilon": (float, "mpc"),
    "time_budget": (float, "mpc"),
    "arm_link_length": (float, "mpc"),
    "soft_penalty": (float, "mpc"),
    "feedback_rate": (float, "feedback"),
    "feedback_delay": (float, "feedback"),
    "feedback_jitter": (float, "feedback"),
    "noise_sigma": (float, "feedback"),
    "alpha": (float, "feedback"),
    "w_v": (float, "feedback"),
    "dt_max": (float, "feedback"),
    "dd_max": (float, "feedback"),
    "kx": (float, "params"),
    "ky": (float, "params"),
    "kz": (float, "params"),
    "bx": (float, "params"),
    "by": (float, "params"),
    "bz": (float, "params"),
    "delta_l0z": (float, "params"),
}

_FEEDBACK_FIELD = {
    "feedback_rate": "rate",
    "feedback_delay": "delay",
    "feedback_jitter": "jitter",
    "noise_sigma": "noise_sigma",
    "alpha": "alpha",
    "w_v": "w_v",
    "dt_max": "dt_max",
    "dd_max": "dd_max",
}

_PARAM_KEYS = ("kx", "ky", "kz", "bx", "by", "bz", "delta_l0z")


@dataclass
class ScenarioConfig:
    """Typed view of one config file, with its directory for relative paths."""

    values: dict = field(default_factory=dict)
    disturbances: list = field(default_factory=list)
    base_dir: str = "."

    def get(self, key, default=None):
        return self.values.get(key, default)

    def resolve(self, path: str) -> str:
        if os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)


def _parse_disturbance(text: str, lineno: int, path) -> Disturbance:
    toks = text.split()
    if len(toks) < 3:
        raise ConfigError(
            f"{path}: line {lineno}: disturbance wants `kind t0 t1 "
            f"[magnitude]`, got {text!r}")
    kind = toks[0]
    try:
        nums = [float(v) for v in toks[1:]]
    except ValueError:
        raise ConfigError(
            f"{path}: line {lineno}: disturbance has a non-numeric value") from None
    window = (nums[0], nums[1])
    rest = nums[2:]
    if len(rest) == 0:
        magnitude = 0.0
    elif len(rest) == 1:
        magnitude = rest[0]
    elif len(rest) == 3:
        magnitude = np.asarray(rest)
    else:
        raise ConfigError(
            f"{path}: line {lineno}: disturbance magnitude must be one "
            f"value or three, got {len(rest)}")
    try:
        return Disturbance(kind=kind, window=window, magnitude=magnitude)
    except ValueError as exc:
        raise ConfigError(f"{path}: line {lineno}: {exc}") from None


def parse_scenario_config(path) -> ScenarioConfig:
    """Read a key=value config; unknown or repeated keys are errors."""
    cfg = ScenarioConfig(base_dir=os.path.dirname(os.path.abspath(path)))
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}: line {lineno}: expected `key = value`, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key == "disturbance":
                cfg.disturbances.append(_parse_disturbance(value, lineno, path))
                continue
            if key not in _SCHEMA:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            if key in cfg.values:
                raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
            convert, _ = _SCHEMA[key]
            try:
                cfg.values[key] = convert(value)
            except ValueError as exc:
                raise ConfigError(
                    f"{path}: line {lineno}: bad value for {key!r}: {exc}") from None
    return cfg


def config_params(cfg: ScenarioConfig) -> ClothParams:
    """Parameters from the config: a file reference or seven inline keys."""
    inline = [k for k in _PARAM_KEYS if k in cfg.values]
    if "params_file" in cfg.values:
        if inline:
            raise ConfigError(
                f"give params_file or inline parameters, not both (saw {inline[0]!r})")
        return load_params(cfg.resolve(cfg.values["params_file"]))
    if len(inline) != len(_PARAM_KEYS):
        missing = [k for k in _PARAM_KEYS if k not in cfg.values]
        raise ConfigError(
            f"incomplete parameters: missing {missing[0]!r} "
            f"(give params_file or all of {', '.join(_PARAM_KEYS)})")
    v = cfg.values
    try:
        return ClothParams(k=[v["kx"], v["ky"], v["kz"]],
                           b=[v["bx"], v["by"], v["bz"]],
                           delta_l0z=v["delta_l0z"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_run(cfg: ScenarioConfig, trajectory: Trajectory | None = None,
              ts: float | None = None, hp: int | None = None,
              w_v: float | None = None) -> tuple[Scenario, ClothParams]:
    """Assemble a Scenario and its model parameters from a parsed config.

    The optional overrides exist for parameter sweeps; when `ts` differs
    from the reference's period the reference is resampled to it.
    """
    from .trajectories import resample

    if trajectory is None:
        if "trajectory" not in cfg.values:
            raise ConfigError("no trajectory given and config names none")
        trajectory = load_trajectory(cfg.resolve(cfg.values["trajectory"]))
    v = cfg.values
    if ts is None:
        ts = v.get("ts", trajectory.ts)
    if ts is None:
        raise ConfigError("no ts in config and the trajectory names none")
    if trajectory.ts is not None and abs(trajectory.ts - ts) > 1e-12:
        trajectory = resample(trajectory, ts)
    duration = v.get("duration", len(trajectory))
    if duration > len(trajectory):
        raise ConfigError(
            f"duration {duration} steps exceeds the trajectory's {len(trajectory)}")
    side = v.get("side_length", 0.30)
    mpc_kw = {}
    for key in ("q", "r", "adaptive_q", "penalize_slew", "epsilon",
                "time_budget", "arm_link_length", "soft_penalty"):
        if key in v:
            mpc_kw[key] = v[key]
    mpc = default_mpc_config(ts, hp if hp is not None else v.get("hp", 25),
                             side, **mpc_kw)
    fb_kw = {field_: v[key] for key, field_ in _FEEDBACK_FIELD.items()
             if key in v}
    if w_v is not None:
        fb_kw["w_v"] = w_v
    try:
        feedback = FeedbackConfig(**fb_kw)
        scenario = Scenario(
            reference=trajectory, ts=ts, duration=duration,
            com_n=v.get("com_n", 4), bsom_n=v.get("bsom_n", 4),
            som_n=v.get("som_n", 10), side_length=side,
            total_mass=v.get("total_mass", 0.1), mpc=mpc,
            feedback=feedback, disturbances=list(cfg.disturbances),
            plant=v.get("plant", "nonlinear"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return scenario, config_params(cfg)


# ---------------------------------------------------------------------------
# Learned-parameter files
# ---------------------------------------------------------------------------

def save_params(path, params: ClothParams) -> None:
    vals = dict(zip(_PARAM_KEYS, [*params.k, *params.b, params.delta_l0z]))
    with open(path, "w") as f:
        for key in _PARAM_KEYS:
            f.write(f"{key} {vals[key]:.17g}\n")


def load_params(path) -> ClothParams:
    vals = {}
    try:
        f = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read params file: {exc}") from None
    with f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 2 or toks[0] not in _PARAM_KEYS:
                raise ConfigError(
                    f"{path}: line {lineno}: expected `<name> <value>` with "
                    f"name one of {', '.join(_PARAM_KEYS)}")
            if toks[0] in vals:
                raise ConfigError(f"{path}: line {lineno}: duplicate {toks[0]!r}")
            try:
                vals[toks[0]] = float(toks[1])
            except ValueError:
                raise ConfigError(
                    f"{path}: line {lineno}: non-numeric value for {toks[0]!r}") from None
    missing = [k for k in _PARAM_KEYS if k not in vals]
    if missing:
        raise ConfigError(f"{path}: missing {missing[0]!r}")
    try:
        return ClothParams(k=[vals["kx"], vals["ky"], vals["kz"]],
                           b=[vals["bx"], vals["by"], vals["bz"]],
                           delta_l0z=vals["delta_l0z"])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Recorded rollout files
# ---------------------------------------------------------------------------

def save_rollout(path, rollout: Rollout) -> None:
    """One row per step: six control values then all node positions."""
    pos = rollout.positions
    with open(path, "w") as f:
        f.write("# open-loop rollout\n")
        f.write(f"# mesh_n {rollout.mesh_n}\n")
        f.write(f"# side_length {rollout.side_length:.17g}\n")
        f.write(f"# total_mass {rollout.total_mass:.17g}\n")
        f.write(f"# ts {rollout.ts:.17g}\n")
        f.write("# velocities0 "
                + " ".join(f"{v:.17g}" for v in rollout.velocities0.ravel())
                + "\n")
        f.write("# columns: u(6) positions(3*n^2)\n")
        for k in range(pos.shape[0]):
            row = np.concatenate([rollout.controls[k], pos[k].ravel()])
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_rollout(path) -> Rollout:
    meta = {}
    velocities0 = None
    rows = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                toks = line[1:].split()
                if len(toks) == 2 and toks[0] in ("mesh_n", "side_length",
                                                  "total_mass", "ts"):
                    meta[toks[0]] = float(toks[1])
                elif toks and toks[0] == "velocities0":
                    velocities0 = np.array([float(v) for v in toks[1:]])
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError:
                raise ConfigError(
                    f"{path}: line {lineno}: non-numeric value") from None
    for key in ("mesh_n", "side_length", "total_mass", "ts"):
        if key not in meta:
            raise ConfigError(f"{path}: missing `# {key}` header")
    n = int(meta["mesh_n"])
    width = 6 + 3 * n * n
    if velocities0 is None or velocities0.shape[0] != 3 * n * n:
        raise ConfigError(f"{path}: missing or malformed `# velocities0` header")
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    if any(len(r) != width for r in rows):
        raise ConfigError(f"{path}: rows must have {width} values")
    data = np.asarray(rows)
    return Rollout(
        positions=data[:, 6:].reshape(len(rows), n * n, 3),
        velocities0=velocities0.reshape(n * n, 3),
        controls=data[:, :6],
        ts=meta["ts"], mesh_n=n,
        side_length=meta["side_length"], total_mass=meta["total_mass"])
