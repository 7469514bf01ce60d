"""Episodic relative-entropy policy search over Gaussian parameter distributions.

Each iteration draws parameter samples from a Gaussian search distribution,
scores them with a caller-supplied reward function, and reweights them with
an exponential tilt exp(R_i / eta).  The temperature eta solves a 1-D convex
dual whose root places the reweighted empirical distribution exactly on the
KL trust-region boundary, so successive distributions never move more than
the bound allows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

_EIG_FLOOR = 1e-10
_ETA_FLOOR = 1e-8
_ETA_UNIFORM = 1e8
_GRAD_TOL = 1e-8


@dataclass
class GaussianPolicy:
    """Search distribution: mean d-vector and SPD covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=float)
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError(
                f"covariance must be ({d}, {d}), got {self.covariance.shape}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        self.covariance = floor_spd(self.covariance)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        """Draw m parameter vectors, shape (m, d)."""
        chol = np.linalg.cholesky(self.covariance)
        return self.mean + rng.standard_normal((m, self.dim)) @ chol.T


def floor_spd(cov: np.ndarray, floor: float = _EIG_FLOOR) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below, keeping the matrix SPD."""
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= floor:
        return sym
    return (vecs * np.maximum(vals, floor)) @ vecs.T


@dataclass
class EpisodeBatch:
    """One REPS iteration's draws and their scalar rewards."""

    samples: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be (M, d), got {self.samples.shape}")
        m, d = self.samples.shape
        if self.rewards.size != m:
            raise ValueError(f"{m} samples but {self.rewards.size} rewards")
        if m < d + 2:
            raise ValueError(
                f"need at least d+2 = {d + 2} samples to estimate a covariance, got {m}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards contain non-finite values")


@dataclass(frozen=True)
class RewardSpec:
    """What a learning run scores: fit quality or closed-loop KPI."""

    kind: str = "model-fit"
    corner_weight: float = 10.0
    tov_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in ("model-fit", "control-kpi"):
            raise ValueError(f"kind must be model-fit or control-kpi, got {self.kind!r}")
        if self.corner_weight < 1.0:
            raise ValueError(f"corner_weight must be >= 1, got {self.corner_weight}")
        if self.tov_weight < 0.0:
            raise ValueError(f"tov_weight must be >= 0, got {self.tov_weight}")


class DualSolution(NamedTuple):
    eta: float
    weights: np.ndarray
    kl: float
    grad: float


def dual_value(eta: float, rewards: np.ndarray, kl_bound: float) -> float:
    """g(eta) = eta*kl_bound + eta*log mean exp(R/eta)."""
    r = np.asarray(rewards, dtype=float)
    return eta * kl_bound + eta * (logsumexp(r / eta) - np.log(r.size))


def _dual_grad(eta: float, shifted: np.ndarray, kl_bound: float) -> float:
    # g'(eta) = kl_bound - KL(weights || uniform); increasing in eta
    w = softmax(shifted / eta)
    log_z = logsumexp(shifted / eta) - np.log(shifted.size)
    kl = float(w @ shifted) / eta - log_z
    return kl_bound - kl


def solve_dual(rewards: np.ndarray, kl_bound: float) -> DualSolution:
    """Find the temperature whose tilted weights sit on the KL boundary.

    Bisects the monotone dual gradient to |g'(eta)| <= 1e-8.  When even the
    floor temperature keeps the weights inside the trust region (near-equal
    rewards, or one sample so dominant the bound cannot bind), the
    temperature is clamped and a warning notes which end was hit.
    """
    if kl_bound <= 0.0:
        raise ValueError(f"kl_bound must be positive, got {kl_bound}")
    r = np.asarray(rewards, dtype=float).reshape(-1)
    shifted = r - r.max()
    if r.max() - r.min() < 1e-14 * max(1.0, abs(float(r.max()))):
        m = r.size
        return DualSolution(_ETA_UNIFORM, np.full(m, 1.0 / m), 0.0, kl_bound)

    lo, hi = _ETA_FLOOR, 1.0
    g_lo = _dual_grad(lo, shifted, kl_bound)
    if g_lo >= 0.0:
        # weights within the bound even at the floor: constraint cannot bind
        w = softmax(shifted / lo)
        reason = ("one sample dominates" if w.max() > 0.5
                  else "reward differences are numerically negligible")
        warnings.warn(f"temperature clamped at its floor; {reason}",
                      RuntimeWarning, stacklevel=2)
        return DualSolution(lo, w, kl_bound - g_lo, g_lo)
    it = 0
    while _dual_grad(hi, shifted, kl_bound) <= 0.0:
        hi *= 4.0
        it += 1
        if it > 200:
            raise RuntimeError("dual gradient never became positive")
    grad = np.inf
    eta = hi
    for _ in range(200):
        eta = 0.5 * (lo + hi)
        grad = _dual_grad(eta, shifted, kl_bound)
        if abs(grad) <= _GRAD_TOL:
            break
        if grad < 0.0:
            lo = eta
        else:
            hi = eta
        if hi - lo <= 1e-16 * hi:
            break
    w = softmax(shifted / eta)
    return DualSolution(eta, w, kl_bound - grad, grad)


def empirical_kl(weights: np.ndarray) -> float:
    """KL of the reweighted empirical distribution from uniform."""
    w = np.asarray(weights, dtype=float)
    nz = w > 0.0
    return float(np.sum(w[nz] * np.log(w.size * w[nz])))


def _refit(batch: EpisodeBatch, weights: np.ndarray) -> GaussianPolicy:
    mean = weights @ batch.samples
    centred = batch.samples - mean
    cov = (centred * weights[:, None]).T @ centred
    return GaussianPolicy(mean, floor_spd(cov))


def reps_update(policy: GaussianPolicy, batch: EpisodeBatch,
                kl_bound: float) -> GaussianPolicy:
    """One trust-region step: tilt, reweight, refit the Gaussian."""
    if batch.samples.shape[1] != policy.dim:
        raise ValueError(
            f"batch dimension {batch.samples.shape[1]} != policy dimension {policy.dim}")
    sol = solve_dual(batch.rewards, kl_bound)
    return _refit(batch, sol.weights)


@dataclass(frozen=True)
class IterationRecord:
    """One learning-report row."""

    iteration: int
    mean_reward: float
    best_reward: float
    kl: float
    eta: float
    params: tuple


@dataclass
class RepsConfig:
    """Learning-run hyperparameters (all overridable)."""

    kl_bound: float = 1.0
    samples: int = 50
    iterations: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.kl_bound <= 0.0:
            raise ValueError(f"kl_bound must be positive, got {self.kl_bound}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass
class RepsResult:
    """Final policy plus per-iteration history and the best sample seen."""

    policy: GaussianPolicy
    history: list = field(default_factory=list)
    best_params: np.ndarray | None = None
    best_reward: float = -np.inf


def run_reps(reward_fn: Callable[[np.ndarray], np.ndarray],
             policy: GaussianPolicy, config: RepsConfig,
             rng: np.random.Generator | None = None) -> RepsResult:
    """Iterate sample / score / update, tracking the best single sample.

    `reward_fn` maps an (M, d) sample block to M scalar rewards; rollouts
    inside it are independent, so it may evaluate them in parallel.
    """
    if config.samples < policy.dim + 2:
        raise ValueError(
            f"config.samples={config.samples} below the d+2={policy.dim + 2} minimum")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    result = RepsResult(policy=policy)
    for i in range(config.iterations):
        samples = policy.sample(rng, config.samples)
        rewards = np.asarray(reward_fn(samples), dtype=float).reshape(-1)
        batch = EpisodeBatch(samples, rewards)
        sol = solve_dual(batch.rewards, config.kl_bound)
        best = int(np.argmax(rewards))
        if rewards[best] > result.best_reward:
            result.best_reward = float(rewards[best])
            result.best_params = samples[best].copy()
        policy = _refit(batch, sol.weights)
        result.policy = policy
        result.history.append(IterationRecord(
            iteration=i,
            mean_reward=float(rewards.mean()),
            best_reward=float(rewards[best]),
            kl=empirical_kl(sol.weights),
            eta=sol.eta,
            params=tuple(policy.mean),
        ))
    return result


def save_report(path, result: RepsResult) -> None:
    """Write the learning report: one CSV row per iteration."""
    d = result.policy.dim
    header = "iter,mean_reward,best_reward,kl,eta," + ",".join(
        f"p{j}" for j in range(d))
    with open(path, "w") as f:
        f.write(header + "\n")
        for rec in result.history:
            cells = [str(rec.iteration)] + [
                f"{v:.17g}" for v in
                (rec.mean_reward, rec.best_reward, rec.kl, rec.eta, *rec.params)]
            f.write(",".join(cells) + "\n")


def load_report(path) -> list[IterationRecord]:
    rows = []
    with open(path) as f:
        next(f)
        for line in f:
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            rows.append(IterationRecord(
                iteration=int(cells[0]),
                mean_reward=float(cells[1]),
                best_reward=float(cells[2]),
                kl=float(cells[3]),
                eta=float(cells[4]),
                params=tuple(float(c) for c in cells[5:]),
            ))
    return rows
