"""Population sampling, gradient estimators and the parameter update.

Three estimators share one population layout:

* ``wsr`` -- displacements weighted by standardized rewards, averaged over
  the population. This is the trainer's default.
* ``nes`` -- plain log-likelihood-trick estimate for an isotropic Gaussian,
  kept as an independent cross-check of ``wsr``.
* ``finite_diff`` -- one forward difference per parameter plus an unmoved
  mean candidate, i.e. a population of ``D + 1``.

Displacements include sigma: candidate ``i`` is ``mu + eps_i`` with
``eps_i ~ N(0, sigma^2 I)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nncore import ParamVector
from .rng import candidate_noise

ESTIMATORS = ("wsr", "finite_diff", "nes")
STD_GUARD = 1e-8
DEFAULT_SIGMA_FD = 1e-3


class NumericalError(FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class UpdateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ESConfig:
    alpha: float = 1.0
    sigma: float = 0.01
    pop_per_worker: int = 32
    workers: int = 8
    estimator: str = "wsr"
    seed: int = 0
    sigma_fd: float = DEFAULT_SIGMA_FD

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.sigma <= 0 or self.sigma_fd <= 0:
            raise ValueError("sigma and sigma_fd must be positive")
        if self.pop_per_worker < 1 or self.workers < 1:
            raise ValueError("pop_per_worker and workers must be positive")

    def population_size(self, dim: int | None = None) -> int:
        if self.estimator == "finite_diff":
            if dim is None:
                raise ValueError("finite-difference population size depends on the parameter count")
            return dim + 1
        return self.pop_per_worker * self.workers

    def with_(self, **changes) -> "ESConfig":
        return replace(self, **changes)


@dataclass
class Population:
    """Displacements for candidates ``candidate_ids`` at one step.

    Row ``r`` is reproducible from ``(seed, step, candidate_ids[r])`` alone.
    """

    displacements: np.ndarray
    candidate_ids: np.ndarray
    seed: int
    step: int
    sigma: float
    rewards: np.ndarray | None = field(default=None)

    def __len__(self) -> int:
        return len(self.candidate_ids)

    @property
    def dim(self) -> int:
        return self.displacements.shape[1]

    def candidate(self, mu, row: int):
        return _shift(mu, self.displacements[row])

    def subset(self, rows) -> "Population":
        rows = np.asarray(rows)
        return Population(
            self.displacements[rows],
            self.candidate_ids[rows],
            self.seed,
            self.step,
            self.sigma,
            None if self.rewards is None else self.rewards[rows],
        )


@dataclass
class GradientEstimate:
    grad: np.ndarray
    estimator: str
    population_size_used: int
    reward_mean: float
    reward_std: float
    degenerate: bool = False
    # filled by sharded reductions: one row per worker, and which shards hit the std guard
    per_worker: np.ndarray | None = None
    degenerate_shards: tuple[int, ...] = ()

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def _values(mu) -> np.ndarray:
    return mu.values if isinstance(mu, ParamVector) else np.asarray(mu)


def _shift(mu, delta):
    if isinstance(mu, ParamVector):
        return mu.with_values(mu.values + delta)
    return np.asarray(mu) + delta


def sample_population(mu, cfg: ESConfig, step_index: int, candidate_ids=None) -> Population:
    """Gaussian displacements for the given candidates (all ``n`` by default)."""
    dim = _values(mu).size
    if candidate_ids is None:
        candidate_ids = np.arange(cfg.population_size(dim))
    candidate_ids = np.asarray(candidate_ids, dtype=np.int64)
    eps = np.empty((len(candidate_ids), dim), dtype=np.float32)
    for row, i in enumerate(candidate_ids):
        eps[row] = candidate_noise(cfg.seed, step_index, int(i), dim, cfg.sigma)
    return Population(eps, candidate_ids, cfg.seed, step_index, cfg.sigma)


def evaluate_population(mu, pop: Population, fitness) -> Population:
    """Fill ``pop.rewards`` by calling ``fitness(mu + eps_i)`` sequentially."""
    rewards = np.array([fitness(pop.candidate(mu, r)) for r in range(len(pop))], dtype=np.float64)
    if not np.isfinite(rewards).all():
        bad = int(np.flatnonzero(~np.isfinite(rewards))[0])
        raise NumericalError(f"non-finite reward for candidate {pop.candidate_ids[bad]}", bad)
    pop.rewards = rewards
    return pop


def _require_rewards(pop: Population) -> np.ndarray:
    if pop.rewards is None:
        raise ValueError("population has no rewards; evaluate it first")
    return np.asarray(pop.rewards, dtype=np.float64)


def standardized_weights(rewards: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    """(F_i - mean) / std with the population (ddof=0) std and a zero-variance guard."""
    rewards = np.asarray(rewards, dtype=np.float64)
    mean = float(rewards.mean())
    std = float(rewards.std())
    if not std >= STD_GUARD:
        return np.zeros_like(rewards), mean, std, True
    return (rewards - mean) / std, mean, std, False


def wsr_gradient(pop: Population, cfg: ESConfig | None = None) -> GradientEstimate:
    rewards = _require_rewards(pop)
    weights, mean, std, degenerate = standardized_weights(rewards)
    n = len(rewards)
    if degenerate:
        grad = np.zeros(pop.dim)
    else:
        grad = (weights @ pop.displacements.astype(np.float64)) / n
    return GradientEstimate(grad, "wsr", n, mean, std, degenerate)


def nes_gradient(pop: Population, cfg: ESConfig | None = None) -> GradientEstimate:
    rewards = _require_rewards(pop)
    sigma = pop.sigma if cfg is None else cfg.sigma
    n = len(rewards)
    grad = (rewards @ pop.displacements.astype(np.float64)) / (n * sigma**2)
    return GradientEstimate(grad, "nes", n, float(rewards.mean()), float(rewards.std()))


# -- finite differences ------------------------------------------------------


def fd_probe(mu, j: int, sigma_fd: float = DEFAULT_SIGMA_FD):
    """Candidate ``j`` of the finite-difference population.

    ``j = -1`` is the unmoved mean candidate; ``0 <= j < D`` nudges parameter j.
    """
    values = _values(mu).copy()
    if j >= 0:
        values[j] += values.dtype.type(sigma_fd)
    return mu.with_values(values) if isinstance(mu, ParamVector) else values


def fd_from_rewards(base_reward: float, probe_rewards, sigma_fd: float = DEFAULT_SIGMA_FD) -> GradientEstimate:
    """Assemble forward differences (F(mu + h e_j) - F(mu)) / h.

    The mean candidate's fitness stands in for the mean reward and ``h``
    for the reward std; no 1/n factor is applied.
    """
    probe_rewards = np.asarray(probe_rewards, dtype=np.float64)
    if not np.isfinite(base_reward):
        raise NumericalError("non-finite fitness for the unmoved mean candidate", -1)
    bad = np.flatnonzero(~np.isfinite(probe_rewards))
    if bad.size:
        raise NumericalError(f"non-finite fitness when nudging parameter {int(bad[0])}", int(bad[0]))
    grad = (probe_rewards - base_reward) / sigma_fd
    all_rewards = np.append(probe_rewards, base_reward)
    return GradientEstimate(
        grad, "finite_diff", len(all_rewards), float(base_reward), float(all_rewards.std())
    )


def fd_gradient(mu, fitness, sigma_fd: float = DEFAULT_SIGMA_FD, map_fn=map) -> GradientEstimate:
    """Forward-difference gradient over D + 1 candidates.

    ``map_fn`` maps a function over candidate indices ``-1 .. D-1``; pass a
    worker pool's ``map`` to shard the probes.
    """
    if sigma_fd <= 0:
        raise ValueError("sigma_fd must be positive")
    dim = _values(mu).size
    rewards = list(map_fn(lambda j: float(fitness(fd_probe(mu, j, sigma_fd))), range(-1, dim)))
    return fd_from_rewards(rewards[0], rewards[1:], sigma_fd)


ESTIMATOR_FNS = {"wsr": wsr_gradient, "nes": nes_gradient}


def apply_update(mu, grad: GradientEstimate | np.ndarray, alpha: float):
    """Return ``mu + alpha * grad`` (ascent on fitness, descent on loss)."""
    g = grad.grad if isinstance(grad, GradientEstimate) else np.asarray(grad)
    values = _values(mu)
    if g.shape != values.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {values.shape}")
    new = (values + alpha * g).astype(values.dtype)
    if not np.isfinite(new).all():
        raise UpdateError("update produced non-finite parameters; mean left unchanged")
    return mu.with_values(new) if isinstance(mu, ParamVector) else new
