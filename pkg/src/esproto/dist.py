"""Sharded population evaluation and cross-worker gradient reduction.

Workers are simulated in-process: each owns a contiguous block of global
candidate indices, generates its own displacements from the counter-based
stream, evaluates them, and (in ``grad_allreduce`` mode) standardizes its
rewards locally. The reduction is a mean over worker gradients taken in
worker order, standing in for a hardware AllReduce.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import es
from .es import ESConfig, GradientEstimate, Population
from .protonet import episode_loss

REDUCE_MODES = ("grad_allreduce", "reward_allgather")


class StepAborted(RuntimeError):
    """A candidate evaluation failed; no gradient is produced for the step."""

    def __init__(self, candidate_index: int, cause: BaseException):
        super().__init__(f"candidate {candidate_index} failed: {cause!r}")
        self.candidate_index = candidate_index
        self.cause = cause


@dataclass
class WorkerPool:
    workers: int
    pop_per_worker: int
    reduce_mode: str = "grad_allreduce"
    parallel: bool = True
    _executor: ThreadPoolExecutor | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.reduce_mode not in REDUCE_MODES:
            raise ValueError(f"unknown reduce mode {self.reduce_mode!r}; expected {REDUCE_MODES}")
        if self.workers < 1 or self.pop_per_worker < 1:
            raise ValueError("workers and pop_per_worker must be positive")

    @classmethod
    def from_config(cls, cfg: ESConfig, reduce_mode="grad_allreduce", parallel=True) -> "WorkerPool":
        return cls(cfg.workers, cfg.pop_per_worker, reduce_mode, parallel)

    @property
    def population_size(self) -> int:
        return self.workers * self.pop_per_worker

    def owner(self, index: int) -> int:
        return index // self.pop_per_worker

    def shard(self, worker: int) -> np.ndarray:
        start = worker * self.pop_per_worker
        return np.arange(start, start + self.pop_per_worker)

    def _run(self, jobs):
        if not self.parallel or self.workers == 1:
            return [job() for job in jobs]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(self.workers, thread_name_prefix="es-worker")
        return [f.result() for f in [self._executor.submit(job) for job in jobs]]

    def map(self, fn, items):
        """Apply ``fn`` to ``items`` split into ``workers`` contiguous chunks.

        Results come back in item order. Used for populations whose size is
        not a multiple of the worker count (finite differences).
        """
        items = list(items)
        chunk = max(1, math.ceil(len(items) / self.workers))
        chunks = [items[k : k + chunk] for k in range(0, len(items), chunk)]

        def job(part):
            out = []
            for item in part:
                try:
                    out.append(fn(item))
                except Exception as exc:
                    raise StepAborted(item, exc) from exc
            return out

        return [r for part in self._run([lambda p=p: job(p) for p in chunks]) for r in part]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def episode_fitness(net, ep, metric="euclidean"):
    """Fitness callable for one episode: negative mean query cross-entropy."""

    def fitness(params) -> float:
        return episode_loss(params, net, ep, metric).fitness

    return fitness


def evaluate_sharded(
    mu, cfg: ESConfig, fitness, pool: WorkerPool, step_index: int, population: Population | None = None
) -> Population:
    """Sample (unless ``population`` is given) and evaluate every candidate once.

    All candidates share ``fitness``, i.e. the same episode. Rewards are
    stored by global candidate index.
    """
    n = pool.population_size
    if population is None and cfg.population_size() != n:
        raise ValueError(f"pool holds {n} candidates but config asks for {cfg.population_size()}")
    if population is not None and len(population) != n:
        raise ValueError(f"population has {len(population)} rows, pool expects {n}")

    def work(worker):
        ids = pool.shard(worker)
        if population is None:
            shard = es.sample_population(mu, cfg, step_index, candidate_ids=ids)
        else:
            shard = population.subset(ids)
        rewards = np.empty(len(ids))
        for row, i in enumerate(ids):
            try:
                r = float(fitness(shard.candidate(mu, row)))
            except Exception as exc:
                raise StepAborted(int(i), exc) from exc
            if not math.isfinite(r):
                raise StepAborted(int(i), es.NumericalError(f"non-finite reward {r}", int(i)))
            rewards[row] = r
        return shard.displacements, rewards

    results = pool._run([lambda w=w: work(w) for w in range(pool.workers)])
    pop = Population(
        np.concatenate([eps for eps, _ in results]),
        np.arange(n),
        cfg.seed,
        step_index,
        cfg.sigma,
        np.concatenate([r for _, r in results]),
    )
    return pop


def reduce_gradients(pool: WorkerPool, pop: Population, cfg: ESConfig) -> GradientEstimate:
    estimator = es.ESTIMATOR_FNS[cfg.estimator]
    if pool.reduce_mode == "reward_allgather" or pool.workers == 1:
        # one global standardization; with a single worker both modes coincide
        est = estimator(pop, cfg)
        est.per_worker = est.grad[None, :] if pool.workers == 1 else None
        est.degenerate_shards = (0,) if est.degenerate and pool.workers == 1 else ()
        return est
    local = [estimator(pop.subset(pool.shard(w)), cfg) for w in range(pool.workers)]
    per_worker = np.stack([g.grad for g in local])
    # fixed worker order keeps the reduction independent of arrival order
    total = np.zeros(pop.dim)
    for row in per_worker:
        total += row
    rewards = np.asarray(pop.rewards)
    return GradientEstimate(
        total / pool.workers,
        cfg.estimator,
        len(pop),
        float(rewards.mean()),
        float(rewards.std()),
        degenerate=all(g.degenerate for g in local),
        per_worker=per_worker,
        degenerate_shards=tuple(w for w, g in enumerate(local) if g.degenerate),
    )


def comm_cost(pool: WorkerPool, D_phi: int, n: int | None = None, bytes_per_scalar: int = 4) -> dict:
    """Per-worker sampling work and per-step bytes for three ES distribution schemes.

    ``grad_allreduce``: each worker samples only its shard and contributes a
    D-vector to the reduction. ``openai_resample``: rewards are broadcast and
    every worker regenerates the whole population. ``reward_allgather``:
    rewards are gathered without resampling, then the gradient is shared.
    """
    n = pool.population_size if n is None else n
    local = pool.pop_per_worker * D_phi
    return {
        "grad_allreduce": {"samples_per_worker": local, "bytes_per_step": D_phi * bytes_per_scalar},
        "openai_resample": {"samples_per_worker": n * D_phi, "bytes_per_step": n * bytes_per_scalar},
        "reward_allgather": {
            "samples_per_worker": local,
            "bytes_per_step": n * bytes_per_scalar + D_phi * bytes_per_scalar,
        },
    }


@dataclass
class StepReport:
    step_index: int
    reduced_grad: np.ndarray
    per_worker_grads: np.ndarray | None
    wall_time: float
    reward_mean: float
    reward_std: float
    reward_min: float
    reward_max: float
    mean_loss: float
    mean_accuracy: float
    grad_norm: float
    degenerate_shards: tuple[int, ...] = ()

    def record(self) -> dict:
        """JSON-serializable summary (gradients are reduced to norms)."""
        out = {k: v for k, v in asdict(self).items() if k not in ("reduced_grad", "per_worker_grads")}
        out["degenerate_shards"] = list(self.degenerate_shards)
        if self.per_worker_grads is not None:
            out["per_worker_grad_norms"] = [float(x) for x in np.linalg.norm(self.per_worker_grads, axis=1)]
        return out

    def to_json(self) -> str:
        return json.dumps(self.record())


def run_step(mu, cfg: ESConfig, fitness, pool: WorkerPool, step_index: int, mean_result=None):
    """One sample/evaluate/reduce round. Returns ``(gradient, population, seconds)``."""
    t0 = time.perf_counter()
    if cfg.estimator == "finite_diff":
        est = es.fd_gradient(mu, fitness, cfg.sigma_fd, map_fn=pool.map)
        return est, None, time.perf_counter() - t0
    pop = evaluate_sharded(mu, cfg, fitness, pool, step_index)
    est = reduce_gradients(pool, pop, cfg)
    return est, pop, time.perf_counter() - t0
