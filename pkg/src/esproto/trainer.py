"""Episodic ES training, evaluation and hyperparameter sweeps.

Each training step draws one episode, evaluates a population around the
mean model on it, reduces the gradient and takes one SGD step. Each epoch
ends with validation of the mean model and a checkpoint. All randomness
comes from labeled sub-streams of the run seed, so a resumed run replays
the uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import rng as streams
from .dist import StepAborted, WorkerPool, episode_fitness, run_step
from .episodes import load_split, sample_episode
from .es import ESConfig, NumericalError, UpdateError, apply_update
from .nncore import EmbeddingNet, init_params, load_checkpoint, save_checkpoint
from .protonet import episode_loss

log = logging.getLogger(__name__)

DATA_ENV = "ESPN_DATA_ROOT"
CHECKPOINT_NAME = "checkpoint.espn"
STATE_NAME = "state.json"
METRICS_NAME = "metrics.jsonl"
SUMMARY_NAME = "summary.json"


class ConfigError(ValueError):
    pass


def _default_data_dir() -> str:
    return os.environ.get(DATA_ENV, "data/omniglot")


@dataclass
class RunConfig:
    seed: int = 0
    estimator: str = "wsr"
    alpha: float = 1.0
    sigma: float = 0.01
    sigma_fd: float = 0.001
    pop_per_worker: int = 32
    workers: int = 8
    reduce_mode: str = "grad_allreduce"
    parallel: bool = True
    channels: int = 16
    metric: str = "euclidean"
    train_way: int = 5
    test_way: int = 5
    shot: int = 5
    query: int = 15
    val_query: int = 15
    epochs: int = 200
    episodes_per_epoch: int = 100
    val_episodes_per_epoch: int = 1
    test_episodes: int = 200
    eval_seed: int = 12345
    data_dir: str = dataclasses.field(default_factory=_default_data_dir)
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.es  # validates the ES fields
        if self.shot < 1 or self.query < 1 or self.val_query < 1:
            raise ConfigError("shot and query counts must be positive")

    @property
    def es(self) -> ESConfig:
        return ESConfig(
            alpha=self.alpha,
            sigma=self.sigma,
            pop_per_worker=self.pop_per_worker,
            workers=self.workers,
            estimator=self.estimator,
            seed=self.seed,
            sigma_fd=self.sigma_fd,
        )

    @property
    def net(self) -> EmbeddingNet:
        return EmbeddingNet(channels=self.channels)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def seed_ledger(self) -> dict:
        return {
            "run_seed": self.seed,
            "init_seed": streams.derived_seed(self.seed, streams.STREAM_INIT),
            "population_key": [self.seed, streams.STREAM_POPULATION],
            "train_episode_key": [self.seed, streams.STREAM_TRAIN_EPISODE],
            "val_episode_key": [self.seed, streams.STREAM_VAL_EPISODE],
            "test_episode_key": [self.eval_seed, streams.STREAM_TEST_EPISODE],
        }


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _config_lines(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_overrides(_config_lines(Path(path).read_text())))
    values.update(parse_overrides(overrides))
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_grid(text: str) -> list[dict]:
    """``key=v1,v2,...`` lines -> cartesian product of override dicts."""
    axes = []
    for line in _config_lines(text):
        key, _, values = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} in grid")
        axes.append([(key, _coerce(key, v)) for v in values.split(",")])
    if not axes:
        raise ConfigError("grid is empty")
    return [dict(combo) for combo in itertools.product(*axes)]


# -- data --------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _cached_split(data_dir: str, split: str):
    return load_split(data_dir, split)


def get_split(cfg: RunConfig, split: str):
    path = Path(cfg.data_dir)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(
            f"prepared dataset not found at {path}; run `esproto prepare-data` "
            f"or set {DATA_ENV}"
        )
    return _cached_split(str(path.resolve()), split)


def train_episode(cfg: RunConfig, table, step: int):
    gen = streams.substream(cfg.seed, streams.STREAM_TRAIN_EPISODE, step)
    return sample_episode(table, cfg.train_way, cfg.shot, cfg.query, gen)


def run_episodes(params, net, table, way, shot, query, count, seed, stream, metric, offset=0):
    """Mean-model loss/accuracy over ``count`` episodes; returns two arrays."""
    losses, accs = np.empty(count), np.empty(count)
    for k in range(count):
        gen = streams.substream(seed, stream, offset + k)
        res = episode_loss(params, net, sample_episode(table, way, shot, query, gen), metric)
        losses[k], accs[k] = res.loss, res.accuracy
    return losses, accs


# -- metrics -----------------------------------------------------------------


class MetricsWriter:
    """Append-only JSON-lines writer; one record per step or epoch."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def truncate_from_epoch(self, epoch: int) -> None:
        if not self.path.exists():
            return
        kept = [l for l in self.path.read_text().splitlines() if l and json.loads(l).get("epoch", 0) < epoch]
        self.path.write_text("".join(l + "\n" for l in kept))

    def write(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()


def read_metrics(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l]


def export_csv(metrics_path, csv_path, kind: str = "step") -> None:
    rows = [r for r in read_metrics(metrics_path) if r.get("kind") == kind]
    if not rows:
        return
    keys = sorted({k for r in rows for k in r if not isinstance(r[k], (list, dict))})
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


# -- training ----------------------------------------------------------------


def _resume_state(out: Path, cfg: RunConfig):
    state_path = out / STATE_NAME
    if not state_path.exists():
        return None
    state = json.loads(state_path.read_text())
    net, params = load_checkpoint(out / CHECKPOINT_NAME)
    if net.channels != cfg.channels:
        raise ConfigError(f"checkpoint in {out} has {net.channels} channels, config says {cfg.channels}")
    return state["epochs_done"], params


def train(cfg: RunConfig, resume: bool = True, stop_after_epochs: int | None = None) -> dict:
    """Train, validate every epoch and test at the end.

    ``stop_after_epochs`` ends the call early (as if interrupted) after that
    many epochs of this invocation; a later call resumes from the checkpoint.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_table = get_split(cfg, "train")
    val_table = get_split(cfg, "val")
    net = cfg.net
    es_cfg = cfg.es
    metrics = MetricsWriter(out / METRICS_NAME)

    state = _resume_state(out, cfg) if resume else None
    if state is None:
        start_epoch = 0
        mu = init_params(net, streams.derived_seed(cfg.seed, streams.STREAM_INIT))
        if (out / METRICS_NAME).exists():
            (out / METRICS_NAME).unlink()
    else:
        start_epoch, mu = state
        metrics.truncate_from_epoch(start_epoch)
        log.info("resuming %s at epoch %d", out, start_epoch)
    (out / "config.txt").write_text(cfg.to_text())

    pool = WorkerPool.from_config(es_cfg, cfg.reduce_mode, cfg.parallel)
    epochs_run = 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            if stop_after_epochs is not None and epochs_run >= stop_after_epochs:
                return {"interrupted_at_epoch": epoch}
            for k in range(cfg.episodes_per_epoch):
                step = epoch * cfg.episodes_per_epoch + k
                mu = _train_step(mu, cfg, es_cfg, net, pool, train_table, epoch, step, metrics)
            losses, accs = run_episodes(
                mu, net, val_table, cfg.test_way, cfg.shot, cfg.val_query,
                cfg.val_episodes_per_epoch, cfg.seed, streams.STREAM_VAL_EPISODE, cfg.metric,
                offset=epoch * cfg.val_episodes_per_epoch,
            )
            metrics.write({"kind": "val", "epoch": epoch, "loss": float(losses.mean()),
                           "accuracy": float(accs.mean())})
            save_checkpoint(out / CHECKPOINT_NAME, net, mu)
            (out / STATE_NAME).write_text(json.dumps({"epochs_done": epoch + 1}))
            log.info("epoch %d val acc %.3f", epoch, accs.mean())
            epochs_run += 1
    finally:
        pool.close()

    test_mean, test_std, _ = evaluate(out / CHECKPOINT_NAME, cfg, "test")
    summary = {
        "test_accuracy_mean": test_mean,
        "test_accuracy_std": test_std,
        "test_episodes": cfg.test_episodes,
        "param_count": net.param_count,
        "population_size": es_cfg.population_size(net.param_count),
        "seeds": cfg.seed_ledger(),
        "config": dataclasses.asdict(cfg),
    }
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2))
    return summary


def _train_step(mu, cfg, es_cfg, net, pool, table, epoch, step, metrics):
    ep = train_episode(cfg, table, step)
    record = {"kind": "step", "epoch": epoch, "step": step}
    mean_res = episode_loss(mu, net, ep, cfg.metric)
    if not math.isfinite(mean_res.loss):
        metrics.write(record | {"skipped": "non-finite mean-model loss"})
        return mu
    fitness = episode_fitness(net, ep, cfg.metric)
    try:
        est, pop, seconds = run_step(mu, es_cfg, fitness, pool, step)
        new_mu = apply_update(mu, est, es_cfg.alpha)
    except (StepAborted, NumericalError, UpdateError) as exc:
        log.warning("step %d skipped: %s", step, exc)
        metrics.write(record | {"skipped": str(exc), "train_loss": mean_res.loss})
        return mu
    rewards = pop.rewards if pop is not None else None
    record |= {
        "train_loss": mean_res.loss,
        "train_accuracy": mean_res.accuracy,
        "reward_mean": est.reward_mean,
        "reward_std": est.reward_std,
        "reward_min": float(rewards.min()) if rewards is not None else None,
        "reward_max": float(rewards.max()) if rewards is not None else None,
        "grad_norm": est.norm,
        "degenerate_shards": list(est.degenerate_shards),
        "wall_time": seconds,
    }
    metrics.write(record)
    return new_mu


def evaluate(checkpoint, cfg: RunConfig, split: str = "test", shot: int | None = None,
             way: int | None = None, episodes: int | None = None):
    """Mean-model accuracy over test episodes: ``(mean, std, per_episode)``."""
    if split not in ("val", "test", "train"):
        raise ConfigError(f"unknown split {split!r}")
    net, params = load_checkpoint(checkpoint)
    if net.channels != cfg.channels:
        raise ConfigError(f"checkpoint has {net.channels} channels but config expects {cfg.channels}")
    table = get_split(cfg, split)
    if table.split != split:
        raise ConfigError(f"class table for {split!r} reports split {table.split!r}")
    _, accs = run_episodes(
        params, net, table, way or cfg.test_way, shot or cfg.shot, cfg.query,
        episodes or cfg.test_episodes, cfg.eval_seed, streams.STREAM_TEST_EPISODE, cfg.metric,
    )
    return float(accs.mean()), float(accs.std()), accs


def sweep(base: RunConfig, grid: list[dict], out_root) -> list[dict]:
    """Run every override set in ``grid`` sequentially; failures are recorded, not raised."""
    if not grid:
        raise ConfigError("grid is empty")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, overrides in enumerate(grid):
        row = {"run": k, **overrides}
        t0 = time.perf_counter()
        try:
            cfg = base.replace(**overrides, out_dir=str(out_root / f"run_{k:03d}"))
            summary = train(cfg, resume=False)
            row |= {"status": "ok", "accuracy": summary["test_accuracy_mean"],
                    "std": summary["test_accuracy_std"]}
        except Exception as exc:  # one bad run must not end the sweep
            log.exception("sweep run %d failed", k)
            row |= {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        with open(out_root / "sweep.jsonl", "a") as fh:
            fh.write(json.dumps(row) + "\n")
    return rows


def format_table(rows: list[dict]) -> str:
    keys = [k for k in rows[0] if k not in ("run", "status", "accuracy", "std", "seconds", "error")]
    lines = ["  ".join(keys + ["accuracy"])]
    for r in rows:
        acc = f"{r['accuracy']:.3f}±{r['std']:.3f}" if r.get("status") == "ok" else f"FAILED ({r.get('error')})"
        lines.append("  ".join(str(r.get(k)) for k in keys) + "  " + acc)
    return "\n".join(lines)
