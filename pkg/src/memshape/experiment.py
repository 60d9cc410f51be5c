"""Training runs, evaluation on unseen seeds, run comparison and curves."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .exceptions import ConfigError, FormatError
from .gridworlds import make_env
from .neuralnet import PolicyParams, load_checkpoint, save_checkpoint
from .training import METRICS_HEADER, Trainer

CONFIG_ECHO = "config.echo.json"
METRICS_CSV = "metrics.csv"
CHECKPOINT = "checkpoint_final"
GRAPH_FILE = "graph_final.json"
CURVE_HEADER = ("env_steps", "mean_return", "std_return", "n_runs")
NEVER = math.inf


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow([_format(row[k]) for k in METRICS_HEADER])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_CSV
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != METRICS_HEADER:
                raise FormatError(f"{path}: metrics header does not match schema version 1")
            return [{k: float(v) for k, v in zip(header, line)} for line in reader if line]
    except FileNotFoundError:
        raise FormatError(f"no metrics file at {path}") from None


def run_train(cfg: ExperimentConfig, out_dir, seed: int | None = None, provider=None,
              graph=None, progress: Callable[[dict], None] | None = None) -> Path:
    """Train one seed and write the run directory.

    Layout: ``config.echo.json``, ``metrics.csv``, ``checkpoint_final``,
    ``graph_final.json``.
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(cfg.to_dict(), run_seed=seed)
    (out / CONFIG_ECHO).write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    trainer = Trainer(cfg, seed, graph=graph, provider=provider)
    rows = trainer.train(callback=progress)
    write_metrics(rows, out / METRICS_CSV)
    save_checkpoint(trainer.params, out / CHECKPOINT)
    trainer.graph.save(out / GRAPH_FILE)
    return out


def run_sweep(cfg: ExperimentConfig, out_dir, progress=None) -> list[Path]:
    """One run directory per seed: ``<out>/seed_<s>``."""
    cfg.validate()
    return [run_train(cfg, Path(out_dir) / f"seed_{s}", seed=s, progress=progress) for s in cfg.seeds]


@dataclass
class EvalReport:
    mean_return: float
    return_std: float
    success_rate: float
    success_std: float
    per_seed: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_return": self.mean_return, "return_std": self.return_std,
                "success_rate": self.success_rate, "success_std": self.success_std,
                "per_seed": self.per_seed}


def greedy_policy(params: PolicyParams) -> Callable:
    actor = params.actor

    def act(obs, env) -> int:
        return int(np.argmax(actor.predict(obs.features)))
    return act


def evaluate_policy(policy: Callable, env, seeds: Sequence[int], episodes: int = 1) -> EvalReport:
    """Run ``episodes`` episodes per seed; success means positive terminal reward."""
    if not seeds:
        raise ConfigError("need at least one evaluation seed")
    returns, successes, per_seed = [], [], []
    for seed in seeds:
        seed_returns, seed_success = [], []
        for k in range(episodes):
            obs = env.reset(seed=seed) if k == 0 else env.reset()
            total, done, trunc, reward = 0.0, False, False, 0.0
            while not (done or trunc):
                result = env.step(policy(obs, env))
                total += result.reward
                reward, done, trunc = result.reward, result.done, result.truncated
                obs = result.observation
            seed_returns.append(total)
            seed_success.append(float(done and reward > 0))
        returns += seed_returns
        successes += seed_success
        per_seed.append({"seed": seed, "mean_return": float(np.mean(seed_returns)),
                         "success_rate": float(np.mean(seed_success))})
    seed_success_rates = [p["success_rate"] for p in per_seed]
    return EvalReport(float(np.mean(returns)), float(np.std(returns)), float(np.mean(successes)),
                      float(np.std(seed_success_rates)), per_seed)


def run_eval(checkpoint, seeds: Sequence[int], episodes: int = 1, env=None,
             train_seeds: Sequence[int] | None = None) -> EvalReport:
    """Greedy evaluation of a saved policy on seeds disjoint from training.

    The environment defaults to the one recorded in the checkpoint.
    """
    params = load_checkpoint(checkpoint)
    meta = params.metadata
    if train_seeds is None:
        train_seeds = meta.get("train_seeds", [])
    overlap = sorted(set(seeds) & set(train_seeds))
    if overlap:
        raise ConfigError(f"evaluation seeds overlap training seeds: {overlap}")
    if env is None:
        env = make_env(meta.get("env", "frozenlake"), size=meta.get("size", 6),
                       slippery=meta.get("slippery", False))
    if env.n_features != params.actor.n_inputs:
        raise ConfigError("checkpoint does not match the environment's observation size")
    return evaluate_policy(greedy_policy(params), env, seeds, episodes)


def trailing_mean(values: Sequence[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(idx - window + 1, 0)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def steps_to_threshold(rows: Sequence[dict], threshold: float, window: int = 5) -> float:
    """First env_steps whose trailing-``window`` mean return reaches ``threshold``."""
    if not rows:
        return NEVER
    smooth = trailing_mean([r["mean_return"] for r in rows], window)
    hits = np.flatnonzero(smooth >= threshold)
    return float(rows[hits[0]]["env_steps"]) if len(hits) else NEVER


@dataclass
class Comparison:
    steps_a: list[float]
    steps_b: list[float]
    wins_a: int
    wins_b: int
    ties: int
    final_a: list[float]
    final_b: list[float]

    def to_dict(self) -> dict:
        fix = lambda xs: [None if math.isinf(x) else x for x in xs]  # noqa: E731
        return {"steps_to_threshold_a": fix(self.steps_a), "steps_to_threshold_b": fix(self.steps_b),
                "wins_a": self.wins_a, "wins_b": self.wins_b, "ties": self.ties,
                "final_trailing_return_a": self.final_a, "final_trailing_return_b": self.final_b}


def compare_runs(runs_a, runs_b, threshold_return: float, window: int = 5) -> Comparison:
    """Pair runs by position (one per seed) and compare steps-to-threshold.

    ``runs_a``/``runs_b`` are metrics CSVs or run directories (or single
    paths). A win goes to the run that reaches the threshold first.
    """
    if isinstance(runs_a, (str, Path)):
        runs_a = [runs_a]
    if isinstance(runs_b, (str, Path)):
        runs_b = [runs_b]
    if len(runs_a) != len(runs_b):
        raise FormatError("compare_runs needs the same number of runs on both sides")
    steps_a, steps_b, final_a, final_b = [], [], [], []
    wins_a = wins_b = ties = 0
    for pa, pb in zip(runs_a, runs_b):
        ra, rb = read_metrics(pa), read_metrics(pb)
        sa, sb = steps_to_threshold(ra, threshold_return, window), steps_to_threshold(rb, threshold_return, window)
        steps_a.append(sa)
        steps_b.append(sb)
        final_a.append(float(trailing_mean([r["mean_return"] for r in ra], window)[-1]) if ra else 0.0)
        final_b.append(float(trailing_mean([r["mean_return"] for r in rb], window)[-1]) if rb else 0.0)
        if sa < sb:
            wins_a += 1
        elif sb < sa:
            wins_b += 1
        else:
            ties += 1
    return Comparison(steps_a, steps_b, wins_a, wins_b, ties, final_a, final_b)


def emit_curves(run_dirs: Sequence, out_path=None, window: int = 5) -> list[tuple]:
    """Aggregate smoothed return curves across runs (e.g. seeds of one method).

    Each run's mean_return is smoothed with a trailing mean, then linearly
    interpolated onto the first run's env_steps grid; the output holds the
    across-run mean and population std at every grid point.
    """
    if not run_dirs:
        raise FormatError("emit_curves needs at least one run")
    curves = []
    for run in run_dirs:
        rows = read_metrics(run)
        if not rows:
            raise FormatError(f"{run}: metrics file has no rows")
        x = np.array([r["env_steps"] for r in rows])
        y = trailing_mean([r["mean_return"] for r in rows], window)
        curves.append((x, y))
    grid = curves[0][0]
    stacked = np.vstack([np.interp(grid, x, y) for x, y in curves])
    mean, std = stacked.mean(axis=0), stacked.std(axis=0)
    out = [(int(s), float(m), float(d), len(curves)) for s, m, d in zip(grid, mean, std)]
    if out_path is not None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(CURVE_HEADER)
        for row in out:
            writer.writerow([_format(v) for v in row])
        Path(out_path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    return out
