"""Experiment pipeline: task-set generation, schedulability sweeps, grid
training, paired baseline/agent evaluation, and ratio reporting.

Every emitted document embeds the configuration hash, package version, and the
seeds involved, so runs are reproducible from their outputs alone.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .agent import (
    BATCH_SIZE_GRID,
    HIDDEN_LAYOUT_GRID,
    DqnAgentHook,
    DqnTrainState,
    Hyperparameters,
    load_model,
    save_model,
)
from .analysis import amc_rtb_test, analysis_report
from .engine import Metrics, UnschedulableError, simulate
from .model import TaskSet, deserialize_taskset, seconds, serialize_taskset
from .workload import GeneratorConfig, generate_taskset


@dataclass(frozen=True)
class ExperimentConfig:
    num_runnables: int = 150
    num_tasksets: int = 100
    seed: int = 2024
    criticality_split: float = 0.5
    quantile_samples: int = 1000
    priority_policy: str = "deadline_monotonic"
    train_duration_s: float = 100.0
    eval_duration_s: float = 1000.0
    hidden_layouts: tuple[tuple[float, ...], ...] = HIDDEN_LAYOUT_GRID
    batch_sizes: tuple[int, ...] = BATCH_SIZE_GRID
    eq5_check: bool = True
    validation_scope: str = "all"  # or "affected"

    def __post_init__(self) -> None:
        if self.train_duration_s <= 0 or self.eval_duration_s <= 0:
            raise ValueError("durations must be positive")
        if not self.hidden_layouts or not self.batch_sizes:
            raise ValueError("the hyperparameter grid must be nonempty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layouts"] = [list(h) for h in self.hidden_layouts]
        d["batch_sizes"] = list(self.batch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "hidden_layouts" in d:
            d["hidden_layouts"] = tuple(tuple(h) for h in d["hidden_layouts"])
        if "batch_sizes" in d:
            d["batch_sizes"] = tuple(d["batch_sizes"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def grid(self) -> list[Hyperparameters]:
        return [
            Hyperparameters(hidden_layers=layout, batch_size=batch)
            for layout in self.hidden_layouts
            for batch in self.batch_sizes
        ]


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"version": __version__, "config_hash": cfg.config_hash(), "config": cfg.to_dict()}


def taskset_seed(cfg: ExperimentConfig, index: int) -> int:
    return cfg.seed * 1_000_003 + index


# ---------------------------------------------------------------------------
# generate

def cmd_generate(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """Write one task-set document per seed plus a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, seeds = [], []
    for i in range(cfg.num_tasksets):
        seed = taskset_seed(cfg, i)
        ts = generate_taskset(
            GeneratorConfig(
                num_runnables=cfg.num_runnables,
                seed=seed,
                criticality_split=cfg.criticality_split,
                quantile_samples=cfg.quantile_samples,
                priority_policy=cfg.priority_policy,
            )
        )
        name = f"taskset_{cfg.num_runnables}r_{i:04d}.json"
        (out / name).write_bytes(serialize_taskset(ts))
        files.append(name)
        seeds.append(seed)
    manifest = {**_provenance(cfg), "seeds": seeds, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# sweep

def cmd_sweep(
    counts: Sequence[int], sets_per_point: int, seed: int, priority_policy: str = "deadline_monotonic"
) -> list[dict]:
    """Fraction of schedulable sets per runnable count; plot-ready rows."""
    rows = []
    for count in counts:
        ok = 0
        for i in range(sets_per_point):
            ts = generate_taskset(
                GeneratorConfig(
                    num_runnables=count,
                    seed=seed * 7_919 + count * 101 + i,
                    priority_policy=priority_policy,
                )
            )
            if amc_rtb_test(ts).schedulable:
                ok += 1
        rows.append(
            {
                "num_runnables": count,
                "sets": sets_per_point,
                "schedulable": ok,
                "fraction": ok / sets_per_point,
            }
        )
    return rows


def sweep_table(rows: list[dict]) -> str:
    lines = ["num_runnables\tsets\tschedulable\tfraction"]
    for r in rows:
        lines.append(f"{r['num_runnables']}\t{r['sets']}\t{r['schedulable']}\t{r['fraction']:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# train / evaluate

def train_agent(
    ts: TaskSet,
    hp: Hyperparameters,
    seed: int,
    duration_s: float,
    eq5_check: bool = True,
    validation_scope: str = "all",
) -> tuple[DqnTrainState, list[dict]]:
    """Train one DQN against the simulator; returns the state and activation log."""
    check = amc_rtb_test(ts)
    if not check.schedulable:
        raise UnschedulableError("refusing to train on an unschedulable task set")
    hook = DqnAgentHook(ts, hp=hp, seed=seed, training=True, eq5_check=eq5_check)
    simulate(
        ts,
        seconds(duration_s),
        seed=seed,
        agent=hook,
        eq5_check=eq5_check,
        validation_scope=validation_scope,
        analysis_result=check,
    )
    return hook.state, hook.log


def evaluate(
    ts: TaskSet,
    state: DqnTrainState | None,
    seed: int,
    duration_s: float,
    eq5_check: bool = True,
    validation_scope: str = "all",
    hp: Hyperparameters | None = None,
) -> Metrics:
    """One evaluation run; ``state=None`` is the agent-less baseline."""
    hook = None
    if state is not None:
        hook = DqnAgentHook(
            ts, hp=hp, seed=seed, training=False, state=state, eq5_check=eq5_check
        )
    result = simulate(
        ts,
        seconds(duration_s),
        seed=seed,
        agent=hook,
        eq5_check=eq5_check,
        validation_scope=validation_scope,
    )
    return result.metrics


def cmd_train(
    taskset_path: str | Path,
    hp: Hyperparameters,
    seed: int,
    out_dir: str | Path,
    duration_s: float = 100.0,
    tag: str = "model",
    eq5_check: bool = True,
    validation_scope: str = "all",
) -> Path:
    ts = deserialize_taskset(Path(taskset_path).read_bytes())
    state, log = train_agent(
        ts, hp, seed, duration_s, eq5_check=eq5_check, validation_scope=validation_scope
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{tag}.dqn"
    ckpt.write_bytes(save_model(state))
    with (out / f"{tag}_train_log.jsonl").open("w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")
    return ckpt


def cmd_evaluate(
    taskset_path: str | Path,
    checkpoint: str | Path | None,
    seed: int,
    duration_s: float = 1000.0,
    eq5_check: bool = True,
    validation_scope: str = "all",
) -> dict:
    ts = deserialize_taskset(Path(taskset_path).read_bytes())
    state = None if checkpoint is None else load_model(Path(checkpoint).read_bytes())
    metrics = evaluate(
        ts, state, seed, duration_s, eq5_check=eq5_check, validation_scope=validation_scope
    )
    return {
        "version": __version__,
        "taskset": str(taskset_path),
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "seed": seed,
        "duration_s": duration_s,
        "metrics": metrics.to_dict(),
    }


# ---------------------------------------------------------------------------
# compare

def best_of_grid(agent_metrics: Sequence[Metrics]) -> int:
    """Index of the best model: maximum evaluation reward, ties by fewer mode changes."""
    return max(
        range(len(agent_metrics)),
        key=lambda i: (agent_metrics[i].total_reward, -agent_metrics[i].mode_changes),
    )


def _ratio(baseline: int, agent: int) -> float:
    if agent == 0:
        return math.inf if baseline > 0 else 1.0
    return baseline / agent


def compare_pairs(
    pairs: Sequence[tuple[Metrics, Sequence[Metrics]]]
) -> dict:
    """Ratio report over (baseline, grid-of-agent-metrics) pairs.

    Ratios are baseline/agent for mode changes and LO-job kills, using the
    best-of-grid agent run per task set. Infinite ratios (agent count zero)
    are reported as a count and excluded from the quantiles.
    """
    report: dict = {"pairs": [], "quantiles": {}, "infinite": {}}
    series = {"mode_changes": [], "lo_job_kills": []}
    infinite = {"mode_changes": 0, "lo_job_kills": 0}
    for baseline, grid in pairs:
        if not grid:
            raise ValueError("comparison requires at least one agent run per task set")
        best = best_of_grid(grid)
        chosen = grid[best]
        entry = {"best_model": best}
        for key in series:
            ratio = _ratio(getattr(baseline, key), getattr(chosen, key))
            entry[f"{key}_baseline"] = getattr(baseline, key)
            entry[f"{key}_agent"] = getattr(chosen, key)
            entry[f"{key}_ratio"] = ratio
            if math.isinf(ratio):
                infinite[key] += 1
            else:
                series[key].append(ratio)
        report["pairs"].append(entry)
    for key, values in series.items():
        if values:
            q = np.percentile(values, [0, 25, 50, 75, 100])
            report["quantiles"][key] = {
                "min": q[0], "p25": q[1], "median": q[2], "p75": q[3], "max": q[4],
            }
        else:
            report["quantiles"][key] = None
        report["infinite"][key] = infinite[key]
    return report


def comparison_table(report: dict) -> str:
    lines = ["metric\tmin\t25%\t50%\t75%\tmax\tinf_excluded"]
    for key, q in report["quantiles"].items():
        inf_n = report["infinite"][key]
        if q is None:
            lines.append(f"{key}\t-\t-\t-\t-\t-\t{inf_n}")
        else:
            lines.append(
                f"{key}\t{q['min']:.1f}\t{q['p25']:.1f}\t{q['median']:.1f}"
                f"\t{q['p75']:.1f}\t{q['max']:.1f}\t{inf_n}"
            )
    return "\n".join(lines) + "\n"


def cmd_compare(results_dir: str | Path) -> dict:
    """Build the report from evaluation documents written by ``evaluate``.

    Expects per task set one ``*_baseline.json`` and one or more
    ``*_model*.json`` evaluation documents (shared prefix per task set).
    """
    out = Path(results_dir)
    baselines = sorted(out.glob("*_baseline.json"))
    if not baselines:
        raise FileNotFoundError(f"no *_baseline.json documents under {out}")
    pairs = []
    for bpath in baselines:
        prefix = bpath.name[: -len("_baseline.json")]
        model_paths = sorted(out.glob(f"{prefix}_model*.json"))
        if not model_paths:
            raise FileNotFoundError(f"no model evaluations paired with {bpath.name}")
        baseline = Metrics(**json.loads(bpath.read_text())["metrics"])
        grid = [Metrics(**json.loads(p.read_text())["metrics"]) for p in model_paths]
        pairs.append((baseline, grid))
    return compare_pairs(pairs)


def run_paired_comparison(
    ts: TaskSet,
    grid: Sequence[Hyperparameters],
    train_seed: int,
    eval_seed: int,
    train_duration_s: float,
    eval_duration_s: float,
    eq5_check: bool = True,
    validation_scope: str = "all",
) -> tuple[Metrics, list[Metrics]]:
    """Train the grid, then evaluate baseline and every model with the same seed."""
    states = [
        train_agent(
            ts, hp, train_seed + k, train_duration_s,
            eq5_check=eq5_check, validation_scope=validation_scope,
        )[0]
        for k, hp in enumerate(grid)
    ]
    baseline = evaluate(ts, None, eval_seed, eval_duration_s, eq5_check, validation_scope)
    agents = [
        evaluate(ts, st, eval_seed, eval_duration_s, eq5_check, validation_scope)
        for st in states
    ]
    return baseline, agents


def schedulability_report(ts: TaskSet) -> dict:
    return analysis_report(ts, amc_rtb_test(ts))
