"""Core domain types: integer time base, tasks, task sets, budgets.

All times are integer ticks of 10 ns. Table values given in ms or us are
converted exactly at load; a conversion that does not land on a tick is an
error, never a silent rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from typing import Iterable, Mapping

TICK_NS = 10
TICKS_PER_US = 100
TICKS_PER_MS = 100_000
TICKS_PER_SEC = 100_000_000

#: Periods automotive runnables may take, in milliseconds.
RUNNABLE_PERIODS_MS = (1, 2, 5, 10, 20, 50, 100, 200, 1000)

TASKSET_FORMAT = "amcsim-taskset"
TASKSET_FORMAT_VERSION = 1


class InvariantError(ValueError):
    """A domain-type invariant was violated; the message names the invariant."""


class ParseError(ValueError):
    """A document could not be parsed; the message carries field context."""


def _exact_ticks(value: float | int, ticks_per_unit: int, unit: str) -> int:
    ticks = value * ticks_per_unit
    rounded = round(ticks)
    if abs(ticks - rounded) > 1e-6 * max(1.0, abs(ticks)):
        raise InvariantError(
            f"{value} {unit} is not an exact multiple of the 10 ns tick"
        )
    return int(rounded)


def us(value: float | int) -> int:
    """Microseconds to ticks, exactly."""
    return _exact_ticks(value, TICKS_PER_US, "us")


def ms(value: float | int) -> int:
    """Milliseconds to ticks, exactly."""
    return _exact_ticks(value, TICKS_PER_MS, "ms")


def seconds(value: float | int) -> int:
    """Seconds to ticks, exactly."""
    return _exact_ticks(value, TICKS_PER_SEC, "s")


class CriticalityLevel(IntEnum):
    LO = 0
    HI = 1


@dataclass(frozen=True)
class WeibullParams:
    """Two-parameter Weibull over (execution - location), location in ticks."""

    shape: float
    scale: float
    location: int

    def __post_init__(self) -> None:
        if not self.shape > 0:
            raise InvariantError("Weibull shape must be > 0")
        if not self.scale > 0:
            raise InvariantError("Weibull scale must be > 0")
        if self.location < 0:
            raise InvariantError("Weibull location must be >= 0")

    def quantile(self, p: float) -> float:
        """Inverse CDF of the non-translated part, in ticks (float)."""
        import math

        if not 0.0 <= p < 1.0:
            raise ValueError("quantile probability must be in [0, 1)")
        return self.scale * (-math.log1p(-p)) ** (1.0 / self.shape)

    def mean(self) -> float:
        """Analytic mean of the non-translated part, in ticks (float)."""
        import math

        return self.scale * math.gamma(1.0 + 1.0 / self.shape)


@dataclass(frozen=True)
class Runnable:
    period: int
    bcet: int
    acet: int
    wcet: int
    criticality: CriticalityLevel
    weibull: WeibullParams

    def __post_init__(self) -> None:
        if not (0 < self.bcet <= self.acet <= self.wcet):
            raise InvariantError("runnable must satisfy 0 < bcet <= acet <= wcet")
        if self.period not in {ms(p) for p in RUNNABLE_PERIODS_MS}:
            raise InvariantError(
                f"runnable period {self.period} ticks not in the allowed period set"
            )


@dataclass(frozen=True)
class Task:
    """Sporadic task; priority is a unique integer, lower number = higher priority."""

    id: int
    period: int
    deadline: int
    criticality: CriticalityLevel
    c_lo: int
    c_hi: int | None
    priority: int | None = None
    runnables: tuple[Runnable, ...] = ()

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise InvariantError("task period must be positive")
        if self.deadline != self.period:
            raise InvariantError("implicit deadlines required: deadline must equal period")
        if self.c_lo <= 0:
            raise InvariantError("task c_lo must be positive")
        if self.criticality is CriticalityLevel.HI:
            if self.c_hi is None:
                raise InvariantError("HI task must define c_hi")
            if self.c_hi < self.c_lo:
                raise InvariantError("HI task must satisfy c_hi >= c_lo")
        elif self.c_hi is not None:
            raise InvariantError("LO task must not define c_hi")

    @property
    def bcet(self) -> int:
        """Task-level BCET: sum of member runnable BCETs (c_lo if no runnables)."""
        return sum(r.bcet for r in self.runnables) if self.runnables else self.c_lo

    @property
    def wcet(self) -> int:
        """Task-level WCET: sum of member runnable WCETs (c_hi/c_lo fallback)."""
        if self.runnables:
            return sum(r.wcet for r in self.runnables)
        return self.c_hi if self.c_hi is not None else self.c_lo


@dataclass(frozen=True)
class AgentTaskSpec:
    """Lowest-priority HI sporadic task hosting the agent; no budget is enforced."""

    min_interarrival: int
    weibull: WeibullParams

    def __post_init__(self) -> None:
        if self.min_interarrival <= 0:
            raise InvariantError("agent min_interarrival must be positive")


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple[Task, ...]
    agent_task: AgentTaskSpec | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise InvariantError("task ids must be unique")
        keys = [(t.period, t.criticality) for t in self.tasks]
        if len(set(keys)) != len(keys):
            raise InvariantError("at most one task per (period, criticality) pair")
        prios = [t.priority for t in self.tasks if t.priority is not None]
        if len(set(prios)) != len(prios):
            raise InvariantError("assigned priorities must be unique")

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def by_id(self, task_id: int) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    def sorted_by_priority(self) -> list[Task]:
        if any(t.priority is None for t in self.tasks):
            raise InvariantError("priorities not assigned")
        return sorted(self.tasks, key=lambda t: t.priority)

    def with_priorities(self, assignment: Mapping[int, int]) -> "TaskSet":
        """New TaskSet with priorities replaced by ``assignment`` (task id -> priority)."""
        tasks = tuple(
            Task(
                id=t.id,
                period=t.period,
                deadline=t.deadline,
                criticality=t.criticality,
                c_lo=t.c_lo,
                c_hi=t.c_hi,
                priority=assignment[t.id],
                runnables=t.runnables,
            )
            for t in self.tasks
        )
        return TaskSet(tasks=tasks, agent_task=self.agent_task)


@dataclass(frozen=True)
class BudgetConfiguration:
    """Per-task LO-mode budgets (task id -> ticks); the agent task has no entry."""

    budgets: dict[int, int]

    @staticmethod
    def design(ts: TaskSet) -> "BudgetConfiguration":
        """The design-time configuration: every budget equals the task's c_lo."""
        return BudgetConfiguration({t.id: t.c_lo for t in ts.tasks})

    def validate_for(self, ts: TaskSet) -> None:
        ids = {t.id for t in ts.tasks}
        for tid, b in self.budgets.items():
            if tid not in ids:
                raise InvariantError(f"budget for unknown task id {tid}")
            if b <= 0:
                raise InvariantError(f"budget for task {tid} must be positive")
        missing = ids - set(self.budgets)
        if missing:
            raise InvariantError(f"missing budgets for task ids {sorted(missing)}")


def utilization(ts: TaskSet, level: CriticalityLevel) -> Fraction:
    """Exact utilization sum C_i(level)/T_i over tasks defined at that level."""
    total = Fraction(0)
    for t in ts.tasks:
        if level is CriticalityLevel.LO:
            total += Fraction(t.c_lo, t.period)
        elif t.criticality is CriticalityLevel.HI:
            total += Fraction(t.c_hi, t.period)
    return total


# ---------------------------------------------------------------------------
# Task-set document (JSON, versioned). See README "File formats".

def _weibull_to_doc(w: WeibullParams) -> dict:
    return {"shape": w.shape, "scale": w.scale, "location": w.location}


def _runnable_to_doc(r: Runnable) -> dict:
    return {
        "period": r.period,
        "bcet": r.bcet,
        "acet": r.acet,
        "wcet": r.wcet,
        "criticality": r.criticality.name,
        "weibull": _weibull_to_doc(r.weibull),
    }


def serialize_taskset(ts: TaskSet) -> bytes:
    """Serialize to the versioned task-set document; tasks ordered by id."""
    doc = {
        "format": TASKSET_FORMAT,
        "version": TASKSET_FORMAT_VERSION,
        "tick_ns": TICK_NS,
        "tasks": [
            {
                "id": t.id,
                "period": t.period,
                "deadline": t.deadline,
                "criticality": t.criticality.name,
                "c_lo": t.c_lo,
                "c_hi": t.c_hi,
                "priority": t.priority,
                "runnables": [_runnable_to_doc(r) for r in t.runnables],
            }
            for t in sorted(ts.tasks, key=lambda t: t.id)
        ],
        "agent_task": None
        if ts.agent_task is None
        else {
            "min_interarrival": ts.agent_task.min_interarrival,
            "weibull": _weibull_to_doc(ts.agent_task.weibull),
        },
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise ParseError(f"missing field '{key}' in {context}")
    return doc[key]


def _parse_weibull(doc: dict, context: str) -> WeibullParams:
    return WeibullParams(
        shape=float(_require(doc, "shape", context)),
        scale=float(_require(doc, "scale", context)),
        location=int(_require(doc, "location", context)),
    )


def _parse_criticality(name: str, context: str) -> CriticalityLevel:
    try:
        return CriticalityLevel[name]
    except KeyError:
        raise ParseError(f"unknown criticality '{name}' in {context}") from None


def deserialize_taskset(data: bytes | str) -> TaskSet:
    """Parse a task-set document; raises ParseError / InvariantError with context."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError("top-level document must be an object")
    if doc.get("format") != TASKSET_FORMAT:
        raise ParseError(f"unexpected format tag {doc.get('format')!r}")
    if doc.get("version") != TASKSET_FORMAT_VERSION:
        raise ParseError(f"unsupported format version {doc.get('version')!r}")

    tasks = []
    for i, tdoc in enumerate(_require(doc, "tasks", "document")):
        ctx = f"tasks[{i}]"
        runnables = tuple(
            Runnable(
                period=int(_require(rdoc, "period", f"{ctx}.runnables[{j}]")),
                bcet=int(_require(rdoc, "bcet", f"{ctx}.runnables[{j}]")),
                acet=int(_require(rdoc, "acet", f"{ctx}.runnables[{j}]")),
                wcet=int(_require(rdoc, "wcet", f"{ctx}.runnables[{j}]")),
                criticality=_parse_criticality(
                    _require(rdoc, "criticality", f"{ctx}.runnables[{j}]"),
                    f"{ctx}.runnables[{j}]",
                ),
                weibull=_parse_weibull(
                    _require(rdoc, "weibull", f"{ctx}.runnables[{j}]"),
                    f"{ctx}.runnables[{j}].weibull",
                ),
            )
            for j, rdoc in enumerate(tdoc.get("runnables", []))
        )
        c_hi = tdoc.get("c_hi")
        tasks.append(
            Task(
                id=int(_require(tdoc, "id", ctx)),
                period=int(_require(tdoc, "period", ctx)),
                deadline=int(_require(tdoc, "deadline", ctx)),
                criticality=_parse_criticality(_require(tdoc, "criticality", ctx), ctx),
                c_lo=int(_require(tdoc, "c_lo", ctx)),
                c_hi=None if c_hi is None else int(c_hi),
                priority=None if tdoc.get("priority") is None else int(tdoc["priority"]),
                runnables=runnables,
            )
        )

    agent_doc = doc.get("agent_task")
    agent = None
    if agent_doc is not None:
        agent = AgentTaskSpec(
            min_interarrival=int(_require(agent_doc, "min_interarrival", "agent_task")),
            weibull=_parse_weibull(
                _require(agent_doc, "weibull", "agent_task"), "agent_task.weibull"
            ),
        )
    return TaskSet(tasks=tuple(tasks), agent_task=agent)
