"""AMC-rtb response-time analysis, priority assignment, and run-time budget checks.

The run-time checks reuse ceiling factors that are fixed once the design-time
analysis has converged, so validating a budget configuration needs only sums
and products (no recurrence solving).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .model import BudgetConfiguration, CriticalityLevel, InvariantError, Task, TaskSet


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class AnalysisResult:
    """Design-time response-time bounds; divergent entries are stored as None."""

    r_lo: dict[int, int | None]
    r_star: dict[int, int | None]
    schedulable: bool


@dataclass(frozen=True)
class CeilingTables:
    """Ceiling factors precomputed from a schedulable analysis.

    hp_ceil[i][j]   = ceil(R_i_lo / T_j) for j of higher priority than i
    hpl_ceil[i][j]  = same factor, restricted to higher-priority LO tasks
    hph_const[i]    = c_hi(i) + sum over higher-priority HI j of ceil(D_i/T_j)*c_hi(j)
    lo_ceil[i][j]   = ceil(D_i / T_j) for j of higher priority than i
    """

    hp_ceil: dict[int, dict[int, int]]
    hpl_ceil: dict[int, dict[int, int]]
    hph_const: dict[int, int]
    lo_ceil: dict[int, dict[int, int]]


@dataclass(frozen=True)
class ValidationOutcome:
    valid: bool
    violated: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.valid


def _budget_map(budgets: BudgetConfiguration | Mapping[int, int]) -> Mapping[int, int]:
    if isinstance(budgets, BudgetConfiguration):
        return budgets.budgets
    return budgets


def _hp(ts: TaskSet, task: Task) -> list[Task]:
    return [t for t in ts.tasks if t.priority < task.priority]


def _fixed_point(start: int, base: int, interference: Iterable[tuple[int, int]], limit: int) -> int | None:
    """Least fixed point of R = base + sum(ceil(R/T)*C); None once R exceeds limit.

    ``interference`` is a sequence of (period, cost) pairs. Iteration starts at
    ``start`` and is monotone, so exceeding ``limit`` proves divergence for the
    schedulability test's purposes.
    """
    r = start
    while True:
        if r > limit:
            return None
        nxt = base + sum(_ceil_div(r, t) * c for t, c in interference)
        if nxt == r:
            return r
        r = nxt


def response_time_lo(
    ts: TaskSet, budgets: BudgetConfiguration | Mapping[int, int], task_id: int
) -> int | None:
    """LO-mode response-time bound of one task; None if it diverges past D_i."""
    b = _budget_map(budgets)
    task = ts.by_id(task_id)
    interference = [(t.period, b[t.id]) for t in _hp(ts, task)]
    return _fixed_point(b[task.id], b[task.id], interference, task.deadline)


def response_time_star(
    ts: TaskSet,
    budgets: BudgetConfiguration | Mapping[int, int],
    task_id: int,
    r_lo: int,
) -> int | None:
    """Mode-switch response-time bound of a HI task, given its converged R_lo.

    The interference of higher-priority LO tasks is counted with ceil(R_lo/T_j)
    (a mode change can occur at the latest R_lo after release); only the
    HI-task term iterates.
    """
    b = _budget_map(budgets)
    task = ts.by_id(task_id)
    if task.criticality is not CriticalityLevel.HI:
        raise InvariantError("response_time_star applies to HI tasks only")
    hp = _hp(ts, task)
    lo_part = sum(_ceil_div(r_lo, t.period) * b[t.id] for t in hp if t.criticality is CriticalityLevel.LO)
    base = task.c_hi + lo_part
    interference = [(t.period, t.c_hi) for t in hp if t.criticality is CriticalityLevel.HI]
    return _fixed_point(base, base, interference, task.deadline)


def amc_rtb_test(ts: TaskSet) -> AnalysisResult:
    """Full design-time test with budgets equal to c_lo."""
    budgets = BudgetConfiguration.design(ts)
    r_lo: dict[int, int | None] = {}
    r_star: dict[int, int | None] = {}
    schedulable = True
    for task in ts.tasks:
        r = response_time_lo(ts, budgets, task.id)
        r_lo[task.id] = r
        if r is None:
            schedulable = False
            continue
        if task.criticality is CriticalityLevel.HI:
            rs = response_time_star(ts, budgets, task.id, r)
            r_star[task.id] = rs
            if rs is None:
                schedulable = False
    return AnalysisResult(r_lo=r_lo, r_star=r_star, schedulable=schedulable)


# ---------------------------------------------------------------------------
# Priority assignment

def deadline_monotonic(ts: TaskSet) -> TaskSet:
    """Assign priorities by ascending deadline, ties broken by task id."""
    order = sorted(ts.tasks, key=lambda t: (t.deadline, t.id))
    return ts.with_priorities({t.id: i for i, t in enumerate(order)})


@dataclass(frozen=True)
class AudsleyResult:
    assignment: dict[int, int] | None
    tests_performed: int

    @property
    def feasible(self) -> bool:
        return self.assignment is not None


def _level_test(task: Task, above: list[Task]) -> bool:
    """AMC-rtb test of one task at a priority level with ``above`` above it."""
    budgets = {t.id: t.c_lo for t in above}
    budgets[task.id] = task.c_lo
    interference = [(t.period, t.c_lo) for t in above]
    r = _fixed_point(task.c_lo, task.c_lo, interference, task.deadline)
    if r is None:
        return False
    if task.criticality is CriticalityLevel.HI:
        lo_part = sum(
            _ceil_div(r, t.period) * t.c_lo for t in above if t.criticality is CriticalityLevel.LO
        )
        base = task.c_hi + lo_part
        hi_interference = [
            (t.period, t.c_hi) for t in above if t.criticality is CriticalityLevel.HI
        ]
        rs = _fixed_point(base, base, hi_interference, task.deadline)
        if rs is None:
            return False
    return True


def audsley_assign(ts: TaskSet) -> AudsleyResult:
    """Bottom-up optimal priority assignment.

    At each level (lowest first) candidates are tried in descending deadline
    order, so a deadline-monotonic-feasible set is settled with one test per
    level. The counter reports how many per-task schedulability tests ran.
    """
    unassigned = list(ts.tasks)
    assignment: dict[int, int] = {}
    tests = 0
    for level in range(len(unassigned) - 1, -1, -1):
        candidates = sorted(unassigned, key=lambda t: (t.deadline, t.id), reverse=True)
        placed = None
        for cand in candidates:
            above = [t for t in unassigned if t.id != cand.id]
            tests += 1
            if _level_test(cand, above):
                placed = cand
                break
        if placed is None:
            return AudsleyResult(assignment=None, tests_performed=tests)
        assignment[placed.id] = level
        unassigned.remove(placed)
    return AudsleyResult(assignment=assignment, tests_performed=tests)


def assign_priorities(ts: TaskSet, policy: str = "deadline_monotonic") -> TaskSet:
    """Assign priorities by the named policy ('deadline_monotonic' or 'audsley')."""
    if policy == "deadline_monotonic":
        return deadline_monotonic(ts)
    if policy == "audsley":
        res = audsley_assign(ts)
        if not res.feasible:
            raise InvariantError("audsley found no feasible priority assignment")
        return ts.with_priorities(res.assignment)
    raise ValueError(f"unknown priority policy {policy!r}")


# ---------------------------------------------------------------------------
# Run-time validation

def precompute_ceilings(ts: TaskSet, analysis: AnalysisResult) -> CeilingTables:
    """Fix the ceiling factors used by the run-time checks; requires schedulability."""
    if not analysis.schedulable:
        raise InvariantError("ceilings require a schedulable analysis")
    hp_ceil: dict[int, dict[int, int]] = {}
    hpl_ceil: dict[int, dict[int, int]] = {}
    hph_const: dict[int, int] = {}
    lo_ceil: dict[int, dict[int, int]] = {}
    for task in ts.tasks:
        hp = _hp(ts, task)
        r = analysis.r_lo[task.id]
        hp_ceil[task.id] = {t.id: _ceil_div(r, t.period) for t in hp}
        hpl_ceil[task.id] = {
            t.id: _ceil_div(r, t.period) for t in hp if t.criticality is CriticalityLevel.LO
        }
        lo_ceil[task.id] = {t.id: _ceil_div(task.deadline, t.period) for t in hp}
        if task.criticality is CriticalityLevel.HI:
            hph_const[task.id] = task.c_hi + sum(
                _ceil_div(task.deadline, t.period) * t.c_hi
                for t in hp
                if t.criticality is CriticalityLevel.HI
            )
    return CeilingTables(
        hp_ceil=hp_ceil, hpl_ceil=hpl_ceil, hph_const=hph_const, lo_ceil=lo_ceil
    )


class ConfigurationValidator:
    """Precompiled form of the run-time checks, for repeated validation calls.

    Check scope is the whole set by default. With ``affected`` given, only
    tasks with priority higher than or equal to the lowest-priority member of
    the affected set are checked.
    """

    def __init__(
        self,
        ts: TaskSet,
        tables: CeilingTables,
        analysis: AnalysisResult,
        check_lo: bool = True,
    ) -> None:
        self.check_lo = check_lo
        self._prio = {t.id: t.priority for t in ts.tasks}
        # Per task: (id, priority, is_hi, rhs_eq3, eq3 terms, hph_const, eq4 terms, rhs_d, eq5 terms)
        self._rows = []
        for task in sorted(ts.tasks, key=lambda t: t.priority):
            tid = task.id
            is_hi = task.criticality is CriticalityLevel.HI
            eq3 = list(tables.hp_ceil[tid].items())
            eq4 = list(tables.hpl_ceil[tid].items()) if is_hi else []
            eq5 = list(tables.lo_ceil[tid].items())
            self._rows.append(
                (
                    tid,
                    task.priority,
                    is_hi,
                    analysis.r_lo[tid],
                    eq3,
                    tables.hph_const.get(tid, 0),
                    eq4,
                    task.deadline,
                    eq5,
                )
            )

    def validate(
        self,
        budgets: Mapping[int, int],
        affected: Iterable[int] | None = None,
    ) -> ValidationOutcome:
        max_prio = None
        if affected is not None:
            max_prio = max(self._prio[tid] for tid in affected)
        violated = []
        for tid, prio, is_hi, r_lo, eq3, hph, eq4, deadline, eq5 in self._rows:
            if max_prio is not None and prio > max_prio:
                continue
            b_i = budgets[tid]
            if is_hi:
                if b_i + sum(c * budgets[j] for j, c in eq3) > r_lo:
                    violated.append(tid)
                    continue
                if hph + sum(c * budgets[j] for j, c in eq4) > deadline:
                    violated.append(tid)
                    continue
            elif self.check_lo:
                if b_i + sum(c * budgets[j] for j, c in eq5) > deadline:
                    violated.append(tid)
        return ValidationOutcome(valid=not violated, violated=tuple(violated))


def validate_configuration(
    budgets: BudgetConfiguration | Mapping[int, int],
    ts: TaskSet,
    tables: CeilingTables,
    analysis: AnalysisResult,
    scope: Iterable[int] | None = None,
    check_lo: bool = True,
) -> ValidationOutcome:
    """Run-time admission check of a budget configuration.

    Pure function of its inputs; no recurrences are solved. ``scope=None``
    checks every task; otherwise only tasks with priority higher than or equal
    to the lowest-priority member of ``scope``. ``check_lo=False`` disables the
    per-LO-task deadline check.
    """
    validator = ConfigurationValidator(ts, tables, analysis, check_lo=check_lo)
    return validator.validate(_budget_map(budgets), affected=scope)


def analysis_report(ts: TaskSet, analysis: AnalysisResult) -> dict:
    """Exportable per-task report of the design-time analysis."""
    return {
        "schedulable": analysis.schedulable,
        "tasks": [
            {
                "id": t.id,
                "priority": t.priority,
                "criticality": t.criticality.name,
                "deadline": t.deadline,
                "r_lo": analysis.r_lo.get(t.id),
                "r_star": analysis.r_star.get(t.id),
            }
            for t in sorted(ts.tasks, key=lambda t: t.id)
        ],
    }
