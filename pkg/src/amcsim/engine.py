"""Deterministic discrete-event simulator of AMC+ on one core.

Event ordering: time ascending; at equal times termination events precede
arrivals, equal-time arrivals are ordered by task priority, and a monotone
sequence counter breaks any remaining tie. A LO-job budget overrun kills only
that job; a HI-job overrun switches to HI-mode and evicts LO work until the
processor next idles. The agent task (if present) is hosted as the
lowest-priority HI sporadic task: its hook is consulted when an agent job
starts and the proposed budgets are validated and applied when that job
completes.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import analysis as rta
from .agent import REWARD_HI_OVERRUN, REWARD_JOB_START, REWARD_LO_OVERRUN
from .model import BudgetConfiguration, CriticalityLevel, InvariantError, TaskSet

_COMPLETION = 0
_OVERRUN = 1
_ARRIVAL = 2
_RELEASE = 3  # one-shot re-release of deferred LO work; does not re-arm the period

_KIND_NAMES = {
    _COMPLETION: "completion",
    _OVERRUN: "overrun",
    _ARRIVAL: "arrival",
    _RELEASE: "arrival",
}


class UnschedulableError(RuntimeError):
    """The task set fails the design-time schedulability test."""


class StaleEventError(RuntimeError):
    """A termination event fired for a job that is not running (engine bug)."""


@dataclass
class Metrics:
    """Flat counters of one run; exported as a key-value document."""

    job_starts: int = 0
    completions: int = 0
    deadline_misses: int = 0
    hi_deadline_misses: int = 0
    lo_deadline_misses: int = 0
    lo_job_kills: int = 0
    hi_budget_overruns: int = 0
    mode_changes: int = 0
    lo_jobs_purged: int = 0
    deferred_releases: int = 0
    agent_activations: int = 0
    agent_completions: int = 0
    proposals_applied: int = 0
    proposals_rejected: int = 0
    total_reward: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class AgentObservation:
    """Snapshot handed to the agent hook at each agent-job start."""

    time: int
    mode: str
    budgets: dict[int, int]
    last_exec: dict[int, int]
    reward_since_last: float


@dataclass
class SimResult:
    metrics: Metrics
    final_budgets: dict[int, int]
    trace: list[tuple] | None = None
    exec_log: dict[int, list[int]] | None = None

    def trace_lines(self) -> list[str]:
        """Event trace as tab-separated lines: time, kind, task, job, mode."""
        if self.trace is None:
            raise ValueError("run without collect_trace=True has no trace")
        return ["\t".join(str(c) for c in row) for row in self.trace]


class _Job:
    __slots__ = (
        "jid",
        "tid",
        "priority",
        "release",
        "deadline",
        "exec_time",
        "consumed",
        "budget_left",
        "started",
        "dispatched_at",
        "is_agent",
        "is_hi",
    )

    def __init__(self, jid, tid, priority, release, deadline, exec_time, budget_left, is_agent, is_hi):
        self.jid = jid
        self.tid = tid
        self.priority = priority
        self.release = release
        self.deadline = deadline
        self.exec_time = exec_time
        self.consumed = 0
        self.budget_left = budget_left
        self.started = False
        self.dispatched_at = 0
        self.is_agent = is_agent
        self.is_hi = is_hi


class _WeibullBlockSampler:
    """Per-task execution-time stream, drawn in blocks for speed."""

    def __init__(self, runnables, rng: np.random.Generator, block: int = 1024):
        self.rng = rng
        self.block = block
        self.locs = np.array([r.weibull.location for r in runnables], dtype=np.float64)
        self.scales = np.array([r.weibull.scale for r in runnables], dtype=np.float64)
        self.inv_shapes = np.array([1.0 / r.weibull.shape for r in runnables], dtype=np.float64)
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> int:
        if self._pos >= self._buf.shape[0]:
            u = self.rng.random((self.block, self.locs.shape[0]))
            per_runnable = np.rint(self.locs + self.scales * (-np.log1p(-u)) ** self.inv_shapes)
            self._buf = per_runnable.astype(np.int64).sum(axis=1)
            self._pos = 0
        v = int(self._buf[self._pos])
        self._pos += 1
        return v


class _ConstSampler:
    def __init__(self, value: int):
        self.value = value

    def next(self) -> int:
        return self.value


def _task_streams(seed: int, ts: TaskSet) -> dict[int, np.random.Generator]:
    """One independent stream per application task, plus key -1 for the agent.

    Streams depend only on (seed, task id), so paired runs with and without an
    agent draw identical execution-time sequences per task.
    """
    streams = {
        t.id: np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, t.id)))
        for t in ts.tasks
    }
    streams[-1] = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    return streams


def simulate(
    ts: TaskSet,
    duration: int,
    seed: int,
    agent: Callable[[AgentObservation], Mapping[int, int] | None] | None = None,
    *,
    eq5_check: bool = True,
    validation_scope: str = "all",
    cap_hi_exec: bool = False,
    collect_trace: bool = False,
    record_exec: bool = False,
    exec_time_fn: Callable[[int, int], int | None] | None = None,
    analysis_result: rta.AnalysisResult | None = None,
    require_schedulable: bool = True,
) -> SimResult:
    """Run AMC+ for ``duration`` ticks (arrivals stop at the horizon, residual
    jobs drain) and return the metrics.

    Baseline runs pass ``agent=None``, which omits the agent task entirely.
    ``exec_time_fn(task_id, arrival_index)`` may force execution times;
    ``cap_hi_exec`` clamps sampled HI-task times at c_hi.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if validation_scope not in ("all", "affected"):
        raise ValueError("validation_scope must be 'all' or 'affected'")

    tasks = ts.sorted_by_priority() if ts.tasks else []
    if require_schedulable and ts.tasks:
        if analysis_result is None:
            analysis_result = rta.amc_rtb_test(ts)
        if not analysis_result.schedulable:
            raise UnschedulableError("task set fails the design-time test")

    validator = None
    if agent is not None:
        if ts.agent_task is None:
            raise InvariantError("agent hook given but the task set has no agent task")
        if analysis_result is None:
            analysis_result = rta.amc_rtb_test(ts)
        tables = rta.precompute_ceilings(ts, analysis_result)
        validator = rta.ConfigurationValidator(
            ts, tables, analysis_result, check_lo=eq5_check
        )

    streams = _task_streams(seed, ts)
    prio_rank = {t.id: rank for rank, t in enumerate(tasks)}
    samplers: dict[int, object] = {}
    for t in tasks:
        if t.runnables:
            samplers[t.id] = _WeibullBlockSampler(t.runnables, streams[t.id])
        else:
            samplers[t.id] = _ConstSampler(t.c_lo)
    agent_rank = len(tasks)
    if agent is not None:
        samplers[-1] = _WeibullBlockSampler([ts.agent_task], streams[-1])

    task_by_id = {t.id: t for t in tasks}
    budgets: dict[int, int] = {t.id: t.c_lo for t in tasks}
    last_exec: dict[int, int] = {}
    arrival_counts: dict[int, int] = {t.id: 0 for t in tasks}

    metrics = Metrics()
    trace: list[tuple] | None = [] if collect_trace else None
    exec_log: dict[int, list[int]] | None = (
        {t.id: [] for t in tasks} if record_exec else None
    )

    heap: list[tuple] = []
    push = heapq.heappush
    seq = 0
    live_term = -1  # sequence id of the single live termination event
    mode_hi = False
    running: _Job | None = None
    ready: list[tuple[int, int, _Job]] = []
    deferred: set[int] = set()
    reward_window = 0.0
    pending_proposal: Mapping[int, int] | None = None
    agent_last_arrival = -1
    miat = ts.agent_task.min_interarrival if ts.agent_task is not None else 0
    jid_counter = 0

    for t in tasks:
        seq += 1
        push(heap, (0, 1, prio_rank[t.id], seq, _ARRIVAL, t.id))
    if agent is not None:
        seq += 1
        push(heap, (0, 1, agent_rank, seq, _ARRIVAL, -1))

    def schedule_termination(job: _Job, now: int) -> None:
        nonlocal seq, live_term
        rem_exec = job.exec_time - job.consumed
        if (not mode_hi) and job.budget_left is not None and job.budget_left < rem_exec:
            kind, when = _OVERRUN, now + job.budget_left
        else:
            kind, when = _COMPLETION, now + rem_exec
        seq += 1
        live_term = seq
        push(heap, (when, 0, 0, seq, kind, job))

    def dispatch(job: _Job, now: int) -> None:
        nonlocal running, reward_window
        running = job
        job.dispatched_at = now
        if not job.started:
            job.started = True
            if job.is_agent:
                start_agent_job(now)
            else:
                metrics.job_starts += 1
                reward_window += REWARD_JOB_START
                metrics.total_reward += REWARD_JOB_START
        schedule_termination(job, now)

    def start_agent_job(now: int) -> None:
        nonlocal pending_proposal
        metrics.agent_activations += 1
        obs = AgentObservation(
            time=now,
            mode="HI" if mode_hi else "LO",
            budgets=dict(budgets),
            last_exec=dict(last_exec),
            reward_since_last=reward_window,
        )
        pending_proposal = agent(obs)

    def preempt_check(job: _Job, now: int) -> None:
        """New ready job versus the running one; preempt if strictly higher."""
        nonlocal running, live_term
        if running is None:
            dispatch(job, now)
            return
        if job.priority < running.priority:
            live_term = -1  # cancel the running job's termination event
            elapsed = now - running.dispatched_at
            running.consumed += elapsed
            if running.budget_left is not None and not mode_hi:
                running.budget_left -= elapsed
            heapq.heappush(ready, (running.priority, running.jid, running))
            dispatch(job, now)
        else:
            heapq.heappush(ready, (job.priority, job.jid, job))

    def idle_transition(now: int) -> None:
        """Ready queue went empty on a completion: leave HI-mode and re-release."""
        nonlocal mode_hi, seq
        if mode_hi:
            mode_hi = False
            if now <= duration:
                for tid in sorted(deferred, key=lambda i: prio_rank[i]):
                    seq += 1
                    push(heap, (now, 1, prio_rank[tid], seq, _RELEASE, tid))
                    metrics.deferred_releases += 1
            deferred.clear()

    def sample_exec(tid: int) -> int:
        idx = arrival_counts[tid]
        arrival_counts[tid] = idx + 1
        value = None
        if exec_time_fn is not None:
            value = exec_time_fn(tid, idx)
        if value is None:
            value = samplers[tid].next()
        task = task_by_id[tid]
        if cap_hi_exec and task.criticality is CriticalityLevel.HI and task.c_hi is not None:
            value = min(value, task.c_hi)
        if exec_log is not None:
            exec_log[tid].append(value)
        return value

    def on_arrival(tid: int, now: int, rearm: bool) -> int:
        nonlocal jid_counter, agent_last_arrival, seq
        if tid == -1:
            agent_last_arrival = now
            jid_counter += 1
            job = _Job(
                jid=jid_counter,
                tid=-1,
                priority=agent_rank,
                release=now,
                deadline=None,
                exec_time=samplers[-1].next(),
                budget_left=None,
                is_agent=True,
                is_hi=True,
            )
            preempt_check(job, now)
            return job.jid
        task = task_by_id[tid]
        if rearm:
            nxt = now + task.period
            if nxt <= duration:
                seq += 1
                push(heap, (nxt, 1, prio_rank[tid], seq, _ARRIVAL, tid))
        if mode_hi and task.criticality is CriticalityLevel.LO:
            deferred.add(tid)
            return -1
        jid_counter += 1
        job = _Job(
            jid=jid_counter,
            tid=tid,
            priority=prio_rank[tid],
            release=now,
            deadline=now + task.deadline,
            exec_time=sample_exec(tid),
            budget_left=budgets[tid],
            is_agent=False,
            is_hi=task.criticality is CriticalityLevel.HI,
        )
        preempt_check(job, now)
        return job.jid

    def apply_agent_output(now: int) -> None:
        nonlocal pending_proposal, reward_window, seq
        proposal = pending_proposal
        pending_proposal = None
        if proposal is not None:
            changed = [tid for tid, b in proposal.items() if budgets.get(tid) != b]
            scope = changed if (validation_scope == "affected" and changed) else None
            outcome = validator.validate(proposal, affected=scope)
            if outcome.valid:
                budgets.update(proposal)
                metrics.proposals_applied += 1
            else:
                metrics.proposals_rejected += 1
            notify = getattr(agent, "notify_decision", None)
            if notify is not None:
                notify(outcome.valid)
        reward_window = 0.0  # next observation window starts at this application point
        nxt = max(now, agent_last_arrival + miat)
        if nxt <= duration:
            seq += 1
            push(heap, (nxt, 1, agent_rank, seq, _ARRIVAL, -1))

    def on_completion(job: _Job, now: int) -> None:
        nonlocal running
        if running is not job:
            raise StaleEventError("completion fired for a non-running job")
        job.consumed += now - job.dispatched_at
        running = None
        if job.is_agent:
            metrics.agent_completions += 1
            apply_agent_output(now)
        else:
            metrics.completions += 1
            last_exec[job.tid] = job.exec_time
            if now > job.deadline:
                metrics.deadline_misses += 1
                if job.is_hi:
                    metrics.hi_deadline_misses += 1
                else:
                    metrics.lo_deadline_misses += 1
        if ready:
            _, _, nxt = heapq.heappop(ready)
            dispatch(nxt, now)
        else:
            idle_transition(now)

    def on_overrun(job: _Job, now: int) -> None:
        nonlocal running, mode_hi, reward_window
        if running is not job:
            raise StaleEventError("overrun fired for a non-running job")
        if mode_hi:
            raise StaleEventError("budget overrun event in HI-mode")
        job.consumed += now - job.dispatched_at
        job.budget_left = 0
        if not job.is_hi:
            # AMC+ kills only the misbehaving LO-job.
            metrics.lo_job_kills += 1
            reward_window += REWARD_LO_OVERRUN
            metrics.total_reward += REWARD_LO_OVERRUN
            last_exec[job.tid] = job.consumed
            running = None
            if ready:
                _, _, nxt = heapq.heappop(ready)
                dispatch(nxt, now)
            return
        metrics.hi_budget_overruns += 1
        metrics.mode_changes += 1
        reward_window += REWARD_HI_OVERRUN
        metrics.total_reward += REWARD_HI_OVERRUN
        mode_hi = True
        if ready:
            kept = []
            for entry in ready:
                j = entry[2]
                if j.is_hi:
                    kept.append(entry)
                else:
                    deferred.add(j.tid)
                    metrics.lo_jobs_purged += 1
            if len(kept) != len(ready):
                ready[:] = kept
                heapq.heapify(ready)
        # The overrunning job continues; budgets are not enforced in HI-mode.
        schedule_termination(job, now)

    while heap:
        ev = heapq.heappop(heap)
        now, rank, _, ev_seq, code, payload = ev
        if rank == 0:
            if ev_seq != live_term:
                continue  # cancelled by a preemption
            live_term = -1
            if code == _COMPLETION:
                on_completion(payload, now)
            else:
                on_overrun(payload, now)
            if trace is not None:
                trace.append(
                    (now, _KIND_NAMES[code], payload.tid, payload.jid, "HI" if mode_hi else "LO")
                )
        else:
            jid = on_arrival(payload, now, code == _ARRIVAL)
            if trace is not None:
                trace.append(
                    (now, _KIND_NAMES[code], payload, jid, "HI" if mode_hi else "LO")
                )

    return SimResult(
        metrics=metrics,
        final_budgets=dict(budgets),
        trace=trace,
        exec_log=exec_log,
    )
