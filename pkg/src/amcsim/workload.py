"""Automotive workload generation.

Runnable timing follows the published characterization of automotive
applications: period shares, per-period average execution times (split with
UUniFast under min/max bounds), BCET/WCET factor ranges, and a Weibull
execution-time model per runnable fitted from (BCET, ACET, WCET). Runnables
with equal (period, criticality) map to one task; LO-mode budgets are chosen
empirically as sample quantiles of each task's execution-time distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import analysis
from .model import (
    AgentTaskSpec,
    CriticalityLevel,
    InvariantError,
    Runnable,
    RUNNABLE_PERIODS_MS,
    Task,
    TaskSet,
    WeibullParams,
    ms,
    us,
)


class GenerationError(RuntimeError):
    """Workload generation failed (e.g. a rejection-sampling cap was hit)."""


class FitError(ValueError):
    """No Weibull parameters satisfy the requested constraints."""


# Quantile probabilities anchoring the shape fit for application runnables.
FIT_P_LO = 1e-5
FIT_P_HI = 0.99999

ACET_REDRAW_CAP = 10_000


@dataclass(frozen=True)
class PeriodRow:
    share_percent: float
    acet_min: int
    acet_avg: int
    acet_max: int
    bcet_factor: tuple[float, float]
    wcet_factor: tuple[float, float]
    budget_p: dict[CriticalityLevel, float]

    def __post_init__(self) -> None:
        if not self.acet_min <= self.acet_avg <= self.acet_max:
            raise InvariantError("ACET bounds must satisfy min <= avg <= max")
        for lo, hi in (self.bcet_factor, self.wcet_factor):
            if lo > hi:
                raise InvariantError("factor range must satisfy min <= max")


@dataclass(frozen=True)
class PeriodProfile:
    rows: dict[int, PeriodRow]  # keyed by period in ms

    def __post_init__(self) -> None:
        total = sum(r.share_percent for r in self.rows.values())
        if abs(total - 100.0) > 1e-9:
            raise InvariantError(f"period shares must sum to 100%, got {total}")

    def row_for_period(self, period_ticks: int) -> PeriodRow:
        return self.rows[period_ticks // ms(1)]


_LO = CriticalityLevel.LO
_HI = CriticalityLevel.HI

#: period ms -> (share %, (acet min, avg, max) us, bcet factor range, wcet factor
#: range, budget quantile probability for LO- and HI-tasks)
_PROFILE_DATA = {
    1: (4.0, (0.34, 5.00, 30.11), (0.19, 0.92), (1.30, 29.11), (0.75, 0.80)),
    2: (2.0, (0.32, 4.20, 40.69), (0.12, 0.89), (1.54, 19.04), (0.75, 0.80)),
    5: (2.0, (0.36, 11.04, 83.36), (0.17, 0.94), (1.13, 18.44), (0.75, 0.80)),
    10: (29.0, (0.21, 10.09, 309.87), (0.05, 0.99), (1.06, 30.03), (0.67, 0.75)),
    20: (29.0, (0.25, 8.74, 291.42), (0.11, 0.98), (1.06, 15.61), (0.67, 0.75)),
    50: (4.0, (0.29, 17.56, 92.98), (0.32, 0.95), (1.13, 7.76), (0.67, 0.75)),
    100: (24.0, (0.21, 10.53, 420.43), (0.09, 0.99), (1.02, 8.88), (0.50, 0.67)),
    200: (1.0, (0.22, 2.56, 21.95), (0.45, 0.98), (1.03, 4.90), (0.50, 0.67)),
    1000: (5.0, (0.37, 0.43, 0.46), (0.68, 0.80), (1.84, 4.75), (0.50, 0.67)),
}


def default_profile() -> PeriodProfile:
    rows = {}
    for period_ms, (share, acet, bf, wf, (p_lo, p_hi)) in _PROFILE_DATA.items():
        rows[period_ms] = PeriodRow(
            share_percent=share,
            acet_min=us(acet[0]),
            acet_avg=us(acet[1]),
            acet_max=us(acet[2]),
            bcet_factor=bf,
            wcet_factor=wf,
            budget_p={_LO: p_lo, _HI: p_hi},
        )
    return PeriodProfile(rows=rows)


@dataclass(frozen=True)
class GeneratorConfig:
    num_runnables: int
    seed: int
    criticality_split: float = 0.5
    quantile_samples: int = 1000
    priority_policy: str = "deadline_monotonic"

    def __post_init__(self) -> None:
        if self.num_runnables < 1:
            raise InvariantError("num_runnables must be >= 1")
        if not 0.0 <= self.criticality_split <= 1.0:
            raise InvariantError("criticality_split must be in [0, 1]")
        if self.quantile_samples < 1:
            raise InvariantError("quantile_samples must be >= 1")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible generator for one pipeline stage."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def sample_runnable_periods(
    n: int, profile: PeriodProfile, rng: np.random.Generator
) -> list[int]:
    """Draw n runnable periods (ticks) i.i.d. with the profile's shares."""
    if n < 1:
        raise ValueError("n must be >= 1")
    periods_ms = sorted(profile.rows)
    probs = np.array([profile.rows[p].share_percent for p in periods_ms]) / 100.0
    ticks = np.array([ms(p) for p in periods_ms], dtype=np.int64)
    idx = rng.choice(len(ticks), size=n, p=probs)
    return [int(t) for t in ticks[idx]]


def uunifast(n: int, total_utilization: float, rng: np.random.Generator) -> list[float]:
    """Classic UUniFast: n positive addends uniformly distributed over the simplex."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not total_utilization > 0:
        raise ValueError("total_utilization must be > 0")
    values = []
    remaining = total_utilization
    for i in range(1, n):
        u = rng.random()
        while u <= 0.0:  # keep all addends strictly positive
            u = rng.random()
        nxt = remaining * u ** (1.0 / (n - i))
        values.append(remaining - nxt)
        remaining = nxt
    values.append(remaining)
    return values


def _conditioned_split(
    r: int, total: float, lo: int, hi: int, rng: np.random.Generator
) -> list[float]:
    """Uniform draw from {x: sum x = total, lo <= x_i <= hi} by pairwise Gibbs.

    Each move resamples one (x_i, x_j) pair uniformly on its feasible segment,
    which leaves the uniform law on the constrained simplex invariant. Used
    when plain rejection of unconstrained UUniFast splits is hopeless (narrow
    bounds, large groups).
    """
    x = [total / r] * r
    for _ in range(60 * r):
        i = int(rng.integers(r))
        j = int(rng.integers(r - 1))
        if j >= i:
            j += 1
        m = x[i] + x[j]
        seg_lo = max(lo, m - hi)
        seg_hi = min(hi, m - lo)
        xi = rng.uniform(seg_lo, seg_hi)
        x[i] = xi
        x[j] = m - xi
    return x


def assign_acets(
    periods: Sequence[int],
    profile: PeriodProfile,
    rng: np.random.Generator,
    rejection_cap: int = ACET_REDRAW_CAP,
    conditioned_fallback: bool = True,
) -> list[int]:
    """ACET per runnable (ticks), aligned with ``periods``.

    Each period group of size r receives a UUniFast split of the group sum
    r * acet_avg; whole splits violating the per-runnable [min, max] bounds
    are discarded and redrawn. Groups whose bounds make rejection hopeless
    (acceptance decays exponentially with group size) switch to a Gibbs
    sampler targeting the same conditioned distribution; with
    ``conditioned_fallback=False`` exhausting the cap raises GenerationError.
    """
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(periods):
        groups.setdefault(p, []).append(i)
    acets = [0] * len(periods)
    for period in sorted(groups):
        row = profile.row_for_period(period)
        indices = groups[period]
        r = len(indices)
        if not row.acet_min <= row.acet_avg <= row.acet_max:
            raise GenerationError(
                f"ACET bounds for the {period // ms(1)} ms group cannot meet the group sum"
            )
        cap = min(rejection_cap, 50) if conditioned_fallback else rejection_cap
        values = None
        for _ in range(cap):
            split = uunifast(r, float(r * row.acet_avg), rng)
            candidate = [int(np.rint(v)) for v in split]
            if all(row.acet_min <= v <= row.acet_max for v in candidate):
                values = candidate
                break
        if values is None:
            if not conditioned_fallback:
                raise GenerationError(
                    f"ACET assignment for the {period // ms(1)} ms group "
                    f"({r} runnables) exhausted {rejection_cap} redraws"
                )
            split = _conditioned_split(
                r, float(r * row.acet_avg), row.acet_min, row.acet_max, rng
            )
            values = [int(np.rint(v)) for v in split]
        for i, v in zip(indices, values):
            acets[i] = v
    return acets


def derive_bcet_wcet(
    acet: int, period: int, profile: PeriodProfile, rng: np.random.Generator
) -> tuple[int, int]:
    """BCET and WCET from uniformly drawn period-specific factors, tick-rounded.

    Rounded values are clamped back into the factor range so the realized
    bcet/acet and wcet/acet ratios stay within the table bounds.
    """
    if acet <= 0:
        raise ValueError("acet must be positive")
    row = profile.row_for_period(period)
    b_lo, b_hi = row.bcet_factor
    w_lo, w_hi = row.wcet_factor
    fb = rng.uniform(b_lo, b_hi)
    fw = rng.uniform(w_lo, w_hi)
    bcet = int(np.rint(acet * fb))
    bcet = max(math.ceil(acet * b_lo), min(bcet, math.floor(acet * b_hi)))
    bcet = max(1, bcet)
    wcet = int(np.rint(acet * fw))
    wcet = max(math.ceil(acet * w_lo), min(wcet, math.floor(acet * w_hi)))
    return bcet, wcet


def _solve_weibull(
    q_lo: float, q_hi: float, mean_excess: float, p_lo: float, p_hi: float
) -> tuple[float, float]:
    """Shape from the two quantile anchors, scale from the mean.

    The anchors pin the shape through their ratio (the scale cancels); the
    scale then comes from the mean of the non-translated distribution. The
    shape is bracketed and bisected to 1e-10 relative width.
    """
    if not (q_lo > 0 and q_hi > q_lo):
        raise FitError("quantile anchors must satisfy 0 < q_lo < q_hi")
    if not mean_excess > 0:
        raise FitError("mean must exceed the location")
    a = -math.log1p(-p_lo)
    b = -math.log1p(-p_hi)
    span = math.log(b / a)
    target = math.log(q_hi / q_lo)

    def g(k: float) -> float:
        return span / k - target

    lo, hi = 1e-6, 1.0
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            raise FitError("no positive shape satisfies the quantile constraints")
    while g(lo) < 0:
        lo /= 2.0
        if lo < 1e-12:
            raise FitError("no positive shape satisfies the quantile constraints")
    while (hi - lo) > 1e-10 * lo:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    k = 0.5 * (lo + hi)
    lam = mean_excess / math.gamma(1.0 + 1.0 / k)
    return k, lam


def fit_weibull(bcet: int, acet: int, wcet: int) -> WeibullParams:
    """Execution-time model of one runnable.

    Non-translated Weibull over (execution - bcet): the shape is derived from
    the quantile anchors q(1e-5) = 1 tick and q(0.99999) = wcet - bcet, the
    scale from mean = acet - bcet, and the location is the BCET.
    """
    if not bcet < acet < wcet:
        raise FitError("fit requires bcet < acet < wcet")
    k, lam = _solve_weibull(1.0, float(wcet - bcet), float(acet - bcet), FIT_P_LO, FIT_P_HI)
    return WeibullParams(shape=k, scale=lam, location=bcet)


def sample_weibull(params: WeibullParams, rng: np.random.Generator) -> int:
    """One execution-time sample, rounded to the tick."""
    u = rng.random()
    return int(round(params.location + params.scale * (-math.log1p(-u)) ** (1.0 / params.shape)))


def task_execution_samples(
    runnables: Sequence[Runnable], rng: np.random.Generator, size: int
) -> np.ndarray:
    """``size`` job execution times: per-runnable Weibull samples, rounded, summed."""
    total = np.zeros(size, dtype=np.int64)
    for r in runnables:
        u = rng.random(size)
        w = r.weibull
        total += np.rint(w.location + w.scale * (-np.log1p(-u)) ** (1.0 / w.shape)).astype(
            np.int64
        )
    return total


def estimate_lo_budget(
    task: Task, profile: PeriodProfile, rng: np.random.Generator, samples: int = 1000
) -> int:
    """Empirical LO-budget: the ceil(p*samples)-th smallest of sampled job times."""
    if not task.runnables:
        raise ValueError("task has no runnables")
    p = profile.row_for_period(task.period).budget_p[task.criticality]
    values = np.sort(task_execution_samples(task.runnables, rng, samples))
    index = min(samples - 1, math.ceil(p * samples) - 1)
    return int(values[index])


def default_agent_spec() -> AgentTaskSpec:
    """Agent-task timing: 10 ms sporadic with a Weibull fitted from measured
    750/1200 us BCET/ACET and 760/2000 us anchors at p = 1e-6 / 0.99999."""
    k, lam = _solve_weibull(
        q_lo=float(us(760) - us(750)),
        q_hi=float(us(2000) - us(750)),
        mean_excess=float(us(1200) - us(750)),
        p_lo=1e-6,
        p_hi=0.99999,
    )
    return AgentTaskSpec(
        min_interarrival=ms(10),
        weibull=WeibullParams(shape=k, scale=lam, location=us(750)),
    )


def build_tasks(
    runnables: Sequence[Runnable],
    profile: PeriodProfile,
    budget_rng: np.random.Generator,
    quantile_samples: int = 1000,
    priority_policy: str = "deadline_monotonic",
    agent_task: AgentTaskSpec | None = None,
) -> TaskSet:
    """Group runnables into one task per (period, criticality) and set budgets.

    Empty groups are dropped; HI tasks get c_hi as the sum of member WCETs and
    c_lo as the empirical budget (capped at c_hi); deadlines are implicit.
    """
    groups: dict[tuple[int, CriticalityLevel], list[Runnable]] = {}
    for r in runnables:
        groups.setdefault((r.period, r.criticality), []).append(r)

    tasks = []
    for tid, key in enumerate(sorted(groups, key=lambda k: (k[0], int(k[1])))):
        period, crit = key
        members = tuple(groups[key])
        c_hi = sum(r.wcet for r in members) if crit is _HI else None
        shell = Task(
            id=tid,
            period=period,
            deadline=period,
            criticality=crit,
            c_lo=max(1, sum(r.bcet for r in members)),  # placeholder for estimation
            c_hi=c_hi,
            runnables=members,
        )
        c_lo = estimate_lo_budget(shell, profile, budget_rng, quantile_samples)
        if c_hi is not None:
            c_lo = min(c_lo, c_hi)
        tasks.append(
            Task(
                id=tid,
                period=period,
                deadline=period,
                criticality=crit,
                c_lo=c_lo,
                c_hi=c_hi,
                runnables=members,
            )
        )
    ts = TaskSet(tasks=tuple(tasks), agent_task=agent_task or default_agent_spec())
    return analysis.assign_priorities(ts, priority_policy)


def generate_taskset(cfg: GeneratorConfig, profile: PeriodProfile | None = None) -> TaskSet:
    """Full pipeline, a pure function of the seed.

    Each stage draws from its own stream derived from the master seed, so
    changes to one stage leave the draws of the others untouched.
    """
    profile = profile or default_profile()
    periods = sample_runnable_periods(cfg.num_runnables, profile, stream(cfg.seed, 0))
    crit_draw = stream(cfg.seed, 1).random(cfg.num_runnables)
    crits = [_HI if u < cfg.criticality_split else _LO for u in crit_draw]
    acets = assign_acets(periods, profile, stream(cfg.seed, 2))
    factor_rng = stream(cfg.seed, 3)
    runnables = []
    for period, crit, acet in zip(periods, crits, acets):
        bcet, wcet = derive_bcet_wcet(acet, period, profile, factor_rng)
        runnables.append(
            Runnable(
                period=period,
                bcet=bcet,
                acet=acet,
                wcet=wcet,
                criticality=crit,
                weibull=fit_weibull(bcet, acet, wcet),
            )
        )
    return build_tasks(
        runnables,
        profile,
        stream(cfg.seed, 4),
        quantile_samples=cfg.quantile_samples,
        priority_policy=cfg.priority_policy,
    )
