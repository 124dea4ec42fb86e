"""DQN budget-tuning agent.

State: per task a (budget, last execution time) pair, min-max scaled by the
task's BCET/WCET and clamped to [0, 1]. Actions: raise one task's budget by
10% and cut two others by 5% each. The policy/target networks are plain
feedforward ReLU nets trained from replay memory with Adam on the squared
TD error; everything is numpy and deterministic given the seeds.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import analysis as rta
from .model import BudgetConfiguration, CriticalityLevel, TaskSet

REWARD_JOB_START = 0.1
REWARD_LO_OVERRUN = -1.0
REWARD_HI_OVERRUN = -2.0

#: Reward per scheduling event kind; unlisted kinds are worth 0.
EVENT_REWARDS = {
    "job_start": REWARD_JOB_START,
    "lo_overrun": REWARD_LO_OVERRUN,
    "hi_overrun": REWARD_HI_OVERRUN,
}

CHECKPOINT_MAGIC = b"AMCDQN1\0"
CHECKPOINT_VERSION = 1


class ModelCorruptionError(RuntimeError):
    """The network produced NaN/Inf outputs or holds non-finite weights."""


class CheckpointError(ValueError):
    """A model checkpoint is malformed or does not match the task set."""


@dataclass(frozen=True)
class Hyperparameters:
    max_memory: int = 200
    min_memory: int = 20
    gamma: float = 0.99
    target_update_frequency: int = 5
    learning_rate: float = 5e-5
    hidden_layers: tuple[float, ...] = (0.5,)  # multipliers of the task count
    batch_size: int = 6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eps_start: float = 0.9
    eps_end: float = 0.05
    eps_decay: float = 200.0  # agent activations
    train_steps_per_activation: int = 1
    store_rejected: bool = True
    # Restrict selection/exploration to actions that pass the run-time
    # admission check (computed exactly from the precomputed ceilings).
    mask_select: bool = False
    mask_explore: bool = False


#: The hidden-layer grid searched in the experiments, as multipliers of n.
HIDDEN_LAYOUT_GRID: tuple[tuple[float, ...], ...] = ((0.5,), (1.0, 0.5), (1.0, 0.5, 0.25))
BATCH_SIZE_GRID: tuple[int, ...] = (3, 6, 12)


def resolve_hidden(multipliers: Sequence[float], n: int) -> list[int]:
    """Hidden sizes for a task count, each rounded up to at least one node."""
    return [max(1, math.ceil(n * m)) for m in multipliers]


def hyperparameter_grid(base: Hyperparameters | None = None) -> list[Hyperparameters]:
    """The 9-model grid: hidden layouts x batch sizes, other fields fixed."""
    base = base or Hyperparameters()
    grid = []
    for layout in HIDDEN_LAYOUT_GRID:
        for batch in BATCH_SIZE_GRID:
            grid.append(
                Hyperparameters(
                    **{
                        **base.__dict__,
                        "hidden_layers": layout,
                        "batch_size": batch,
                    }
                )
            )
    return grid


# ---------------------------------------------------------------------------
# Action space

_ACTION_CACHE: dict[int, list[tuple[int, int, int]]] = {}


def action_count(n: int) -> int:
    return n * (n - 1) * (n - 2) // 2


def enumerate_actions(n: int) -> list[tuple[int, int, int]]:
    """All (up, down1, down2) triples with down1 < down2, in lexicographic order."""
    if n < 3:
        raise ValueError("the action space needs at least 3 tasks")
    cached = _ACTION_CACHE.get(n)
    if cached is None:
        cached = [
            (up, d1, d2)
            for up in range(n)
            for d1 in range(n)
            for d2 in range(d1 + 1, n)
            if up != d1 and up != d2
        ]
        assert len(cached) == action_count(n)
        _ACTION_CACHE[n] = cached
    return cached


def apply_action(
    budgets: Mapping[int, int], up: int, down1: int, down2: int
) -> dict[int, int]:
    """New budgets: +10% for ``up``, -5% for each down task, floor of one tick."""
    out = dict(budgets)
    out[up] = max(1, int(round(out[up] * 1.10)))
    out[down1] = max(1, int(round(out[down1] * 0.95)))
    out[down2] = max(1, int(round(out[down2] * 0.95)))
    return out


def reward_of(events: Iterable[str]) -> float:
    """Sum of event rewards over one observation window."""
    return sum(EVENT_REWARDS.get(kind, 0.0) for kind in events)


# ---------------------------------------------------------------------------
# State encoding

def encode_state(
    budgets: Mapping[int, int], last_exec: Mapping[int, int], ts: TaskSet
) -> np.ndarray:
    """2n-vector of per-task (budget, last execution time), min-max scaled.

    Scales are the task-level BCET and WCET; components are clamped to [0, 1]
    and a degenerate task (BCET == WCET) contributes zeros.
    """
    comps = []
    for t in sorted(ts.tasks, key=lambda t: t.id):
        lo, hi = t.bcet, t.wcet
        span = hi - lo
        for value in (budgets[t.id], last_exec.get(t.id, 0)):
            comps.append(0.0 if span <= 0 else min(1.0, max(0.0, (value - lo) / span)))
    return np.asarray(comps, dtype=np.float64)


# ---------------------------------------------------------------------------
# Network

class MLP:
    """Feedforward net: ReLU on hidden layers, linear output."""

    def __init__(self, dims: Sequence[int], weights: list[np.ndarray], biases: list[np.ndarray]):
        self.dims = list(dims)
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> "MLP":
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases)

    def copy(self) -> "MLP":
        return MLP(self.dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if i != last:
                np.maximum(a, 0.0, out=a)
        return a

    def forward(self, x: np.ndarray) -> np.ndarray:
        q = self.forward_batch(np.asarray(x, dtype=np.float64)[None, :])[0]
        if not np.all(np.isfinite(q)):
            raise ModelCorruptionError("non-finite Q-values")
        return q


def forward(model: MLP, state: np.ndarray) -> np.ndarray:
    return model.forward(state)


def select_action(
    model: MLP,
    state: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    valid_mask: np.ndarray | None = None,
) -> int:
    """Epsilon-greedy over the Q-values; ties go to the lowest action index."""
    if epsilon > 0.0 and rng.random() < epsilon:
        if valid_mask is None:
            return int(rng.integers(model.dims[-1]))
        choices = np.flatnonzero(valid_mask)
        return int(choices[rng.integers(len(choices))])
    q = model.forward(state)
    if valid_mask is not None:
        q = np.where(valid_mask, q, -np.inf)
    return int(np.argmax(q))


def greedy_action(q_values: np.ndarray) -> int:
    """Argmax with lowest-index tie-break (argmax of any strictly increasing
    transform of the Q-values selects the same index)."""
    return int(np.argmax(q_values))


class ActionAdmissionMask:
    """Exact vectorized image of the run-time admission check over all actions.

    The check is linear in the budgets, so each action's post-change left-hand
    sides are the current ones plus three column contributions. All quantities
    are integers held in float64 (exact below 2**53), so the mask agrees
    bit-for-bit with the engine-side validator.
    """

    def __init__(self, ts: TaskSet, eq5_check: bool = True):
        result = rta.amc_rtb_test(ts)
        if not result.schedulable:
            raise ValueError("admission mask requires a schedulable task set")
        tables = rta.precompute_ceilings(ts, result)
        tasks = sorted(ts.tasks, key=lambda t: t.id)
        self.task_ids = [t.id for t in tasks]
        pos = {tid: i for i, tid in enumerate(self.task_ids)}
        n = len(tasks)
        rows, rhs = [], []
        for t in tasks:
            if t.criticality is CriticalityLevel.HI:
                w = np.zeros(n)
                w[pos[t.id]] = 1.0
                for j, c in tables.hp_ceil[t.id].items():
                    w[pos[j]] = c
                rows.append(w)
                rhs.append(result.r_lo[t.id])
                w = np.zeros(n)
                for j, c in tables.hpl_ceil[t.id].items():
                    w[pos[j]] = c
                rows.append(w)
                rhs.append(t.deadline - tables.hph_const[t.id])
            elif eq5_check:
                w = np.zeros(n)
                w[pos[t.id]] = 1.0
                for j, c in tables.lo_ceil[t.id].items():
                    w[pos[j]] = c
                rows.append(w)
                rhs.append(t.deadline)
        self.W = np.array(rows)
        self.R = np.array(rhs, dtype=np.float64)
        triples = np.array(enumerate_actions(n))
        self.up_idx = triples[:, 0]
        self.d1_idx = triples[:, 1]
        self.d2_idx = triples[:, 2]

    def mask(self, budgets: Mapping[int, int]) -> np.ndarray:
        b = np.array([budgets[tid] for tid in self.task_ids], dtype=np.float64)
        up_delta = np.maximum(1.0, np.rint(b * 1.10)) - b
        down_delta = np.maximum(1.0, np.rint(b * 0.95)) - b
        lhs_now = self.W @ b
        up_cols = self.W * up_delta
        down_cols = self.W * down_delta
        lhs = (
            lhs_now[:, None]
            + up_cols[:, self.up_idx]
            + down_cols[:, self.d1_idx]
            + down_cols[:, self.d2_idx]
        )
        return np.all(lhs <= self.R[:, None], axis=0)


# ---------------------------------------------------------------------------
# Replay memory and training

@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


class ReplayMemory:
    """FIFO ring; sampling is uniform without replacement."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._pos = 0

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._pos] = t
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model: MLP) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in model.weights],
            v_w=[np.zeros_like(w) for w in model.weights],
            m_b=[np.zeros_like(b) for b in model.biases],
            v_b=[np.zeros_like(b) for b in model.biases],
        )


@dataclass
class DqnTrainState:
    """Everything needed to continue training: both nets, optimizer, counters."""

    policy: MLP
    target: MLP
    opt: AdamState
    n_tasks: int
    train_steps: int = 0
    activations: int = 0

    @classmethod
    def init(cls, n_tasks: int, hp: Hyperparameters, rng: np.random.Generator) -> "DqnTrainState":
        dims = [2 * n_tasks, *resolve_hidden(hp.hidden_layers, n_tasks), action_count(n_tasks)]
        policy = MLP.init(dims, rng)
        return cls(
            policy=policy, target=policy.copy(), opt=AdamState.for_model(policy), n_tasks=n_tasks
        )


def td_targets(target: MLP, rewards: np.ndarray, next_states: np.ndarray, gamma: float) -> np.ndarray:
    q_next = target.forward_batch(next_states)
    return rewards + gamma * q_next.max(axis=1)


def td_loss_and_gradients(
    policy: MLP, states: np.ndarray, actions: np.ndarray, targets: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared TD error and its gradients.

    Only the taken action's output contributes to the error, so the gradient
    flows through a single output unit per transition.
    """
    batch = states.shape[0]
    acts = [states]
    pre = []
    a = states
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    q = acts[-1]
    taken = q[np.arange(batch), actions]
    err = taken - targets
    loss = float(np.mean(err**2))

    delta = np.zeros_like(q)
    delta[np.arange(batch), actions] = 2.0 * err / batch
    grads_w: list[np.ndarray] = [None] * len(policy.weights)
    grads_b: list[np.ndarray] = [None] * len(policy.weights)
    for i in range(last, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ policy.weights[i].T) * (pre[i - 1] > 0.0)
    return loss, grads_w, grads_b


def adam_update(
    model: MLP,
    opt: AdamState,
    grads_w: list[np.ndarray],
    grads_b: list[np.ndarray],
    hp: Hyperparameters,
) -> None:
    opt.t += 1
    b1, b2, eps, lr = hp.adam_beta1, hp.adam_beta2, hp.adam_eps, hp.learning_rate
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for params, grads, ms, vs in (
        (model.weights, grads_w, opt.m_w, opt.v_w),
        (model.biases, grads_b, opt.m_b, opt.v_b),
    ):
        for p, g, m, v in zip(params, grads, ms, vs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_step(
    state: DqnTrainState, memory: ReplayMemory, hp: Hyperparameters, rng: np.random.Generator
) -> float | None:
    """One DQN update from replay memory; no-op (None) below the memory floor."""
    if len(memory) < hp.min_memory:
        return None
    batch = memory.sample(hp.batch_size, rng)
    states = np.stack([t.state for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    rewards = np.array([t.reward for t in batch])
    actions = np.array([t.action for t in batch])
    y = td_targets(state.target, rewards, next_states, hp.gamma)
    loss, gw, gb = td_loss_and_gradients(state.policy, states, actions, y)
    adam_update(state.policy, state.opt, gw, gb, hp)
    state.train_steps += 1
    if state.train_steps % hp.target_update_frequency == 0:
        state.target = state.policy.copy()
    return loss


# ---------------------------------------------------------------------------
# Checkpoint format (see README "File formats"):
#   magic "AMCDQN1\0" | u32 version | u32 n_tasks | u32 action_count
#   | u32 layer_count L | L+1 x u32 dims | u64 adam_t | u64 train_steps
#   | u64 activations | flat little-endian float64 arrays, in order:
#   policy W1,b1..WL,bL, target W1,b1..WL,bL, adam mW1,mb1.., adam vW1,vb1..

def _pack_arrays(chunks: list[bytes], model_or_lists) -> None:
    for arr in model_or_lists:
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_model(state: DqnTrainState) -> bytes:
    dims = state.policy.dims
    header = struct.pack(
        f"<8sIII I{len(dims)}I QQQ".replace(" ", ""),
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        state.n_tasks,
        dims[-1],
        len(state.policy.weights),
        *dims,
        state.opt.t,
        state.train_steps,
        state.activations,
    )
    chunks = [header]
    for net in (state.policy, state.target):
        for w, b in zip(net.weights, net.biases):
            _pack_arrays(chunks, [w, b])
    for ms, bs in ((state.opt.m_w, state.opt.m_b), (state.opt.v_w, state.opt.v_b)):
        for w, b in zip(ms, bs):
            _pack_arrays(chunks, [w, b])
    return b"".join(chunks)


def load_model(data: bytes) -> DqnTrainState:
    base = struct.calcsize("<8sIIII")
    if len(data) < base or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    _, version, n_tasks, out_dim, layers = struct.unpack("<8sIIII", data[:base])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = base
    dims = list(struct.unpack(f"<{layers + 1}I", data[off : off + 4 * (layers + 1)]))
    off += 4 * (layers + 1)
    adam_t, train_steps, activations = struct.unpack("<QQQ", data[off : off + 24])
    off += 24
    if dims[-1] != out_dim or dims[-1] != action_count(n_tasks) or dims[0] != 2 * n_tasks:
        raise CheckpointError("checkpoint dimensions are inconsistent")

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal off
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
        return arr

    def take_net() -> MLP:
        weights, biases = [], []
        for i in range(layers):
            weights.append(take((dims[i], dims[i + 1])))
            biases.append(take((dims[i + 1],)))
        return MLP(dims, weights, biases)

    policy = take_net()
    target = take_net()
    opt = AdamState(m_w=[], v_w=[], m_b=[], v_b=[], t=adam_t)
    for mw_list, mb_list in ((opt.m_w, opt.m_b), (opt.v_w, opt.v_b)):
        for i in range(layers):
            mw_list.append(take((dims[i], dims[i + 1])))
            mb_list.append(take((dims[i + 1],)))
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return DqnTrainState(
        policy=policy,
        target=target,
        opt=opt,
        n_tasks=n_tasks,
        train_steps=train_steps,
        activations=activations,
    )


# ---------------------------------------------------------------------------
# Engine-facing hook

class DqnAgentHook:
    """Owns one DQN and turns engine observations into budget proposals.

    Called at every agent-job start with the current state snapshot and the
    reward accrued since the previous proposal was applied; training mode
    pushes the completed transition and runs one update per activation.
    """

    def __init__(
        self,
        ts: TaskSet,
        hp: Hyperparameters | None = None,
        seed: int = 0,
        training: bool = True,
        state: DqnTrainState | None = None,
        eq5_check: bool = True,
    ) -> None:
        self.ts = ts
        self.hp = hp or Hyperparameters()
        self.training = training
        n = len(ts.tasks)
        if n < 3:
            raise ValueError("the agent needs at least 3 application tasks")
        self.task_ids = [t.id for t in sorted(ts.tasks, key=lambda t: t.id)]
        self.actions = enumerate_actions(n)
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(100,)))
        if state is None:
            state = DqnTrainState.init(n, self.hp, self.rng)
        if state.n_tasks != n:
            raise CheckpointError(
                f"checkpoint was trained for {state.n_tasks} tasks, task set has {n}"
            )
        self.state = state
        self.memory = ReplayMemory(self.hp.max_memory)
        self.admission = (
            ActionAdmissionMask(ts, eq5_check=eq5_check)
            if (self.hp.mask_select or self.hp.mask_explore)
            else None
        )
        self._pending: tuple[np.ndarray, int] | None = None
        self._last_applied: bool | None = None
        self.log: list[dict] = []
        self.rejected_actions = 0

    def epsilon(self) -> float:
        if not self.training:
            return 0.0
        hp = self.hp
        return hp.eps_end + (hp.eps_start - hp.eps_end) * math.exp(
            -self.state.activations / hp.eps_decay
        )

    def _choose(self, s: np.ndarray, eps: float, budgets: Mapping[int, int]) -> int:
        mask = None
        if self.admission is not None:
            mask = self.admission.mask(budgets)
            if not mask.any():
                mask = None
        if eps > 0.0 and self.rng.random() < eps:
            use = mask if (self.hp.mask_explore and mask is not None) else None
            if use is None:
                return int(self.rng.integers(len(self.actions)))
            choices = np.flatnonzero(use)
            return int(choices[self.rng.integers(len(choices))])
        q = self.state.policy.forward(s)
        if self.hp.mask_select and mask is not None:
            q = np.where(mask, q, -np.inf)
        return greedy_action(q)

    def __call__(self, obs) -> dict[int, int]:
        s = encode_state(obs.budgets, obs.last_exec, self.ts)
        loss = None
        if self.training and self._pending is not None:
            prev_s, prev_a = self._pending
            if self.hp.store_rejected or self._last_applied:
                self.memory.push(Transition(prev_s, prev_a, obs.reward_since_last, s))
            for _ in range(self.hp.train_steps_per_activation):
                loss = train_step(self.state, self.memory, self.hp, self.rng)
        eps = self.epsilon()
        a = self._choose(s, eps, obs.budgets)
        up, d1, d2 = self.actions[a]
        proposal = apply_action(
            obs.budgets, self.task_ids[up], self.task_ids[d1], self.task_ids[d2]
        )
        self._pending = (s, a)
        self.state.activations += 1
        self.log.append(
            {
                "activation": self.state.activations,
                "time": obs.time,
                "epsilon": eps,
                "reward": obs.reward_since_last,
                "loss": loss,
                "rejected_so_far": self.rejected_actions,
            }
        )
        return proposal

    def notify_decision(self, applied: bool) -> None:
        self._last_applied = applied
        if not applied:
            self.rejected_actions += 1
