"""Worker-benefit MDP: reward, return-gap model, future states and learning.

The worker-side reward is binary (a recommended task was completed or
not). The future state occurs when the same worker returns; the return
delay is modeled by an empirical histogram over minute gaps in
[1, 10080] (one week). Because the only change to the task pool within
that window is expiry, the per-minute mixture over future states
collapses to one state per expiry interval, so the TD target needs at
most pool-size + 1 distinct evaluations.

Learning follows the double-Q rule: the online network selects the best
future action, the target network evaluates it. Transitions live in a
small ring buffer with proportional prioritized sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError
from .qnetwork import QNetwork, StateTensor

WORKER_GAP_MAX = 10080  # minutes in one week


class GapHistogram:
    """Empirical distribution of integer minute gaps on a fixed support.

    Laplace smoothing (default 1/support_size) keeps the distribution
    uniform before any observation and strictly positive afterwards.
    Counts are integers and the smoothing constant is a rational, so
    grouped interval masses can be computed exactly.
    """

    def __init__(self, lo: int, hi: int, smoothing: Fraction | float | None = None):
        if hi < lo:
            raise InputError(f"empty gap support [{lo}, {hi}]")
        self.lo = lo
        self.hi = hi
        self.size = hi - lo + 1
        if smoothing is None:
            smoothing = Fraction(1, self.size)
        self.smoothing = Fraction(smoothing)
        if self.smoothing < 0:
            raise InputError("smoothing must be nonnegative")
        self.counts = np.zeros(self.size, dtype=np.int64)
        self.total = 0
        self.clamp_warnings = 0

    def _clamp(self, gap: int) -> int:
        if gap < self.lo or gap > self.hi:
            self.clamp_warnings += 1
            return min(max(gap, self.lo), self.hi)
        return gap

    def update(self, gap: int) -> None:
        self.counts[self._clamp(int(gap)) - self.lo] += 1
        self.total += 1

    def prob(self, gap: int) -> float:
        gap = min(max(int(gap), self.lo), self.hi)
        num = self.counts[gap - self.lo] + self.smoothing
        return float(num / self._denominator())

    def _denominator(self) -> Fraction:
        return self.total + self.smoothing * self.size

    def prob_array(self) -> np.ndarray:
        """Probability of every gap in [lo, hi], summing to 1."""
        denom = float(self._denominator())
        return (self.counts + float(self.smoothing)) / denom

    def mass_exact(self, a: int, b: int) -> Fraction:
        """Exact probability of the gap falling in [a, b] (clipped)."""
        a, b = max(a, self.lo), min(b, self.hi)
        if b < a:
            return Fraction(0)
        count = int(self.counts[a - self.lo: b - self.lo + 1].sum())
        return (count + self.smoothing * (b - a + 1)) / self._denominator()

    def state_dict(self) -> dict:
        return {
            "lo": self.lo, "hi": self.hi,
            "smoothing": [self.smoothing.numerator, self.smoothing.denominator],
            "counts": self.counts.tolist(), "total": self.total,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "GapHistogram":
        hist = cls(d["lo"], d["hi"], Fraction(*d["smoothing"]))
        hist.counts = np.asarray(d["counts"], dtype=np.int64)
        hist.total = int(d["total"])
        return hist


def worker_gap_histogram(smoothing: Fraction | float | None = None) -> GapHistogram:
    """Return-gap histogram for the same worker coming back, in minutes."""
    return GapHistogram(1, WORKER_GAP_MAX, smoothing)


def reward_w(completed: bool) -> float:
    """1 if the worker completed a recommended task, else 0."""
    return 1.0 if completed else 0.0


# --- transitions and replay ----------------------------------------------


@dataclass
class TransitionRecord:
    """One stored interaction: the decision state, the action row, the
    observed reward, and everything needed to rebuild future states."""

    worker_id: int
    timestamp: int
    task_ids: list[int]
    task_feats: np.ndarray          # [n, feat_dim]
    deadlines: np.ndarray           # [n] minutes
    task_qualities: np.ndarray      # [n] at decision time
    worker_feat: np.ndarray
    worker_quality: float
    action_row: int
    reward: float
    future_worker_feat: np.ndarray  # equals worker_feat when reward == 0
    future_task_qualities: np.ndarray
    priority: float = 1.0

    def __post_init__(self) -> None:
        if self.priority <= 0:
            raise InputError("transition priority must be positive")
        if not 0 <= self.action_row < len(self.task_ids):
            raise InputError("action row outside the stored pool")

    @property
    def pool_size(self) -> int:
        return len(self.task_ids)

    def state(self, quality_mode: bool = False) -> StateTensor:
        """Rebuild the decision-time state tensor (no extra padding)."""
        x = _assemble_rows(self.task_feats, self.worker_feat,
                           self.task_qualities if quality_mode else None,
                           self.worker_quality)
        return StateTensor(x=x, n_active=self.pool_size)


def _assemble_rows(task_feats: np.ndarray, worker_feat: np.ndarray,
                   task_qualities: np.ndarray | None,
                   worker_quality: float) -> np.ndarray:
    n = task_feats.shape[0]
    blocks = [task_feats, np.broadcast_to(worker_feat, (n, len(worker_feat)))]
    if task_qualities is not None:
        blocks.append(np.asarray(task_qualities, dtype=np.float64).reshape(n, 1))
        blocks.append(np.full((n, 1), worker_quality))
    return np.concatenate(blocks, axis=1)


class ReplayBuffer:
    """Fixed-capacity ring with proportional prioritized sampling.

    Sampling probability is priority**alpha; new records enter at the
    current maximum priority so fresh experience is revisited promptly.
    """

    def __init__(self, capacity: int = 1000, alpha: float = 0.6,
                 priority_floor: float = 1e-3):
        if capacity < 1:
            raise InputError("buffer capacity must be positive")
        self.capacity = capacity
        self.alpha = alpha
        self.priority_floor = priority_floor
        self.records: list[TransitionRecord] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self.records)

    def add(self, record: TransitionRecord) -> None:
        record.priority = self.max_priority()
        if len(self.records) < self.capacity:
            self.records.append(record)
        else:
            self.records[self._cursor] = record
            self._cursor = (self._cursor + 1) % self.capacity

    def max_priority(self) -> float:
        if not self.records:
            return 1.0
        return max(r.priority for r in self.records)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[int]:
        if not self.records:
            raise InputError("cannot sample from an empty buffer")
        weights = np.array([r.priority for r in self.records]) ** self.alpha
        probs = weights / weights.sum()
        picks = rng.choice(len(self.records), size=batch_size, p=probs)
        return [int(i) for i in picks]

    def update_priority(self, index: int, td_error: float) -> None:
        self.records[index].priority = abs(td_error) + self.priority_floor

    def dump(self, path: str) -> None:
        """Line-delimited JSON of every stored transition, for debugging."""
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps({
                    "worker_id": rec.worker_id,
                    "timestamp": rec.timestamp,
                    "task_ids": rec.task_ids,
                    "action_row": rec.action_row,
                    "reward": rec.reward,
                    "priority": rec.priority,
                }) + "\n")


# --- future states ---------------------------------------------------------


@dataclass
class FutureState:
    """One future-state branch: ``state`` is None on terminal branches
    (empty pool), which contribute zero to the TD target."""

    state: StateTensor | None
    prob: float
    survivors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def predict_future_states_w(record: TransitionRecord,
                            hist: GapHistogram) -> list[FutureState]:
    """Future states for the same worker's return, grouped by pool change.

    The return gap g ranges over the histogram support; the pool at
    t + g loses exactly the tasks whose deadline falls inside the
    window, so [lo, hi] partitions at the distinct expiry offsets. Each
    cell contributes one state (the surviving tasks, the post-feedback
    worker feature) weighted by the gap mass of the cell. Probabilities
    sum to one; at most pool_size + 1 branches are produced.
    """
    lo, hi = hist.lo, hist.hi
    offsets = record.deadlines.astype(np.int64) - record.timestamp
    # task alive at gap g iff g < offset
    cuts = np.unique(offsets[(offsets > lo) & (offsets <= hi)])
    boundaries = [lo] + [int(c) for c in cuts] + [hi + 1]
    out: list[FutureState] = []
    for a, b in zip(boundaries, boundaries[1:]):
        prob = float(hist.mass_exact(a, b - 1))
        alive = np.flatnonzero(offsets > a)
        if alive.size == 0:
            out.append(FutureState(state=None, prob=prob))
            continue
        x = _assemble_rows(record.task_feats[alive], record.future_worker_feat,
                           None, record.worker_quality)
        out.append(FutureState(state=StateTensor(x=x, n_active=alive.size),
                               prob=prob, survivors=alive))
    return out


# --- TD targets and the training step --------------------------------------


def _future_value(qnet: QNetwork, futures: Sequence[FutureState],
                  double_q: bool = True) -> float:
    """Expected future value sum_s' Pr(s') * Q~(s', best action)."""
    live = [f for f in futures if f.state is not None]
    if not live:
        return 0.0
    n_max = max(f.state.n_active for f in live)
    row_dim = live[0].state.row_dim
    xs = np.zeros((len(live), n_max, row_dim))
    counts = np.zeros(len(live), dtype=np.int64)
    for i, f in enumerate(live):
        xs[i, : f.state.n_active] = f.state.x[: f.state.n_active]
        counts[i] = f.state.n_active
    q_online = qnet.forward_batch(xs, counts, use_target=False)
    if double_q:
        best = q_online.argmax(axis=1)
        q_eval = qnet.forward_batch(xs, counts, use_target=True)
        values = q_eval[np.arange(len(live)), best]
    else:
        values = q_online.max(axis=1)
    return float(sum(f.prob * v for f, v in zip(live, values)))


def td_target_w(record: TransitionRecord, futures: Sequence[FutureState],
                qnet: QNetwork, gamma: float, double_q: bool = True) -> float:
    """y = r + gamma * sum over future branches of Pr * Q~(s', a*)."""
    if gamma == 0.0:
        return record.reward
    return record.reward + gamma * _future_value(qnet, futures, double_q)


def train_step(buffer: ReplayBuffer, qnet: QNetwork,
               predictor: Callable[[TransitionRecord], list[FutureState]],
               gamma: float, learning_rate: float, batch_size: int,
               rng: np.random.Generator, quality_mode: bool = False,
               double_q: bool = True) -> float:
    """One prioritized mini-batch update of the online network.

    Samples by priority, computes the double-Q targets (targets are
    constants: gradients flow only through Q(s, a)), applies one SGD
    step and refreshes the sampled priorities with the new TD errors.
    Returns the mean squared TD error.
    """
    indices = buffer.sample(batch_size, rng)
    records = [buffer.records[i] for i in indices]

    if gamma == 0.0:
        targets = [rec.reward for rec in records]
    else:
        targets = []
        # One batched evaluation across every live branch of every sample.
        branch_owner: list[int] = []
        branch_prob: list[float] = []
        branch_states: list[StateTensor] = []
        for j, rec in enumerate(records):
            for f in predictor(rec):
                if f.state is not None:
                    branch_owner.append(j)
                    branch_prob.append(f.prob)
                    branch_states.append(f.state)
        future_term = np.zeros(len(records))
        if branch_states:
            n_max = max(s.n_active for s in branch_states)
            row_dim = branch_states[0].row_dim
            xs = np.zeros((len(branch_states), n_max, row_dim))
            counts = np.zeros(len(branch_states), dtype=np.int64)
            for i, s in enumerate(branch_states):
                xs[i, : s.n_active] = s.x[: s.n_active]
                counts[i] = s.n_active
            q_online = qnet.forward_batch(xs, counts, use_target=False)
            if double_q:
                best = q_online.argmax(axis=1)
                vals = qnet.forward_batch(xs, counts, use_target=True)[
                    np.arange(len(branch_states)), best]
            else:
                vals = q_online.max(axis=1)
            np.add.at(future_term, branch_owner, np.asarray(branch_prob) * vals)
        targets = [rec.reward + gamma * future_term[j]
                   for j, rec in enumerate(records)]

    qnet.online.zero_grads()
    tape = T.Tape()
    td_errors = []
    sq_nodes = []
    for rec, y in zip(records, targets):
        q_all = qnet.forward_node(tape, rec.state(quality_mode))
        q_a = T.row_slice(tape, q_all, rec.action_row, rec.action_row + 1)
        diff = T.sub(tape, q_a, T.constant(tape, np.array([[y]]),
                                           dtype=qnet.online.dtype))
        sq_nodes.append(T.mul(tape, diff, diff))
        td_errors.append(float(diff.value[0, 0]))
    total = sq_nodes[0]
    for node in sq_nodes[1:]:
        total = T.add(tape, total, node)
    loss = T.scale(tape, total, 1.0 / len(sq_nodes))
    tape.backward(loss)
    T.sgd_step(qnet.online, learning_rate)

    for idx, err in zip(indices, td_errors):
        buffer.update_priority(idx, err)
    return float(loss.value[0, 0])


def train_step_w(buffer: ReplayBuffer, qnet: QNetwork, hist: GapHistogram,
                 gamma: float, learning_rate: float, batch_size: int,
                 rng: np.random.Generator, double_q: bool = True) -> float:
    return train_step(buffer, qnet,
                      lambda rec: predict_future_states_w(rec, hist),
                      gamma, learning_rate, batch_size, rng,
                      quality_mode=False, double_q=double_q)


# --- feedback storage -------------------------------------------------------


def store_feedback(buffer: ReplayBuffer, context: dict,
                   ranked_rows: Sequence[int], completed_pos: int | None,
                   completed_reward: float, single_task: bool) -> int:
    """Store cascade-consistent transitions for one worker interaction.

    The worker examines the ranked list top-down and stops at the first
    completion: every rank above it yields a failed transition (reward
    0, unchanged worker feature), the completed rank a successful one.
    With no completion, a single-task interaction stores one failure;
    a list interaction stores a failure for every shown task (the
    worker examined the whole list without completing). Returns the
    number of records stored.
    """
    if not ranked_rows:
        raise InputError("cannot store feedback for an empty action list")
    if completed_pos is None:
        examined = ranked_rows[:1] if single_task else list(ranked_rows)
    else:
        examined = list(ranked_rows[: completed_pos + 1])
    stored = 0
    for pos, row in enumerate(examined):
        success = completed_pos is not None and pos == completed_pos
        buffer.add(TransitionRecord(
            worker_id=context["worker_id"],
            timestamp=context["timestamp"],
            task_ids=context["task_ids"],
            task_feats=context["task_feats"],
            deadlines=context["deadlines"],
            task_qualities=context["task_qualities"],
            worker_feat=context["worker_feat"],
            worker_quality=context["worker_quality"],
            action_row=int(row),
            reward=completed_reward if success else 0.0,
            future_worker_feat=(context["future_worker_feat"] if success
                                else context["worker_feat"]),
            future_task_qualities=(context["future_task_qualities"] if success
                                   else context["task_qualities"]),
        ))
        stored += 1
    return stored


def store_feedback_w(buffer: ReplayBuffer, context: dict,
                     ranked_rows: Sequence[int], completed_pos: int | None,
                     single_task: bool) -> int:
    """Worker-benefit storage: the completed transition carries reward 1."""
    return store_feedback(buffer, context, ranked_rows, completed_pos,
                          completed_reward=1.0, single_task=single_task)
