"""Action selection: head aggregation, ranking, exploration, DDQN driver.

The two Q heads are mixed by a scalar balance weight; the mixed scores
are either argmax-picked (single-task mode) or sorted into a ranked list.
Exploration differs by mode: single-task uses epsilon-greedy where epsilon
is the probability of exploiting the argmax and rises over time, list
mode perturbs all scores with zero-mean Gaussian noise whose scale tracks
the spread of the current Q values and decays as learning matures.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import worker_mdp as W
from . import requester_mdp as R
from .errors import InputError
from .qnetwork import QNetwork, QNetworkConfig, StateTensor


@dataclass(frozen=True)
class LinearSchedule:
    """Linear ramp from ``start`` to ``end`` over ``steps`` events, then flat."""

    start: float
    end: float
    steps: int

    def value(self, t: int) -> float:
        if self.steps <= 0 or t >= self.steps:
            return self.end
        return self.start + (self.end - self.start) * (t / self.steps)


@dataclass(frozen=True)
class PolicyConfig:
    balance_weight: float = 0.25
    mode: str = "single"            # "single" or "list"
    list_k: int | None = None       # None: rank the whole pool
    epsilon: LinearSchedule = LinearSchedule(0.9, 0.98, 5000)
    noise_decay: LinearSchedule = LinearSchedule(1.0, 0.1, 5000)

    def __post_init__(self) -> None:
        if not 0.0 <= self.balance_weight <= 1.0:
            raise InputError("balance_weight must lie in [0, 1]")
        if self.mode not in ("single", "list"):
            raise InputError(f"unknown action mode {self.mode!r}")


def aggregate(q_worker: np.ndarray, q_requester: np.ndarray,
              balance_weight: float) -> np.ndarray:
    """Elementwise mix w * Qw + (1 - w) * Qr over the same task ordering."""
    q_worker = np.asarray(q_worker, dtype=np.float64)
    q_requester = np.asarray(q_requester, dtype=np.float64)
    if q_worker.shape != q_requester.shape:
        raise InputError(
            f"head outputs differ in length: {q_worker.shape} vs {q_requester.shape}"
        )
    return balance_weight * q_worker + (1.0 - balance_weight) * q_requester


def rank_tasks(q: np.ndarray) -> np.ndarray:
    """Task indices sorted by Q descending; ties keep ascending index order."""
    q = np.asarray(q)
    if q.size == 0:
        raise InputError("cannot rank an empty Q vector")
    return np.argsort(-q, kind="stable")


def explore(q: np.ndarray, epsilon: float, noise_decay: float,
            rng: np.random.Generator, mode: str = "single"):
    """Exploration wrapper around the greedy choice.

    Single-task mode: exploit the argmax with probability ``epsilon``,
    otherwise pick a uniform random task; returns one index. List mode:
    with probability ``epsilon`` rank after adding Gaussian noise with
    std = std(Q) * noise_decay; returns a permutation of all indices.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0:
        raise InputError("cannot act on an empty Q vector")
    if mode == "single":
        if rng.random() < epsilon:
            return int(q.argmax())
        return int(rng.integers(q.size))
    if mode == "list":
        if rng.random() < epsilon:
            noisy = q + rng.normal(0.0, q.std() * noise_decay, size=q.size)
            return rank_tasks(noisy)
        return rank_tasks(q)
    raise InputError(f"unknown action mode {mode!r}")


class DdqnPolicy:
    """Full dual-head agent: two set Q-networks, two replay buffers, the
    arrival statistics, exploration schedules and the per-feedback
    training loop. Exposes the same act/observe protocol the simulator
    uses for every baseline."""

    name = "ddqn"

    def __init__(self, feature_dim: int, policy: PolicyConfig | None = None,
                 d_model: int = 128, n_heads: int = 4,
                 gamma_w: float = 0.3, gamma_r: float = 0.5,
                 learning_rate: float = 1e-3, batch_size: int = 64,
                 buffer_capacity: int = 1000, target_copy_every: int = 100,
                 train_every: int = 1, predictor_mode: str = "expectation",
                 priority_alpha: float = 0.6, priority_floor: float = 1e-3,
                 dtype=np.float32, seed: int = 0):
        self.policy = policy if policy is not None else PolicyConfig()
        self.feature_dim = feature_dim
        self.gamma_w, self.gamma_r = gamma_w, gamma_r
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.target_copy_every = target_copy_every
        self.train_every = train_every
        self.predictor_mode = predictor_mode
        row_w = 2 * feature_dim
        row_r = 2 * feature_dim + 2
        self.qnet_w = QNetwork(QNetworkConfig(row_w, d_model, n_heads, dtype, seed))
        self.qnet_r = QNetwork(QNetworkConfig(row_r, d_model, n_heads, dtype, seed + 1))
        self.buffer_w = W.ReplayBuffer(buffer_capacity, priority_alpha, priority_floor)
        self.buffer_r = W.ReplayBuffer(buffer_capacity, priority_alpha, priority_floor)
        self.arrival_model = R.ArrivalModel(feature_dim)
        self.directory = R.WorkerDirectory(feature_dim)
        # heads whose output cannot influence the mixed score are not trained
        self.train_worker_head = self.policy.balance_weight > 0.0
        self.train_requester_head = self.policy.balance_weight < 1.0
        self.feedback_count = 0
        self.train_iterations = 0
        self.last_update_seconds = 0.0
        self._rng = np.random.default_rng(seed + 17)

    # -- acting -------------------------------------------------------------

    def scores(self, view) -> np.ndarray:
        w = self.policy.balance_weight
        q_w = np.zeros(len(view.task_ids))
        q_r = np.zeros(len(view.task_ids))
        if w > 0.0:
            state = StateTensor(
                x=W._assemble_rows(view.task_feats, view.worker_feat, None,
                                   view.worker_quality),
                n_active=len(view.task_ids))
            q_w = self.qnet_w.forward(state)
        if w < 1.0:
            state = StateTensor(
                x=W._assemble_rows(view.task_feats, view.worker_feat,
                                   view.task_qualities, view.worker_quality),
                n_active=len(view.task_ids))
            q_r = self.qnet_r.forward(state)
        return aggregate(q_w, q_r, w)

    def act(self, view, rng: np.random.Generator) -> list[int]:
        q = self.scores(view)
        eps = self.policy.epsilon.value(self.feedback_count)
        decay = self.policy.noise_decay.value(self.feedback_count)
        if self.policy.mode == "single":
            return [explore(q, eps, decay, rng, "single")]
        order = explore(q, eps, decay, rng, "list")
        k = self.policy.list_k
        return [int(i) for i in (order if k is None else order[:k])]

    # -- learning -----------------------------------------------------------

    def observe(self, view, ranked_rows: list[int],
                completed_pos: int | None, quality_gain: float,
                future_worker_feat: np.ndarray,
                future_task_qualities: np.ndarray) -> None:
        """Fold one feedback event into statistics, buffers and networks."""
        started = _time.perf_counter()
        self.arrival_model.observe(view.worker_id, view.time,
                                   view.worker_feat, view.worker_quality)
        self.directory.upsert(view.worker_id, future_worker_feat,
                              view.worker_quality)
        context = {
            "worker_id": view.worker_id,
            "timestamp": view.time,
            "task_ids": list(view.task_ids),
            "task_feats": view.task_feats,
            "deadlines": view.deadlines,
            "task_qualities": view.task_qualities,
            "worker_feat": view.worker_feat,
            "worker_quality": view.worker_quality,
            "future_worker_feat": future_worker_feat,
            "future_task_qualities": future_task_qualities,
        }
        single = self.policy.mode == "single"
        W.store_feedback_w(self.buffer_w, context, ranked_rows, completed_pos,
                           single_task=single)
        W.store_feedback(self.buffer_r, context, ranked_rows, completed_pos,
                         completed_reward=quality_gain, single_task=single)
        self.feedback_count += 1
        if self.feedback_count % self.train_every == 0:
            self._train_once()
        self.last_update_seconds = _time.perf_counter() - started

    def _train_once(self) -> None:
        if self.train_worker_head and len(self.buffer_w):
            W.train_step_w(self.buffer_w, self.qnet_w,
                           self.arrival_model.phi_worker, self.gamma_w,
                           self.learning_rate, self.batch_size, self._rng)
        if self.train_requester_head and len(self.buffer_r):
            R.train_step_r(self.buffer_r, self.qnet_r, self.arrival_model,
                           self.directory, self.gamma_r, self.learning_rate,
                           self.batch_size, self._rng,
                           mode=self.predictor_mode)
        self.train_iterations += 1
        if self.train_iterations % self.target_copy_every == 0:
            self.qnet_w.copy_to_target()
            self.qnet_r.copy_to_target()

    # -- persistence ----------------------------------------------------------

    def save(self, path_prefix: str) -> None:
        self.qnet_w.save(path_prefix + ".worker.npz")
        self.qnet_r.save(path_prefix + ".requester.npz")
        self.arrival_model.save(path_prefix + ".arrivals.json")
