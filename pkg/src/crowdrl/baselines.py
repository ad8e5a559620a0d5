"""Comparison policies: random, greedy cosine, LinUCB and a daily-retrained
feedforward predictor. All of them speak the same act/observe protocol as
the DDQN driver, so the simulator treats every policy interchangeably.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InputError
from .requester_mdp import updated_task_quality
from .worker_mdp import _assemble_rows


def _context_rows(view, requester_variant: bool) -> np.ndarray:
    """Per-task context [task | worker (| qualities)] , matching the
    Q-network's row layout."""
    return _assemble_rows(view.task_feats, view.worker_feat,
                          view.task_qualities if requester_variant else None,
                          view.worker_quality)


def _quality_gains(view) -> np.ndarray:
    """Hypothetical quality gain of each task if this worker completed it."""
    q_w = view.worker_quality
    p = view.quality_exponent
    return np.array([updated_task_quality(q, q_w, p) - q
                     for q in view.task_qualities])


def _cut(order: np.ndarray, view, single: bool) -> list[int]:
    if single:
        return [int(order[0])]
    k = view.list_k
    return [int(i) for i in (order if k is None else order[:k])]


class RandomPolicy:
    """Uniform task pick, or a uniform random permutation in list mode."""

    name = "random"

    def __init__(self, single_task: bool = True):
        self.single_task = single_task

    def act(self, view, rng: np.random.Generator) -> list[int]:
        n = len(view.task_ids)
        if n == 0:
            raise InputError("empty pool")
        if self.single_task:
            return [int(rng.integers(n))]
        return _cut(rng.permutation(n), view, single=False)

    def observe(self, *args, **kwargs) -> None:
        pass


def greedy_cosine(worker_feat: np.ndarray, task_feats: np.ndarray,
                  quality_gains: np.ndarray | None = None) -> np.ndarray:
    """Cosine similarity of the worker feature to each task feature.

    An all-zero worker feature (cold start) yields uniform scores. The
    requester variant weighs each similarity by the task's quality gain.
    """
    worker_feat = np.asarray(worker_feat, dtype=np.float64)
    task_feats = np.asarray(task_feats, dtype=np.float64)
    w_norm = np.linalg.norm(worker_feat)
    if w_norm == 0.0:
        scores = np.zeros(task_feats.shape[0])
    else:
        t_norm = np.linalg.norm(task_feats, axis=1)
        t_norm[t_norm == 0.0] = 1.0
        scores = task_feats @ worker_feat / (t_norm * w_norm)
    if quality_gains is not None:
        scores = scores * np.asarray(quality_gains)
    return scores


class GreedyCosinePolicy:
    name = "greedy-cos"

    def __init__(self, requester_variant: bool = False, single_task: bool = True):
        self.requester_variant = requester_variant
        self.single_task = single_task

    def act(self, view, rng: np.random.Generator) -> list[int]:
        gains = _quality_gains(view) if self.requester_variant else None
        scores = greedy_cosine(view.worker_feat, view.task_feats, gains)
        order = np.argsort(-scores, kind="stable")
        return _cut(order, view, self.single_task)

    def observe(self, *args, **kwargs) -> None:
        pass


class LinUCBState:
    """Shared ridge model over the joint worker-task context: A = I + sum
    of x x^T, b = sum of r x. The confidence width uses A's inverse."""

    def __init__(self, dim: int, alpha: float = 1.0):
        self.dim = dim
        self.alpha = alpha
        self.A = np.eye(dim)
        self.b = np.zeros(dim)

    def scores(self, contexts: np.ndarray) -> np.ndarray:
        theta = np.linalg.solve(self.A, self.b)
        spread = np.einsum("nd,dn->n", contexts,
                           np.linalg.solve(self.A, contexts.T))
        return contexts @ theta + self.alpha * np.sqrt(np.maximum(spread, 0.0))

    def update(self, context: np.ndarray, reward: float) -> None:
        self.A += np.outer(context, context)
        self.b += reward * context


def linucb_score(state: LinUCBState, context: np.ndarray) -> float:
    return float(state.scores(np.asarray(context).reshape(1, -1))[0])


def linucb_update(state: LinUCBState, context: np.ndarray, reward: float) -> None:
    state.update(np.asarray(context, dtype=np.float64), reward)


class LinUCBPolicy:
    """Upper-confidence-bound policy over the joint worker-task context,
    updated after every single recommendation."""

    name = "linucb"

    def __init__(self, feature_dim: int, requester_variant: bool = False,
                 alpha: float = 1.0, single_task: bool = True):
        dim = 2 * feature_dim + (2 if requester_variant else 0)
        self.state = LinUCBState(dim, alpha)
        self.requester_variant = requester_variant
        self.single_task = single_task

    def act(self, view, rng: np.random.Generator) -> list[int]:
        contexts = _context_rows(view, self.requester_variant)
        order = np.argsort(-self.state.scores(contexts), kind="stable")
        return _cut(order, view, self.single_task)

    def observe(self, view, ranked_rows, completed_pos, quality_gain,
                *args, **kwargs) -> None:
        contexts = _context_rows(view, self.requester_variant)
        if completed_pos is None:
            examined = ranked_rows[:1] if self.single_task else ranked_rows
        else:
            examined = ranked_rows[: completed_pos + 1]
        for pos, row in enumerate(examined):
            success = completed_pos is not None and pos == completed_pos
            if self.requester_variant:
                reward = quality_gain if success else 0.0
            else:
                reward = 1.0 if success else 0.0
            self.state.update(contexts[row], reward)


class GreedyNNPolicy:
    """Two-hidden-layer regression of the feedback value from the joint
    context. The day's labeled pairs are buffered and the network is
    retrained for a fixed number of epochs whenever the day rolls over.
    """

    name = "greedy-nn"

    def __init__(self, feature_dim: int, requester_variant: bool = False,
                 hidden: int = 64, epochs: int = 5, learning_rate: float = 0.01,
                 batch_size: int = 32, seed: int = 0, single_task: bool = True):
        self.requester_variant = requester_variant
        self.single_task = single_task
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        dim = 2 * feature_dim + (2 if requester_variant else 0)
        rng = np.random.default_rng(seed)
        self.params = T.ParamSet(np.float64)
        self.params.add("w1", T.glorot_uniform((dim, hidden), rng))
        self.params.add("b1", np.zeros((1, hidden)))
        self.params.add("w2", T.glorot_uniform((hidden, hidden), rng))
        self.params.add("b2", np.zeros((1, hidden)))
        self.params.add("w3", T.glorot_uniform((hidden, 1), rng))
        self.params.add("b3", np.zeros((1, 1)))
        self.day_buffer: list[tuple[np.ndarray, float]] = []
        self.last_retrain_day: int | None = None
        self._rng = rng

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        v = self.params.values
        h1 = np.maximum(contexts @ v["w1"] + v["b1"], 0.0)
        h2 = np.maximum(h1 @ v["w2"] + v["b2"], 0.0)
        return (h2 @ v["w3"] + v["b3"])[:, 0]

    def act(self, view, rng: np.random.Generator) -> list[int]:
        scores = self.predict(_context_rows(view, self.requester_variant))
        order = np.argsort(-scores, kind="stable")
        return _cut(order, view, self.single_task)

    def observe(self, view, ranked_rows, completed_pos, quality_gain,
                *args, **kwargs) -> None:
        day = view.time // 1440
        if self.last_retrain_day is None:
            self.last_retrain_day = day
        elif day > self.last_retrain_day:
            # first event of a new day: train on yesterday's buffer
            self.retrain()
            self.last_retrain_day = day
        contexts = _context_rows(view, self.requester_variant)
        if completed_pos is None:
            examined = ranked_rows[:1] if self.single_task else ranked_rows
        else:
            examined = ranked_rows[: completed_pos + 1]
        for pos, row in enumerate(examined):
            success = completed_pos is not None and pos == completed_pos
            if self.requester_variant:
                y = quality_gain if success else 0.0
            else:
                y = 1.0 if success else 0.0
            self.day_buffer.append((contexts[row], y))

    def retrain(self) -> None:
        """Fixed-epoch minibatch SGD over the buffered day; then clear it."""
        if not self.day_buffer:
            return
        xs = np.stack([x for x, _ in self.day_buffer])
        ys = np.array([[y] for _, y in self.day_buffer])
        n = len(ys)
        for _ in range(self.epochs):
            order = self._rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                rows = order[lo: lo + self.batch_size]
                self.train_batch(xs[rows], ys[rows])
        self.day_buffer.clear()

    def train_batch(self, xs: np.ndarray, ys: np.ndarray) -> float:
        tape = T.Tape()
        x = T.constant(tape, xs)
        h1 = T.rff_forward(tape, x, self.params.leaf(tape, "w1"),
                           self.params.leaf(tape, "b1"))
        h2 = T.rff_forward(tape, h1, self.params.leaf(tape, "w2"),
                           self.params.leaf(tape, "b2"))
        pred = T.add_bias(tape, T.matmul(tape, h2, self.params.leaf(tape, "w3")),
                          self.params.leaf(tape, "b3"))
        diff = T.sub(tape, pred, T.constant(tape, ys))
        loss = T.scale(tape, T.sum_all(tape, T.mul(tape, diff, diff)),
                       1.0 / len(ys))
        self.params.zero_grads()
        tape.backward(loss)
        T.sgd_step(self.params, self.learning_rate)
        return float(loss.value[0, 0])
