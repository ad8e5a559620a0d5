"""Requester-benefit MDP: task quality, arrivals and the quality learner.

Task quality follows the Dixit-Stiglitz aggregate (sum of completer
qualities raised to p, re-rooted), which interpolates between a plain sum
at p = 1 and the maximum as p grows: each extra completion helps, with
diminishing returns. The reward for this side is the quality gain of the
completed task.

The future state is triggered by whoever arrives next, so the predictor
combines three empirical statistics that are updated online: the
any-arrival gap distribution on [0, 60] minutes, the same-worker return
gaps (shared with the worker MDP), and the rate of first-time workers.
Training in expectation mode replaces the next-worker mixture with its
expected feature, which keeps the branch count at the number of distinct
post-expiry pools.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .qnetwork import StateTensor
from .worker_mdp import (
    FutureState,
    GapHistogram,
    QNetwork,
    ReplayBuffer,
    TransitionRecord,
    _assemble_rows,
    train_step,
    worker_gap_histogram,
)

ARRIVAL_GAP_MAX = 60  # minutes; longer gaps are clamped


def arrival_gap_histogram(smoothing: Fraction | float | None = None) -> GapHistogram:
    """Gap histogram between consecutive arrivals of any two workers."""
    return GapHistogram(0, ARRIVAL_GAP_MAX, smoothing)


# --- quality model ----------------------------------------------------------


def task_quality(worker_qualities: Sequence[float], p: float) -> float:
    """Dixit-Stiglitz aggregate (sum of q**p) ** (1/p) of the completers.

    p = 1 gives the plain sum (independent micro-tasks); p = inf gives the
    maximum (winner-take-all contests). Empty completion sets have quality 0.
    """
    if p < 1:
        raise ConfigError(f"quality exponent must be >= 1, got {p}")
    qs = np.asarray(worker_qualities, dtype=np.float64)
    if qs.size == 0:
        return 0.0
    if np.any(qs < 0) or np.any(qs > 1):
        raise InputError("worker qualities must lie in [0, 1]")
    if math.isinf(p):
        return float(qs.max())
    return float((qs ** p).sum() ** (1.0 / p))


def updated_task_quality(old_quality: float, worker_quality: float, p: float) -> float:
    """Task quality after one more completion by a worker of the given quality.

    Clamped from below at the old quality so rounding can never shrink it.
    """
    if p < 1:
        raise ConfigError(f"quality exponent must be >= 1, got {p}")
    if math.isinf(p):
        return max(old_quality, worker_quality)
    return max(old_quality, (old_quality ** p + worker_quality ** p) ** (1.0 / p))


def reward_r(old_quality: float, worker_quality: float | None, p: float) -> float:
    """Quality gain of the completed task; 0 when the worker skipped."""
    if worker_quality is None:
        return 0.0
    return updated_task_quality(old_quality, worker_quality, p) - old_quality


# --- arrival model ----------------------------------------------------------


class ArrivalModel:
    """Online statistics of the arrival process.

    Tracks the same-worker return-gap histogram, the any-arrival gap
    histogram, the running rate of first-time workers, the running mean
    feature and quality of arriving workers, and each worker's last
    arrival time. All statistics update in one pass per arrival event.
    """

    def __init__(self, feature_dim: int,
                 phi_worker: GapHistogram | None = None,
                 phi_arrival: GapHistogram | None = None):
        self.phi_worker = phi_worker if phi_worker is not None else worker_gap_histogram()
        self.phi_arrival = phi_arrival if phi_arrival is not None else arrival_gap_histogram()
        self.feature_dim = feature_dim
        self.last_arrival: dict[int, int] = {}
        self.last_event_time: int | None = None
        self.arrival_count = 0
        self.new_worker_count = 0
        self.mean_worker_feature = np.zeros(feature_dim)
        self.mean_worker_quality = 0.0

    @property
    def p_new(self) -> float:
        """Empirical probability that the next arrival is a first-timer."""
        if self.arrival_count == 0:
            return 1.0
        return self.new_worker_count / self.arrival_count

    def observe(self, worker_id: int, time: int,
                feature: np.ndarray, quality: float) -> None:
        """Fold one arrival event into every statistic."""
        if self.last_event_time is not None and time < self.last_event_time:
            raise InputError(
                f"arrival at {time} precedes last event at {self.last_event_time}"
            )
        if self.last_event_time is not None:
            self.phi_arrival.update(time - self.last_event_time)
        is_new = worker_id not in self.last_arrival
        if is_new:
            self.new_worker_count += 1
        else:
            self.phi_worker.update(time - self.last_arrival[worker_id])
        self.arrival_count += 1
        n = self.arrival_count
        self.mean_worker_feature += (np.asarray(feature, dtype=np.float64)
                                     - self.mean_worker_feature) / n
        self.mean_worker_quality += (quality - self.mean_worker_quality) / n
        self.last_arrival[worker_id] = time
        self.last_event_time = time

    def state_dict(self) -> dict:
        return {
            "phi_worker": self.phi_worker.state_dict(),
            "phi_arrival": self.phi_arrival.state_dict(),
            "feature_dim": self.feature_dim,
            "last_arrival": {str(k): v for k, v in self.last_arrival.items()},
            "last_event_time": self.last_event_time,
            "arrival_count": self.arrival_count,
            "new_worker_count": self.new_worker_count,
            "mean_worker_feature": self.mean_worker_feature.tolist(),
            "mean_worker_quality": self.mean_worker_quality,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def from_state_dict(cls, d: dict) -> "ArrivalModel":
        model = cls(d["feature_dim"],
                    GapHistogram.from_state_dict(d["phi_worker"]),
                    GapHistogram.from_state_dict(d["phi_arrival"]))
        model.last_arrival = {int(k): v for k, v in d["last_arrival"].items()}
        model.last_event_time = d["last_event_time"]
        model.arrival_count = d["arrival_count"]
        model.new_worker_count = d["new_worker_count"]
        model.mean_worker_feature = np.asarray(d["mean_worker_feature"])
        model.mean_worker_quality = d["mean_worker_quality"]
        return model

    @classmethod
    def load(cls, path: str) -> "ArrivalModel":
        with open(path) as fh:
            return cls.from_state_dict(json.load(fh))


def update_arrival_model(model: ArrivalModel, worker_id: int, time: int,
                         feature: np.ndarray, quality: float) -> ArrivalModel:
    model.observe(worker_id, time, feature, quality)
    return model


class WorkerDirectory:
    """Current feature and quality of every known worker, as aligned
    arrays so the predictors can mix over workers without Python loops."""

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.ids: list[int] = []
        self._index: dict[int, int] = {}
        self._feats: list[np.ndarray] = []
        self._qualities: list[float] = []

    def __len__(self) -> int:
        return len(self.ids)

    def upsert(self, worker_id: int, feature: np.ndarray, quality: float) -> None:
        feature = np.asarray(feature, dtype=np.float64)
        if worker_id in self._index:
            i = self._index[worker_id]
            self._feats[i] = feature
            self._qualities[i] = quality
        else:
            self._index[worker_id] = len(self.ids)
            self.ids.append(worker_id)
            self._feats.append(feature)
            self._qualities.append(quality)

    def features(self) -> np.ndarray:
        if not self._feats:
            return np.zeros((0, self.feature_dim))
        return np.stack(self._feats)

    def qualities(self) -> np.ndarray:
        return np.asarray(self._qualities, dtype=np.float64)


def next_worker_distribution(model: ArrivalModel, directory: WorkerDirectory,
                             candidate_time: int) -> list[tuple[int | None, float]]:
    """Who arrives at ``candidate_time``: (worker id, probability) pairs.

    Old workers split 1 - p_new proportionally to the return-gap mass at
    their individual gaps; the ``None`` entry is a first-time worker with
    probability p_new (represented by the mean feature). With no known
    workers the first-timer gets everything.
    """
    p_new = model.p_new
    if not directory.ids:
        return [(None, 1.0)]
    gaps = np.array([candidate_time - model.last_arrival[w] for w in directory.ids])
    if np.any(gaps < 0):
        raise InputError("candidate time precedes a recorded last arrival")
    probs = _gap_probs(model.phi_worker, gaps)
    weights = probs / probs.sum()
    out: list[tuple[int | None, float]] = [
        (wid, float((1.0 - p_new) * w)) for wid, w in zip(directory.ids, weights)
    ]
    out.append((None, p_new))
    return out


def _gap_probs(hist: GapHistogram, gaps: np.ndarray) -> np.ndarray:
    clamped = np.clip(gaps, hist.lo, hist.hi).astype(np.int64)
    return hist.prob_array()[clamped - hist.lo]


# --- future states ----------------------------------------------------------


def predict_future_states_r(record: TransitionRecord, model: ArrivalModel,
                            directory: WorkerDirectory,
                            mode: str = "expectation",
                            worker_prob_threshold: float = 0.01,
                            max_workers: int = 20) -> list[FutureState]:
    """Future states for the next arrival, weighted by gap and worker.

    For each arrival gap g in [0, 60] the pool drops the tasks expiring
    within g minutes and one of the known workers (or a first-timer with
    the mean feature) shows up. Gaps with identical surviving pools are
    grouped. ``expectation`` mode collapses the worker mixture within
    each group to its expected feature and quality, giving at most one
    state per group; ``exact`` mode keeps individual workers, dropping
    those whose overall arrival probability falls below the threshold
    (and beyond the ``max_workers`` most likely), then renormalizing.
    """
    if mode not in ("expectation", "exact"):
        raise InputError(f"unknown predictor mode {mode!r}")
    phi_a = model.phi_arrival
    lo, hi = phi_a.lo, phi_a.hi
    g_grid = np.arange(lo, hi + 1)
    gap_mass = phi_a.prob_array()

    t0 = record.timestamp
    offsets = record.deadlines.astype(np.int64) - t0
    cuts = np.unique(offsets[(offsets > lo) & (offsets <= hi)])
    boundaries = [lo] + [int(c) for c in cuts] + [hi + 1]

    n_old = len(directory)
    p_new = model.p_new
    mean_feat = model.mean_worker_feature
    mean_quality = model.mean_worker_quality
    if n_old:
        base_gaps = np.array([t0 - model.last_arrival[w] for w in directory.ids])
        # worker-return mass at every (g, worker) pair, rows normalized
        worker_mass = _gap_probs(
            model.phi_worker,
            base_gaps[None, :] + g_grid[:, None],
        )
        worker_cond = worker_mass / worker_mass.sum(axis=1, keepdims=True)
        feats = directory.features()
        quals = directory.qualities()
    else:
        worker_cond = np.zeros((len(g_grid), 0))
        feats = np.zeros((0, model.feature_dim))
        quals = np.zeros(0)
        p_new = 1.0

    if mode == "exact" and n_old:
        marginal = gap_mass @ worker_cond
        keep = np.flatnonzero(marginal >= worker_prob_threshold)
        if keep.size > max_workers:
            keep = keep[np.argsort(marginal[keep])[::-1][:max_workers]]
        if keep.size == 0:
            keep = np.array([int(marginal.argmax())])
        # one shared factor keeps the retained workers' relative weights
        worker_cond = worker_cond[:, keep] / marginal[keep].sum()
        feats, quals = feats[keep], quals[keep]

    out: list[FutureState] = []
    for a, b in zip(boundaries, boundaries[1:]):
        cell = slice(a - lo, b - lo)
        cell_mass = float(phi_a.mass_exact(a, b - 1))
        if cell_mass == 0.0:
            continue
        alive = np.flatnonzero(offsets > a)
        if alive.size == 0:
            out.append(FutureState(state=None, prob=cell_mass))
            continue
        task_block = record.task_feats[alive]
        task_quals = record.future_task_qualities[alive]
        w_in_cell = gap_mass[cell] / gap_mass[cell].sum()

        if mode == "expectation":
            if n_old:
                mix = w_in_cell @ worker_cond[cell]  # [n_old]
                feat = (1 - p_new) * (mix @ feats) + p_new * mean_feat
                quality = float((1 - p_new) * (mix @ quals) + p_new * mean_quality)
            else:
                feat, quality = mean_feat, mean_quality
            x = _assemble_rows(task_block, feat, task_quals, quality)
            out.append(FutureState(state=StateTensor(x=x, n_active=alive.size),
                                   prob=cell_mass, survivors=alive))
        else:
            if n_old:
                w_probs = w_in_cell @ worker_cond[cell]
                for j in range(feats.shape[0]):
                    x = _assemble_rows(task_block, feats[j], task_quals, quals[j])
                    out.append(FutureState(
                        state=StateTensor(x=x, n_active=alive.size),
                        prob=cell_mass * (1 - p_new) * float(w_probs[j]),
                        survivors=alive))
            if p_new > 0.0:
                x = _assemble_rows(task_block, mean_feat, task_quals, mean_quality)
                out.append(FutureState(
                    state=StateTensor(x=x, n_active=alive.size),
                    prob=cell_mass * p_new, survivors=alive))
    return out


def td_target_r(record: TransitionRecord, futures: Sequence[FutureState],
                qnet: QNetwork, gamma: float, double_q: bool = True) -> float:
    from .worker_mdp import td_target_w

    return td_target_w(record, futures, qnet, gamma, double_q)


def train_step_r(buffer: ReplayBuffer, qnet: QNetwork, model: ArrivalModel,
                 directory: WorkerDirectory, gamma: float,
                 learning_rate: float, batch_size: int,
                 rng: np.random.Generator, mode: str = "expectation",
                 double_q: bool = True) -> float:
    return train_step(
        buffer, qnet,
        lambda rec: predict_future_states_r(rec, model, directory, mode),
        gamma, learning_rate, batch_size, rng,
        quality_mode=True, double_q=double_q,
    )
