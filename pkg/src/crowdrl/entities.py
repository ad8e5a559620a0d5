"""Entities of the crowdsourcing environment and their feature encodings.

Tasks carry three attributes that drive worker choice: award, category and
domain. Categorical attributes are one-hot encoded; the continuous award is
discretized against schema-supplied bin edges. A worker is summarized by the
distribution of their recently completed tasks, i.e. the mean of the task
encodings over a fixed-size completion window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InputError, StateError


@dataclass
class TaskRecord:
    """One task posted on the platform.

    Times are integer minutes since the stream epoch. ``quality`` is the
    aggregated quality of all completions so far (see
    :func:`crowdrl.requester_mdp.task_quality`); the simulator keeps it in
    sync with ``completions``.
    """

    id: int
    created_at: int
    deadline: int
    category: int
    domain: int
    award: float
    quality: float = 0.0
    completions: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.deadline <= self.created_at:
            raise InputError(
                f"task {self.id}: deadline {self.deadline} must exceed "
                f"created_at {self.created_at}"
            )
        if self.award < 0:
            raise InputError(f"task {self.id}: award must be nonnegative")

    def active_at(self, time: int) -> bool:
        return self.created_at <= time < self.deadline


@dataclass
class WorkerRecord:
    """One worker. ``history`` is the time-ordered list of (time, task id)
    completions; ``quality`` is the externally known answer quality in [0, 1].
    """

    id: int
    quality: float = 0.5
    history: list[tuple[int, int]] = field(default_factory=list)
    last_arrival: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.quality <= 1.0:
            raise InputError(f"worker {self.id}: quality must lie in [0, 1]")


@dataclass(frozen=True)
class FeatureSchema:
    """Fixes the discretization used by both task and worker encodings.

    ``award_bin_edges`` must be strictly increasing; awards fall into
    ``len(edges) + 1`` bins (below the first edge, between consecutive
    edges, at-or-above the last edge). ``history_window`` is the number of
    most recent completions that define a worker's feature.
    """

    n_categories: int
    n_domains: int
    award_bin_edges: tuple[float, ...] = (5.0, 25.0, 100.0, 400.0, 1600.0)
    history_window: int = 20

    def __post_init__(self) -> None:
        if self.n_categories < 1 or self.n_domains < 1:
            raise InputError("schema needs at least one category and domain")
        if not self.award_bin_edges:
            raise InputError("award_bin_edges must be nonempty")
        edges = self.award_bin_edges
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise InputError("award_bin_edges must be strictly increasing")
        if self.history_window < 1:
            raise InputError("history_window must be positive")

    @property
    def n_award_bins(self) -> int:
        return len(self.award_bin_edges) + 1

    @property
    def dim(self) -> int:
        """Length of a task (and worker) feature vector."""
        return self.n_categories + self.n_domains + self.n_award_bins

    def award_bin(self, award: float) -> int:
        return int(np.searchsorted(self.award_bin_edges, award, side="right"))


def encode_task(task: TaskRecord, schema: FeatureSchema) -> np.ndarray:
    """One-hot concatenation [category | domain | award bin] for a task."""
    if not 0 <= task.category < schema.n_categories:
        raise InputError(
            f"task {task.id}: category {task.category} outside schema range "
            f"[0, {schema.n_categories})"
        )
    if not 0 <= task.domain < schema.n_domains:
        raise InputError(
            f"task {task.id}: domain {task.domain} outside schema range "
            f"[0, {schema.n_domains})"
        )
    vec = np.zeros(schema.dim)
    vec[task.category] = 1.0
    vec[schema.n_categories + task.domain] = 1.0
    vec[schema.n_categories + schema.n_domains + schema.award_bin(task.award)] = 1.0
    return vec


def encode_worker(
    worker: WorkerRecord,
    schema: FeatureSchema,
    task_lookup: Mapping[int, TaskRecord],
) -> np.ndarray:
    """Mean task encoding over the worker's most recent completions.

    Uses the last ``schema.history_window`` entries of the history. Workers
    with no completions yet get an all-zero vector (cold start); otherwise
    each one-hot block of the result sums to 1.
    """
    if not worker.history:
        return np.zeros(schema.dim)
    recent = worker.history[-schema.history_window:]
    acc = np.zeros(schema.dim)
    for _, task_id in recent:
        if task_id not in task_lookup:
            raise InputError(
                f"worker {worker.id}: history references unknown task {task_id}"
            )
        acc += encode_task(task_lookup[task_id], schema)
    return acc / len(recent)


def record_completion(worker: WorkerRecord, task: TaskRecord, time: int) -> None:
    """Append a completion to both records.

    The same worker may complete the same task again at a later time; each
    completion is a separate entry. The task must still be active.
    """
    if time < worker.last_arrival:
        raise InputError(
            f"completion time {time} precedes worker {worker.id}'s "
            f"last arrival {worker.last_arrival}"
        )
    if not task.active_at(time):
        raise StateError(
            f"task {task.id} is not active at minute {time} "
            f"(window [{task.created_at}, {task.deadline}))"
        )
    worker.history.append((time, task.id))
    task.completions.append((time, worker.id))
