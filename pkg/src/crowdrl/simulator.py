"""Event-driven environment: task lifecycle, arrivals, feedback, replay.

The stream is a time-sorted sequence of task creations, task expirations
(usually implicit through deadlines) and worker arrivals. At each arrival
the policy is shown the active pool and proposes a single task or a
ranked list; the feedback is resolved either against recorded history
(replay: the one task the worker actually completed is the only
interesting one) or against a behavioral worker model (synthetic worlds).
Completions update worker histories, task qualities and the learners
before the next event is processed.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .entities import (
    FeatureSchema,
    TaskRecord,
    WorkerRecord,
    encode_task,
    encode_worker,
    record_completion,
)
from .errors import DataIntegrityError, InputError
from .metrics import Interaction, InteractionLog
from .requester_mdp import updated_task_quality

TASK_CREATED = "task_created"
TASK_EXPIRED = "task_expired"
WORKER_ARRIVAL = "worker_arrival"

_KIND_ORDER = {TASK_CREATED: 0, TASK_EXPIRED: 1, WORKER_ARRIVAL: 2}

EVENT_LOG_HEADER = "time_min,kind,id,attrs"


@dataclass
class Event:
    """One line of the stream. Which optional fields apply depends on
    ``kind``; ``completed_task`` is replay ground truth and lives in a
    sidecar file, not in the event log itself."""

    time: int
    kind: str
    task_id: int | None = None
    deadline: int | None = None
    category: int | None = None
    domain: int | None = None
    award: float | None = None
    worker_id: int | None = None
    quality: float | None = None
    completed_task: int | None = None


def sort_events(events: Iterable[Event]) -> list[Event]:
    return sorted(events, key=lambda e: (e.time, _KIND_ORDER[e.kind]))


def write_event_log(events: Sequence[Event], path: str) -> None:
    """Line format: ``time_min,kind,id,attrs...`` where attrs are
    ``deadline_min,category,domain,award`` for creations and
    ``quality`` for arrivals (id is the worker id there)."""
    with open(path, "w") as fh:
        fh.write(EVENT_LOG_HEADER + "\n")
        for e in events:
            if e.kind == TASK_CREATED:
                fh.write(f"{e.time},{e.kind},{e.task_id},{e.deadline},"
                         f"{e.category},{e.domain},{e.award:.10g}\n")
            elif e.kind == TASK_EXPIRED:
                fh.write(f"{e.time},{e.kind},{e.task_id}\n")
            elif e.kind == WORKER_ARRIVAL:
                if e.quality is None:
                    fh.write(f"{e.time},{e.kind},{e.worker_id}\n")
                else:
                    fh.write(f"{e.time},{e.kind},{e.worker_id},{e.quality:.10g}\n")
            else:
                raise InputError(f"unknown event kind {e.kind!r}")


def read_event_log(path: str) -> list[Event]:
    events: list[Event] = []
    last_time = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("time_min"):
                continue
            parts = line.split(",")
            try:
                t, kind = int(parts[0]), parts[1]
                if kind == TASK_CREATED:
                    ev = Event(t, kind, task_id=int(parts[2]),
                               deadline=int(parts[3]), category=int(parts[4]),
                               domain=int(parts[5]), award=float(parts[6]))
                elif kind == TASK_EXPIRED:
                    ev = Event(t, kind, task_id=int(parts[2]))
                elif kind == WORKER_ARRIVAL:
                    quality = float(parts[3]) if len(parts) > 3 else None
                    ev = Event(t, kind, worker_id=int(parts[2]), quality=quality)
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (ValueError, IndexError) as exc:
                raise DataIntegrityError(f"{path}:{lineno}: {exc}") from exc
            if last_time is not None and t < last_time:
                raise DataIntegrityError(
                    f"{path}:{lineno}: time {t} regresses below {last_time}")
            last_time = t
            events.append(ev)
    return events


def write_ground_truth(events: Sequence[Event], path: str) -> None:
    """Sidecar CSV mapping arrival sequence numbers to completed tasks."""
    with open(path, "w") as fh:
        fh.write("arrival_index,completed_task\n")
        idx = 0
        for e in events:
            if e.kind != WORKER_ARRIVAL:
                continue
            if e.completed_task is not None:
                fh.write(f"{idx},{e.completed_task}\n")
            idx += 1


def attach_ground_truth(events: Sequence[Event], path: str) -> None:
    """Load a ground-truth sidecar onto the arrival events, in place."""
    truth: dict[int, int] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("arrival_index"):
                continue
            idx, task = line.split(",")
            truth[int(idx)] = int(task)
    idx = 0
    for e in events:
        if e.kind != WORKER_ARRIVAL:
            continue
        e.completed_task = truth.get(idx)
        idx += 1


# --- feedback models ---------------------------------------------------------


def cascade_feedback(ranked_rows: Sequence[int],
                     interesting: set[int] | None = None,
                     completion_probs: np.ndarray | None = None,
                     rng: np.random.Generator | None = None) -> int | None:
    """Scan the ranked list top-down; return the position (0-based) of the
    first completed task, or None.

    Deterministic mode completes the first row found in ``interesting``;
    behavioral mode draws a Bernoulli per examined row from
    ``completion_probs``.
    """
    if not ranked_rows:
        raise InputError("cascade feedback needs a nonempty list")
    if (interesting is None) == (completion_probs is None):
        raise InputError("provide exactly one of interesting / completion_probs")
    for pos, row in enumerate(ranked_rows):
        if interesting is not None:
            if row in interesting:
                return pos
        else:
            if rng.random() < completion_probs[row]:
                return pos
    return None


@dataclass
class SyntheticWorkerModel:
    """Behavioral model of one synthetic worker.

    ``interest`` maps (category, domain) to an attraction in [0, 1];
    ``award_sensitivity`` discounts low-award tasks (0 disables the
    effect); ``base_skip_prob`` is applied to everything.
    """

    interest: np.ndarray
    award_sensitivity: float = 0.0
    base_skip_prob: float = 0.0
    quality: float = 0.5

    def __post_init__(self) -> None:
        if np.any(self.interest < 0):
            raise InputError("interest weights must be nonnegative")

    def completion_prob(self, category: int, domain: int,
                        award_percentile: float) -> float:
        appeal = float(self.interest[category, domain]) * (1.0 - self.base_skip_prob)
        discount = award_percentile ** self.award_sensitivity
        return float(np.clip(appeal * discount, 0.0, 1.0))


# --- the shared event loop ----------------------------------------------------


@dataclass
class ArrivalView:
    """Everything a policy may look at when one worker arrives."""

    worker_id: int
    time: int
    worker_feat: np.ndarray
    worker_quality: float
    task_ids: list[int]
    task_feats: np.ndarray
    task_qualities: np.ndarray
    deadlines: np.ndarray
    quality_exponent: float
    list_k: int | None


@dataclass
class RunResult:
    policy_name: str
    log: InteractionLog
    latencies_ms: list[float] = field(default_factory=list)
    arrivals: int = 0
    empty_pool_arrivals: int = 0
    completions: int = 0
    tasks_seen: int = 0
    workers_seen: int = 0

    @property
    def completion_rate(self) -> float:
        return self.completions / max(1, len(self.log))


DecideFn = Callable[[Event, ArrivalView, list[int], np.random.Generator], int | None]


def simulate(events: Sequence[Event], policy, schema: FeatureSchema,
             decide: DecideFn, *, quality_p: float = 2.0,
             list_k: int | None = None,
             seed: int = 0, warmup_until: int | None = None,
             cold_start_completions: int = 5) -> RunResult:
    """Drive the policy through the stream and collect the interaction log.

    Events before ``warmup_until`` initialize features, qualities and the
    learners from recorded completions without consulting the policy's
    own action choice (the recorded task is fed to ``observe`` as a
    rank-1 success); they produce no metric entries.
    """
    seeds = np.random.SeedSequence(seed).spawn(2)
    world_rng = np.random.default_rng(seeds[0])
    policy_rng = np.random.default_rng(seeds[1])

    tasks: dict[int, TaskRecord] = {}
    pool: dict[int, TaskRecord] = {}
    workers: dict[int, WorkerRecord] = {}
    feature_cache: dict[int, np.ndarray] = {}
    seeded_history: dict[int, set[tuple[int, int]]] = {}

    # first few recorded completions per worker, for cold-start seeding
    first_completions: dict[int, list[tuple[int, int]]] = {}
    if cold_start_completions > 0:
        for e in events:
            if e.kind == WORKER_ARRIVAL and e.completed_task is not None:
                bucket = first_completions.setdefault(e.worker_id, [])
                if len(bucket) < cold_start_completions:
                    bucket.append((e.time, e.completed_task))

    result = RunResult(policy_name=getattr(policy, "name", "policy"),
                       log=InteractionLog())

    def worker_feature(worker: WorkerRecord) -> np.ndarray:
        cached = feature_cache.get(worker.id)
        if cached is None:
            cached = encode_worker(worker, schema, tasks)
            feature_cache[worker.id] = cached
        return cached

    def expire_until(t: int) -> None:
        dead = [tid for tid, task in pool.items() if task.deadline <= t]
        for tid in dead:
            del pool[tid]

    for event in events:
        expire_until(event.time)
        if event.kind == TASK_CREATED:
            task = TaskRecord(id=event.task_id, created_at=event.time,
                              deadline=event.deadline, category=event.category,
                              domain=event.domain, award=event.award)
            if task.id in tasks:
                raise DataIntegrityError(f"duplicate task id {task.id}")
            tasks[task.id] = task
            pool[task.id] = task
            result.tasks_seen += 1
            continue
        if event.kind == TASK_EXPIRED:
            if event.task_id not in tasks:
                raise DataIntegrityError(
                    f"expiry of unknown task {event.task_id} at {event.time}")
            pool.pop(event.task_id, None)
            continue

        # worker arrival
        result.arrivals += 1
        worker = workers.get(event.worker_id)
        if worker is None:
            worker = WorkerRecord(
                id=event.worker_id,
                quality=event.quality if event.quality is not None else 0.5,
                last_arrival=event.time)
            workers[event.worker_id] = worker
            result.workers_seen += 1
            if event.worker_id in first_completions:
                seeds_set = set()
                for t_seed, tid_seed in first_completions[event.worker_id]:
                    if tid_seed in tasks:
                        worker.history.append((t_seed, tid_seed))
                        seeds_set.add((t_seed, tid_seed))
                seeded_history[event.worker_id] = seeds_set
        worker.last_arrival = event.time

        if not pool:
            if event.completed_task is not None:
                raise DataIntegrityError(
                    f"arrival at {event.time}: recorded completion "
                    f"{event.completed_task} but the pool is empty")
            result.empty_pool_arrivals += 1
            continue

        pool_tasks = list(pool.values())
        task_ids = [t.id for t in pool_tasks]
        view = ArrivalView(
            worker_id=worker.id,
            time=event.time,
            worker_feat=worker_feature(worker),
            worker_quality=worker.quality,
            task_ids=task_ids,
            task_feats=np.stack([encode_task(t, schema) for t in pool_tasks]),
            task_qualities=np.array([t.quality for t in pool_tasks]),
            deadlines=np.array([t.deadline for t in pool_tasks]),
            quality_exponent=quality_p,
            list_k=list_k,
        )

        in_warmup = warmup_until is not None and event.time < warmup_until
        if in_warmup:
            if event.completed_task is None:
                continue
            if event.completed_task not in pool:
                raise DataIntegrityError(
                    f"arrival at {event.time}: recorded task "
                    f"{event.completed_task} is not in the active pool")
            ranked_rows = [task_ids.index(event.completed_task)]
            completed_pos = 0
        else:
            ranked_rows = policy.act(view, policy_rng)
            completed_pos = decide(event, view, ranked_rows, world_rng)

        gain = 0.0
        future_qualities = view.task_qualities
        if completed_pos is not None:
            row = ranked_rows[completed_pos]
            task = pool_tasks[row]
            old_q = task.quality
            new_q = updated_task_quality(old_q, worker.quality, quality_p)
            gain = new_q - old_q
            entry = (event.time, task.id)
            already_seeded = entry in seeded_history.get(worker.id, ())
            record_completion(worker, task, event.time)
            if already_seeded:
                worker.history.pop()  # the seed already carries this completion
            task.quality = new_q
            feature_cache.pop(worker.id, None)
            future_qualities = view.task_qualities.copy()
            future_qualities[row] = new_q
            result.completions += 1

        started = _time.perf_counter()
        policy.observe(view, ranked_rows, completed_pos, gain,
                       worker_feature(worker), future_qualities)
        elapsed_ms = (_time.perf_counter() - started) * 1e3

        if not in_warmup:
            result.latencies_ms.append(elapsed_ms)
            result.log.append(Interaction(
                time=event.time,
                pool_size=len(pool_tasks),
                list_len=len(ranked_rows),
                completed_rank=None if completed_pos is None else completed_pos + 1,
                gain=gain,
            ))
    return result


# --- replay ------------------------------------------------------------------


def run_replay(events: Sequence[Event], policy, schema: FeatureSchema, *,
               quality_p: float = 2.0,
               list_k: int | None = None, seed: int = 0,
               warmup_minutes: int | None = 43200) -> RunResult:
    """Replay a recorded stream; the historically completed task is the
    the unique interesting one for its arrival."""
    if not events:
        raise InputError("empty event stream")
    warmup_until = (events[0].time + warmup_minutes
                    if warmup_minutes is not None else None)

    def decide(event: Event, view: ArrivalView, ranked_rows: list[int],
               rng: np.random.Generator) -> int | None:
        if event.completed_task is None:
            return None
        if event.completed_task not in view.task_ids:
            raise DataIntegrityError(
                f"arrival at {event.time}: recorded task "
                f"{event.completed_task} is not in the active pool")
        gt_row = view.task_ids.index(event.completed_task)
        return cascade_feedback(ranked_rows, interesting={gt_row})

    return simulate(events, policy, schema, decide, quality_p=quality_p,
                    list_k=list_k, seed=seed, warmup_until=warmup_until)


# --- synthetic worlds ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Generator parameters for a synthetic platform.

    Workers get a planted primary category (all domains) plus a small
    background attraction to everything else; award sensitivity, base
    skip probability and quality vary per worker.
    """

    n_categories: int = 20
    n_domains: int = 2
    n_workers: int = 200
    initial_tasks: int = 24
    task_gap_minutes: float = 1200.0       # mean gap between task creations
    arrival_gap_minutes: float = 5.0       # mean gap between worker arrivals
    deadline_range_minutes: tuple[int, int] = (43200, 86400)
    award_choices: tuple[float, ...] = (10.0, 20.0, 50.0, 100.0, 200.0)
    award_bin_edges: tuple[float, ...] = (15.0, 35.0, 75.0, 150.0)
    primary_interest: float = 0.9
    background_interest: float = 0.02
    award_sensitivity_range: tuple[float, float] = (0.5, 3.0)
    base_skip_range: tuple[float, float] = (0.0, 0.2)
    quality_range: tuple[float, float] = (0.3, 1.0)
    history_window: int = 20

    def schema(self) -> FeatureSchema:
        return FeatureSchema(self.n_categories, self.n_domains,
                             self.award_bin_edges, self.history_window)


def build_worker_models(config: SyntheticWorldConfig,
                        rng: np.random.Generator) -> dict[int, SyntheticWorkerModel]:
    models = {}
    for wid in range(config.n_workers):
        interest = np.full((config.n_categories, config.n_domains),
                           config.background_interest)
        interest[rng.integers(config.n_categories), :] = config.primary_interest
        models[wid] = SyntheticWorkerModel(
            interest=interest,
            award_sensitivity=float(rng.uniform(*config.award_sensitivity_range)),
            base_skip_prob=float(rng.uniform(*config.base_skip_range)),
            quality=float(rng.uniform(*config.quality_range)),
        )
    return models


def generate_synthetic_events(config: SyntheticWorldConfig, n_arrivals: int,
                              rng: np.random.Generator
                              ) -> tuple[list[Event], dict[int, SyntheticWorkerModel]]:
    """Sample the event stream (creations + arrivals) and worker models."""
    models = build_worker_models(config, rng)

    def new_task(event_time: int, task_id: int) -> Event:
        life = rng.integers(config.deadline_range_minutes[0],
                            config.deadline_range_minutes[1] + 1)
        return Event(
            time=event_time, kind=TASK_CREATED, task_id=task_id,
            deadline=int(event_time + life),
            category=int(rng.integers(config.n_categories)),
            domain=int(rng.integers(config.n_domains)),
            award=float(rng.choice(config.award_choices)),
        )

    events = [new_task(0, tid) for tid in range(config.initial_tasks)]
    next_task_id = config.initial_tasks

    arrival_times = np.cumsum(
        np.rint(rng.exponential(config.arrival_gap_minutes, size=n_arrivals))
    ).astype(np.int64)
    horizon = int(arrival_times[-1]) if n_arrivals else 0

    t = 0
    while True:
        t += int(max(1, round(rng.exponential(config.task_gap_minutes))))
        if t > horizon:
            break
        events.append(new_task(t, next_task_id))
        next_task_id += 1

    for at in arrival_times:
        wid = int(rng.integers(config.n_workers))
        events.append(Event(time=int(at), kind=WORKER_ARRIVAL, worker_id=wid,
                            quality=models[wid].quality))
    return sort_events(events), models


def behavioral_decide(models: dict[int, SyntheticWorkerModel],
                      schema: FeatureSchema) -> DecideFn:
    """Cascade feedback driven by each worker's behavioral model."""

    def decide(event: Event, view: ArrivalView, ranked_rows: list[int],
               rng: np.random.Generator) -> int | None:
        model = models[view.worker_id]
        probs = np.empty(len(view.task_ids))
        for row in ranked_rows:
            feat = view.task_feats[row]
            category = int(feat[: schema.n_categories].argmax())
            domain = int(feat[schema.n_categories:
                              schema.n_categories + schema.n_domains].argmax())
            award_bin = int(feat[schema.n_categories + schema.n_domains:].argmax())
            percentile = (award_bin + 1) / schema.n_award_bins
            probs[row] = model.completion_prob(category, domain, percentile)
        return cascade_feedback(ranked_rows, completion_probs=probs, rng=rng)

    return decide


def run_synthetic(config: SyntheticWorldConfig, policy, n_arrivals: int, *,
                  quality_p: float = 2.0,
                  list_k: int | None = None, seed: int = 0) -> RunResult:
    """Generate a world from the seed and drive the policy through it."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    events, models = generate_synthetic_events(config, n_arrivals, rng)
    schema = config.schema()
    return simulate(events, policy, schema, behavioral_decide(models, schema),
                    quality_p=quality_p, list_k=list_k, seed=seed + 1)


# --- dataset scaling ------------------------------------------------------------


def generate_scaled_dataset(events: Sequence[Event], rate: float,
                            quality_noise: tuple[float, float] | None,
                            rng: np.random.Generator,
                            duplicate_jitter_minutes: float = 1440.0
                            ) -> list[Event]:
    """Resample worker arrivals at the given rate and perturb qualities.

    Rates above 1 keep every original arrival and add resampled copies
    whose times are jittered by a normal delta (mean and std one day);
    rates below 1 subsample without replacement. A copied arrival keeps
    its recorded completion only when that task is still active at the
    jittered time. Quality noise is drawn once per worker, added to the
    quality attribute and clamped to [0, 1]. Task events pass through
    untouched; the result is re-sorted by time.
    """
    if rate <= 0:
        raise InputError("sampling rate must be positive")
    arrivals = [e for e in events if e.kind == WORKER_ARRIVAL]
    others = [e for e in events if e.kind != WORKER_ARRIVAL]
    task_windows = {e.task_id: (e.time, e.deadline) for e in others
                    if e.kind == TASK_CREATED}

    out = [replace(e) for e in others]
    kept: list[Event]
    if rate >= 1.0:
        kept = [replace(e) for e in arrivals]
        n_extra = int(round((rate - 1.0) * len(arrivals)))
        for idx in rng.integers(len(arrivals), size=n_extra):
            src = arrivals[int(idx)]
            delta = int(round(rng.normal(duplicate_jitter_minutes,
                                         duplicate_jitter_minutes)))
            t = max(0, src.time + delta)
            completed = src.completed_task
            if completed is not None:
                window = task_windows.get(completed)
                if window is None or not (window[0] <= t < window[1]):
                    completed = None
            kept.append(replace(src, time=t, completed_task=completed))
    else:
        n_keep = int(round(rate * len(arrivals)))
        picks = rng.choice(len(arrivals), size=n_keep, replace=False)
        kept = [replace(arrivals[int(i)]) for i in sorted(picks)]

    if quality_noise is not None:
        mu, sigma = quality_noise
        deltas: dict[int, float] = {}
        for e in kept:
            if e.quality is None:
                continue
            if e.worker_id not in deltas:
                deltas[e.worker_id] = float(rng.normal(mu, sigma))
            e.quality = float(np.clip(e.quality + deltas[e.worker_id], 0.0, 1.0))

    return sort_events(out + kept)
