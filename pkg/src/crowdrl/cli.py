"""Experiment runner: run / bench / gen / inspect-log subcommands."""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np

from . import metrics as M
from . import simulator as sim
from .config import ExperimentConfig, config_hash, dump_config, load_config
from .errors import CrowdRLError, InputError
from .policy import DdqnPolicy
from .qnetwork import QNetwork, QNetworkConfig
from .worker_mdp import (
    ReplayBuffer,
    TransitionRecord,
    train_step_w,
    worker_gap_histogram,
)


def run_experiment(config: ExperimentConfig) -> dict:
    """Run one experiment and write its artifacts; returns their paths."""
    started = time.time()
    os.makedirs(config.out_dir, exist_ok=True)
    policy = config.build_policy()
    schema = config.schema()
    single = config.action_mode == "single"
    list_k = None if single else config.list_k

    if config.mode == "replay":
        if not config.events_path:
            raise InputError("replay mode needs experiment.events_path")
        events = sim.read_event_log(config.events_path)
        if config.truth_path:
            sim.attach_ground_truth(events, config.truth_path)
        result = sim.run_replay(events, policy, schema,
                                quality_p=config.quality_p, list_k=list_k,
                                seed=config.seed,
                                warmup_minutes=config.warmup_minutes)
    else:
        result = sim.run_synthetic(config.world(), policy, config.arrivals,
                                   quality_p=config.quality_p, list_k=list_k,
                                   seed=config.seed)

    paths = {"out_dir": config.out_dir}

    metrics_path = os.path.join(config.out_dir, "metrics.csv")
    rows = M.report_rows(result.log, config.policy, config.list_k)
    M.write_report_csv(rows, metrics_path)
    paths["metrics"] = metrics_path

    latency_path = os.path.join(config.out_dir, "latency.csv")
    with open(latency_path, "w") as fh:
        fh.write("sample,update_ms\n")
        for i, ms in enumerate(result.latencies_ms):
            fh.write(f"{i},{ms:.6g}\n")
    paths["latency"] = latency_path

    if isinstance(policy, DdqnPolicy):
        prefix = os.path.join(config.out_dir, "checkpoint")
        policy.save(prefix)
        paths["checkpoint"] = prefix
    elif hasattr(policy, "state") and hasattr(policy.state, "A"):
        ckpt = os.path.join(config.out_dir, "checkpoint.linucb.npz")
        np.savez_compressed(ckpt, A=policy.state.A, b=policy.state.b)
        paths["checkpoint"] = ckpt
    elif hasattr(policy, "params"):
        ckpt = os.path.join(config.out_dir, "checkpoint.nn.npz")
        policy.params.save(ckpt)
        paths["checkpoint"] = ckpt

    config_path = os.path.join(config.out_dir, "config.ini")
    with open(config_path, "w") as fh:
        fh.write(dump_config(config))
    paths["config"] = config_path

    manifest = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "policy": config.policy,
        "git_revision": _git_revision(),
        "wall_clock_seconds": time.time() - started,
        "arrivals": result.arrivals,
        "interactions": len(result.log),
        "completions": result.completions,
        "empty_pool_arrivals": result.empty_pool_arrivals,
        "artifacts": {k: os.path.basename(v) for k, v in paths.items()
                      if k != "out_dir"},
    }
    manifest_path = os.path.join(config.out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    paths["manifest"] = manifest_path
    return paths


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


# --- update-latency benchmark -------------------------------------------------


def _synthetic_record(pool_size: int, feature_dim: int, breakpoints: int,
                      rng: np.random.Generator) -> TransitionRecord:
    """A fake stored transition at the requested pool size. A fixed number
    of deadlines fall inside the prediction horizon so the future-state
    machinery does representative work at every pool size."""
    feats = rng.random((pool_size, feature_dim))
    deadlines = np.full(pool_size, 10_000_000, dtype=np.int64)
    for i in range(min(breakpoints, pool_size)):
        deadlines[i] = 1000 + 2000 * (i + 1)
    worker_feat = rng.random(feature_dim)
    return TransitionRecord(
        worker_id=0, timestamp=500,
        task_ids=list(range(pool_size)),
        task_feats=feats, deadlines=deadlines,
        task_qualities=np.zeros(pool_size),
        worker_feat=worker_feat, worker_quality=0.5,
        action_row=int(rng.integers(pool_size)), reward=1.0,
        future_worker_feat=worker_feat,
        future_task_qualities=np.zeros(pool_size),
    )


def bench_update_latency(pool_sizes: list[int], repetitions: int = 3, *,
                         d_model: int = 128, n_heads: int = 4,
                         feature_dim: int = 27, batch_size: int = 1,
                         breakpoints: int = 1, gamma: float = 0.3,
                         seed: int = 0) -> list[tuple[int, float]]:
    """Time one full worker-head training step per pool size.

    Each measured update samples from the buffer, predicts future states,
    runs the batched double-Q target evaluation, backpropagates through
    Q(s, a) and applies SGD. Returns (pool size, mean milliseconds) rows.
    """
    rows = []
    rng = np.random.default_rng(seed)
    hist = worker_gap_histogram()
    for gap in (60, 1440, 2880, 10000):
        hist.update(gap)
    for pool in pool_sizes:
        if pool < 1:
            raise InputError("pool sizes must be positive")
        qnet = QNetwork(QNetworkConfig(2 * feature_dim, d_model, n_heads,
                                       np.float32, seed))
        buffer = ReplayBuffer(capacity=max(8, batch_size))
        for _ in range(max(4, batch_size)):
            buffer.add(_synthetic_record(pool, feature_dim, breakpoints, rng))
        train_step_w(buffer, qnet, hist, gamma, 1e-3, batch_size, rng)  # warm up
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            train_step_w(buffer, qnet, hist, gamma, 1e-3, batch_size, rng)
            samples.append((time.perf_counter() - t0) * 1e3)
        rows.append((pool, float(np.mean(samples))))
    return rows


# --- dataset generation --------------------------------------------------------


def gen_dataset(args, config: ExperimentConfig) -> None:
    rng = np.random.default_rng(args.seed)
    if args.base:
        events = sim.read_event_log(args.base)
        if args.base_truth:
            sim.attach_ground_truth(events, args.base_truth)
        noise = _parse_noise(args.quality_noise)
        events = sim.generate_scaled_dataset(events, args.rate, noise, rng)
    else:
        world = config.world()
        events, models = sim.generate_synthetic_events(world, args.arrivals, rng)
        schema = world.schema()
        _attach_probe_truth(events, models, schema, config, args.seed)
    sim.write_event_log(events, args.out)
    if args.truth_out:
        sim.write_ground_truth(events, args.truth_out)
    print(f"wrote {len(events)} events to {args.out}")


def _attach_probe_truth(events, models, schema, config: ExperimentConfig,
                        seed: int) -> None:
    """Stamp ground-truth completions by simulating a random recommender."""
    from .baselines import RandomPolicy

    class Recorder:
        name = "recorder"

        def __init__(self):
            self.inner = RandomPolicy(single_task=True)
            self.completed: list[int | None] = []

        def act(self, view, rng):
            return self.inner.act(view, rng)

        def observe(self, view, ranked_rows, completed_pos, *a, **k):
            self.completed.append(
                view.task_ids[ranked_rows[completed_pos]]
                if completed_pos is not None else None)

    recorder = Recorder()
    sim.simulate(events, recorder, schema,
                 sim.behavioral_decide(models, schema),
                 quality_p=config.quality_p, seed=seed,
                 cold_start_completions=0)
    it = iter(recorder.completed)
    for e in events:
        if e.kind == sim.WORKER_ARRIVAL:
            e.completed_task = next(it, None)


def _parse_noise(raw: str | None) -> tuple[float, float] | None:
    if not raw:
        return None
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise InputError("quality noise must be 'mean,std'")
    return float(parts[0]), float(parts[1])


def inspect_log(path: str, truth_path: str | None = None) -> dict:
    events = sim.read_event_log(path)
    if truth_path:
        sim.attach_ground_truth(events, truth_path)
    counts = {sim.TASK_CREATED: 0, sim.TASK_EXPIRED: 0, sim.WORKER_ARRIVAL: 0}
    workers, completions = set(), 0
    pool, pool_sizes = {}, []
    for e in events:
        for tid in [t for t, dl in pool.items() if dl <= e.time]:
            del pool[tid]
        counts[e.kind] += 1
        if e.kind == sim.TASK_CREATED:
            pool[e.task_id] = e.deadline
        elif e.kind == sim.TASK_EXPIRED:
            pool.pop(e.task_id, None)
        else:
            workers.add(e.worker_id)
            pool_sizes.append(len(pool))
            if e.completed_task is not None:
                completions += 1
    summary = {
        "events": len(events),
        "tasks_created": counts[sim.TASK_CREATED],
        "explicit_expirations": counts[sim.TASK_EXPIRED],
        "worker_arrivals": counts[sim.WORKER_ARRIVAL],
        "distinct_workers": len(workers),
        "recorded_completions": completions,
        "time_span_minutes": events[-1].time - events[0].time if events else 0,
        "mean_pool_at_arrival": float(np.mean(pool_sizes)) if pool_sizes else 0.0,
    }
    return summary


# --- argument parsing -----------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config field (repeatable)")


def _collect_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        dotted, _, value = item.partition("=")
        if not value:
            raise InputError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[dotted.strip()] = value.strip()
    for attr, dotted in (("policy", "experiment.policy"),
                         ("seed", "experiment.seed"),
                         ("mode", "experiment.mode"),
                         ("out", "experiment.out_dir"),
                         ("events", "experiment.events_path"),
                         ("truth", "experiment.truth_path"),
                         ("arrivals", "experiment.arrivals"),
                         ("balance_weight", "policy.balance_weight")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = str(value)
    return load_config(args.config, overrides)


def _run_seed(payload) -> str:
    config_items, seed = payload
    config = ExperimentConfig()
    from .config import apply_overrides

    config = apply_overrides(config, dict(config_items))
    config = replace(config, seed=seed,
                     out_dir=os.path.join(config.out_dir, f"seed_{seed}"))
    run_experiment(config)
    return config.out_dir


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="crowdrl",
        description="Crowdsourcing task-arrangement experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_config_args(p_run)
    p_run.add_argument("--policy", choices=("ddqn", "random", "greedy-cos",
                                            "greedy-nn", "linucb"))
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--mode", choices=("synthetic", "replay"))
    p_run.add_argument("--out")
    p_run.add_argument("--events")
    p_run.add_argument("--truth")
    p_run.add_argument("--arrivals", type=int)
    p_run.add_argument("--balance-weight", dest="balance_weight", type=float)
    p_run.add_argument("--seeds", help="comma list; fans out one run per seed")
    p_run.add_argument("--jobs", type=int, default=1)

    p_bench = sub.add_parser("bench", help="measure update latency vs pool size")
    p_bench.add_argument("--pool-sizes", default="10,100,500,1000,5000")
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--d-model", type=int, default=128)
    p_bench.add_argument("--n-heads", type=int, default=4)
    p_bench.add_argument("--batch-size", type=int, default=1)
    p_bench.add_argument("--breakpoints", type=int, default=1)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default="bench.csv")

    p_gen = sub.add_parser("gen", help="generate or rescale an event log")
    _add_config_args(p_gen)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--truth-out")
    p_gen.add_argument("--base", help="rescale this log instead of synthesizing")
    p_gen.add_argument("--base-truth")
    p_gen.add_argument("--rate", type=float, default=1.0)
    p_gen.add_argument("--quality-noise", help="'mean,std' added to worker quality")
    p_gen.add_argument("--arrivals", type=int, default=5000)
    p_gen.add_argument("--seed", type=int, default=0)

    p_inspect = sub.add_parser("inspect-log", help="summarize an event log")
    p_inspect.add_argument("--events", required=True)
    p_inspect.add_argument("--truth")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = _collect_config(args)
            if args.seeds:
                seeds = [int(s) for s in args.seeds.split(",")]
                items = tuple(
                    (f"{sec}.{key}", _config_value_str(config, key))
                    for sec, keys in _config_sections().items() for key in keys)
                payloads = [(items, s) for s in seeds]
                if args.jobs > 1:
                    with multiprocessing.Pool(args.jobs) as pool:
                        for out in pool.map(_run_seed, payloads):
                            print(f"finished {out}")
                else:
                    for payload in payloads:
                        print(f"finished {_run_seed(payload)}")
            else:
                paths = run_experiment(config)
                print(f"wrote {paths['metrics']}")
        elif args.command == "bench":
            pools = [int(x) for x in args.pool_sizes.split(",")]
            rows = bench_update_latency(pools, args.reps, d_model=args.d_model,
                                        n_heads=args.n_heads,
                                        batch_size=args.batch_size,
                                        breakpoints=args.breakpoints,
                                        seed=args.seed)
            with open(args.out, "w") as fh:
                fh.write("pool_size,mean_update_ms\n")
                for pool, ms in rows:
                    fh.write(f"{pool},{ms:.4f}\n")
            for pool, ms in rows:
                print(f"pool {pool:>6}: {ms:10.2f} ms")
        elif args.command == "gen":
            config = _collect_config(args)
            gen_dataset(args, config)
        elif args.command == "inspect-log":
            for key, value in inspect_log(args.events, args.truth).items():
                print(f"{key}: {value}")
    except CrowdRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _config_sections():
    from .config import _SECTIONS

    return _SECTIONS


def _config_value_str(config: ExperimentConfig, key: str) -> str:
    value = getattr(config, key)
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" for v in value)
    return str(value)


if __name__ == "__main__":
    sys.exit(main())
