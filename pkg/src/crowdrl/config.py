"""Experiment configuration: flat key=value sections, env overrides, hashing.

The file format is INI-style with one section per concern. Any value can
also be overridden through the environment (``CROWDRL__SECTION__KEY``) or
through ``--set section.key=value`` on the command line; precedence is
file < environment < command line.
"""

from __future__ import annotations  # keeps dataclass field types as strings

import hashlib
import os
from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .entities import FeatureSchema
from .errors import ConfigError
from .policy import DdqnPolicy, LinearSchedule, PolicyConfig
from .baselines import GreedyCosinePolicy, GreedyNNPolicy, LinUCBPolicy, RandomPolicy
from .simulator import SyntheticWorldConfig

ENV_PREFIX = "CROWDRL__"

POLICY_NAMES = ("ddqn", "random", "greedy-cos", "greedy-nn", "linucb")


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    mode: str = "synthetic"                 # synthetic | replay
    policy: str = "ddqn"
    action_mode: str = "single"             # single | list
    list_k: int = 5
    seed: int = 0
    arrivals: int = 10000                   # synthetic mode
    warmup_minutes: int = 43200             # replay mode (first 30 days)
    events_path: str = ""
    truth_path: str = ""
    out_dir: str = "runs/experiment"

    # [schema]
    n_categories: int = 20
    n_domains: int = 2
    award_bin_edges: tuple[float, ...] = (15.0, 35.0, 75.0, 150.0)
    history_window: int = 20

    # [network]
    d_model: int = 128
    n_heads: int = 4
    dtype: str = "float32"

    # [learning]
    gamma_w: float = 0.3
    gamma_r: float = 0.5
    learning_rate: float = 0.001
    batch_size: int = 64
    buffer_capacity: int = 1000
    target_copy_every: int = 100
    train_every: int = 1
    priority_alpha: float = 0.6
    priority_floor: float = 1e-3
    predictor_mode: str = "expectation"     # expectation | exact
    quality_p: float = 2.0
    linucb_alpha: float = 1.0
    greedy_nn_hidden: int = 64
    greedy_nn_epochs: int = 5
    greedy_nn_lr: float = 0.01

    # [policy]
    balance_weight: float = 0.25
    epsilon_start: float = 0.9
    epsilon_end: float = 0.98
    epsilon_steps: int = 5000
    noise_decay_start: float = 1.0
    noise_decay_end: float = 0.1
    noise_decay_steps: int = 5000

    # [world]
    n_workers: int = 200
    initial_tasks: int = 24
    task_gap_minutes: float = 1200.0
    arrival_gap_minutes: float = 5.0
    deadline_min_minutes: int = 43200
    deadline_max_minutes: int = 86400
    award_choices: tuple[float, ...] = (10.0, 20.0, 50.0, 100.0, 200.0)
    primary_interest: float = 0.9
    background_interest: float = 0.02
    award_sensitivity_min: float = 0.5
    award_sensitivity_max: float = 3.0
    base_skip_min: float = 0.0
    base_skip_max: float = 0.2
    quality_min: float = 0.3
    quality_max: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("synthetic", "replay"):
            raise ConfigError(f"experiment.mode: unknown mode {self.mode!r}")
        if self.policy not in POLICY_NAMES:
            raise ConfigError(
                f"experiment.policy: {self.policy!r} not in {POLICY_NAMES}")
        if self.action_mode not in ("single", "list"):
            raise ConfigError(f"experiment.action_mode: {self.action_mode!r}")
        if not 0.0 <= self.balance_weight <= 1.0:
            raise ConfigError("policy.balance_weight must lie in [0, 1]")
        if self.quality_p < 1.0:
            raise ConfigError("learning.quality_p must be >= 1")
        for name in ("gamma_w", "gamma_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"learning.{name} must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("network.dtype must be float32 or float64")

    # -- derived objects -----------------------------------------------------

    def schema(self) -> FeatureSchema:
        return FeatureSchema(self.n_categories, self.n_domains,
                             self.award_bin_edges, self.history_window)

    def world(self) -> SyntheticWorldConfig:
        return SyntheticWorldConfig(
            n_categories=self.n_categories,
            n_domains=self.n_domains,
            n_workers=self.n_workers,
            initial_tasks=self.initial_tasks,
            task_gap_minutes=self.task_gap_minutes,
            arrival_gap_minutes=self.arrival_gap_minutes,
            deadline_range_minutes=(self.deadline_min_minutes,
                                    self.deadline_max_minutes),
            award_choices=self.award_choices,
            award_bin_edges=self.award_bin_edges,
            primary_interest=self.primary_interest,
            background_interest=self.background_interest,
            award_sensitivity_range=(self.award_sensitivity_min,
                                     self.award_sensitivity_max),
            base_skip_range=(self.base_skip_min, self.base_skip_max),
            quality_range=(self.quality_min, self.quality_max),
            history_window=self.history_window,
        )

    def build_policy(self):
        single = self.action_mode == "single"
        feature_dim = self.schema().dim
        if self.policy == "random":
            return RandomPolicy(single_task=single)
        if self.policy == "greedy-cos":
            return GreedyCosinePolicy(
                requester_variant=self.balance_weight < 1.0, single_task=single)
        if self.policy == "linucb":
            return LinUCBPolicy(feature_dim,
                                requester_variant=self.balance_weight < 1.0,
                                alpha=self.linucb_alpha, single_task=single)
        if self.policy == "greedy-nn":
            return GreedyNNPolicy(feature_dim,
                                  requester_variant=self.balance_weight < 1.0,
                                  hidden=self.greedy_nn_hidden,
                                  epochs=self.greedy_nn_epochs,
                                  learning_rate=self.greedy_nn_lr,
                                  seed=self.seed, single_task=single)
        policy_cfg = PolicyConfig(
            balance_weight=self.balance_weight,
            mode=self.action_mode,
            list_k=self.list_k if self.action_mode == "list" else None,
            epsilon=LinearSchedule(self.epsilon_start, self.epsilon_end,
                                   self.epsilon_steps),
            noise_decay=LinearSchedule(self.noise_decay_start,
                                       self.noise_decay_end,
                                       self.noise_decay_steps),
        )
        return DdqnPolicy(
            feature_dim, policy_cfg,
            d_model=self.d_model, n_heads=self.n_heads,
            gamma_w=self.gamma_w, gamma_r=self.gamma_r,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            buffer_capacity=self.buffer_capacity,
            target_copy_every=self.target_copy_every,
            train_every=self.train_every, predictor_mode=self.predictor_mode,
            priority_alpha=self.priority_alpha,
            priority_floor=self.priority_floor,
            dtype=np.float32 if self.dtype == "float32" else np.float64,
            seed=self.seed,
        )


_SECTIONS = {
    "experiment": ("mode", "policy", "action_mode", "list_k", "seed", "arrivals",
                   "warmup_minutes", "events_path", "truth_path", "out_dir"),
    "schema": ("n_categories", "n_domains", "award_bin_edges", "history_window"),
    "network": ("d_model", "n_heads", "dtype"),
    "learning": ("gamma_w", "gamma_r", "learning_rate", "batch_size",
                 "buffer_capacity", "target_copy_every", "train_every",
                 "priority_alpha", "priority_floor", "predictor_mode",
                 "quality_p", "linucb_alpha", "greedy_nn_hidden",
                 "greedy_nn_epochs", "greedy_nn_lr"),
    "policy": ("balance_weight", "epsilon_start", "epsilon_end", "epsilon_steps",
               "noise_decay_start", "noise_decay_end", "noise_decay_steps"),
    "world": ("n_workers", "initial_tasks", "task_gap_minutes",
              "arrival_gap_minutes", "deadline_min_minutes",
              "deadline_max_minutes", "award_choices", "primary_interest",
              "background_interest", "award_sensitivity_min",
              "award_sensitivity_max", "base_skip_min", "base_skip_max",
              "quality_min", "quality_max"),
}

_FIELD_SECTION = {name: sec for sec, names in _SECTIONS.items() for name in names}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(float(x) for x in raw.split(",") if x.strip() != "")
        return raw
    except ValueError as exc:
        section = _FIELD_SECTION[name]
        raise ConfigError(f"{section}.{name}: cannot parse {raw!r}") from exc


def apply_overrides(config: ExperimentConfig,
                    overrides: dict[str, str]) -> ExperimentConfig:
    """Overrides keyed as 'section.key'."""
    updates = {}
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if key not in _FIELD_SECTION or _FIELD_SECTION[key] != section:
            raise ConfigError(f"unknown config field {dotted!r}")
        updates[key] = _parse_value(key, raw)
    return replace(config, **updates)


def env_overrides(environ=os.environ) -> dict[str, str]:
    out = {}
    for var, raw in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        dotted = var[len(ENV_PREFIX):].lower().replace("__", ".")
        out[dotted] = raw
    return out


def load_config(path: str | None = None,
                overrides: dict[str, str] | None = None,
                environ=os.environ) -> ExperimentConfig:
    config = ExperimentConfig()
    if path is not None:
        parser = ConfigParser()
        try:
            read = parser.read(path)
        except ConfigParserError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not read:
            raise ConfigError(f"config file {path!r} not found")
        file_overrides = {}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                file_overrides[f"{section}.{key}"] = raw
        config = apply_overrides(config, file_overrides)
    config = apply_overrides(config, env_overrides(environ))
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            value = getattr(config, name)
            if isinstance(value, tuple):
                value = ",".join(f"{v:g}" for v in value)
            lines.append(f"{name} = {value}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()[:16]
