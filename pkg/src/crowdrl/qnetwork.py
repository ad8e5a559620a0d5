"""State tensor construction and the set Q-network.

A decision state is the padded matrix whose row j concatenates the feature
of available task j with the feature of the arriving worker (plus the two
quality scalars in requester mode). The network maps every row to one Q
value through a stack that is equivariant under permutations of the active
rows: two row-wise feedforward layers, multi-head self-attention with a
residual feedforward, a second self-attention, and a linear head. Padding
rows are excluded from attention by masking, so growing the pad region
never changes an active task's value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, InputError

_WEIGHT_NAMES = (
    "rff1_w", "rff1_b",
    "rff2_w", "rff2_b",
    "att1_wq", "att1_wk", "att1_wv", "att1_wo",
    "rff3_w", "rff3_b",
    "att2_wq", "att2_wk", "att2_wv", "att2_wo",
    "head_w", "head_b",
)


@dataclass
class StateTensor:
    """Padded decision state: ``x`` is [max_T, row_dim]; the first
    ``n_active`` rows are real tasks, the rest are zero padding."""

    x: np.ndarray
    n_active: int

    @property
    def max_t(self) -> int:
        return self.x.shape[0]

    @property
    def row_dim(self) -> int:
        return self.x.shape[1]

    @property
    def active_mask(self) -> np.ndarray:
        mask = np.zeros(self.max_t, dtype=bool)
        mask[: self.n_active] = True
        return mask

    @property
    def is_empty(self) -> bool:
        return self.n_active == 0


def state_transform(
    worker_feat: np.ndarray,
    task_feats: Sequence[np.ndarray],
    max_t: int,
    quality_dims: tuple[float, Sequence[float]] | None = None,
) -> StateTensor:
    """Assemble the padded state matrix.

    Row j is [task_feat_j | worker_feat]; when ``quality_dims`` carries
    (worker quality, per-task qualities) each row is extended by the two
    scalars [task_quality_j, worker_quality]. Pools larger than ``max_t``
    are a capacity error: the caller must raise ``max_t``.
    """
    n = len(task_feats)
    if n > max_t:
        raise CapacityError(f"pool of {n} tasks exceeds max_t={max_t}")
    worker_feat = np.asarray(worker_feat, dtype=np.float64)
    row_dim = len(worker_feat) + (len(task_feats[0]) if n else len(worker_feat))
    if quality_dims is not None:
        row_dim += 2
    x = np.zeros((max_t, row_dim))
    for j, feat in enumerate(task_feats):
        feat = np.asarray(feat, dtype=np.float64)
        if len(feat) + len(worker_feat) + (2 if quality_dims else 0) != row_dim:
            raise InputError("task features must all have the same length")
        row = [feat, worker_feat]
        if quality_dims is not None:
            worker_q, task_qs = quality_dims
            row.append(np.array([task_qs[j], worker_q]))
        x[j] = np.concatenate(row)
    return StateTensor(x=x, n_active=n)


@dataclass(frozen=True)
class QNetworkConfig:
    row_dim: int
    d_model: int = 128
    n_heads: int = 4
    dtype: np.dtype = np.float32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}"
            )


class QNetwork:
    """The Q-value stack with its online and target parameter sets."""

    def __init__(self, config: QNetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.online = self._init_params(rng)
        self.target = self.online.clone()

    def _init_params(self, rng: np.random.Generator) -> T.ParamSet:
        d, rd = self.config.d_model, self.config.row_dim
        dt = self.config.dtype
        shapes = {
            "rff1_w": (rd, d), "rff1_b": (1, d),
            "rff2_w": (d, d), "rff2_b": (1, d),
            "att1_wq": (d, d), "att1_wk": (d, d), "att1_wv": (d, d), "att1_wo": (d, d),
            "rff3_w": (d, d), "rff3_b": (1, d),
            "att2_wq": (d, d), "att2_wk": (d, d), "att2_wv": (d, d), "att2_wo": (d, d),
            "head_w": (d, 1), "head_b": (1, 1),
        }
        params = T.ParamSet(dt)
        for name in _WEIGHT_NAMES:
            shape = shapes[name]
            if name.endswith("_b"):
                params.add(name, np.zeros(shape, dtype=dt))
            else:
                params.add(name, T.glorot_uniform(shape, rng, dt))
        return params

    # -- forward passes ---------------------------------------------------

    def forward_node(self, tape: T.Tape, state: StateTensor,
                     params: T.ParamSet | None = None) -> T.Node:
        """Record the full forward pass; returns the [max_T, 1] Q column.

        Only the first ``state.n_active`` entries are meaningful.
        """
        if state.is_empty:
            raise InputError("q_forward needs at least one active task row")
        p = self.online if params is None else params
        mask = state.active_mask
        h = self.config.n_heads

        def leaf(name: str) -> T.Node:
            return p.leaf(tape, name)

        x = T.constant(tape, state.x, dtype=p.dtype)
        h1 = T.rff_forward(tape, x, leaf("rff1_w"), leaf("rff1_b"))
        h2 = T.rff_forward(tape, h1, leaf("rff2_w"), leaf("rff2_b"))
        a1 = T.multihead_forward(tape, h2, leaf("att1_wq"), leaf("att1_wk"),
                                 leaf("att1_wv"), leaf("att1_wo"), h, mask)
        h3 = T.add(tape, h2, T.rff_forward(tape, a1, leaf("rff3_w"), leaf("rff3_b")))
        a2 = T.multihead_forward(tape, h3, leaf("att2_wq"), leaf("att2_wk"),
                                 leaf("att2_wv"), leaf("att2_wo"), h, mask)
        return T.add_bias(tape, T.matmul(tape, a2, leaf("head_w")), leaf("head_b"))

    def forward(self, state: StateTensor, use_target: bool = False) -> np.ndarray:
        """Q value for every active task row, in pool order."""
        params = self.target if use_target else self.online
        tape = T.Tape()
        q = self.forward_node(tape, state, params)
        return np.asarray(q.value[: state.n_active, 0], dtype=np.float64)

    def forward_batch(self, xs: np.ndarray, n_active: np.ndarray,
                      use_target: bool = False) -> np.ndarray:
        """Vectorized inference over a stack of states.

        ``xs`` is [B, n, row_dim] with zero padding, ``n_active`` the real
        row count per state. Returns [B, n] Q values with padded positions
        set to -inf so that max/argmax reductions ignore them. This path
        records no tape and is used for TD-target evaluation only; it
        computes the same function as :meth:`forward`.
        """
        p = self.target if use_target else self.online
        v = p.values
        b, n, _ = xs.shape
        h = self.config.n_heads
        d = self.config.d_model
        dh = d // h
        mask = np.arange(n)[None, :] < np.asarray(n_active)[:, None]  # [B, n]
        x = xs.astype(p.dtype, copy=False)

        def mha(inp: np.ndarray, prefix: str) -> np.ndarray:
            q = (inp @ v[prefix + "_wq"]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
            k = (inp @ v[prefix + "_wk"]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
            val = (inp @ v[prefix + "_wv"]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
            logits = np.matmul(q, k.transpose(0, 1, 3, 2)) / np.sqrt(
                np.asarray(dh, dtype=p.dtype))
            keymask = mask[:, None, None, :]  # [B, 1, 1, n]
            logits = np.where(keymask, logits, -np.inf)
            logits -= logits.max(axis=-1, keepdims=True)
            np.exp(logits, out=logits)
            logits /= logits.sum(axis=-1, keepdims=True)
            out = np.matmul(logits, val)  # [B, h, n, dh]
            out = out.transpose(0, 2, 1, 3).reshape(b, n, d)
            return out @ v[prefix + "_wo"]

        h1 = np.maximum(x @ v["rff1_w"] + v["rff1_b"], 0.0)
        h2 = np.maximum(h1 @ v["rff2_w"] + v["rff2_b"], 0.0)
        a1 = mha(h2, "att1")
        h3 = h2 + np.maximum(a1 @ v["rff3_w"] + v["rff3_b"], 0.0)
        a2 = mha(h3, "att2")
        q = (a2 @ v["head_w"] + v["head_b"])[..., 0]  # [B, n]
        return np.where(mask, q.astype(np.float64), -np.inf)

    # -- target maintenance and persistence --------------------------------

    def copy_to_target(self) -> None:
        """Overwrite the target parameters with the online ones."""
        self.target.copy_values_from(self.online)

    def save(self, path: str) -> None:
        arrays = {f"online.{k}": v for k, v in self.online.values.items()}
        arrays.update({f"target.{k}": v for k, v in self.target.values.items()})
        arrays["meta.row_dim"] = np.array(self.config.row_dim)
        arrays["meta.d_model"] = np.array(self.config.d_model)
        arrays["meta.n_heads"] = np.array(self.config.n_heads)
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "QNetwork":
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
        dtype = arrays["online.head_w"].dtype
        config = QNetworkConfig(
            row_dim=int(arrays["meta.row_dim"]),
            d_model=int(arrays["meta.d_model"]),
            n_heads=int(arrays["meta.n_heads"]),
            dtype=dtype,
        )
        net = cls(config)
        for name in _WEIGHT_NAMES:
            net.online.values[name][...] = arrays[f"online.{name}"]
            net.target.values[name][...] = arrays[f"target.{name}"]
        return net
