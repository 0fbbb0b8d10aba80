"""Client-side local update: distil a student on the client's own labels from
the global score table over public inputs, then fine-tune it on the client's
private shard.

Nothing here ever sees public ground-truth labels; only public inputs and
global scores come in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_core
from .nn_core import Network, TrainConfig

MASK_TOL = 1e-9


class ColdStart(Exception):
    """There is no usable global knowledge for this client yet."""


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 1.0
    student_hidden: tuple[int, ...] = (8, 16)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "student_hidden", tuple(self.student_hidden))

    def student_spec(self, labels, input_dim: int) -> nn_core.ModelSpec:
        return nn_core.dense_spec(self.student_hidden, labels, input_dim)


def restrict_and_normalize(global_scores: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Columns of the global table for ``labels``, rows renormalised to sum 1.

    Returns ``(targets, mask)``: ``mask`` marks the rows that carry any mass
    on these labels, and ``targets`` holds only those rows. An all-False mask
    means the client has to cold-start.
    """
    table = np.asarray(global_scores, dtype=np.float64)
    labels = list(labels)
    if any(not 0 <= l < table.shape[1] for l in labels):
        raise ValueError(f"labels {labels} outside the {table.shape[1]}-label table")
    sub = table[:, labels]
    totals = sub.sum(axis=1)
    mask = totals > MASK_TOL
    return sub[mask] / totals[mask, None], mask


def soften(probabilities: np.ndarray, temperature: float) -> np.ndarray:
    """Raise each probability to ``1/T`` and renormalise rows; T = 1 is a no-op."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(probabilities, dtype=np.float64)
    if temperature == 1.0:
        return p.copy()
    # work in log space so tiny probabilities do not underflow at small T
    logp = np.log(np.maximum(p, 1e-300)) / temperature
    logp -= logp.max(axis=1, keepdims=True)
    q = np.exp(logp)
    return q / q.sum(axis=1, keepdims=True)


def distill_student(
    public_x: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    labels,
    cfg: DistillConfig = DistillConfig(),
    seed: int = 0,
) -> Network:
    """Train a fresh student on the unmasked public inputs against soft targets.

    ``targets`` has one row per True entry of ``mask``; columns follow ``labels``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 2:
        raise ColdStart(f"only {int(mask.sum())} informative public row(s)")
    x = np.asarray(public_x, dtype=np.float64)[mask]
    soft = soften(targets, cfg.temperature)
    spec = cfg.student_spec(labels, x.shape[1])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    student = nn_core.init_network(spec, rng)
    train_cfg = _reseeded(cfg.train, seed)
    student, _ = nn_core.train(student, x, soft, train_cfg)
    return student


def local_update(net: Network, shard, cfg: TrainConfig = TrainConfig()) -> Network:
    """Fine-tune ``net`` on the private shard; Adam state carries over."""
    if len(shard) == 0:
        raise nn_core.InvalidInputError(f"user {shard.owner} iteration {shard.iteration}: empty shard")
    missing = set(shard.label_set) - set(net.labels)
    if missing:
        raise ValueError(f"shard labels {sorted(missing)} not among network outputs {net.labels}")
    targets = nn_core.one_hot(shard.labels, net.labels)
    trained, _ = nn_core.train(net, shard.features, targets, cfg)
    return trained


def cold_start(spec: nn_core.ModelSpec, shard, cfg: TrainConfig = TrainConfig(), seed: int = 0) -> Network:
    """No global knowledge yet: a fresh network of the client's own spec, shard only."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return local_update(nn_core.init_network(spec, rng), shard, _reseeded(cfg, seed))


def _reseeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=int(np.random.SeedSequence([cfg.seed, seed]).generate_state(1)[0]))
