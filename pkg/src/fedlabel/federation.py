"""Score-based federation round.

Clients send only :class:`ClientScoreMatrix` messages (label ids, softmax
scores on the public inputs, accuracy metadata). The server turns per-label
accuracies into beta weights and averages scores label by label into the
global score table.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import distill, nn_core
from .data import LabeledData, PrivateShard
from .distill import DistillConfig
from .nn_core import ModelSpec, Network, TrainConfig

log = logging.getLogger(__name__)

BETA_USER = "user"
BETA_USER_LABEL = "user-label"


class ProtocolError(RuntimeError):
    pass


class UndefinedAccuracyError(ValueError):
    pass


# -- wire and server types ----------------------------------------------------


@dataclass(frozen=True)
class ClientScoreMatrix:
    """The only thing a client ever sends to the server."""

    user: int
    iteration: int
    labels: tuple[int, ...]
    scores: np.ndarray
    label_accuracy: Mapping[int, float] = field(default_factory=dict)
    accuracy: float | None = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        object.__setattr__(self, "label_accuracy", {int(k): float(v) for k, v in self.label_accuracy.items()})
        if scores.ndim != 2 or scores.shape[1] != len(self.labels):
            raise nn_core.DimensionError(
                f"user {self.user}: scores {scores.shape} do not match {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(scores)):
            raise ValueError(f"user {self.user}: non-finite scores")

    @property
    def row_count(self) -> int:
        return self.scores.shape[0]

    def to_wire(self) -> dict:
        """JSON-ready audit form."""
        return {
            "user_id": self.user,
            "iteration": self.iteration,
            "label_ids": list(self.labels),
            "row_count": self.row_count,
            "scores": self.scores.tolist(),
            "label_accuracy": {str(k): v for k, v in sorted(self.label_accuracy.items())},
            "accuracy": self.accuracy,
        }

    @classmethod
    def from_wire(cls, msg: Mapping) -> "ClientScoreMatrix":
        scores = np.asarray(msg["scores"], dtype=np.float64).reshape(msg["row_count"], len(msg["label_ids"]))
        return cls(
            user=int(msg["user_id"]),
            iteration=int(msg["iteration"]),
            labels=tuple(msg["label_ids"]),
            scores=scores,
            label_accuracy={int(k): v for k, v in msg.get("label_accuracy", {}).items()},
            accuracy=msg.get("accuracy"),
        )


WIRE_FIELDS = ("user_id", "iteration", "label_ids", "row_count", "scores", "label_accuracy", "accuracy")


@dataclass
class GlobalScoreTable:
    iteration: int
    scores: np.ndarray

    @classmethod
    def zeros(cls, n_rows: int, n_labels: int) -> "GlobalScoreTable":
        return cls(0, np.zeros((n_rows, n_labels)))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.scores)


@dataclass(frozen=True)
class OverlapMap:
    owners: Mapping[int, tuple[int, ...]]
    n_labels: int

    @classmethod
    def from_label_sets(cls, label_sets: Mapping[int, Sequence[int]], n_labels: int) -> "OverlapMap":
        owners: dict[int, list[int]] = {l: [] for l in range(n_labels)}
        for user in sorted(label_sets):
            for l in label_sets[user]:
                if l not in owners:
                    raise ValueError(f"user {user}: label {l} outside 0..{n_labels - 1}")
                owners[l].append(user)
        return cls({l: tuple(u) for l, u in owners.items()}, n_labels)

    def uncovered(self) -> list[int]:
        return [l for l in range(self.n_labels) if not self.owners.get(l)]

    def is_unique(self, label: int) -> bool:
        return len(self.owners.get(label, ())) == 1


@dataclass(frozen=True)
class BetaWeights:
    weights: Mapping[tuple[int, int], float]

    def __getitem__(self, key: tuple[int, int]) -> float:
        return self.weights[key]

    def __contains__(self, key) -> bool:
        return key in self.weights


# -- operations ---------------------------------------------------------------


def predict_public_scores(
    model: Network, public_x: np.ndarray, labels: Sequence[int], user: int = 0, iteration: int = 0
) -> ClientScoreMatrix:
    if tuple(labels) != model.labels:
        raise nn_core.DimensionError(f"model outputs {model.labels} but client labels are {tuple(labels)}")
    return ClientScoreMatrix(user, iteration, tuple(labels), nn_core.forward(model, public_x))


def _predict_ids(scores: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Row-wise argmax as label ids; ties go to the lowest label id."""
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    return labels[order][np.argmax(scores[:, order], axis=1)]


def client_accuracy(scores: ClientScoreMatrix, y0: np.ndarray, restrict: bool = True) -> float:
    """Fraction of public rows whose argmax over the client's labels is right.

    With ``restrict`` only rows whose true label the client owns are counted.
    """
    y0 = np.asarray(y0)
    if y0.shape[0] != scores.row_count:
        raise nn_core.DimensionError(f"{y0.shape[0]} labels for {scores.row_count} score rows")
    pred = _predict_ids(scores.scores, scores.labels)
    rows = np.isin(y0, scores.labels) if restrict else np.ones(y0.shape[0], dtype=bool)
    if not rows.any():
        raise UndefinedAccuracyError(f"user {scores.user}: no public rows to evaluate")
    return float(np.mean(pred[rows] == y0[rows]))


def label_accuracies(scores: ClientScoreMatrix, y0: np.ndarray) -> dict[int, float]:
    """Per owned label: fraction of that label's public rows predicted as it."""
    y0 = np.asarray(y0)
    pred = _predict_ids(scores.scores, scores.labels)
    out = {}
    for l in scores.labels:
        rows = y0 == l
        if not rows.any():
            raise UndefinedAccuracyError(f"no public rows of label {l}")
        out[l] = float(np.mean(pred[rows] == l))
    return out


def compute_beta(overlap: OverlapMap, accuracies: Mapping[tuple[int, int], float]) -> BetaWeights:
    """beta = 1 for labels with a single owner, the owner's accuracy otherwise."""
    weights = {}
    for l in range(overlap.n_labels):
        owners = overlap.owners.get(l, ())
        for m in owners:
            if len(owners) == 1:
                weights[(m, l)] = 1.0
                continue
            if (m, l) not in accuracies:
                raise ProtocolError(f"no accuracy for user {m} on shared label {l}")
            acc = float(accuracies[(m, l)])
            if not 0.0 <= acc <= 1.0:
                raise ProtocolError(f"accuracy {acc} for user {m}, label {l} outside [0, 1]")
            weights[(m, l)] = acc
    return BetaWeights(weights)


def submission_accuracies(
    submissions: Sequence[ClientScoreMatrix], granularity: str = BETA_USER_LABEL
) -> dict[tuple[int, int], float]:
    """(user, label) -> accuracy used for beta, read from the messages."""
    out = {}
    for s in submissions:
        for l in s.labels:
            if granularity == BETA_USER_LABEL:
                if l in s.label_accuracy:
                    out[(s.user, l)] = s.label_accuracy[l]
            elif granularity == BETA_USER:
                if s.accuracy is not None:
                    out[(s.user, l)] = s.accuracy
            else:
                raise ValueError(f"unknown beta granularity {granularity!r}")
    return out


def global_update(
    submissions: Sequence[ClientScoreMatrix],
    beta: BetaWeights,
    overlap: OverlapMap,
    iteration: int | None = None,
) -> GlobalScoreTable:
    """Label-wise beta-weighted average of the submitted score columns.

    For every label, ``sum(beta * scores) / sum(beta)`` over the submitting
    owners, reduced in ascending user order.
    """
    if not submissions:
        raise ProtocolError("no submissions")
    for s in submissions:
        if not isinstance(s, ClientScoreMatrix):
            raise ProtocolError(f"server accepts score matrices only, got {type(s).__name__}")
    by_user = {}
    for s in submissions:
        if s.user in by_user:
            raise ProtocolError(f"user {s.user} submitted twice")
        by_user[s.user] = s
    rows = {s.row_count for s in submissions}
    if len(rows) != 1:
        raise ProtocolError(f"submissions cover different public row counts {sorted(rows)}")
    n = rows.pop()

    table = np.zeros((n, overlap.n_labels))
    for l in range(overlap.n_labels):
        owners = [m for m in sorted(overlap.owners.get(l, ())) if m in by_user]
        if not owners:
            raise ProtocolError(f"label {l} is not covered by any submitting user")
        weights = [beta[(m, l)] for m in owners]
        total = math.fsum(weights)
        if total <= 0:
            log.warning("label %d: all beta weights are zero; using an unweighted mean", l)
            weights, total = [1.0] * len(owners), float(len(owners))
        acc = np.zeros(n)
        for m, w in zip(owners, weights):
            sub = by_user[m]
            acc += w * sub.scores[:, sub.labels.index(l)]
        table[:, l] = acc / total
    if iteration is None:
        iteration = max(s.iteration for s in submissions)
    return GlobalScoreTable(iteration, table)


def global_accuracy(table: GlobalScoreTable, y0: np.ndarray, labels: Sequence[int] | None = None) -> float:
    """Argmax accuracy of the global table on the public rows.

    With ``labels`` both the columns and the evaluated rows are restricted to
    those labels (the per-user view of the global model).
    """
    if table.is_zero:
        raise UndefinedAccuracyError("the global table has not been aggregated yet")
    y0 = np.asarray(y0)
    if y0.shape[0] != table.scores.shape[0]:
        raise nn_core.DimensionError(f"{y0.shape[0]} labels for {table.scores.shape[0]} table rows")
    if labels is None:
        labels = range(table.scores.shape[1])
    labels = list(labels)
    rows = np.isin(y0, labels)
    if not rows.any():
        raise UndefinedAccuracyError("no public rows to evaluate")
    pred = _predict_ids(table.scores[rows][:, labels], labels)
    return float(np.mean(pred == y0[rows]))


# -- round driver ---------------------------------------------------------------


@dataclass
class ClientState:
    user: int
    labels: tuple[int, ...]
    spec: ModelSpec
    model: Network | None = None  # the client's own-architecture model, warm across rounds


@dataclass(frozen=True)
class RoundConfig:
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    beta_granularity: str = BETA_USER_LABEL
    restrict_local: bool = True
    restrict_beta: bool = True
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if self.beta_granularity not in (BETA_USER, BETA_USER_LABEL):
            raise ValueError(f"beta_granularity must be {BETA_USER!r} or {BETA_USER_LABEL!r}")


@dataclass
class FederationState:
    public: LabeledData
    clients: list[ClientState]
    shards: Sequence[Sequence[PrivateShard]]  # [user][iteration - 1]
    table: GlobalScoreTable
    n_labels: int
    config: RoundConfig = field(default_factory=RoundConfig)
    messages: list[ClientScoreMatrix] = field(default_factory=list)  # last round's submissions

    @property
    def overlap(self) -> OverlapMap:
        return OverlapMap.from_label_sets({c.user: c.labels for c in self.clients}, self.n_labels)


@dataclass
class UserMetrics:
    user: int
    local_acc: float
    global_acc: float
    build_acc: float
    cold_start: bool


@dataclass
class RoundMetrics:
    iteration: int
    users: list[UserMetrics]
    global_average_acc: float
    global_overall_acc: float
    seconds: dict[str, float] = field(default_factory=dict)


@dataclass
class _ClientResult:
    message: ClientScoreMatrix
    model: Network
    local_acc: float
    cold_start: bool
    seconds: dict[str, float]


def _seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def client_step(
    client: ClientState, shard: PrivateShard, state: FederationState, iteration: int
) -> _ClientResult:
    """Everything one client does in a round; only ``message`` leaves the device.

    Build trains the client's own architecture (warm across rounds) on the
    new shard and its public scores become the submission. Local update
    distils a fresh student from the global table and fine-tunes it on the
    shard; its accuracy is the round's local-update accuracy. Without global
    knowledge (first round) the built model doubles as the local model.
    """
    cfg = state.config
    public_x, y0 = state.public.x, state.public.y
    seed = _seed(cfg.seed, client.user, iteration)
    train_cfg = replace(cfg.train, seed=_seed(seed, 1))
    timings = {}

    t0 = time.perf_counter()
    if client.model is None:
        model = distill.cold_start(client.spec, shard, train_cfg, seed)
    else:
        model = distill.local_update(client.model, shard, train_cfg)
    msg = predict_public_scores(model, public_x, client.labels, client.user, iteration)
    msg = replace(
        msg,
        label_accuracy=label_accuracies(msg, y0),
        accuracy=client_accuracy(msg, y0, cfg.restrict_beta),
    )
    timings["build"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    targets, mask = distill.restrict_and_normalize(state.table.scores, client.labels)
    try:
        student = distill.distill_student(public_x, targets, mask, client.labels, cfg.distill, seed)
        local = distill.local_update(student, shard, replace(train_cfg, seed=_seed(seed, 2)))
        cold = False
    except distill.ColdStart:
        local, cold = model, True
    local_scores = predict_public_scores(local, public_x, client.labels, client.user, iteration)
    timings["local_update"] = time.perf_counter() - t0

    local_acc = client_accuracy(local_scores, y0, cfg.restrict_local)
    return _ClientResult(msg, model, local_acc, cold, timings)


def _workers(requested: int | None) -> int:
    if requested is None:
        env = os.environ.get("FEDLABEL_THREADS")
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, requested)


def server_round(
    submissions: Sequence[ClientScoreMatrix],
    overlap: OverlapMap,
    granularity: str = BETA_USER_LABEL,
    iteration: int | None = None,
) -> tuple[GlobalScoreTable, BetaWeights]:
    """Everything the server does with one round of messages."""
    beta = compute_beta(overlap, submission_accuracies(submissions, granularity))
    return global_update(submissions, beta, overlap, iteration), beta


def run_round(state: FederationState, iteration: int) -> tuple[FederationState, RoundMetrics]:
    """One pass of build, local update and global update for every client."""
    if iteration < 1:
        raise ValueError("iterations are numbered from 1")
    shards = []
    for c in state.clients:
        row = state.shards[c.user]
        if len(row) < iteration:
            raise ProtocolError(f"no shard for user {c.user} at iteration {iteration}")
        shards.append(row[iteration - 1])

    n_workers = min(_workers(state.config.workers), len(state.clients))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(lambda a: client_step(*a, state, iteration), zip(state.clients, shards)))
    else:
        results = [client_step(c, s, state, iteration) for c, s in zip(state.clients, shards)]

    t0 = time.perf_counter()
    table, _ = server_round(
        [r.message for r in results], state.overlap, state.config.beta_granularity, iteration
    )
    aggregate_seconds = time.perf_counter() - t0

    y0 = state.public.y
    users = []
    for c, r in zip(state.clients, results):
        users.append(
            UserMetrics(
                user=c.user,
                local_acc=r.local_acc,
                global_acc=global_accuracy(table, y0, c.labels),
                build_acc=r.message.accuracy,
                cold_start=r.cold_start,
            )
        )
    seconds = {"aggregate": aggregate_seconds}
    for phase in ("build", "local_update"):
        seconds[phase] = sum(r.seconds[phase] for r in results)

    clients = [replace(c, model=r.model) for c, r in zip(state.clients, results)]
    new_state = replace(state, clients=clients, table=table, messages=[r.message for r in results])
    metrics = RoundMetrics(
        iteration=iteration,
        users=users,
        global_average_acc=float(np.mean([u.global_acc for u in users])),
        global_overall_acc=global_accuracy(table, y0),
        seconds=seconds,
    )
    return new_state, metrics
