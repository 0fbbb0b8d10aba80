"""End-to-end experiment driver: data, schedule swaps, rounds, persistence."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data, federation
from .config import CsvSource, ExperimentConfig, ModelSchedule
from .federation import ClientState, FederationState, GlobalScoreTable, RoundConfig, RoundMetrics

log = logging.getLogger(__name__)


class RoundError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"round {iteration}: {type(cause).__name__}: {cause}")
        self.iteration = iteration


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    table: GlobalScoreTable
    user_names: list[str]


def build_data(cfg: ExperimentConfig) -> tuple[data.LabeledData, list[list[data.PrivateShard]]]:
    """Public dataset and the [user][iteration] shard grid, shifts applied."""
    label_sets = [cfg.label_ids(u.labels) for u in cfg.users]
    n_labels = len(cfg.labels)
    if isinstance(cfg.source, CsvSource):
        schema = data.load_schema(cfg.source.schema) if cfg.source.schema else data.CsvSchema()
        ingested = data.ingest_csv(cfg.source.path, schema)
        pool = data.recordings_to_features(
            ingested.recordings, data.LabelUniverse(cfg.labels), cfg.source.seconds
        )
        public, rest = data.split_public(pool, n_labels, cfg.public_per_label, cfg.seed)
        shards = data.partition_noniid(rest, label_sets, cfg.iterations, cfg.per_label_per_iteration, cfg.seed)
    else:
        world = data.SyntheticWorld(n_labels, cfg.source.params, cfg.seed)
        public = world.sample(range(n_labels), cfg.public_per_label, drift=0, stream=0)
        shards = data.synth_shards(world, label_sets, cfg.iterations, cfg.per_label_per_iteration)

    for m, user in enumerate(cfg.users):
        for at, magnitude in sorted(user.shifts.items()):
            shards[m][at - 1] = data.shift_shard(shards[m][at - 1], magnitude)
    return public, shards


def apply_model_schedule(client: ClientState, schedule: ModelSchedule, iteration: int) -> ClientState:
    """Swap in the scheduled architecture; the new model starts cold."""
    new = schedule.change_at(iteration)
    if new is None:
        return client
    log.info("user %d: architecture change at iteration %d", client.user + 1, iteration)
    return replace(client, spec=new, model=None)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None) -> ExperimentResult:
    """Run every round; with ``out_dir`` write snapshots, metrics and report files."""
    public, shards = build_data(cfg)
    clients = [
        ClientState(m, cfg.label_ids(u.labels), u.schedule.initial) for m, u in enumerate(cfg.users)
    ]
    state = FederationState(
        public=public,
        clients=clients,
        shards=shards,
        table=GlobalScoreTable.zeros(len(public), len(cfg.labels)),
        n_labels=len(cfg.labels),
        config=RoundConfig(
            distill=cfg.distill,
            train=cfg.train,
            beta_granularity=cfg.beta_granularity,
            restrict_local=cfg.restrict_local,
            restrict_beta=cfg.restrict_beta,
            seed=cfg.seed,
            workers=workers,
        ),
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
        np.save(out / "snapshots" / "public_labels.npy", public.y)

    metrics = []
    for i in range(1, cfg.iterations + 1):
        state.clients = [apply_model_schedule(c, u.schedule, i) for c, u in zip(state.clients, cfg.users)]
        try:
            state, m = federation.run_round(state, i)
        except Exception as exc:
            raise RoundError(i, exc) from exc
        metrics.append(m)
        log.info(
            "round %d: local %s global %s",
            i,
            " ".join(f"{u.local_acc:.3f}" for u in m.users),
            " ".join(f"{u.global_acc:.3f}" for u in m.users),
        )
        if out is not None:
            np.save(out / "snapshots" / f"global_scores_{i:03d}.npy", state.table.scores.astype(np.float64))
            if cfg.audit_messages:
                msgs = [msg.to_wire() for msg in state.messages]
                (out / "snapshots" / f"messages_{i:03d}.json").write_text(json.dumps(msgs))

    names = [f"User_{m + 1}" for m in range(len(cfg.users))]
    result = ExperimentResult(metrics, state.table, names)
    if out is not None:
        from .report import emit_report, write_rounds

        emit_report(metrics, out, names)
        write_rounds(metrics, out / "rounds.json", names)
    return result
