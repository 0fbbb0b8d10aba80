"""Acceptance criteria, one test each; every test logs a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from fedlabel import cli, config, data, federation, nn_core
from fedlabel.experiment import run_experiment
from fedlabel.federation import ClientScoreMatrix, OverlapMap, ProtocolError
from fedlabel.report import summarize

import oracles
from test_nn_core import jitter_biases, max_relative_error, random_spec

SEEDS = range(5)
SIT, WALK, STAND, STAIRS = range(4)
TOPOLOGY = {0: (SIT, WALK), 1: (WALK, STAND), 2: (STAND, STAIRS)}

_runs = {}


def topology_run(seed, shift=None):
    """Cached run of the bundled three-user topology."""
    key = (seed, shift)
    if key not in _runs:
        overrides = {"seed": str(seed)}
        if shift:
            overrides["user.2.shift"] = shift
        start = time.perf_counter()
        result = run_experiment(config.load_bundled("paper-topology", overrides))
        _runs[key] = (result, time.perf_counter() - start)
    return _runs[key]


def test_ac1_protocol_oracle(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    sets = {0: (0, 1), 1: (1, 2)}
    worst = 0.0
    for _ in range(20):
        subs = [ClientScoreMatrix(m, 1, ls, rng.dirichlet(np.ones(len(ls)), size=4)) for m, ls in sets.items()]
        beta = federation.BetaWeights({(m, l): float(rng.uniform(0.01, 1)) for m, ls in sets.items() for l in ls})
        table = federation.global_update(subs, beta, OverlapMap.from_label_sets(sets, 3))
        expected = oracles.brute_force_global(
            {s.user: (list(s.labels), s.scores.tolist()) for s in subs}, beta.weights, 4, 3
        )
        worst = max(worst, float(np.max(np.abs(table.scores - np.array(expected)))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 1.0
    acceptance_log("AC1 protocol oracle", ok, f"max abs diff {worst:.2e}, {elapsed:.3f}s")
    assert ok


def test_ac2_beta_rules(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    overlap = OverlapMap.from_label_sets(TOPOLOGY, 4)
    ok = True
    for _ in range(50):
        acc = {(m, l): float(rng.uniform()) for m, ls in TOPOLOGY.items() for l in ls}
        beta = federation.compute_beta(overlap, acc)
        ok &= beta[(0, SIT)] == 1.0 and beta[(2, STAIRS)] == 1.0
        for key in [(0, WALK), (1, WALK), (1, STAND), (2, STAND)]:
            ok &= 0.0 <= beta[key] <= 1.0 and beta[key] == acc[key]
    elapsed = time.perf_counter() - start
    ok = bool(ok) and elapsed < 1.0
    acceptance_log("AC2 beta rules", ok, f"50 assignments, {elapsed:.3f}s")
    assert ok


def test_ac3_gradient_check(acceptance_log):
    start = time.perf_counter()
    worst, kinds = 0.0, set()
    for seed in range(24):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        kinds.update(layer.kind for layer in spec.layers)
        net = jitter_biases(nn_core.init_network(spec, seed=rng), rng)
        x = rng.normal(size=(3, spec.input_dim))
        t = rng.dirichlet(np.ones(spec.n_outputs), size=3)
        numeric = oracles.central_difference(lambda: nn_core.loss_crossentropy(nn_core.forward(net, x), t), net.params)
        worst = max(worst, max_relative_error(nn_core.backward(net, x, t), numeric))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and kinds == {nn_core.DENSE, nn_core.CONV1D} and elapsed < 30
    acceptance_log("AC3 gradient check", ok, f"24 nets, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_ac4_preprocessing(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    shape_ok = data.make_feature_window(rng.normal(size=(200, 3)), 100).shape == (150,)

    sig = rng.normal(size=8)
    approx = data.dwt_approx(sig)
    detail = np.array([(sig[2 * k] - sig[2 * k + 1]) / math.sqrt(2) for k in range(4)])
    parseval = abs(np.sum(approx**2) + np.sum(detail**2) - np.sum(sig**2))

    dc = float(np.max(np.abs(data.decimate(np.full((200, 3), 9.81), 100, 50) - 9.81)))

    t = np.arange(400) / 200.0
    tone = np.sin(2 * np.pi * 40.0 * t)
    out = data.decimate(np.column_stack([tone] * 3), 200, 50)
    ratio = float(np.sqrt(np.mean(out[10:-10] ** 2)) / np.sqrt(np.mean(tone**2)))

    elapsed = time.perf_counter() - start
    ok = shape_ok and parseval < 1e-10 and dc < 1e-9 and ratio < 0.05 and elapsed < 5
    acceptance_log(
        "AC4 preprocessing",
        ok,
        f"150 features={shape_ok}, parseval {parseval:.1e}, dc {dc:.1e}, alias rms {ratio:.3f}",
    )
    assert ok


@pytest.mark.slow
def test_ac5_global_beats_local(acceptance_log):
    increases, every_user, total = [], True, 0.0
    for seed in SEEDS:
        result, seconds = topology_run(seed)
        total += seconds
        rows = [
            (m.iteration, f"User_{u.user + 1}", u.local_acc, u.global_acc) for m in result.metrics for u in m.users
        ]
        summary = summarize(rows)
        every_user &= all(glob > local for _, local, glob, _ in summary[:-1])
        increases.append(summary[-1][3])
    grand = float(np.mean(increases))
    ok = bool(every_user) and grand >= 3.0 and max(s for _, s in _runs.values()) < 300
    acceptance_log(
        "AC5 global > local",
        ok,
        f"increase per seed {', '.join(f'{v:.2f}' for v in increases)}; mean {grand:.2f} pts; {total:.0f}s",
    )
    assert ok


@pytest.mark.slow
def test_ac6_overlap_robustness(acceptance_log):
    passes, detail, total = 0, [], 0.0
    for seed in SEEDS:
        result, seconds = topology_run(seed, shift="5: 1.5")
        total += seconds
        before, after = result.metrics[3].users[1], result.metrics[4].users[1]
        local_drop = before.local_acc - after.local_acc
        global_drop = before.global_acc - after.global_acc
        ok = local_drop >= 0.10 and global_drop < local_drop / 2
        passes += ok
        detail.append(f"{100 * local_drop:.1f}/{100 * global_drop:.1f}")
    ok = passes >= 4 and total < 300
    acceptance_log("AC6 overlap robustness", ok, f"{passes}/5 seeds; local/global drop pts {' '.join(detail)}")
    assert ok


def test_ac7_score_only_wire(acceptance_log):
    start = time.perf_counter()
    net = nn_core.init_network(nn_core.dense_spec([4], (0, 1), 6), 0)
    public = np.random.default_rng(0).normal(size=(5, 6))
    msg = federation.predict_public_scores(net, public, (0, 1), user=0, iteration=1)
    wire = msg.to_wire()
    fields_ok = tuple(wire) == federation.WIRE_FIELDS
    arrays_ok = np.asarray(wire["scores"]).shape == (5, 2)
    n_params = net.n_parameters()
    no_params = all(
        not (isinstance(v, (list, np.ndarray)) and np.asarray(v, dtype=object).size >= n_params)
        for k, v in wire.items()
        if k != "scores"
    )
    try:
        federation.global_update([net], federation.BetaWeights({}), OverlapMap.from_label_sets({0: (0, 1)}, 2))
        rejects = False
    except ProtocolError:
        rejects = True
    elapsed = time.perf_counter() - start
    ok = fields_ok and arrays_ok and no_params and rejects and elapsed < 1
    acceptance_log("AC7 score-only wire", ok, f"fields {','.join(wire)}; network rejected={rejects}")
    assert ok


@pytest.mark.slow
def test_ac8_determinism(tmp_path, acceptance_log):
    start = time.perf_counter()
    codes = [
        cli.main(["simulate", "--config", "paper-topology", "--seed", "3", "--out", str(tmp_path / name)])
        for name in ("a", "b")
    ]
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0] and a == b and elapsed < 600
    acceptance_log("AC8 determinism", ok, f"exit codes {codes}, identical={a == b}, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_ac9_architecture_swaps(acceptance_log):
    cfg = config.load_bundled("paper-topology")
    swaps = sorted({at for u in cfg.users for at, _ in u.schedule.changes})
    result, seconds = topology_run(0)
    seen = [(m.iteration, u.user) for m in result.metrics for u in m.users]
    complete = seen == [(i, u) for i in range(1, 16) for u in range(3)]
    finite = all(
        0.0 <= v <= 1.0 for m in result.metrics for u in m.users for v in (u.local_acc, u.global_acc, u.build_acc)
    )
    ok = swaps == [5, 6, 10, 14] and complete and finite and len(result.metrics) == 15 and seconds < 300
    acceptance_log("AC9 architecture swaps", ok, f"swaps at {swaps}; {len(seen)} metric rows; {seconds:.0f}s")
    assert ok
