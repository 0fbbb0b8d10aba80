import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedlabel import data, nn_core
from fedlabel.data import (
    CapacityError,
    CsvSchema,
    InvalidRateError,
    LabeledData,
    LabelUniverse,
    RawRecording,
    SchemaError,
    SyntheticParams,
)


def recording(n, rate=100.0, label="Walk", seed=0):
    rng = np.random.default_rng(seed)
    return RawRecording(np.arange(n) / rate, rng.normal(size=(n, 3)), rate, label)


# -- labels -------------------------------------------------------------------


def test_label_universe_ids_and_errors():
    u = LabelUniverse(["Sit", "Walk", "Stand"])
    assert u.label_set(["Stand", "Sit"]) == (2, 0)
    with pytest.raises(KeyError, match="Run"):
        u.id("Run")
    with pytest.raises(ValueError):
        LabelUniverse(["Sit", "Sit"])


def test_make_label_set_keeps_order_and_checks():
    assert data.make_label_set([3, 1], 4) == (3, 1)
    with pytest.raises(ValueError):
        data.make_label_set([], 4)
    with pytest.raises(ValueError):
        data.make_label_set([4], 4)


def test_shard_rejects_foreign_labels():
    with pytest.raises(ValueError, match="foreign"):
        data.PrivateShard(0, 1, np.zeros((2, 3)), np.array([0, 2]), (0, 1))


def test_recording_rate_must_be_positive():
    with pytest.raises(InvalidRateError):
        RawRecording(np.zeros(2), np.zeros((2, 3)), 0.0, "Sit")


# -- windowing ----------------------------------------------------------------


def test_window_drops_remainder():
    segs = data.window(recording(450, rate=100.0))
    assert len(segs) == 2
    assert all(s.shape == (200, 3) for s in segs)


def test_window_shorter_than_one_segment():
    assert data.window(recording(199)) == []


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 2000), rate=st.sampled_from([50.0, 100.0, 200.0]))
def test_window_count_property(n, rate):
    rec = RawRecording(np.arange(n) / rate, np.zeros((n, 3)), rate, "x") if n else None
    if rec is None:
        return
    segs = data.window(rec)
    assert len(segs) == n // int(2 * rate)


# -- decimation ---------------------------------------------------------------


def test_decimate_identity_when_rates_match():
    seg = np.random.default_rng(0).normal(size=(100, 3))
    out = data.decimate(seg, 50, 50)
    assert np.array_equal(out, seg)
    assert out is not seg


def test_decimate_length_and_dc():
    seg = np.full((200, 3), 9.81)
    out = data.decimate(seg, 100, 50)
    assert out.shape == (100, 3)
    assert np.max(np.abs(out - 9.81)) < 1e-9


def test_decimate_suppresses_aliasing_tone():
    t = np.arange(400) / 200.0
    tone = np.sin(2 * np.pi * 40.0 * t)  # above the 25 Hz output Nyquist
    out = data.decimate(np.column_stack([tone] * 3), 200, 50)
    core = out[10:-10]
    assert np.sqrt(np.mean(core**2)) / np.sqrt(0.5) < 0.05


def test_decimate_keeps_slow_tone():
    t = np.arange(400) / 100.0
    tone = np.sin(2 * np.pi * 2.0 * t)
    out = data.decimate(np.column_stack([tone] * 3), 100, 50)
    expected = tone[::2]
    assert np.max(np.abs(out[20:-20, 0] - expected[20:-20])) < 1e-3


@pytest.mark.parametrize("src,dst", [(75, 50), (40, 50), (100, 0)])
def test_decimate_rejects_bad_factor(src, dst):
    with pytest.raises(InvalidRateError):
        data.decimate(np.zeros((10, 3)), src, dst)


# -- dwt ----------------------------------------------------------------------


def test_dwt_haar_example():
    out = data.dwt_approx(np.array([1.0, 3.0, 5.0, 7.0]))
    assert np.allclose(out, [4 / math.sqrt(2), 12 / math.sqrt(2)], atol=1e-15)


def test_dwt_odd_length_repeats_last_sample():
    out = data.dwt_approx(np.array([1.0, 3.0, 5.0]))
    assert np.allclose(out, [4 / math.sqrt(2), 10 / math.sqrt(2)], atol=1e-15)


def test_dwt_empty_rejected():
    with pytest.raises(ValueError):
        data.dwt_approx(np.zeros((0, 3)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=64).filter(lambda v: len(v) % 2 == 0))
def test_dwt_energy_of_constant_pairs(values):
    # Haar approximation of a signal whose pairs are equal preserves energy
    sig = np.repeat(np.asarray(values[: len(values) // 2]), 2)
    out = data.dwt_approx(sig)
    assert np.isclose(np.sum(out**2), np.sum(sig**2), rtol=1e-9, atol=1e-9)


# -- feature windows ----------------------------------------------------------


def test_feature_window_length_and_axis_order():
    seg = np.zeros((200, 3))
    seg[:, 0], seg[:, 1], seg[:, 2] = 1.0, 2.0, 3.0
    feat = data.make_feature_window(seg, 100)
    assert feat.shape == (150,)
    assert np.allclose(feat[:50], math.sqrt(2), atol=1e-9)
    assert np.allclose(feat[50:100], 2 * math.sqrt(2), atol=1e-9)
    assert np.allclose(feat[100:], 3 * math.sqrt(2), atol=1e-9)


def test_feature_window_requires_triaxial():
    with pytest.raises(ValueError, match="triaxial"):
        data.make_feature_window(np.zeros((200, 2)), 100)


def test_recordings_to_features_skips_unknown_labels():
    recs = [recording(400, label="Walk"), recording(400, label="Jump", seed=1)]
    out = data.recordings_to_features(recs, LabelUniverse(["Walk"]))
    assert out.x.shape == (2, 150)
    assert list(out.y) == [0, 0]


def test_recordings_to_features_empty():
    out = data.recordings_to_features([], LabelUniverse(["Walk"]))
    assert out.x.shape == (0, 150)


# -- csv ----------------------------------------------------------------------


def test_ingest_four_rows(fixtures_dir):
    res = data.ingest_csv(fixtures_dir / "four_rows.csv")
    assert res.malformed == 0
    assert len(res.recordings) == 1
    rec = res.recordings[0]
    assert rec.label == "Sit"
    assert rec.samples.shape == (4, 3)
    assert rec.rate == pytest.approx(100.0)


def test_ingest_skips_malformed_rows(fixtures_dir):
    res = data.ingest_csv(fixtures_dir / "malformed.csv")
    assert res.malformed == 1
    assert res.recordings[0].samples.shape == (3, 3)


def test_ingest_malformed_strict(fixtures_dir):
    with pytest.raises(SchemaError, match=":3"):
        data.ingest_csv(fixtures_dir / "malformed.csv", CsvSchema(on_malformed="error"))


def test_ingest_empty_file(fixtures_dir):
    with pytest.raises(SchemaError, match="no header"):
        data.ingest_csv(fixtures_dir / "empty.csv")


def test_ingest_missing_column(fixtures_dir):
    with pytest.raises(SchemaError, match="gt"):
        data.ingest_csv(fixtures_dir / "four_rows.csv", CsvSchema(label="gt"))


def test_hhar_style_schema(fixtures_dir):
    schema = data.load_schema(fixtures_dir / "hhar_schema.cfg")
    assert schema.timestamp == "Creation_Time" and schema.timestamp_unit == "ns"
    res = data.ingest_csv(fixtures_dir / "hhar_style.csv", schema)
    assert [r.label for r in res.recordings] == ["walk", "sit"]
    assert all(r.rate == pytest.approx(100.0) for r in res.recordings)
    feats = data.recordings_to_features(res.recordings, LabelUniverse(["walk", "sit"]))
    assert feats.x.shape == (7, 150)
    assert list(feats.y) == [0] * 5 + [1] * 2


def test_schema_unknown_key(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("timestamp = t\ncolour = red\n")
    with pytest.raises(SchemaError, match="colour"):
        data.load_schema(p)


# -- synthetic ----------------------------------------------------------------


def test_synth_shape_and_balance():
    d = data.synth_generate(4, 2000, dim=150, seed=0)
    assert d.x.shape == (8000, 150)
    assert np.bincount(d.y).tolist() == [2000] * 4


def test_synth_is_deterministic():
    a = data.synth_generate(3, 50, dim=20, seed=5)
    b = data.synth_generate(3, 50, dim=20, seed=5)
    c = data.synth_generate(3, 50, dim=20, seed=6)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.x.tobytes() != c.x.tobytes()


def test_synth_drift_moves_means_only():
    world = data.SyntheticWorld(2, SyntheticParams(dim=10), seed=0)
    assert np.array_equal(world.drift_offset(0, 0), np.zeros(10))
    assert np.linalg.norm(world.drift_offset(0, 3, group=1)) > 0
    a = world.sample([0], 5, drift=2, stream=1, group=1)
    b = world.sample([0], 5, drift=2, stream=1, group=1)
    assert a.x.tobytes() == b.x.tobytes()


def test_well_separated_synthetic_data_is_learnable():
    d = data.synth_generate(4, 500, dim=150, seed=0, params=SyntheticParams(separation=6.0))
    order = np.random.default_rng(0).permutation(len(d))
    cut = int(0.8 * len(d))
    tr, te = order[:cut], order[cut:]
    labels = (0, 1, 2, 3)
    spec = nn_core.dense_spec([16, 16], labels, 150)
    net, _ = nn_core.train(
        nn_core.init_network(spec, 0), d.x[tr], nn_core.one_hot(d.y[tr], labels), nn_core.TrainConfig()
    )
    acc = nn_core.accuracy(nn_core.forward(net, d.x[te]), nn_core.one_hot(d.y[te], labels))
    assert acc >= 0.95


# -- partitioning -------------------------------------------------------------


def small_pool():
    return data.synth_generate(4, 100, dim=6, seed=1)


def test_partition_sizes_and_iterations():
    grid = data.partition_noniid(small_pool(), [(0, 1), (1, 2), (2, 3)], iterations=3, per_label_per_iteration=10)
    for m, row in enumerate(grid):
        assert [s.iteration for s in row] == [1, 2, 3]
        for shard in row:
            assert len(shard) == 20
            assert shard.owner == m
            assert set(np.unique(shard.labels)) <= set(shard.label_set)


def test_partition_rows_are_disjoint():
    grid = data.partition_noniid(small_pool(), [(0, 1), (1, 2), (2, 3)], iterations=3, per_label_per_iteration=10)
    used = np.concatenate([s.source_rows for row in grid for s in row])
    assert used.size == np.unique(used).size


def test_partition_capacity_error_names_label():
    with pytest.raises(CapacityError) as err:
        data.partition_noniid(small_pool(), [(0, 1), (1, 2)], iterations=6, per_label_per_iteration=10)
    assert err.value.label == 1


def test_split_public_disjoint_from_rest():
    pool = small_pool()
    pub, rest = data.split_public(pool, 4, 20, seed=0)
    assert np.bincount(pub.y).tolist() == [20] * 4
    assert len(pub) + len(rest) == len(pool)
    both = {r.tobytes() for r in pub.x} & {r.tobytes() for r in rest.x}
    assert not both


def test_synth_shards_shapes():
    world = data.SyntheticWorld(4, SyntheticParams(dim=8), seed=0)
    grid = data.synth_shards(world, [(0, 1), (2, 3)], iterations=2, per_label_per_iteration=5)
    assert len(grid) == 2 and len(grid[0]) == 2
    assert set(grid[1][1].labels) == {2, 3}
    assert grid[0][0].features.tobytes() != grid[0][1].features.tobytes()


def test_shift_full_swap_exchanges_centroids():
    x = np.vstack([np.zeros((4, 2)), np.ones((4, 2))])
    y = np.array([0] * 4 + [1] * 4)
    shard = data.PrivateShard(0, 1, x, y, (0, 1))
    moved = data.shift_shard(shard, 1.0)
    assert np.allclose(moved.features[y == 0], 1.0)
    assert np.allclose(moved.features[y == 1], 0.0)
    assert np.array_equal(shard.features, x)


def test_labeled_data_index():
    d = LabeledData(np.zeros((4, 1)), np.array([1, 0, 1, 1]))
    idx = d.index()
    assert idx[0].tolist() == [1] and idx[1].tolist() == [0, 2, 3]


@pytest.mark.parametrize("n,rate,expected,per", [(1000, 100.0, 5, 200), (190, 100.0, 0, 200), (225, 50.0, 2, 100)])
def test_window_duration_examples(n, rate, expected, per):
    segs = data.window(recording(n, rate=rate))
    assert len(segs) == expected
    assert all(s.shape == (per, 3) for s in segs)


def test_dwt_pair_of_ones():
    assert data.dwt_approx(np.array([1.0, 1.0]))[0] == pytest.approx(1.41421356, abs=1e-8)


def test_dwt_parseval_with_detail_oracle():
    sig = np.random.default_rng(4).normal(size=8)
    approx = data.dwt_approx(sig)
    detail = np.array([(sig[2 * k] - sig[2 * k + 1]) / math.sqrt(2) for k in range(4)])
    assert abs(np.sum(approx**2) + np.sum(detail**2) - np.sum(sig**2)) < 1e-10


@pytest.mark.parametrize("rate", [50, 100, 200])
def test_two_second_window_always_150_features(rate):
    seg = np.random.default_rng(rate).normal(size=(2 * rate, 3))
    assert data.make_feature_window(seg, rate).shape == (150,)


def test_zero_segment_gives_zero_features():
    assert np.array_equal(data.make_feature_window(np.zeros((200, 3)), 100), np.zeros(150))


def test_full_scale_demand_exceeds_small_source():
    # 15 iterations x 2000 per label over the three-user topology
    pool = data.synth_generate(4, 3000, dim=2, seed=0)
    with pytest.raises(CapacityError) as err:
        data.partition_noniid(pool, [(0, 1), (1, 2), (2, 3)], iterations=15, per_label_per_iteration=2000)
    assert (err.value.label, err.value.needed, err.value.available) == (0, 30000, 3000)
