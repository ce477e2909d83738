import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedmkgc import dataset as ds
from fedmkgc.dataset import PartitionConfig


@pytest.fixture(scope="module")
def kg():
    return ds.synth_features(ds.synth_kg(num_entities=80, num_relations=9, num_triples=600, seed=3), d_v=6, d_d=5, seed=3)


def test_load_triples_interns_in_first_appearance_order(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("b\tr1\ta\na\tr2\tc\n\nb\tr1\tc\n")
    kg = ds.load_triples(p)
    assert kg.entity_names == ["b", "a", "c"]
    assert kg.relation_names == ["r1", "r2"]
    np.testing.assert_array_equal(kg.triples, [[0, 0, 1], [1, 1, 2], [0, 0, 2]])


def test_load_triples_reports_line(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("a\tr\tb\na\tr\n")
    with pytest.raises(ds.ParseError, match=":2:"):
        ds.load_triples(p)


def test_load_triples_empty(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("\n\n")
    with pytest.raises(ds.EmptyGraphError):
        ds.load_triples(p)


def test_matrix_round_trip_float32(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 3))
    ds.write_matrix(tmp_path / "m.bin", m)
    back = ds.read_matrix(tmp_path / "m.bin", rows=5)
    np.testing.assert_array_equal(back, m.astype(np.float32).astype(np.float64))


def test_matrix_errors(tmp_path):
    path = tmp_path / "m.bin"
    ds.write_matrix(path, np.ones((4, 2)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ds.FormatError, match="truncated"):
        ds.read_matrix(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ds.FormatError, match="magic"):
        ds.read_matrix(path)
    path.write_bytes(blob)
    with pytest.raises(ds.FormatError, match="rows"):
        ds.load_features(path, 5)


def test_synth_graph_shapes(kg):
    assert kg.num_entities == 80 and kg.num_relations == 9
    assert len({tuple(t) for t in kg.triples}) == len(kg.triples)
    assert len(kg.feature_variants["v"]) == 80 and kg.feature_variants["v"][0].shape == (4, 6)


def test_relation_partition_is_disjoint_and_covering(kg):
    shards = ds.partition_by_relation(kg, PartitionConfig(num_clients=3, seed=1))
    rels = [set(s.relation_ids) for s in shards]
    assert set().union(*rels) == set(range(kg.num_relations))
    assert sum(len(r) for r in rels) == kg.num_relations
    assert sum(len(s.train) for s in shards) == len(kg.triples)
    for s in shards:
        glob = np.stack([s.entity_ids[s.train[:, 0]], s.relation_ids[s.train[:, 1]], s.entity_ids[s.train[:, 2]]], 1)
        assert {tuple(t) for t in glob} <= {tuple(t) for t in kg.triples}


def test_partition_more_clients_than_relations(kg):
    with pytest.raises(ds.ConfigError):
        ds.partition_by_relation(kg, PartitionConfig(num_clients=10))


@pytest.mark.parametrize("n", [10, 11, 19, 100, 237])
def test_split_counts_floor(n):
    tr, va, te = ds.split_train_valid_test(np.arange(3 * n).reshape(n, 3), seed=0)
    assert len(va) == len(te) == int(np.floor(n * 0.1 + 1e-9))
    assert len(tr) + len(va) + len(te) == n


def test_split_rejects_bad_ratios():
    with pytest.raises(ds.ConfigError):
        ds.split_train_valid_test(np.zeros((5, 3)), ratios=(0.5, 0.5, 0.5))


def test_masks_are_row_constant_and_rate_reasonable():
    rng = np.random.default_rng(0)
    masks = ds.generate_missing_masks(4000, {"v": 3, "d": 2}, 0.3, rng)
    for m in masks.values():
        assert np.all(m == m[:, :1])
    p = masks["v"][:, 0].mean()
    assert abs(p - 0.3) < 3 * np.sqrt(0.3 * 0.7 / 4000)


def test_masks_extreme_rates():
    rng = np.random.default_rng(0)
    assert ds.generate_missing_masks(10, {"v": 2, "d": 2}, 1.0, rng)["v"].min() == 1.0
    assert ds.generate_missing_masks(10, {"v": 2, "d": 2}, 0.0, rng)["d"].max() == 0.0


def test_padding_only_touches_missing_rows():
    rng = np.random.default_rng(0)
    feats = np.ones((6, 4))
    mask = np.repeat(np.array([1, 0, 1, 0, 0, 1.0])[:, None], 4, axis=1)
    out = ds.pad_missing(feats, mask, rng)
    np.testing.assert_array_equal(out[mask[:, 0] > 0], 1.0)
    assert np.abs(out[mask[:, 0] == 0]).max() < 1.0


def test_dirichlet_large_alpha_is_uniform():
    rng = np.random.default_rng(0)
    assign = ds.dirichlet_assign(6000, 3, 1e6, rng)
    counts = np.bincount(assign, minlength=3)
    assert stats.chisquare(counts).pvalue > 0.01


def test_dirichlet_small_alpha_concentrates():
    rng = np.random.default_rng(0)
    top = [np.bincount(ds.dirichlet_assign(200, 3, 0.01, rng), minlength=3).max() / 200 for _ in range(20)]
    assert np.median(top) > 0.9


def test_build_federation_shapes(kg):
    shards = ds.build_federation(kg, PartitionConfig(num_clients=3, seed=2))
    for s in shards:
        assert s.feat_v.shape == (s.num_entities, 6) and s.mask_d.shape == (s.num_entities, 5)
        n = len(s.all_triples)
        assert len(s.valid) == int(np.floor(0.1 * n + 1e-9))


def test_build_federation_deterministic(kg):
    a = ds.build_federation(kg, PartitionConfig(seed=5))
    b = ds.build_federation(kg, PartitionConfig(seed=5))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.train, y.train)
        np.testing.assert_array_equal(x.feat_v, y.feat_v)


def test_write_and_read_partition(tmp_path, kg):
    cfg = PartitionConfig(seed=4)
    shards = ds.build_federation(kg, cfg)
    manifest = ds.write_partition(tmp_path / "p", kg, cfg, shards)
    assert manifest["avg_relations"] == pytest.approx(kg.num_relations / 3)
    _, back = ds.read_partition(tmp_path / "p")
    for x, y in zip(shards, back):
        np.testing.assert_array_equal(x.entity_ids, y.entity_ids)
        np.testing.assert_array_equal(x.test, y.test)
        np.testing.assert_array_equal(x.mask_v, y.mask_v)
        np.testing.assert_allclose(x.feat_d, y.feat_d, atol=1e-6)


def test_write_partition_byte_identical(tmp_path, kg):
    cfg = PartitionConfig(seed=4)
    for name in ("a", "b"):
        ds.write_partition(tmp_path / name, kg, cfg, ds.build_federation(kg, cfg))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_avg_relations_237_at_three_clients():
    names = [f"r{i}" for i in range(237)]
    ents = [f"e{i}" for i in range(20)]
    rng = np.random.default_rng(0)
    triples = np.stack([rng.integers(0, 20, 237), np.arange(237), rng.integers(0, 20, 237)], 1)
    kg = ds.MultimodalKG(ents, names, triples)
    shards = ds.partition_by_relation(kg, PartitionConfig(num_clients=3))
    assert np.mean([s.num_relations for s in shards]) == 79.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_partition_property_every_triple_once(clients, seed):
    kg = ds.synth_kg(num_entities=30, num_relations=6, num_triples=120, seed=seed % 7)
    shards = ds.partition_by_relation(kg, PartitionConfig(num_clients=clients, seed=seed))
    seen = []
    for s in shards:
        seen += [(s.entity_ids[h], s.relation_ids[r], s.entity_ids[t]) for h, r, t in s.train]
    assert sorted(seen) == sorted(map(tuple, kg.triples.tolist()))
