import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmkgc import fedproto as fp
from fedmkgc.fedproto import PermutationMap, ServerState, Upload

from conftest import toy_clients


def _upload(cid, ids, S, W=None, count=1):
    S = np.asarray(S, float)
    W = np.zeros((2, S.shape[1])) if W is None else W
    return Upload(cid, "local", np.asarray(ids), S, W, W, count)


def mean_oracle(num_global, dim, uploads, previous):
    out = previous.copy()
    for g in range(num_global):
        rows = [u.S[list(u.entity_ids).index(g)] for u in uploads if g in set(u.entity_ids)]
        if rows:
            acc = np.zeros(dim)
            for r in rows:
                acc = acc + r
            out[g] = acc / len(rows)
    return out


def test_permutation_map_validation():
    with pytest.raises(ValueError):
        PermutationMap(np.array([0, 0]), 3)
    with pytest.raises(ValueError):
        PermutationMap(np.array([0, 3]), 3)
    m = PermutationMap(np.array([2, 0]), 3)
    np.testing.assert_array_equal(m.existence(), [1, 0, 1])
    with pytest.raises(ValueError):
        m.gather(np.zeros((4, 2)))


def test_gather_in_local_order():
    table = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(PermutationMap(np.array([2, 0]), 3).gather(table), [table[2], table[0]])


def test_aggregate_two_clients_mean_and_single_copy():
    server = ServerState(np.full((3, 2), 9.0), np.zeros((2, 2)), np.zeros((2, 2)))
    fp.aggregate_structural(server, [_upload(0, [0, 1], [[1, 1], [2, 2]]), _upload(1, [1], [[4, 4]])])
    np.testing.assert_array_equal(server.S, [[1, 1], [3, 3], [9, 9]])  # entity 2 uncovered: kept


def test_aggregate_weights():
    server = ServerState(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    ups = [_upload(0, [0], [[0, 0]], A), _upload(1, [0], [[0, 0]], B)]
    fp.aggregate_weights(server, ups, [0.25, 0.75])
    np.testing.assert_allclose(server.W_v, 0.25 * A + 0.75 * B, atol=1e-15)
    fp.aggregate_weights(server, ups, [1.0, 0.0])
    np.testing.assert_array_equal(server.W_d, A)
    fp.aggregate_weights(server, ups, [0.5, 0.5])
    np.testing.assert_allclose(server.W_v, (A + B) / 2)
    with pytest.raises(ValueError):
        fp.aggregate_weights(server, ups, [0.5, 0.5 + 1e-8])


def test_upload_has_no_relation_field():
    names = {f.name for f in dataclasses.fields(Upload)}
    assert "R" not in names and not any("rel" in n.lower() for n in names)
    _, clients, _ = toy_clients(objective="mmfed3", imputer="none")
    up = clients[0].upload()
    assert up.variant == "replica"
    assert not any(np.shares_memory(getattr(up, f), clients[0].S.data) for f in ("S",))


def test_distribute_identity_single_client():
    _, clients, cfg = toy_clients(clients=1, imputer="none", objective="mmfede")
    c = clients[0]
    server = fp.init_server(len(c.shard.entity_ids), (3, 3), cfg)
    server.S = server.S[: c.shard.num_entities]
    c.pmap = PermutationMap(np.arange(c.shard.num_entities), c.shard.num_entities)
    fp.distribute(server, c)
    np.testing.assert_array_equal(c.S.data, server.S)
    before = server.S.copy()
    fp.aggregate_structural(server, [c.upload()])
    np.testing.assert_array_equal(server.S, before)


def test_distribute_fills_replica():
    server, clients, _ = toy_clients(objective="mmfed3", imputer="none")
    c = clients[1]
    c.replica["S"].assign(c.replica["S"].data + 1)
    fp.distribute(server, c)
    np.testing.assert_array_equal(c.replica["S"].data, server.S[c.shard.entity_ids])
    np.testing.assert_array_equal(c.replica["W_d"].data, server.W_d)


def test_mmfede_has_no_replica():
    _, clients, _ = toy_clients(objective="mmfede", imputer="none")
    assert clients[0].replica is None and clients[0].upload().variant == "local"


def test_round_single_client_zero_weights_is_local_training():
    w = {"lambda_di": 0.0, "mu_ld": 0.0, "eta_fd": 0.0}
    server, clients, cfg = toy_clients(clients=1, objective="mmfede", imputer="none", weights=w)
    losses = fp.run_round(server, clients, cfg)
    c = clients[0]
    assert np.isfinite(losses[0])
    np.testing.assert_array_equal(server.S[c.shard.entity_ids], c.S.data)
    np.testing.assert_array_equal(server.W_v, c.W_v.data)
    assert server.round == 1


def test_round_deterministic():
    outs = []
    for _ in range(2):
        server, clients, cfg = toy_clients(objective="mmfed3", imputer="hide")
        fp.run_round(server, clients, cfg)
        outs.append(fp.state_dict(server, clients))
    for k in outs[0]:
        np.testing.assert_array_equal(outs[0][k], outs[1][k])


def test_nonfinite_loss_aborts():
    server, clients, cfg = toy_clients(objective="mmfede", imputer="none")
    clients[0].S.assign(np.full_like(clients[0].S.data, np.nan))
    clients[0].pmap = clients[0].pmap  # keep mapping
    server.S[:] = np.nan
    with pytest.raises(FloatingPointError):
        fp.run_round(server, clients, cfg)


def test_too_many_negatives_rejected():
    server, clients, cfg = toy_clients(objective="mmfede", imputer="none", negatives=50)
    with pytest.raises(ValueError):
        fp.run_round(server, clients, cfg)


def test_sample_fraction_subset():
    server, clients, cfg = toy_clients(clients=3, objective="mmfede", imputer="none", sample_fraction=0.34)
    losses = fp.run_round(server, clients, cfg)
    assert len(losses) == 1


def test_warmstart_touches_only_structure():
    server, clients, cfg = toy_clients(objective="mmfed3", imputer="hide")
    before = fp.state_dict(server, clients)
    fp.warmstart_structural(clients, server, 1, cfg)
    after = fp.state_dict(server, clients)
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed
    assert all(k.endswith("/S") or k.endswith("/R") for k in changed), changed
    assert "server/S" in changed


def test_warmstart_zero_rounds_passthrough():
    server, clients, cfg = toy_clients(objective="mmfede", imputer="none")
    before = fp.state_dict(server, clients)
    fp.warmstart_structural(clients, server, 0, cfg)
    after = fp.state_dict(server, clients)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_early_stopping_flat_validation(monkeypatch):
    server, clients, cfg = toy_clients(objective="mmfede", imputer="none", rounds=50, patience=3)
    monkeypatch.setattr(fp, "run_round", lambda *a, **k: {})
    res = fp.train_until_stop(server, clients, cfg)
    assert res.rounds_run == 4 and res.best_round == 1


def test_early_stopping_improving_runs_to_end(monkeypatch):
    server, clients, cfg = toy_clients(objective="mmfede", imputer="none", rounds=5, patience=2)
    calls = iter(range(100))
    from fedmkgc.kge import RankingMetrics

    def fake_eval(clients, split, seed):
        v = 0.1 * (next(calls) + 1)
        m = RankingMetrics(v, v, v, v, 1)
        return [m], m

    monkeypatch.setattr(fp, "run_round", lambda *a, **k: {})
    monkeypatch.setattr(fp, "evaluate_clients", fake_eval)
    res = fp.train_until_stop(server, clients, cfg)
    assert res.rounds_run == 5 and res.best_round == 5


def test_train_restores_best_state(monkeypatch):
    server, clients, cfg = toy_clients(objective="mmfede", imputer="none", rounds=4, patience=5)
    from fedmkgc.kge import RankingMetrics

    scores = iter([0.5, 0.1, 0.2, 0.3])
    snapshots = []

    def fake_eval(cl, split, seed):
        snapshots.append(fp.state_dict(server, clients)["server/S"].copy())
        v = next(scores)
        m = RankingMetrics(v, v, v, v, 1)
        return [m], m

    monkeypatch.setattr(fp, "evaluate_clients", fake_eval)
    res = fp.train_until_stop(server, clients, cfg)
    assert res.best_round == 1
    np.testing.assert_array_equal(server.S, snapshots[0])


def test_checkpoint_round_trip(tmp_path):
    server, clients, cfg = toy_clients(objective="mmfed3", imputer="hide")
    fp.run_round(server, clients, cfg)
    fp.quantize_state(server, clients)
    fp.save_checkpoint(tmp_path / "ck", server, clients, {"seed": 0, "config_hash": "x", "metric_log": []})
    doc, state = fp.read_checkpoint(tmp_path / "ck")
    assert doc["round"] == 1 and doc["config_hash"] == "x"
    ref = fp.state_dict(server, clients)
    for k, v in ref.items():
        np.testing.assert_array_equal(state[k], v)


def test_checkpoint_missing_manifest(tmp_path):
    from fedmkgc.dataset import FormatError

    with pytest.raises(FormatError):
        fp.read_checkpoint(tmp_path)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 10), st.integers(0, 2**31 - 1))
def test_aggregation_matches_oracle_any_order(num_clients, seed):
    rng = np.random.default_rng(seed)
    n, d = 25, 3
    prev = rng.normal(size=(n, d))
    ups = []
    for c in range(num_clients):
        ids = rng.choice(n, size=rng.integers(1, n), replace=False)
        ups.append(_upload(c, ids, rng.normal(size=(len(ids), d))))
    server = ServerState(prev.copy(), np.zeros((2, d)), np.zeros((2, d)))
    fp.aggregate_structural(server, ups)
    want = mean_oracle(n, d, ups, prev)
    assert np.abs(server.S - want).max() <= 1e-12
    shuffled = ServerState(prev.copy(), np.zeros((2, d)), np.zeros((2, d)))
    fp.aggregate_structural(shuffled, [ups[i] for i in rng.permutation(len(ups))])
    assert np.abs(shuffled.S - want).max() <= 1e-6


def test_two_identical_clients_aggregate_to_either():
    server = ServerState(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    S = np.random.default_rng(0).normal(size=(3, 2))
    fp.aggregate_structural(server, [_upload(0, [0, 1, 2], S), _upload(1, [0, 1, 2], S)])
    np.testing.assert_array_equal(server.S, S)
