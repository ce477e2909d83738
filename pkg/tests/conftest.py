import numpy as np
import pytest

from fedmkgc import dataset as ds
from fedmkgc.fedproto import TrainingConfig, build_clients
from fedmkgc.objectives import LossWeights


def toy_federation(num_entities=10, num_relations=4, num_triples=40, clients=2, seed=0, rate=0.5):
    kg = ds.synth_features(
        ds.synth_kg(num_entities=num_entities, num_relations=num_relations, num_triples=num_triples, latent_dim=2,
                    num_types=2, seed=seed),
        d_v=3, d_d=3, variants_per_entity=2, seed=seed,
    )
    shards = ds.build_federation(kg, ds.PartitionConfig(num_clients=clients, availability_rate=rate, seed=seed))
    return kg, shards


def toy_config(**kw):
    weights = kw.pop("weights", {})
    base = dict(rounds=3, local_epochs=1, batch_size=8, negatives=3, lr=0.01, dim=4, diffusion_steps=3, patience=2)
    base.update(kw)
    return TrainingConfig(weights=LossWeights(**weights), **base)


def toy_clients(clients=2, seed=0, rate=0.5, **kw):
    kg, shards = toy_federation(clients=clients, seed=seed, rate=rate)
    cfg = toy_config(seed=seed, **kw)
    server, cl = build_clients(shards, kg.num_entities, cfg)
    return server, cl, cfg


@pytest.fixture
def toy():
    return toy_clients


def first_batch(client, size=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    from fedmkgc.kge import sample_negatives, with_inverse

    q = with_inverse(client.shard.train, client.shard.num_relations)[:size]
    return q, sample_negatives(q[:, 2], client.shard.num_entities, k, rng)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
