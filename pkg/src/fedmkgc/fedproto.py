"""Federated round loop: permutation-mapped distribution, local training, hybrid aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import numcore as nc
from .dataset import ClientShard, FormatError, read_matrix, write_matrix
from .fusion import Fusion, FusionKind
from .hide import DiffusionSchedule, build_hypermodal, impute_table, make_imputer
from .kge import (
    RankingMetrics,
    aggregate_metrics,
    evaluate_split,
    init_entities,
    init_relations,
    sample_negatives,
    with_inverse,
)
from .numcore import Adam, NumericError, Param, substream
from .objectives import LossWeights, ObjectiveKind, modal_tables, total_loss


@dataclass
class TrainingConfig:
    rounds: int = 100
    local_epochs: int = 3
    batch_size: int = 1024
    negatives: int = 256
    lr: float = 1e-3
    patience: int = 5
    sample_fraction: float = 1.0
    warmstart_rounds: int = 0
    objective: str = "mmfed3"
    imputer: str = "hide"
    fusion: str = "weighted"
    recon: str = "cra"
    dim: int = 32
    gamma: float = 9.0
    diffusion_steps: int = 10
    beta_low: float = 5e-4
    beta_up: float = 5e-2
    beta_scale: float | None = 1e-4
    diffusion_start: int | None = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("local_epochs", "batch_size", "negatives", "patience", "dim", "diffusion_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rounds < 0 or self.warmstart_rounds < 0:
            raise ValueError("round counts must be non-negative")
        if self.dim % 2:
            raise ValueError("dim must be even (complex pairs)")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        ObjectiveKind(self.objective)
        FusionKind(self.fusion)
        from .hide import ImputerKind, ReconKind

        ImputerKind(self.imputer)
        ReconKind(self.recon)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.diffusion_steps, self.beta_low, self.beta_up, self.beta_scale)


# mapping -----------------------------------------------------------------------


@dataclass
class PermutationMap:
    """Local entity index -> global entity index for one client."""

    local_to_global: np.ndarray
    num_global: int

    def __post_init__(self):
        ids = np.asarray(self.local_to_global, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_global):
            raise ValueError("permutation map points outside the global entity range")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("permutation map is not injective")
        self.local_to_global = ids

    def gather(self, table: np.ndarray) -> np.ndarray:
        if table.shape[0] != self.num_global:
            raise ValueError(f"global table has {table.shape[0]} rows, map expects {self.num_global}")
        return table[self.local_to_global].copy()

    def existence(self) -> np.ndarray:
        v = np.zeros(self.num_global, dtype=np.float64)
        v[self.local_to_global] = 1.0
        return v


@dataclass
class ServerState:
    S: np.ndarray
    W_v: np.ndarray
    W_d: np.ndarray
    round: int = 0


@dataclass(frozen=True)
class Upload:
    """Value copy sent to the server. There is deliberately no relation field."""

    client_id: int
    variant: str  # "replica" or "local"
    entity_ids: np.ndarray
    S: np.ndarray
    W_v: np.ndarray
    W_d: np.ndarray
    train_count: int


class ClientState:
    """All parameters a client owns, plus its optimizer and data."""

    def __init__(self, shard: ClientShard, cfg: TrainingConfig, num_global: int):
        if shard.feat_v is None or shard.feat_d is None:
            raise ValueError(f"client {shard.client_id} has no features")
        self.shard = shard
        self.client_id = shard.client_id
        self.cfg = cfg
        self.kind = ObjectiveKind(cfg.objective)
        self.pmap = PermutationMap(shard.entity_ids, num_global)
        self.gamma = cfg.gamma
        rng = substream(cfg.seed, f"init/client{shard.client_id}")
        n, d = shard.num_entities, cfg.dim
        self.feat_v = np.asarray(shard.feat_v, dtype=np.float64)
        self.feat_d = np.asarray(shard.feat_d, dtype=np.float64)
        self.avail_v = shard.available("v")
        self.avail_d = shard.available("d")
        self.S = Param(init_entities(n, d, cfg.gamma, rng), "S")
        self.R = Param(init_relations(shard.num_relations, d, rng), "R")
        self.W_v = Param(rng.normal(scale=1.0 / np.sqrt(self.feat_v.shape[1]), size=(self.feat_v.shape[1], d)), "W_v")
        self.W_d = Param(rng.normal(scale=1.0 / np.sqrt(self.feat_d.shape[1]), size=(self.feat_d.shape[1], d)), "W_d")
        self.fusion = Fusion(cfg.fusion, d, shard.num_relations, rng)
        self.imputer = make_imputer(cfg.imputer, d, rng, cfg.schedule(), cfg.recon, cfg.diffusion_start)
        self.replica = None
        if self.kind.uses_server_branch:
            self.replica = {
                "S": Param(self.S.data, "replica.S"),
                "W_v": Param(self.W_v.data, "replica.W_v"),
                "W_d": Param(self.W_d.data, "replica.W_d"),
            }
        self.structure_only = False
        self.round_global: np.ndarray | None = None
        self.round_previous: np.ndarray | None = None
        self.rng = substream(cfg.seed, f"train/client{shard.client_id}")
        self.optimizer = Adam(self.parameters(), lr=cfg.lr)

    def named_parameters(self) -> dict[str, Param]:
        out = {"S": self.S, "R": self.R, "W_v": self.W_v, "W_d": self.W_d}
        out.update({k: p for k, p in self.fusion.params.items()})
        if self.imputer is not None:
            out.update({f"imputer.{k}": p for k, p in self.imputer.named_parameters().items()})
        if self.replica is not None:
            out.update({f"replica.{k}": p for k, p in self.replica.items()})
        return out

    def parameters(self) -> list[Param]:
        return list(self.named_parameters().values())

    # embedding tables ----------------------------------------------------------

    def fused_table(self, rng: np.random.Generator | None = None, impute_missing: bool = True) -> list[nc.Tensor]:
        """Client-branch entity table(s); split fusion returns the three modal tables."""
        if self.structure_only:
            return [self.S]
        S, V, D = modal_tables(self, self.S, self.W_v, self.W_d)
        if impute_missing and self.imputer is not None:
            hm = build_hypermodal(S, V, D, self.avail_v, self.avail_d)
            S, V, D = hm.views(impute_table(hm, self.imputer, rng))
        if self.fusion.kind is FusionKind.SPLIT:
            return [S, V, D]
        return [self.fusion.fuse(S, V, D)]

    def entity_embedding(self, rng=None, impute_missing: bool = True) -> np.ndarray:
        tables = self.fused_table(rng, impute_missing)
        return sum(t.data for t in tables) / len(tables)

    def scorer(self, rng: np.random.Generator):
        """``score_all(heads, rels)`` over every local entity, for ranking."""
        tables = [t.data for t in self.fused_table(rng)]
        if self.structure_only:
            rels = [self.R.data]
        elif self.fusion.kind is FusionKind.SPLIT:
            rels = [r.data for r in self.fusion.relation_tables(self.R)]
        else:
            rels = [self.R.data]
        n = self.shard.num_entities

        def score_all(heads, rel_ids):
            heads = np.ascontiguousarray(heads, dtype=np.int64)
            rel_ids = np.ascontiguousarray(rel_ids, dtype=np.int64)
            cands = np.ascontiguousarray(np.broadcast_to(np.arange(n, dtype=np.int64), (len(heads), n)))
            logits = [self.gamma - kernels.rotate_distance(E, R, heads, rel_ids, cands) for E, R in zip(tables, rels)]
            if len(logits) == 1:
                return logits[0]
            return np.log(sum(nc.softmax_np(z) for z in logits) / len(logits))

        return score_all

    def evaluate(self, split: str, seed: int) -> RankingMetrics:
        rng = substream(seed, f"eval/client{self.client_id}")
        return evaluate_split(self.shard, split, self.scorer(rng))

    # protocol ------------------------------------------------------------------

    def upload(self) -> Upload:
        src = self.replica if self.replica is not None else {"S": self.S, "W_v": self.W_v, "W_d": self.W_d}
        return Upload(
            self.client_id,
            "replica" if self.replica is not None else "local",
            self.pmap.local_to_global.copy(),
            src["S"].data.copy(),
            src["W_v"].data.copy(),
            src["W_d"].data.copy(),
            int(len(self.shard.train)),
        )

    def local_train(self, epochs: int, optimizer: Adam | None = None) -> float:
        """Mini-batch Adam over train queries (tail and inverse-head); returns the mean loss."""
        cfg = self.cfg
        optimizer = optimizer or self.optimizer
        queries = with_inverse(self.shard.train, self.shard.num_relations)
        n = self.shard.num_entities
        if cfg.negatives >= n:
            raise ValueError(f"client {self.client_id}: {cfg.negatives} negatives need more than {n} entities")
        total, steps = 0.0, 0
        kind = ObjectiveKind.MMFEDE if self.structure_only else self.kind
        for _ in range(epochs):
            order = self.rng.permutation(len(queries))
            for start in range(0, len(order), cfg.batch_size):
                batch = queries[order[start:start + cfg.batch_size]]
                negs = sample_negatives(batch[:, 2], n, cfg.negatives, self.rng)
                optimizer.zero_grad()
                loss, parts = total_loss(self, batch, negs, cfg.weights, kind, self.rng)
                if not np.isfinite(loss.data):
                    raise NumericError(f"client {self.client_id}: non-finite loss {parts}")
                loss.backward()
                optimizer.step()
                total += float(loss.data)
                steps += 1
        return total / max(steps, 1)


# server side -------------------------------------------------------------------


def init_server(num_global: int, feat_dims: tuple[int, int], cfg: TrainingConfig) -> ServerState:
    rng = substream(cfg.seed, "init/server")
    d_v, d_d = feat_dims
    return ServerState(
        S=init_entities(num_global, cfg.dim, cfg.gamma, rng),
        W_v=rng.normal(scale=1.0 / np.sqrt(d_v), size=(d_v, cfg.dim)),
        W_d=rng.normal(scale=1.0 / np.sqrt(d_d), size=(d_d, cfg.dim)),
    )


def distribute(server: ServerState, client: ClientState) -> None:
    """Overwrite the client's structural rows and projections with the global ones."""
    rows = client.pmap.gather(server.S)
    client.S.assign(rows)
    client.W_v.assign(server.W_v)
    client.W_d.assign(server.W_d)
    if client.replica is not None:
        client.replica["S"].assign(rows)
        client.replica["W_v"].assign(server.W_v)
        client.replica["W_d"].assign(server.W_d)
    if client.kind in (ObjectiveKind.MMFEDEC, ObjectiveKind.MMFEDPROX):
        snapshot = client.entity_embedding(impute_missing=False)
        if client.round_previous is None:
            client.round_previous = snapshot
        client.round_global = snapshot


def aggregate_structural(server: ServerState, uploads: list[Upload]) -> None:
    """Per-entity mean over the uploading clients that hold the entity; uncovered rows kept."""
    if not uploads:
        return
    total = np.zeros_like(server.S)
    count = np.zeros(server.S.shape[0])
    for up in uploads:
        if up.S.shape != (len(up.entity_ids), server.S.shape[1]):
            raise ValueError(f"client {up.client_id} uploaded S of shape {up.S.shape}")
        np.add.at(total, up.entity_ids, up.S)
        np.add.at(count, up.entity_ids, 1.0)
    covered = count > 0
    server.S[covered] = total[covered] / count[covered, None]


def aggregate_weights(server: ServerState, uploads: list[Upload], alphas) -> None:
    alphas = np.asarray(alphas, dtype=np.float64)
    if len(alphas) != len(uploads):
        raise ValueError("one weight per upload is required")
    if abs(alphas.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {alphas.sum()!r}, not 1")
    if (alphas < 0).any():
        raise ValueError("aggregation weights must be non-negative")
    server.W_v = sum(a * up.W_v for a, up in zip(alphas, uploads))
    server.W_d = sum(a * up.W_d for a, up in zip(alphas, uploads))


def triple_alphas(uploads: list[Upload]) -> np.ndarray:
    counts = np.array([up.train_count for up in uploads], dtype=np.float64)
    return counts / counts.sum()


def sample_clients(clients: list[ClientState], fraction: float, rng: np.random.Generator) -> list[ClientState]:
    if fraction >= 1.0:
        return list(clients)
    k = max(1, int(round(fraction * len(clients))))
    picked = np.sort(rng.choice(len(clients), size=k, replace=False))
    return [clients[i] for i in picked]


def run_round(server: ServerState, clients: list[ClientState], cfg: TrainingConfig,
              rng: np.random.Generator | None = None) -> dict[int, float]:
    """One communication round; returns the mean training loss per participating client."""
    rng = rng if rng is not None else substream(cfg.seed, f"sample/round{server.round}")
    active = sample_clients(clients, cfg.sample_fraction, rng)
    diagnostics = {}
    uploads = []
    for client in active:
        distribute(server, client)
        diagnostics[client.client_id] = client.local_train(cfg.local_epochs)
        if client.round_global is not None:
            client.round_previous = client.entity_embedding(substream(cfg.seed, f"prev/client{client.client_id}"))
        uploads.append(client.upload())
    aggregate_structural(server, uploads)
    aggregate_weights(server, uploads, triple_alphas(uploads))
    server.round += 1
    return diagnostics


def warmstart_structural(clients: list[ClientState], server: ServerState, rounds: int, cfg: TrainingConfig) -> None:
    """Structure-only federated RotatE; touches only S (local and global) and R."""
    for ro in range(rounds):
        uploads = []
        for client in clients:
            client.S.assign(client.pmap.gather(server.S))
            client.structure_only = True
            try:
                client.local_train(cfg.local_epochs, Adam([client.S, client.R], lr=cfg.lr))
            finally:
                client.structure_only = False
            uploads.append(Upload(client.client_id, "local", client.pmap.local_to_global.copy(), client.S.data.copy(),
                                  client.W_v.data, client.W_d.data, len(client.shard.train)))
        aggregate_structural(server, uploads)


# evaluation and early stopping ---------------------------------------------------


def evaluate_clients(clients: list[ClientState], split: str, seed: int) -> tuple[list[RankingMetrics], RankingMetrics]:
    per = [c.evaluate(split, seed) for c in clients]
    return per, aggregate_metrics(per)


def state_dict(server: ServerState, clients: list[ClientState]) -> dict[str, np.ndarray]:
    out = {"server/S": server.S.copy(), "server/W_v": server.W_v.copy(), "server/W_d": server.W_d.copy()}
    for c in clients:
        for name, p in c.named_parameters().items():
            out[f"client{c.client_id}/{name}"] = p.data.copy()
    return out


def load_state_dict(server: ServerState, clients: list[ClientState], state: dict[str, np.ndarray]) -> None:
    expected = state_dict(server, clients).keys()
    missing = set(expected) - set(state)
    if missing:
        raise FormatError(f"state is missing {sorted(missing)[:5]}")
    server.S = np.array(state["server/S"], dtype=np.float64)
    server.W_v = np.array(state["server/W_v"], dtype=np.float64)
    server.W_d = np.array(state["server/W_d"], dtype=np.float64)
    for c in clients:
        for name, p in c.named_parameters().items():
            p.assign(state[f"client{c.client_id}/{name}"])


@dataclass
class StopResult:
    best_round: int
    best_valid_mrr: float
    rounds_run: int
    log: list[dict]


def train_until_stop(server: ServerState, clients: list[ClientState], cfg: TrainingConfig, on_round=None) -> StopResult:
    """Rounds until ``patience`` evaluations in a row fail to improve validation MRR.

    The best-round parameters are restored into ``server`` and ``clients`` at the end.
    ``on_round(round, per_client, aggregate)`` is called after every evaluation.
    """
    best_mrr, best_round, stale = -np.inf, 0, 0
    best_state = state_dict(server, clients)
    log = []
    ro = 0
    for ro in range(1, cfg.rounds + 1):
        losses = run_round(server, clients, cfg)
        per, agg = evaluate_clients(clients, "valid", cfg.seed)
        log.append({"round": ro, "valid_mrr": agg.mrr, "losses": losses})
        if on_round is not None:
            on_round(ro, per, agg)
        if agg.mrr > best_mrr:
            best_mrr, best_round, stale = agg.mrr, ro, 0
            best_state = state_dict(server, clients)
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    load_state_dict(server, clients, best_state)
    return StopResult(best_round, float(best_mrr) if best_round else float("nan"), ro, log)


def build_clients(shards: list[ClientShard], num_global: int, cfg: TrainingConfig) -> tuple[ServerState, list[ClientState]]:
    clients = [ClientState(s, cfg, num_global) for s in shards]
    server = init_server(num_global, (clients[0].feat_v.shape[1], clients[0].feat_d.shape[1]), cfg)
    for c in clients:
        distribute(server, c)
    return server, clients


# checkpoints --------------------------------------------------------------------


def _safe(name: str) -> str:
    return name.replace("/", "__")


def save_checkpoint(path, server: ServerState, clients: list[ClientState], manifest: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = state_dict(server, clients)
    shapes = {}
    for name, arr in state.items():
        shapes[name] = list(arr.shape)
        write_matrix(path / f"{_safe(name)}.bin", arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(-1, 1))
    doc = dict(manifest)
    doc["round"] = int(server.round)
    doc["tensors"] = shapes
    (path / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FormatError(f"{path} has no manifest.json")
    doc = json.loads(mf.read_text())
    state = {}
    for name, shape in doc["tensors"].items():
        arr = read_matrix(path / f"{_safe(name)}.bin").astype(np.float64)
        state[name] = arr.reshape(shape)
    return doc, state


def quantize_state(server: ServerState, clients: list[ClientState]) -> None:
    """Round every parameter through float32 so in-memory state equals a saved checkpoint."""
    state = {k: v.astype(np.float32).astype(np.float64) for k, v in state_dict(server, clients).items()}
    load_state_dict(server, clients, state)
