"""Multimodal KG containers, synthetic generation, non-IID partitioning and I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODALITIES = ("v", "d")
MAGIC = b"FMKG"
FORMAT_VERSION = 1
PAD_STD = 0.1  # N(0, 0.01) padding for unavailable features


class ParseError(ValueError):
    pass


class EmptyGraphError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class MultimodalKG:
    entity_names: list[str]
    relation_names: list[str]
    triples: np.ndarray  # (n, 3) int64 (head, relation, tail)
    feature_variants: dict[str, list[np.ndarray]] = field(default_factory=dict)
    latent: np.ndarray | None = None  # generator-side entity latents (synthetic graphs only)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if len(self.triples):
            h, r, t = self.triples.T
            ne, nr = len(self.entity_names), len(self.relation_names)
            if h.min() < 0 or t.min() < 0 or max(h.max(), t.max()) >= ne or r.min() < 0 or r.max() >= nr:
                raise ValueError("triple index out of range")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def feature_dim(self, modality: str) -> int:
        for v in self.feature_variants.get(modality, []):
            if len(v):
                return v.shape[1]
        raise KeyError(f"no features for modality {modality!r}")


@dataclass
class PartitionConfig:
    num_clients: int = 3
    dirichlet_alpha: float = 0.1
    availability_rate: float = 0.5
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 0.0 <= self.availability_rate <= 1.0:
            raise ConfigError("availability_rate must lie in [0, 1]")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be positive")


@dataclass
class ClientShard:
    client_id: int
    entity_ids: np.ndarray  # local index -> global entity id
    relation_ids: np.ndarray  # local index -> global relation id
    train: np.ndarray  # local (h, r, t)
    valid: np.ndarray
    test: np.ndarray
    feat_v: np.ndarray | None = None
    feat_d: np.ndarray | None = None
    mask_v: np.ndarray | None = None
    mask_d: np.ndarray | None = None

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)

    @property
    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def split_triples(self, split: str) -> np.ndarray:
        return {"train": self.train, "valid": self.valid, "test": self.test}[split]

    def available(self, modality: str) -> np.ndarray:
        """Per-entity availability flag (mask rows are constant)."""
        mask = self.mask_v if modality == "v" else self.mask_d
        return mask[:, 0] > 0.5


# loading ---------------------------------------------------------------


def load_triples(path) -> MultimodalKG:
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            hi = entities.setdefault(h, len(entities))
            ri = relations.setdefault(r, len(relations))
            ti = entities.setdefault(t, len(entities))
            rows.append((hi, ri, ti))
    if not rows:
        raise EmptyGraphError(f"{path}: no triples")
    return MultimodalKG(list(entities), list(relations), np.array(rows, dtype=np.int64))


def write_matrix(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise FormatError("only 2-D matrices can be written")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, mat.shape[0], mat.shape[1]))
        fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_matrix(path, rows: int | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, r, c = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) != 16 + 4 * r * c:
        raise FormatError(f"{path}: expected {r}x{c} payload, file is truncated or padded")
    if rows is not None and r != rows:
        raise FormatError(f"{path}: {r} rows, expected {rows}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(r, c).astype(np.float64)


def load_features(path, num_entities: int) -> np.ndarray:
    return read_matrix(path, rows=num_entities)


# synthetic data ----------------------------------------------------------


def synth_kg(
    num_entities: int = 300,
    num_relations: int = 24,
    num_triples: int = 3000,
    latent_dim: int = 8,
    num_types: int = 10,
    temperature: float = 0.3,
    seed: int = 0,
) -> MultimodalKG:
    """Random graph whose triples follow a latent phase-rotation model.

    Entities get complex latents clustered by type; each relation rotates
    the head latent and a tail is drawn with probability decreasing in
    distance to the rotated head.  Duplicate triples are dropped.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_types, latent_dim)) + 1j * rng.normal(size=(num_types, latent_dim))
    types = rng.integers(0, num_types, num_entities)
    z = centers[types] + 0.5 * (rng.normal(size=(num_entities, latent_dim)) + 1j * rng.normal(size=(num_entities, latent_dim)))
    phases = rng.uniform(-np.pi, np.pi, size=(num_relations, latent_dim))
    seen: set[tuple[int, int, int]] = set()
    rows = []
    attempts = 0
    while len(rows) < num_triples and attempts < 50 * num_triples:
        batch = 256
        heads = rng.integers(0, num_entities, batch)
        rels = rng.integers(0, num_relations, batch)
        rotated = z[heads] * np.exp(1j * phases[rels])
        dist = np.linalg.norm(rotated[:, None, :] - z[None, :, :], axis=2)
        logits = -dist / (temperature * np.sqrt(latent_dim))
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        cum = probs.cumsum(axis=1)
        tails = (cum < rng.random((batch, 1))).sum(axis=1).clip(max=num_entities - 1)
        for h, r, t in zip(heads, rels, tails):
            attempts += 1
            key = (int(h), int(r), int(t))
            if h == t or key in seen:
                continue
            seen.add(key)
            rows.append(key)
            if len(rows) == num_triples:
                break
    kg = MultimodalKG(
        [f"e{i}" for i in range(num_entities)],
        [f"r{i}" for i in range(num_relations)],
        np.array(rows, dtype=np.int64),
    )
    kg.latent = np.concatenate([z.real, z.imag], axis=1)
    return kg


def synth_features(kg: MultimodalKG, d_v: int = 16, d_d: int = 16, variants_per_entity: int = 4, seed: int = 0,
                   noise: float = 0.3) -> MultimodalKG:
    """Attach per-entity feature variants for both modalities.

    Each entity has a type vector per modality (a fixed random map of the
    generator latent when available, otherwise a Gaussian draw); variants
    are that vector plus Gaussian perturbation.
    """
    if d_v < 1 or d_d < 1:
        raise ConfigError("feature dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    n = kg.num_entities
    for modality, dim in (("v", d_v), ("d", d_d)):
        if kg.latent is not None:
            proj = rng.normal(size=(kg.latent.shape[1], dim)) / np.sqrt(kg.latent.shape[1])
            base = kg.latent @ proj
            base = (base - base.mean(axis=0)) / (base.std(axis=0) + 1e-12)
        else:
            base = rng.normal(size=(n, dim))
        kg.feature_variants[modality] = [
            base[e] + noise * rng.normal(size=(variants_per_entity, dim)) for e in range(n)
        ]
    return kg


# partitioning ------------------------------------------------------------


def partition_by_relation(kg: MultimodalKG, cfg: PartitionConfig) -> list[ClientShard]:
    """Deal shuffled relations round-robin; each triple follows its relation."""
    if cfg.num_clients > kg.num_relations:
        raise ConfigError(f"{cfg.num_clients} clients but only {kg.num_relations} relations")
    rng = np.random.default_rng([cfg.seed, 1])
    order = rng.permutation(kg.num_relations)
    owner = np.empty(kg.num_relations, dtype=np.int64)
    owner[order] = np.arange(kg.num_relations) % cfg.num_clients
    shards = []
    for c in range(cfg.num_clients):
        rel_ids = np.sort(np.flatnonzero(owner == c))
        triples = kg.triples[owner[kg.triples[:, 1]] == c]
        ent_ids = np.unique(triples[:, [0, 2]])
        ent_local = np.full(kg.num_entities, -1, dtype=np.int64)
        ent_local[ent_ids] = np.arange(len(ent_ids))
        rel_local = np.full(kg.num_relations, -1, dtype=np.int64)
        rel_local[rel_ids] = np.arange(len(rel_ids))
        local = np.stack([ent_local[triples[:, 0]], rel_local[triples[:, 1]], ent_local[triples[:, 2]]], axis=1)
        shards.append(ClientShard(c, ent_ids, rel_ids, local, local[:0], local[:0]))
    return shards


def split_train_valid_test(triples: np.ndarray, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(triples)
    if n == 0:
        raise ConfigError("cannot split an empty shard")
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_valid - n_test
    shuffled = triples[perm]
    return shuffled[:n_train], shuffled[n_train:n_train + n_valid], shuffled[n_train + n_valid:]


def dirichlet_assign(num_variants: int, num_clients: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Client index for each variant, drawn from Dirichlet(alpha) proportions."""
    if alpha <= 0:
        raise ConfigError("dirichlet alpha must be positive")
    if num_clients == 1:
        return np.zeros(num_variants, dtype=np.int64)
    props = rng.dirichlet(np.full(num_clients, alpha))
    props = np.nan_to_num(props, nan=0.0)
    if props.sum() <= 0:
        props = np.full(num_clients, 1.0 / num_clients)
    props = props / props.sum()
    return rng.choice(num_clients, size=num_variants, p=props)


def partition_multimodal_dirichlet(kg: MultimodalKG, cfg: PartitionConfig) -> dict[str, np.ndarray]:
    """Per modality, a (num_clients, num_entities, d_m) array of client features.

    Entities with no variant for a modality get NaN rows (globally missing).
    """
    if cfg.dirichlet_alpha <= 0:
        raise ConfigError("dirichlet_alpha must be positive")
    rng = np.random.default_rng([cfg.seed, 2])
    out = {}
    for modality in MODALITIES:
        variants = kg.feature_variants[modality]
        dim = kg.feature_dim(modality)
        feats = np.full((cfg.num_clients, kg.num_entities, dim), np.nan)
        for e, var in enumerate(variants):
            if len(var) == 0:
                continue
            assign = dirichlet_assign(len(var), cfg.num_clients, cfg.dirichlet_alpha, rng)
            for c in range(cfg.num_clients):
                mine = var[assign == c]
                feats[c, e] = mine.mean(axis=0) if len(mine) else var[rng.integers(len(var))]
        out[modality] = feats
    return out


def generate_missing_masks(num_entities: int, dims: dict[str, int], rate: float, rng: np.random.Generator):
    """Row-constant Bernoulli(rate) availability masks, one per modality."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("availability rate must lie in [0, 1]")
    masks = {}
    for modality in MODALITIES:
        rows = (rng.random(num_entities) < rate).astype(np.float64)
        masks[modality] = np.repeat(rows[:, None], dims[modality], axis=1)
    return masks


def pad_missing(features: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = features.copy()
    missing = mask[:, 0] < 0.5
    out[missing] = PAD_STD * rng.normal(size=(int(missing.sum()), features.shape[1]))
    return out


def build_federation(kg: MultimodalKG, cfg: PartitionConfig) -> list[ClientShard]:
    """Full benchmark construction: relation split, 8:1:1, Dirichlet features, masks."""
    shards = partition_by_relation(kg, cfg)
    has_features = all(kg.feature_variants.get(m) for m in MODALITIES)
    feats = partition_multimodal_dirichlet(kg, cfg) if has_features else None
    for shard in shards:
        c = shard.client_id
        shard.train, shard.valid, shard.test = split_train_valid_test(shard.train, cfg.split, seed=cfg.seed * 1000 + c)
        if feats is None:
            continue
        rng = np.random.default_rng([cfg.seed, 3, c])
        dims = {m: feats[m].shape[2] for m in MODALITIES}
        masks = generate_missing_masks(shard.num_entities, dims, cfg.availability_rate, rng)
        for m in MODALITIES:
            raw = feats[m][c, shard.entity_ids]
            # globally missing entities are treated as unavailable
            masks[m][np.isnan(raw).any(axis=1)] = 0.0
            raw = np.nan_to_num(raw)
            setattr(shard, f"feat_{m}", pad_missing(raw, masks[m], rng))
            setattr(shard, f"mask_{m}", masks[m])
    return shards


def true_client_features(kg: MultimodalKG, cfg: PartitionConfig, shard: ClientShard) -> dict[str, np.ndarray]:
    """Unmasked Dirichlet-assigned features of one shard (for held-out checks)."""
    feats = partition_multimodal_dirichlet(kg, cfg)
    return {m: feats[m][shard.client_id, shard.entity_ids] for m in MODALITIES}


# directory layout ---------------------------------------------------------


def _write_tsv(path: Path, triples: np.ndarray, ent_names, rel_names, shard: ClientShard) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in triples:
            fh.write(f"{ent_names[shard.entity_ids[h]]}\t{rel_names[shard.relation_ids[r]]}\t{ent_names[shard.entity_ids[t]]}\n")


def shard_stats(shard: ClientShard) -> dict:
    out = {
        "client": shard.client_id,
        "relations": int(shard.num_relations),
        "entities": int(shard.num_entities),
        "triples": int(len(shard.all_triples)),
        "train": int(len(shard.train)),
        "valid": int(len(shard.valid)),
        "test": int(len(shard.test)),
    }
    if shard.mask_v is not None:
        out["available_v"] = float(shard.available("v").mean())
        out["available_d"] = float(shard.available("d").mean())
    return out


def cross_client_similarity(kg: MultimodalKG, cfg: PartitionConfig, shards: list[ClientShard]) -> dict[str, float]:
    """Mean cosine similarity of the same entity's features across client pairs."""
    feats = partition_multimodal_dirichlet(kg, cfg)
    out = {}
    for m in MODALITIES:
        sims = []
        for a in range(len(shards)):
            for b in range(a + 1, len(shards)):
                common = np.intersect1d(shards[a].entity_ids, shards[b].entity_ids)
                if len(common) == 0:
                    continue
                x, y = feats[m][a, common], feats[m][b, common]
                ok = ~(np.isnan(x).any(axis=1) | np.isnan(y).any(axis=1))
                x, y = x[ok], y[ok]
                num = (x * y).sum(axis=1)
                den = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1) + 1e-12
                sims.append(num / den)
        out[m] = float(np.concatenate(sims).mean()) if sims else 1.0
    return out


def write_partition(out_dir, kg: MultimodalKG, cfg: PartitionConfig, shards: list[ClientShard]) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for shard in shards:
        cdir = out_dir / f"client_{shard.client_id}"
        cdir.mkdir(exist_ok=True)
        for split in ("train", "valid", "test"):
            _write_tsv(cdir / f"{split}.tsv", shard.split_triples(split), kg.entity_names, kg.relation_names, shard)
        if shard.feat_v is not None:
            for m in MODALITIES:
                write_matrix(cdir / f"feat_{m}.bin", getattr(shard, f"feat_{m}"))
                write_matrix(cdir / f"mask_{m}.bin", getattr(shard, f"mask_{m}"))
        with open(cdir / "entities.txt", "w", encoding="utf-8", newline="\n") as fh:
            for i, g in enumerate(shard.entity_ids):
                fh.write(f"{i}\t{g}\t{kg.entity_names[g]}\n")
        with open(cdir / "relations.txt", "w", encoding="utf-8", newline="\n") as fh:
            for i, g in enumerate(shard.relation_ids):
                fh.write(f"{i}\t{g}\t{kg.relation_names[g]}\n")
    stats = [shard_stats(s) for s in shards]
    manifest = {
        "seed": cfg.seed,
        "dirichlet_alpha": cfg.dirichlet_alpha,
        "availability_rate": cfg.availability_rate,
        "split": list(cfg.split),
        "num_clients": cfg.num_clients,
        "num_entities": kg.num_entities,
        "num_relations": kg.num_relations,
        "num_triples": int(len(kg.triples)),
        "avg_relations": round(float(np.mean([s["relations"] for s in stats])), 6),
        "avg_entities": round(float(np.mean([s["entities"] for s in stats])), 6),
        "avg_triples": round(float(np.mean([s["triples"] for s in stats])), 6),
        "clients": stats,
    }
    if shards and shards[0].feat_v is not None:
        sim = cross_client_similarity(kg, cfg, shards)
        manifest["avg_similarity_v"] = round(sim["v"], 6)
        manifest["avg_similarity_d"] = round(sim["d"], 6)
    (out_dir / "partition.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_local_triples(path: Path, ent_index: dict, rel_index: dict) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
        h, r, t = parts
        rows.append((ent_index[h], rel_index[r], ent_index[t]))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def read_partition(part_dir) -> tuple[dict, list[ClientShard]]:
    part_dir = Path(part_dir)
    manifest = json.loads((part_dir / "partition.json").read_text())
    shards = []
    for c in range(manifest["num_clients"]):
        cdir = part_dir / f"client_{c}"
        ent_lines = [ln.split("\t") for ln in (cdir / "entities.txt").read_text(encoding="utf-8").splitlines() if ln]
        rel_lines = [ln.split("\t") for ln in (cdir / "relations.txt").read_text(encoding="utf-8").splitlines() if ln]
        ent_index = {name: int(i) for i, _, name in ent_lines}
        rel_index = {name: int(i) for i, _, name in rel_lines}
        shard = ClientShard(
            c,
            np.array([int(g) for _, g, _ in ent_lines], dtype=np.int64),
            np.array([int(g) for _, g, _ in rel_lines], dtype=np.int64),
            *(_read_local_triples(cdir / f"{s}.tsv", ent_index, rel_index) for s in ("train", "valid", "test")),
        )
        if (cdir / "feat_v.bin").exists():
            for m in MODALITIES:
                setattr(shard, f"feat_{m}", read_matrix(cdir / f"feat_{m}.bin", rows=shard.num_entities))
                setattr(shard, f"mask_{m}", read_matrix(cdir / f"mask_{m}.bin", rows=shard.num_entities))
        shards.append(shard)
    return manifest, shards
