"""RotatE scoring, negative sampling, KGC loss and filtered link-prediction metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .numcore import DimensionError, Tensor, _make, softmax_xent

DEFAULT_GAMMA = 9.0


def rotate_score(h: np.ndarray, phase: np.ndarray, t: np.ndarray, gamma: float = DEFAULT_GAMMA) -> float:
    """``gamma - |h * exp(i*phase) - t|`` for one triple.

    ``h`` and ``t`` hold real parts then imaginary parts (length ``2 * len(phase)``).
    """
    h, phase, t = np.asarray(h, float), np.asarray(phase, float), np.asarray(t, float)
    if h.shape != t.shape or h.shape[0] != 2 * phase.shape[0]:
        raise DimensionError(f"entity dims {h.shape}/{t.shape} do not match relation dim {phase.shape}")
    half = phase.shape[0]
    hc = h[:half] + 1j * h[half:]
    tc = t[:half] + 1j * t[half:]
    return float(gamma - np.linalg.norm(hc * np.exp(1j * phase) - tc))


def rotate_logits(ent: Tensor, rel: Tensor, heads, rels, cands, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """Scores (B, K) of candidate tails ``cands`` for queries ``(heads, rels)``."""
    if ent.shape[1] != 2 * rel.shape[1]:
        raise DimensionError(f"entity width {ent.shape[1]} != 2 * relation width {rel.shape[1]}")
    heads = np.ascontiguousarray(heads, dtype=np.int64)
    rels = np.ascontiguousarray(rels, dtype=np.int64)
    cands = np.ascontiguousarray(cands, dtype=np.int64)
    dist = kernels.rotate_distance(ent.data, rel.data, heads, rels, cands)
    e_data, r_data = ent.data, rel.data

    def back(g):
        g_ent, g_rel = kernels.rotate_distance_backward(e_data, r_data, heads, rels, cands, dist, -g)
        return g_ent, g_rel

    return _make(gamma - dist, (ent, rel), back)


def init_entities(n: int, dim: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    bound = gamma / (dim // 2)
    return rng.uniform(-bound, bound, size=(n, dim))


def init_relations(num_relations: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Phase table with ``2 * num_relations`` rows; row ``i + num_relations`` is the inverse of ``i``."""
    return rng.uniform(-np.pi, np.pi, size=(2 * num_relations, dim // 2))


def with_inverse(triples: np.ndarray, num_relations: int) -> np.ndarray:
    """Tail queries plus head queries rewritten as ``(t, r + |R|, h)``."""
    inv = np.stack([triples[:, 2], triples[:, 1] + num_relations, triples[:, 0]], axis=1)
    return np.concatenate([triples, inv])


def sample_negatives(true_tails, entity_count: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct non-target entities per query, uniformly at random.

    Accepts a scalar tail (returns shape (k,)) or an array (returns (B, k)).
    """
    if k >= entity_count:
        raise ValueError(f"need k < entity_count, got k={k}, entity_count={entity_count}")
    scalar = np.ndim(true_tails) == 0
    tails = np.atleast_1d(np.asarray(true_tails, dtype=np.int64))
    keys = rng.random((len(tails), entity_count - 1))
    picked = np.argpartition(keys, k - 1, axis=1)[:, :k] if k > 0 else np.zeros((len(tails), 0), np.int64)
    picked = picked + (picked >= tails[:, None])
    return picked[0] if scalar else picked


def candidates(batch: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    """Candidate matrix with the true tail in column 0."""
    return np.concatenate([batch[:, 2:3], negatives], axis=1)


def kgc_loss(ent: Tensor, rel: Tensor, batch: np.ndarray, negatives: np.ndarray, gamma: float = DEFAULT_GAMMA) -> Tensor:
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits = rotate_logits(ent, rel, batch[:, 0], batch[:, 1], candidates(batch, negatives), gamma)
    return softmax_xent(logits, np.zeros(len(batch), dtype=np.int64))


# evaluation ----------------------------------------------------------------


@dataclass
class RankingMetrics:
    hits1: float
    hits3: float
    hits10: float
    mrr: float
    triple_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def filtered_rank(scores: np.ndarray, true_t: int, filter_set) -> int:
    """Mid-rank of ``true_t`` after removing ``filter_set`` from competition."""
    filt = set(int(x) for x in filter_set)
    if int(true_t) in filt:
        raise ValueError("the true entity may not be filtered")
    scores = np.array(scores, dtype=np.float64)
    if filt:
        scores[list(filt)] = -np.inf
    target = scores[true_t]
    others = np.delete(scores, true_t)
    greater = int((others > target).sum())
    equal = int((others == target).sum())
    return 1 + greater + equal // 2


def metrics_from_ranks(ranks: np.ndarray, triple_count: int | None = None) -> RankingMetrics:
    ranks = np.asarray(ranks, dtype=np.float64)
    if triple_count is None:
        triple_count = len(ranks)
    if len(ranks) == 0:
        return RankingMetrics(0.0, 0.0, 0.0, 0.0, 0)
    return RankingMetrics(
        hits1=float((ranks <= 1).mean()),
        hits3=float((ranks <= 3).mean()),
        hits10=float((ranks <= 10).mean()),
        mrr=float((1.0 / ranks).mean()),
        triple_count=int(triple_count),
    )


def known_tails(triples: np.ndarray, num_relations: int) -> dict[tuple[int, int], set[int]]:
    """All true answers of each (head, relation) query, inverse relations included."""
    out: dict[tuple[int, int], set[int]] = {}
    for h, r, t in with_inverse(np.asarray(triples).reshape(-1, 3), num_relations):
        out.setdefault((int(h), int(r)), set()).add(int(t))
    return out


def filter_mask(queries: np.ndarray, answers: dict, num_entities: int) -> np.ndarray:
    mask = np.zeros((len(queries), num_entities), dtype=np.uint8)
    for i, (h, r, t) in enumerate(queries):
        others = answers.get((int(h), int(r)), ())
        for e in others:
            if e != t:
                mask[i, e] = 1
    return mask


def evaluate_queries(score_all, queries: np.ndarray, answers: dict, num_entities: int, chunk: int = 512) -> np.ndarray:
    """Filtered ranks for (h, r, t) queries; ``score_all(heads, rels)`` returns (Q, N) scores."""
    ranks = []
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        scores = score_all(q[:, 0], q[:, 1])
        ranks.append(kernels.rank_counts(scores, q[:, 2], filter_mask(q, answers, num_entities)))
    return np.concatenate(ranks) if ranks else np.zeros(0)


def evaluate_split(shard, split: str, score_all) -> RankingMetrics:
    """Tail and head prediction on one split, averaged over both directions."""
    triples = shard.split_triples(split)
    if len(triples) == 0:
        raise ValueError(f"split {split!r} is empty")
    answers = known_tails(shard.all_triples, shard.num_relations)
    queries = with_inverse(triples, shard.num_relations)
    ranks = evaluate_queries(score_all, queries, answers, shard.num_entities)
    return metrics_from_ranks(ranks, triple_count=len(triples))


def aggregate_metrics(per_client: list[RankingMetrics]) -> RankingMetrics:
    """Triple-count weighted average of per-client metrics."""
    if not per_client:
        raise ValueError("no client metrics to aggregate")
    counts = np.array([m.triple_count for m in per_client], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("total triple count is zero")
    w = counts / total

    def avg(name):
        return float(sum(wi * getattr(m, name) for wi, m in zip(w, per_client)))

    return RankingMetrics(avg("hits1"), avg("hits3"), avg("hits10"), avg("mrr"), int(total))
