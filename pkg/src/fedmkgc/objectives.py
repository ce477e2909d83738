"""Per-client training objectives: MMFeD3 dual distillation and FL baselines."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numcore as nc
from .fusion import FusionKind, split_log_probs
from .hide import build_hypermodal, impute_table
from .kge import candidates, rotate_logits
from .numcore import Tensor


class ObjectiveKind(str, Enum):
    MMFEDE = "mmfede"
    MMFEDEC = "mmfedec"
    MMFEDPROX = "mmfedprox"
    MMFEDLU = "mmfedlu"
    MMFED3 = "mmfed3"

    @property
    def uses_server_branch(self) -> bool:
        return self in (ObjectiveKind.MMFEDLU, ObjectiveKind.MMFED3)


@dataclass
class LossWeights:
    lambda_di: float = 1.0
    mu_ld: float = 1.0
    eta_fd: float = 1.0
    tau: float = 0.5
    rho: float = 0.1

    def __post_init__(self):
        if min(self.lambda_di, self.mu_ld, self.eta_fd, self.rho) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class Branch:
    """Entity table(s) of one branch and the candidate logits of a batch."""

    logits: Tensor
    table: Tensor  # fused entity embeddings (mean of modal tables for split fusion)
    hypermodal: object | None = None


def modal_tables(client, S, W_v, W_d):
    V = nc.Tensor(client.feat_v) @ W_v
    D = nc.Tensor(client.feat_d) @ W_d
    return S, V, D


def _branch(client, S, V, D, batch, cands, imputer_rng=None) -> Branch:
    hm = None
    if imputer_rng is not None and client.imputer is not None:
        hm = build_hypermodal(S, V, D, client.avail_v, client.avail_d)
        rows = np.unique(np.concatenate([batch[:, 0], cands.ravel()]))
        S, V, D = hm.views(impute_table(hm, client.imputer, imputer_rng, rows))
    fusion = client.fusion
    if fusion.kind is FusionKind.SPLIT:
        logits = split_log_probs(batch[:, 0], batch[:, 1], cands, [S, V, D], fusion.relation_tables(client.R), client.gamma)
        table = (S + V + D) * (1.0 / 3.0)
    else:
        table = fusion.fuse(S, V, D)
        logits = rotate_logits(table, client.R, batch[:, 0], batch[:, 1], cands, client.gamma)
    return Branch(logits, table, hm)


def client_branch(client, batch, negatives, rng) -> Branch:
    """Local branch: local structure and projections, imputed when an imputer is set."""
    cands = candidates(batch, negatives)
    if getattr(client, "structure_only", False):
        return Branch(rotate_logits(client.S, client.R, batch[:, 0], batch[:, 1], cands, client.gamma), client.S)
    S, V, D = modal_tables(client, client.S, client.W_v, client.W_d)
    return _branch(client, S, V, D, batch, cands, imputer_rng=rng)


def server_branch_logits(client, batch, negatives) -> Branch:
    """Global-replica branch on the same candidates, no imputation, local relations."""
    if client.replica is None:
        raise ValueError("server branch needs replica parameters")
    rep = client.replica
    S, V, D = modal_tables(client, rep["S"], rep["W_v"], rep["W_d"])
    return _branch(client, S, V, D, batch, candidates(batch, negatives))


def logit_distill(client_logits: Tensor, server_logits: Tensor) -> Tensor:
    """Both KL directions; in each the teacher side is detached."""
    c2s = nc.kl_div(client_logits, server_logits)
    s2c = nc.kl_div(server_logits, client_logits)
    return c2s + s2c


def feature_distill(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the squared L2 distance."""
    if a.shape != b.shape:
        raise nc.DimensionError(f"feature distillation shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).sum() * (1.0 / a.shape[0])


def _cosine(a: Tensor, b) -> Tensor:
    b = nc.as_tensor(b)
    num = (a * b).sum(axis=1)
    den = nc.sqrt((a * a).sum(axis=1) + 1e-12) * nc.sqrt((b * b).sum(axis=1) + 1e-12)
    return num / den


def contrastive_term(current: Tensor, global_emb, previous, tau: float) -> Tensor:
    """``-log`` of the softmax weight on the global embedding against the previous-round one."""
    pos = _cosine(current, global_emb) * (1.0 / tau)
    neg = _cosine(current, previous) * (1.0 / tau)
    logits = nc.concat([pos.reshape(-1, 1), neg.reshape(-1, 1)], axis=1)
    return nc.softmax_xent(logits, np.zeros(current.shape[0], dtype=np.int64))


def batch_entities(batch: np.ndarray) -> np.ndarray:
    return np.unique(batch[:, [0, 2]])


def total_loss(client, batch, negatives, weights: LossWeights, kind, rng) -> tuple[Tensor, dict]:
    """Client objective for one batch; returns the loss and a dict of its parts."""
    kind = ObjectiveKind(kind)
    target = np.zeros(len(batch), dtype=np.int64)
    local = client_branch(client, batch, negatives, rng)
    parts: dict[str, Tensor] = {"kgc": nc.softmax_xent(local.logits, target)}
    ents = batch_entities(batch)

    if client.imputer is not None and weights.lambda_di > 0 and local.hypermodal is not None:
        # the imputer learns from batch-entity rows; structure and projections are not pulled by it
        hm = local.hypermodal
        parts["di"] = client.imputer.loss(hm.x0.detach()[ents], hm.mask[ents], rng) * weights.lambda_di

    if kind.uses_server_branch:
        server = server_branch_logits(client, batch, negatives)
        parts["kgc_server"] = nc.softmax_xent(server.logits, target)
        if kind is ObjectiveKind.MMFED3:
            if weights.mu_ld > 0:
                parts["ld"] = logit_distill(local.logits, server.logits) * weights.mu_ld
            if weights.eta_fd > 0:
                parts["fd"] = feature_distill(nc.gather_rows(local.table, ents), nc.gather_rows(server.table, ents)) * weights.eta_fd
        elif weights.mu_ld > 0:
            parts["lu"] = nc.kl_div(local.logits, server.logits) * weights.mu_ld
    elif kind is ObjectiveKind.MMFEDEC:
        parts["ec"] = contrastive_term(
            nc.gather_rows(local.table, ents), client.round_global[ents], client.round_previous[ents], weights.tau
        )
    elif kind is ObjectiveKind.MMFEDPROX and weights.rho > 0:
        parts["prox"] = feature_distill(nc.gather_rows(local.table, ents), nc.Tensor(client.round_global[ents])) * weights.rho

    names = list(parts)
    loss = parts[names[0]]
    for name in names[1:]:
        loss = loss + parts[name]
    return loss, {k: float(v.data) for k, v in parts.items()}
