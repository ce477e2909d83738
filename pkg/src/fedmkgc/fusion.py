"""Multimodal fusion of structural, visual and textual entity embeddings."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import numcore as nc
from .kge import rotate_logits
from .numcore import DimensionError, Param, Tensor


class FusionKind(str, Enum):
    AVERAGE = "average"
    WEIGHTED = "weighted"
    CONCAT = "concat"
    SPLIT = "split"
    GATED = "gated"


class Fusion:
    """Fusion function plus its (client-local) parameters."""

    def __init__(self, kind, dim: int, num_relations: int = 0, rng: np.random.Generator | None = None):
        self.kind = FusionKind(kind)
        self.dim = dim
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Param] = {}
        if self.kind is FusionKind.WEIGHTED:
            self.params["w"] = Param(np.zeros(3), "fusion.w")
        elif self.kind is FusionKind.CONCAT:
            # starts as the average map plus a little noise
            proj = np.vstack([np.eye(dim)] * 3) / 3.0 + rng.normal(scale=0.01, size=(3 * dim, dim))
            self.params["proj"] = Param(proj, "fusion.proj")
        elif self.kind is FusionKind.GATED:
            for m in ("v", "d"):
                self.params[f"W0_{m}"] = Param(np.eye(dim), f"fusion.W0_{m}")
                self.params[f"W1_{m}"] = Param(rng.normal(scale=1.0 / np.sqrt(dim), size=(dim, dim)), f"fusion.W1_{m}")
                self.params[f"W2_{m}"] = Param(np.eye(dim), f"fusion.W2_{m}")
        elif self.kind is FusionKind.SPLIT:
            if num_relations <= 0:
                raise ValueError("split fusion needs the relation count for per-modality tables")
            for m in ("v", "d"):
                self.params[f"R_{m}"] = Param(rng.uniform(-np.pi, np.pi, size=(2 * num_relations, dim // 2)), f"fusion.R_{m}")

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def weights(self) -> np.ndarray:
        """Normalised modality weights (structural, visual, textual)."""
        if self.kind is FusionKind.WEIGHTED:
            return nc.softmax_np(self.params["w"].data)
        return np.full(3, 1.0 / 3.0)

    def fuse(self, S: Tensor, V: Tensor, D: Tensor) -> Tensor:
        if not (S.shape == V.shape == D.shape):
            raise DimensionError(f"fusion inputs differ in shape: {S.shape}, {V.shape}, {D.shape}")
        kind = self.kind
        if kind is FusionKind.AVERAGE:
            return (S + V + D) * (1.0 / 3.0)
        if kind is FusionKind.WEIGHTED:
            w = nc.softmax(self.params["w"])
            return S * w[0] + V * w[1] + D * w[2]
        if kind is FusionKind.CONCAT:
            return nc.concat([S, V, D], axis=1) @ self.params["proj"]
        if kind is FusionKind.GATED:
            p = self.params
            gated = []
            for m, X in (("v", V), ("d", D)):
                gate = nc.sigmoid(S @ p[f"W1_{m}"])
                gated.append((gate * (X @ p[f"W2_{m}"])) @ p[f"W0_{m}"])
            return (S + gated[0] + gated[1]) * (1.0 / 3.0)
        raise ValueError("split fusion does not produce a fused embedding; use split_log_probs")

    def relation_tables(self, R: Tensor) -> list[Tensor]:
        if self.kind is not FusionKind.SPLIT:
            raise ValueError("relation tables exist only for split fusion")
        if "R_v" not in self.params or "R_d" not in self.params:
            raise ValueError("split fusion needs per-modality relation tables")
        return [R, self.params["R_v"], self.params["R_d"]]


def split_log_probs(queries_h, queries_r, cands, embeddings: list[Tensor], relations: list[Tensor], gamma: float) -> Tensor:
    """Log of the average of per-modality softmax distributions over ``cands``."""
    if len(embeddings) != 3 or len(relations) != 3:
        raise ValueError("split prediction needs three modal embeddings and three relation tables")
    probs = [nc.softmax(rotate_logits(E, R, queries_h, queries_r, cands, gamma), axis=1) for E, R in zip(embeddings, relations)]
    return nc.log((probs[0] + probs[1] + probs[2]) * (1.0 / 3.0))


def split_predict(queries_h, queries_r, cands, embeddings, relations, gamma: float) -> np.ndarray:
    return np.exp(split_log_probs(queries_h, queries_r, cands, embeddings, relations, gamma).data)
