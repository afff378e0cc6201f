"""Retrieval metrics (RR@k, NDCG@k) with an independent brute-force oracle,
plus gallery evaluation over trained checkpoints.

Ties are broken deterministically by lower gallery index. NDCG uses binary
gains with the log2(rank+1) discount.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import matching
from .augment import CaptionTemplate, GeneratedPair, derive_seed, generate_pair
from .encoders import ModelParams, Vocab, encode_shape, encode_text, tokenize


class EvalError(ValueError):
    pass


@dataclass
class RetrievalGround:
    """Relevance sets: per shape its caption ids, per caption its shape id."""

    shape_to_captions: list[set[int]]
    caption_to_shape: list[int]

    def validate(self) -> None:
        for cap_id, shape_id in enumerate(self.caption_to_shape):
            if cap_id not in self.shape_to_captions[shape_id]:
                raise EvalError(f"caption {cap_id} missing from shape {shape_id}'s set")
        for shape_id, caps in enumerate(self.shape_to_captions):
            for cap_id in caps:
                if self.caption_to_shape[cap_id] != shape_id:
                    raise EvalError(f"shape {shape_id} lists caption {cap_id} of another shape")

    @classmethod
    def one_to_one(cls, n: int) -> "RetrievalGround":
        return cls([{i} for i in range(n)], list(range(n)))


@dataclass
class MetricsReport:
    direction: str  # "S2T" | "T2S"
    rr1: float
    rr5: float
    ndcg5: float
    n_queries: int
    n_gallery: int
    checkpoint_id: str = ""

    def as_dict(self) -> dict:
        return {
            "direction": self.direction,
            "RR@1": self.rr1,
            "RR@5": self.rr5,
            "NDCG@5": self.ndcg5,
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "checkpoint_id": self.checkpoint_id,
        }


def _check_ground(scores: np.ndarray, ground: Sequence[set[int]]) -> None:
    if len(ground) != scores.shape[0]:
        raise EvalError("one relevance set required per query")
    for q, rel in enumerate(ground):
        if not rel:
            raise EvalError(f"query {q} has zero relevant items")


def _rank_order(scores: np.ndarray) -> np.ndarray:
    # stable sort of -scores: equal scores keep ascending index order
    return np.argsort(-scores, axis=1, kind="stable")


def rr_at_k(scores: np.ndarray, ground: Sequence[set[int]], k: int) -> float:
    """Percentage of queries with a relevant item in the top-k."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_ground(scores, ground)
    if k < 1:
        raise EvalError("k must be >= 1")
    order = _rank_order(scores)[:, :k]
    hits = sum(1 for q, rel in enumerate(ground) if rel.intersection(order[q].tolist()))
    return 100.0 * hits / scores.shape[0]


def ndcg_at_k(scores: np.ndarray, ground: Sequence[set[int]], k: int) -> float:
    """Binary-gain NDCG@k averaged over queries, as a percentage."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_ground(scores, ground)
    if k < 1:
        raise EvalError("k must be >= 1")
    order = _rank_order(scores)[:, :k]
    total = 0.0
    for q, rel in enumerate(ground):
        dcg = sum(
            1.0 / math.log2(rank + 2)
            for rank, item in enumerate(order[q].tolist())
            if item in rel
        )
        ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(k, len(rel))))
        total += dcg / ideal
    return 100.0 * total / scores.shape[0]


# ---------------------------------------------------------------------------
# brute-force oracles (independent plain-python ranking path)

def rr_at_k_oracle(scores, ground, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    _check_ground(scores, ground)
    hits = 0
    for q, rel in enumerate(ground):
        ranked = sorted(range(scores.shape[1]), key=lambda g: (-scores[q, g], g))
        if any(item in rel for item in ranked[:k]):
            hits += 1
    return 100.0 * hits / scores.shape[0]


def ndcg_at_k_oracle(scores, ground, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    _check_ground(scores, ground)
    total = 0.0
    for q, rel in enumerate(ground):
        ranked = sorted(range(scores.shape[1]), key=lambda g: (-scores[q, g], g))
        dcg = 0.0
        for rank, item in enumerate(ranked[:k]):
            if item in rel:
                dcg += 1.0 / math.log2(rank + 2)
        ideal = 0.0
        for rank in range(min(k, len(rel))):
            ideal += 1.0 / math.log2(rank + 2)
        total += dcg / ideal
    return 100.0 * total / scores.shape[0]


# ---------------------------------------------------------------------------
# gallery evaluation

def encode_gallery(params: ModelParams, vocab: Vocab, pairs: list[GeneratedPair]):
    """Part features and word features for every gallery item."""
    shape_feats, text_feats = [], []
    for pair in pairs:
        out, _ = encode_shape(pair.shape.points, pair.shape.labels, params)
        shape_feats.append(out["part_features"])
        w, _ = encode_text(tokenize(pair.caption, vocab), params)
        text_feats.append(w)
    return shape_feats, text_feats


def cross_scores(
    shape_feats: list[np.ndarray],
    text_feats: list[np.ndarray],
    epsilon: float = matching.DEFAULT_EPSILON,
    max_iter: int = matching.DEFAULT_MAX_ITER,
    tol: float = matching.DEFAULT_TOL,
    chunk: int = 64,
) -> np.ndarray:
    """Full score matrix, entry (i, j) = sim(shape i, text j), computed in
    query chunks to bound memory."""
    n, m = len(shape_feats), len(text_feats)
    out = np.empty((n, m))
    for start in range(0, n, chunk):
        for i in range(start, min(start + chunk, n)):
            for j in range(m):
                out[i, j] = matching.pair_similarity(
                    shape_feats[i], text_feats[j], epsilon, max_iter, tol
                )
    return out


def evaluate(
    params: ModelParams,
    vocab: Vocab,
    pairs: list[GeneratedPair],
    ground: Optional[RetrievalGround] = None,
    epsilon: float = matching.DEFAULT_EPSILON,
    max_iter: int = matching.DEFAULT_MAX_ITER,
    tol: float = matching.DEFAULT_TOL,
    checkpoint_id: str = "",
) -> tuple[MetricsReport, MetricsReport]:
    """Both-direction retrieval reports over a generated gallery."""
    if not pairs:
        raise EvalError("empty gallery")
    ground = ground or RetrievalGround.one_to_one(len(pairs))
    ground.validate()
    shape_feats, text_feats = encode_gallery(params, vocab, pairs)
    scores = cross_scores(shape_feats, text_feats, epsilon, max_iter, tol)
    s2t = MetricsReport(
        "S2T",
        rr_at_k(scores, ground.shape_to_captions, 1),
        rr_at_k(scores, ground.shape_to_captions, 5),
        ndcg_at_k(scores, ground.shape_to_captions, 5),
        len(pairs), len(pairs), checkpoint_id,
    )
    t2s_scores = scores.T
    t2s_ground = [{s} for s in ground.caption_to_shape]
    t2s = MetricsReport(
        "T2S",
        rr_at_k(t2s_scores, t2s_ground, 1),
        rr_at_k(t2s_scores, t2s_ground, 5),
        ndcg_at_k(t2s_scores, t2s_ground, 5),
        len(pairs), len(pairs), checkpoint_id,
    )
    return s2t, t2s


def make_gallery(lib, schemas, tmpl: CaptionTemplate, size: int, base_seed: int,
                 n_points: int, theta: float, inter: bool = True,
                 intra: bool = True) -> list[GeneratedPair]:
    """Held-out generated gallery, deterministic in base_seed."""
    pairs = []
    for k in range(size):
        schema = schemas[k % len(schemas)]
        pairs.append(
            generate_pair(lib, schema, tmpl, n_points, theta,
                          derive_seed(base_seed, k), inter, intra)
        )
    return pairs


def quick_t2s_rr1(params, vocab, lib, schemas, tmpl, cfg, base_seed: int) -> float:
    """Text-to-shape RR@1 on a freshly generated held-out gallery."""
    pairs = make_gallery(lib, schemas, tmpl, cfg.eval_size, base_seed,
                         cfg.n_points, cfg.theta, cfg.inter, cfg.intra)
    shape_feats, text_feats = encode_gallery(params, vocab, pairs)
    scores = cross_scores(shape_feats, text_feats, cfg.epsilon,
                          cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)
    ground = [{i} for i in range(len(pairs))]
    return rr_at_k(scores.T, ground, 1)
