"""Temporal query propagator.

Content queries are the top-K scoring cells of a pointwise-projected clip
feature map. Position queries start at the center frame and are pushed
outward one frame at a time by two learned linear maps, giving each query a
per-frame position embedding (a spatio-temporal tube). Queries then attend
over every cell of the clip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module, cells, multihead, pointwise, uncells


@dataclass
class TemporalQuerySet:
    content: Tensor  # [K_q, d]
    position: Tensor  # [T, K_q, d]
    indices: list[int]  # flat (t, y, x) cell indices

    def locations(self, shape) -> np.ndarray:
        """``[K_q, 3]`` (t, y, x) coordinates of the selected cells."""
        return np.stack(np.unravel_index(np.asarray(self.indices), shape), axis=1)


class ProjectionWeights(Module):
    """All learnable weights of one propagator instance."""

    def __init__(self, d: int, **kw):
        super().__init__(**kw)
        self.d = d
        # Conv(concat F_t) shared by the content and centre-position queries
        self.select_w = self.param("select_w", (d, d))
        self.select_b = self.param("select_b", (d,), init="zeros")
        self.scorer_w = self.param("scorer_w", (1, d))
        self.scorer_b = self.param("scorer_b", (1,), init="zeros")
        self.w_q = self.param("w_q", (d, d))
        self.w_k = self.param("w_k", (d, d))
        self.w_v = self.param("w_v", (d, d))
        self.fwd_w = self.param("fwd_w", (d, d))
        self.fwd_b = self.param("fwd_b", (d,), init="zeros")
        self.bwd_w = self.param("bwd_w", (d, d))
        self.bwd_b = self.param("bwd_b", (d,), init="zeros")
        # cell -> query cross-attention used for dimensional expansion
        self.exp_q = self.param("exp_q", (d, d))
        self.exp_k = self.param("exp_k", (d, d))
        self.exp_v = self.param("exp_v", (d, d))
        self.exp_b = self.param("exp_b", (d,), init="zeros")


def select_features(embedding: Tensor, weights: ProjectionWeights) -> Tensor:
    """Pointwise conv over the concatenated clip features."""
    return pointwise(embedding, weights.select_w, weights.select_b)


def score_and_select(features: Tensor, k_q: int, scorer_w, scorer_b=None) -> tuple[Tensor, list[int]]:
    n = int(np.prod(features.shape[1:]))
    if not 1 <= k_q <= n:
        raise ValueError(f"k_q={k_q} out of range [1, {n}] for {features.shape[1:]} cells")
    scores = pointwise(features, scorer_w, scorer_b).reshape(n)
    indices, content = ad.topk_select(scores, cells(features), k_q)
    return content, indices


def center_index(frames: int) -> int:
    """0-based index of the centre frame; only odd clip lengths have one."""
    if frames < 1 or frames % 2 == 0:
        raise ValueError(f"clip length T={frames} must be odd so that a centre frame (T+1)/2 exists")
    return (frames - 1) // 2


def propagate_position(features: Tensor, weights: ProjectionWeights, indices) -> Tensor:
    frames = features.shape[1]
    c = center_index(frames)
    picked = ad.take(cells(features), np.asarray(indices))
    pos: list[Tensor | None] = [None] * frames
    pos[c] = ad.linear(picked, weights.w_q)
    for t in range(c - 1, -1, -1):
        pos[t] = ad.linear(pos[t + 1], weights.bwd_w, weights.bwd_b)
    for t in range(c + 1, frames):
        pos[t] = ad.linear(pos[t - 1], weights.fwd_w, weights.fwd_b)
    return ad.stack(pos, axis=0)


def build_queries(embedding: Tensor, weights: ProjectionWeights, k_q: int) -> TemporalQuerySet:
    feats = select_features(embedding, weights)
    content, indices = score_and_select(feats, k_q, weights.scorer_w, weights.scorer_b)
    return TemporalQuerySet(content, propagate_position(feats, weights, indices), indices)


def tqp_attention(
    qset: TemporalQuerySet,
    features: Tensor,
    weights: ProjectionWeights,
    num_heads: int,
    weights_out: list | None = None,
) -> Tensor:
    d = features.shape[0]
    if d % num_heads:
        raise ValueError(f"embedding width {d} not divisible by {num_heads} heads")
    rows = cells(features)
    keys = ad.linear(rows, weights.w_k)
    values = ad.linear(rows, weights.w_v)
    query = qset.position.sum(axis=0) * qset.content
    return multihead(query, keys, values, num_heads, weights_out)


def expand_queries(refined: Tensor, pixel_features: Tensor, weights: ProjectionWeights) -> Tensor:
    """Every cell attends over the refined queries; output shaped like the map."""
    rows = cells(pixel_features)
    q = ad.linear(rows, weights.exp_q)
    k = ad.linear(refined, weights.exp_k)
    v = ad.linear(refined, weights.exp_v, weights.exp_b)
    attn = ad.softmax((q @ k.transpose(1, 0)) * (1.0 / math.sqrt(q.shape[-1])), axis=-1)
    return uncells(attn @ v, pixel_features.shape)


def scatter_queries(refined: Tensor, pixel_features: Tensor, indices) -> Tensor:
    """Alternative expansion: write each refined query back at its own cell."""
    d = pixel_features.shape[0]
    n = int(np.prod(pixel_features.shape[1:]))
    k_q = refined.shape[0]
    slot = np.full(n, k_q)
    slot[np.asarray(indices)] = np.arange(k_q)
    padded = ad.concat([refined, Tensor(np.zeros((1, d), dtype=refined.dtype))], axis=0)
    return uncells(ad.take(padded, slot), pixel_features.shape)


class TemporalQueryPropagator(ProjectionWeights):
    def __init__(self, d: int, num_heads: int, k_q: int, expansion: str = "cross_attention", **kw):
        super().__init__(d, **kw)
        if expansion not in ("cross_attention", "scatter"):
            raise ValueError(f"unknown expansion {expansion!r}")
        self.num_heads = num_heads
        self.k_q = k_q
        self.expansion = expansion

    def __call__(self, embedding: Tensor, trace: dict | None = None) -> Tensor:
        qset = build_queries(embedding, self, self.k_q)
        attn: list = []
        refined = tqp_attention(qset, embedding, self, self.num_heads, attn)
        if trace is not None:
            trace["queries"] = qset
            trace["attention"] = attn[0]
        if self.expansion == "scatter":
            return scatter_queries(refined, embedding, qset.indices)
        return expand_queries(refined, embedding, self)
