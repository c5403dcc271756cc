"""Visual patch encoding, tag prediction, and iterative region/tag alignment.

The encoder turns a grid image into region features, predicts finding
tags from the pooled regions, embeds the selected tags, and then runs N
alignment rounds. Each round attends tags over regions and regions over
the updated tags, producing one fused "grain" per round; the stack of
grains is what the decoder later consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import FeedForward, MultiHeadAttention, ProbeLog, Sublayer
from .errors import ConfigError, ShapeError
from .tensor import (
    ParamRegistry,
    Tensor,
    add,
    const,
    embedding_lookup,
    log,
    matmul,
    mean_all,
    mean_axis,
    mul,
    scale,
    sigmoid,
    sub,
)

TAG_PROB_EPS = 1e-7


def select_top_tags(probs: np.ndarray, n_select: int,
                    gold: Optional[Sequence[int]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``n_select`` tag ids from one probability vector.

    Free selection is the plain top-k (ties broken toward the lower id).
    With ``gold`` given, the gold ids are all forced into the set and the
    remaining slots go to the best-scoring non-gold ids. Either way the
    returned rows are ordered by descending score, lower id first on ties.
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[0]
    if n_select > k:
        raise ConfigError(f"cannot select {n_select} tags from a vocabulary of {k}")
    order = np.lexsort((np.arange(k), -probs))
    if gold:
        gold_ids = sorted(set(int(g) for g in gold))[:n_select]
        gold_set = set(gold_ids)
        fill = [int(i) for i in order if int(i) not in gold_set][:n_select - len(gold_ids)]
        chosen = gold_ids + fill
        chosen.sort(key=lambda i: (-probs[i], i))
        ids = np.array(chosen, dtype=np.int64)
    else:
        ids = order[:n_select].astype(np.int64)
    return ids, probs[ids]


@dataclass
class TagSet:
    """Selected tags for a batch: ids, scores, and their embeddings."""

    ids: np.ndarray       # (B, N_T) int64
    scores: np.ndarray    # (B, N_T) float64, non-increasing along each row
    embeddings: Tensor    # (B, N_T, d)


class PatchEncoder:
    """Linear projection of non-overlapping image patches plus position terms."""

    def __init__(self, reg: ParamRegistry, prefix: str, grid: int, patch: int,
                 channels: int, d: int, rng: np.random.Generator):
        if grid % patch != 0:
            raise ConfigError(f"grid {grid} is not divisible by patch {patch}")
        self.grid = grid
        self.patch = patch
        self.channels = channels
        self.side = grid // patch
        self.n_regions = self.side * self.side
        in_dim = patch * patch * channels
        self.proj = reg.glorot(f"{prefix}.proj", in_dim, d, rng)
        self.bias = reg.zeros(f"{prefix}.bias", (d,))
        self.row_emb = reg.normal(f"{prefix}.row_emb", (self.side, d), 0.02, rng)
        self.col_emb = reg.normal(f"{prefix}.col_emb", (self.side, d), 0.02, rng)
        rows, cols = np.divmod(np.arange(self.n_regions), self.side)
        self._rows = rows
        self._cols = cols

    def patches(self, grids: np.ndarray) -> np.ndarray:
        """(B, G, G, C) image batch to (B, n_regions, patch*patch*C) rows."""
        grids = np.asarray(grids)
        if grids.ndim != 4 or grids.shape[1] != self.grid or grids.shape[2] != self.grid \
                or grids.shape[3] != self.channels:
            raise ShapeError(f"expected image batch (B, {self.grid}, {self.grid}, {self.channels}), got {grids.shape}")
        b = grids.shape[0]
        p, s = self.patch, self.side
        tiles = grids.reshape(b, s, p, s, p, self.channels)
        tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
        return tiles.reshape(b, self.n_regions, p * p * self.channels)

    def __call__(self, grids: np.ndarray) -> Tensor:
        flat = const(self.patches(grids), dtype=self.proj.data.dtype)
        feats = add(matmul(flat, self.proj), self.bias)
        pos = add(embedding_lookup(self.row_emb, self._rows),
                  embedding_lookup(self.col_emb, self._cols))
        return add(feats, pos)


class TagPredictor:
    """Multi-label tag head over mean-pooled region features."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, tag_vocab: int,
                 n_select: int, rng: np.random.Generator):
        if not (1 <= n_select <= tag_vocab):
            raise ConfigError(f"n_select must lie in [1, tag_vocab={tag_vocab}], got {n_select}")
        self.tag_vocab = tag_vocab
        self.n_select = n_select
        self.w = reg.glorot(f"{prefix}.w", d, tag_vocab, rng)
        self.b = reg.zeros(f"{prefix}.b", (tag_vocab,))
        self.embed = reg.normal(f"{prefix}.embed", (tag_vocab, d), 0.02, rng)

    def predict(self, regions: Tensor) -> Tensor:
        """Per-tag probabilities, shape (B, tag_vocab)."""
        pooled = mean_axis(regions, axis=-2)
        return sigmoid(add(matmul(pooled, self.w), self.b))

    def select(self, probs: Tensor, gold: Optional[Sequence[Sequence[int]]] = None) -> TagSet:
        data = probs.data
        ids = np.empty((data.shape[0], self.n_select), dtype=np.int64)
        scores = np.empty((data.shape[0], self.n_select), dtype=np.float64)
        for row in range(data.shape[0]):
            row_gold = gold[row] if gold is not None else None
            ids[row], scores[row] = select_top_tags(data[row], self.n_select, row_gold)
        return TagSet(ids=ids, scores=scores, embeddings=embedding_lookup(self.embed, ids))

    def loss(self, probs: Tensor, gold_hot: np.ndarray) -> Tensor:
        """Mean binary cross-entropy over every (sample, tag) pair."""
        dtype = probs.data.dtype
        y = const(gold_hot, dtype=dtype)
        one = const(np.ones_like(probs.data), dtype=dtype)
        eps = const(np.full_like(probs.data, TAG_PROB_EPS), dtype=dtype)
        pos = mul(y, log(add(probs, eps)))
        neg = mul(sub(one, y), log(add(sub(one, probs), eps)))
        return scale(mean_all(add(pos, neg)), -1.0)


class AlignRound:
    """One round of cross-attention between region and tag features.

    Tags query regions first; the refreshed regions then query the old
    tags. Both legs use the attention -> feed-forward sandwich, each part
    wrapped in dropout + residual + layer norm on the query side.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_heads: int,
                 rng: np.random.Generator):
        self.mha_v = MultiHeadAttention(reg, f"{prefix}.mha_v", d, n_heads, rng)
        self.sub_v1 = Sublayer(reg, f"{prefix}.sub_v1", d)
        self.fcn_v = FeedForward(reg, f"{prefix}.fcn_v", d, rng)
        self.sub_v2 = Sublayer(reg, f"{prefix}.sub_v2", d)
        self.mha_t = MultiHeadAttention(reg, f"{prefix}.mha_t", d, n_heads, rng)
        self.sub_t1 = Sublayer(reg, f"{prefix}.sub_t1", d)
        self.fcn_t = FeedForward(reg, f"{prefix}.fcn_t", d, rng)
        self.sub_t2 = Sublayer(reg, f"{prefix}.sub_t2", d)
        self.fuse = Sublayer(reg, f"{prefix}.fuse", d)

    def __call__(self, v_prev: Tensor, t_prev: Tensor, keep_prob: float = 1.0,
                 train: bool = False, rng: Optional[np.random.Generator] = None,
                 probes: Optional[ProbeLog] = None, probe_key: str = "round"
                 ) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (v_next, t_next, fused grain)."""
        m = self.sub_v1(t_prev, self.mha_v(t_prev, v_prev, probes=probes,
                                           probe_key=f"{probe_key}.tags_over_regions"),
                        keep_prob, train, rng)
        v_next = self.sub_v2(m, self.fcn_v(m), keep_prob, train, rng)
        m2 = self.sub_t1(v_next, self.mha_t(v_next, t_prev, probes=probes,
                                            probe_key=f"{probe_key}.regions_over_tags"),
                         keep_prob, train, rng)
        t_next = self.sub_t2(m2, self.fcn_t(m2), keep_prob, train, rng)
        grain = self.fuse.normalize(add(v_next, t_next))
        return v_next, t_next, grain


class AlignEncoder:
    """Stack of alignment rounds producing one grain per round.

    Round parameters are independent and created in round order, so a
    model built with fewer rounds shares its prefix of initial draws
    with a deeper one under the same seed.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_heads: int,
                 n_rounds: int, rng: np.random.Generator):
        if n_rounds < 1:
            raise ConfigError(f"n_rounds must be at least 1, got {n_rounds}")
        self.n_rounds = n_rounds
        self.rounds = [AlignRound(reg, f"{prefix}.round{r}", d, n_heads, rng)
                       for r in range(n_rounds)]

    def __call__(self, regions: Tensor, tags: Tensor, keep_prob: float = 1.0,
                 train: bool = False, rng: Optional[np.random.Generator] = None,
                 probes: Optional[ProbeLog] = None) -> list[Tensor]:
        """All grains, round 1 first. After round 1 both carriers have
        one row per selected tag."""
        v, t = regions, tags
        grains = []
        for r, rnd in enumerate(self.rounds):
            v, t, grain = rnd(v, t, keep_prob, train, rng, probes, probe_key=f"round{r + 1}")
            grains.append(grain)
        return grains
