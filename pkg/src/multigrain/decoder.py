"""Report decoder: causal self-attention over tokens, gated fusion of the
encoder grains, and a recurrent memory that conditions layer normalization.

Per layer, a token stream passes through masked self-attention, then an
adaptive attention that reads every grain and mixes the per-grain
contexts through learned sigmoid gates, then the feed-forward net. Each
of the three sublayers is wrapped in dropout + residual + a norm whose
gain and bias are shifted by linear maps of the pooled memory state
(plain learned gain/bias when the memory is disabled).
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import FeedForward, MultiHeadAttention, ProbeLog, Sublayer, causal_bias
from .errors import ConfigError, SequenceError, ShapeError
from .tensor import (
    ParamRegistry,
    Tensor,
    add,
    concat,
    concat_cols,
    const,
    dropout,
    embedding_lookup,
    layer_norm_core,
    log_softmax_rows,
    matmul,
    mean_axis,
    mul,
    narrow,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    transpose_last,
)


def sinusoid_table(max_len: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position encodings, one row per position."""
    if d % 2 != 0:
        raise ConfigError(f"position encoding needs an even width, got {d}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freks = np.exp(np.arange(0, d, 2, dtype=np.float64) * (-math.log(10000.0) / d))
    table = np.zeros((max_len, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freks)
    table[:, 1::2] = np.cos(pos * freks)
    return table.astype(dtype)


class AdaptiveGrainAttention:
    """Attend the token stream over every grain and gate the mixtures.

    For grain i: c_i = MHA_i(h, grain_i) and a gate
    lambda_i = sigmoid([h; c_i] W_i + b_i); the output is the gated sum
    over grains. Gates start at 0.5 everywhere (zero-initialized gate
    projections), so a fresh block is a plain average of the contexts.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_heads: int,
                 n_grains: int, rng: np.random.Generator):
        if n_grains < 1:
            raise ConfigError(f"need at least one grain, got {n_grains}")
        self.n_grains = n_grains
        self.mhas = [MultiHeadAttention(reg, f"{prefix}.mha{i}", d, n_heads, rng)
                     for i in range(n_grains)]
        self.gate_w = [reg.glorot(f"{prefix}.gate_w{i}", 2 * d, d, rng) for i in range(n_grains)]
        self.gate_b = [reg.zeros(f"{prefix}.gate_b{i}", (d,)) for i in range(n_grains)]

    def __call__(self, h: Tensor, grains: Sequence[Tensor],
                 probes: Optional[ProbeLog] = None, probe_key: str = "fuse") -> Tensor:
        if len(grains) != self.n_grains:
            raise ConfigError(f"got {len(grains)} grains for a block built for {self.n_grains}")
        out = None
        for i, grain in enumerate(grains):
            ctx = self.mhas[i](h, grain, probes=probes, probe_key=f"{probe_key}.grain{i + 1}")
            gate = sigmoid(add(matmul(concat_cols(h, ctx), self.gate_w[i]), self.gate_b[i]))
            if probes is not None:
                probes.add(f"{probe_key}.lambda{i + 1}", gate.data)
            term = mul(gate, ctx)
            out = term if out is None else add(out, term)
        return out


class MemoryNorm:
    """Residual wrapper whose norm parameters shift with the memory state.

    Output is norm(residual + dropout(sub_out)) * (gain + pooled W_g)
    + (bias + pooled W_b). With ``pooled=None`` (memory disabled) the
    delta terms vanish and this is exactly the plain Sublayer.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, rng: np.random.Generator):
        self.gain = reg.ones(f"{prefix}.gain", (d,))
        self.bias = reg.zeros(f"{prefix}.bias", (d,))
        self.w_gain = reg.glorot(f"{prefix}.w_gain", d, d, rng)
        self.w_bias = reg.glorot(f"{prefix}.w_bias", d, d, rng)

    def __call__(self, residual: Tensor, sub_out: Tensor, pooled: Optional[Tensor],
                 keep_prob: float = 1.0, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = add(residual, dropout(sub_out, keep_prob, train, rng))
        normed = layer_norm_core(h)
        if pooled is None:
            return add(mul(normed, self.gain), self.bias)
        gain = add(self.gain, matmul(pooled, self.w_gain))
        bias = add(self.bias, matmul(pooled, self.w_bias))
        return add(mul(normed, gain), bias)


class RecurrentMemory:
    """Gated slot memory fed by the previous position's input embedding.

    The state starts from a learned template (identical for every batch
    item), and at each position the slots attend over the previous
    token's embedding joined with themselves, then blend the update in
    through a sigmoid gate. The decoder consumes the slot mean, one
    pooled vector per position, so position t only ever sees tokens
    strictly before t.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, slots: int,
                 rng: np.random.Generator):
        if slots < 1:
            raise ConfigError(f"memory needs at least one slot, got {slots}")
        self.d = d
        self.slots = slots
        self.scale = 1.0 / math.sqrt(d)
        self.template = reg.normal(f"{prefix}.template", (slots, d), 0.02, rng)
        self.wq = reg.glorot(f"{prefix}.wq", d, d, rng)
        self.wk = reg.glorot(f"{prefix}.wk", d, d, rng)
        self.wv = reg.glorot(f"{prefix}.wv", d, d, rng)
        self.gate_w = reg.glorot(f"{prefix}.gate_w", 2 * d, d, rng)
        self.gate_b = reg.zeros(f"{prefix}.gate_b", (d,))

    def initial(self, batch: int) -> Tensor:
        """Template broadcast to (B, slots, d), still tied to its gradient."""
        zeros = const(np.zeros((batch, self.slots, self.d)), dtype=self.template.data.dtype)
        return add(self.template, zeros)

    def update(self, state: Tensor, prev_emb: Tensor) -> Tensor:
        """One step: slots attend over [prev_emb; slots], gate the blend."""
        kv = concat([prev_emb, state], axis=-2)
        q = matmul(state, self.wq)
        k = matmul(kv, self.wk)
        v = matmul(kv, self.wv)
        weights = softmax_rows(scale(matmul(q, transpose_last(k)), self.scale))
        upd = matmul(weights, v)
        gate = sigmoid(add(matmul(concat_cols(state, upd), self.gate_w), self.gate_b))
        one = const(np.ones_like(gate.data), dtype=gate.data.dtype)
        return add(mul(gate, state), mul(sub(one, gate), upd))

    def unroll(self, emb: Tensor) -> Tensor:
        """Pooled memory for every position of a (B, T, d) embedding batch.

        Row t of the result is the slot mean after consuming embeddings
        0..t-1; row 0 is the untouched template.
        """
        b, t = emb.shape[0], emb.shape[1]
        state = self.initial(b)
        pooled = [mean_axis(state, axis=-2, keepdims=True)]
        for step in range(1, t):
            prev = narrow(emb, 1, step - 1, 1)
            state = self.update(state, prev)
            pooled.append(mean_axis(state, axis=-2, keepdims=True))
        return pooled[0] if t == 1 else concat(pooled, axis=1)


class DecoderLayer:
    """Masked self-attention, grain fusion, feed-forward; all memory-normed."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_heads: int,
                 n_grains: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(reg, f"{prefix}.self", d, n_heads, rng)
        self.norm1 = MemoryNorm(reg, f"{prefix}.norm1", d, rng)
        self.grain_attn = AdaptiveGrainAttention(reg, f"{prefix}.fuse", d, n_heads, n_grains, rng)
        self.norm2 = MemoryNorm(reg, f"{prefix}.norm2", d, rng)
        self.fcn = FeedForward(reg, f"{prefix}.fcn", d, rng)
        self.norm3 = MemoryNorm(reg, f"{prefix}.norm3", d, rng)

    def __call__(self, x: Tensor, grains: Sequence[Tensor], causal: np.ndarray,
                 pooled: Optional[Tensor], keep_prob: float, train: bool,
                 rng: Optional[np.random.Generator], probes: Optional[ProbeLog],
                 probe_key: str) -> Tensor:
        h = self.norm1(x, self.self_attn(x, x, mask=causal, probes=probes,
                                         probe_key=f"{probe_key}.self"),
                       pooled, keep_prob, train, rng)
        a = self.norm2(h, self.grain_attn(h, grains, probes=probes,
                                          probe_key=f"{probe_key}.fuse"),
                       pooled, keep_prob, train, rng)
        return self.norm3(a, self.fcn(a), pooled, keep_prob, train, rng)


class ReportDecoder:
    """Token embedding, decoder stack, and the output projection."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_heads: int,
                 n_layers: int, n_grains: int, vocab_size: int, max_len: int,
                 memory_slots: int, norm_mode: str, tie_output: bool,
                 rng: np.random.Generator):
        if n_layers < 1:
            raise ConfigError(f"n_layers must be at least 1, got {n_layers}")
        if norm_mode not in ("plain", "mcln"):
            raise ConfigError(f"norm_mode must be 'plain' or 'mcln', got {norm_mode!r}")
        self.d = d
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.norm_mode = norm_mode
        self.tie_output = tie_output
        self.word_emb = reg.normal(f"{prefix}.word_emb", (vocab_size, d), 0.02, rng)
        self.pos_table = sinusoid_table(max_len, d, dtype=reg.dtype)
        self.memory = RecurrentMemory(reg, f"{prefix}.memory", d, memory_slots, rng)
        self.layers = [DecoderLayer(reg, f"{prefix}.layer{i}", d, n_heads, n_grains, rng)
                       for i in range(n_layers)]
        if tie_output:
            self.out_w = None
        else:
            self.out_w = reg.glorot(f"{prefix}.out_w", d, vocab_size, rng)
        self.out_b = reg.zeros(f"{prefix}.out_b", (vocab_size,))
        self._bias_cache: dict[int, np.ndarray] = {}

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"token batch must be 2-d (B, T), got {tokens.shape}")
        if tokens.shape[1] > self.max_len:
            raise SequenceError(f"sequence length {tokens.shape[1]} exceeds max_len {self.max_len}")
        words = embedding_lookup(self.word_emb, tokens)
        pos = const(self.pos_table[:tokens.shape[1]], dtype=words.data.dtype)
        return add(words, pos)

    def _causal(self, t: int, dtype) -> np.ndarray:
        bias = self._bias_cache.get(t)
        if bias is None or bias.dtype != dtype:
            bias = causal_bias(t, dtype)
            self._bias_cache[t] = bias
        return bias

    def __call__(self, tokens: np.ndarray, grains: Sequence[Tensor],
                 keep_prob: float = 1.0, train: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 probes: Optional[ProbeLog] = None) -> Tensor:
        """Next-token logits for every position, shape (B, T, vocab)."""
        x = self.embed(tokens)
        pooled = self.memory.unroll(x) if self.norm_mode == "mcln" else None
        causal = self._causal(tokens.shape[1], x.data.dtype)
        for li, layer in enumerate(self.layers):
            x = layer(x, grains, causal, pooled, keep_prob, train, rng,
                      probes, probe_key=f"layer{li + 1}")
        out_w = transpose_last(self.word_emb) if self.tie_output else self.out_w
        return add(matmul(x, out_w), self.out_b)


def report_loss(logits: Tensor, targets: np.ndarray, pad_id: int = 0) -> Tensor:
    """Mean next-token cross-entropy over non-pad target positions."""
    targets = np.asarray(targets)
    if logits.ndim != 3 or targets.shape != logits.shape[:2]:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ShapeError("report_loss: every target position is padding")
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    b_idx, t_idx = np.nonzero(keep)
    onehot[b_idx, t_idx, targets[b_idx, t_idx]] = 1.0
    logp = log_softmax_rows(logits)
    return scale(sum_all(mul(logp, const(onehot, dtype=logits.data.dtype))), -1.0 / count)


# ---------------------------------------------------------------------------
# decoding


def greedy_decode(next_logprobs: Callable[[list[int]], np.ndarray], bos: int,
                  eos: int, max_new: int) -> tuple[list[int], float]:
    """Argmax decoding from BOS; ties fall to the lower token id.

    Returns the id sequence and its accumulated log probability.
    """
    if max_new < 1:
        raise ConfigError(f"max_new must be positive, got {max_new}")
    ids = [bos]
    logp_sum = 0.0
    for _ in range(max_new):
        logp = next_logprobs(ids)
        nxt = int(np.argmax(logp))
        logp_sum += float(logp[nxt])
        ids.append(nxt)
        if nxt == eos:
            break
    return ids, logp_sum


def sequence_score(logp_sum: float, n_generated: int, alpha: float = 0.7) -> float:
    """Length-normalized log probability: sum / len^alpha."""
    if n_generated <= 0:
        return logp_sum
    return logp_sum / (n_generated ** alpha)


def beam_decode(next_logprobs: Callable[[list[int]], np.ndarray], bos: int,
                eos: int, width: int, max_new: int, alpha: float = 0.7
                ) -> tuple[list[int], float]:
    """Beam search returning (sequence, normalized score).

    Candidates at each step are ranked by accumulated log probability
    with deterministic tie-breaks (earlier beam, then lower token id);
    final selection uses the length-normalized score, ties resolved
    toward the lexicographically smaller sequence. Width 1 reproduces
    greedy decoding exactly.
    """
    if width < 1:
        raise ConfigError(f"beam width must be positive, got {width}")
    if max_new < 1:
        raise ConfigError(f"max_new must be positive, got {max_new}")
    beams: list[tuple[list[int], float]] = [([bos], 0.0)]
    done: list[tuple[list[int], float]] = []
    for _ in range(max_new):
        candidates = []
        for bi, (seq, lp) in enumerate(beams):
            logp = next_logprobs(seq)
            top = np.argsort(-logp, kind="stable")[:width]
            for tok in top:
                candidates.append((lp + float(logp[tok]), bi, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_beams = []
        for lp, bi, tok in candidates:
            if len(next_beams) == width:
                break
            seq = beams[bi][0] + [tok]
            if tok == eos:
                done.append((seq, lp))
            else:
                next_beams.append((seq, lp))
        beams = next_beams
        if not beams:
            break
    finalists = done + beams
    scored = [(seq, sequence_score(lp, len(seq) - 1, alpha)) for seq, lp in finalists]
    scored.sort(key=lambda item: (-item[1], tuple(item[0])))
    return scored[0]
