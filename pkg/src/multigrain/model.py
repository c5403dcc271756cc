"""Full image-to-report model: patch encoder, tag head, alignment stack,
and the grain-fused decoder, sharing one parameter registry.

The model owns its rng hub (stream "init" for parameter draws, stream
"dropout" for training noise), so a seed plus a config reproduces both
initialization and the whole training trajectory bit for bit.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .attention import ProbeLog
from .config import ModelConfig
from .corpus import BOS_ID, EOS_ID, PAD_ID, Batch
from .decoder import ReportDecoder, beam_decode, greedy_decode, report_loss, sequence_score
from .encoder import AlignEncoder, PatchEncoder, TagPredictor, TagSet
from .errors import ConfigError
from .rng import RngHub
from .tensor import DTYPES, ParamRegistry, Tensor

INIT_STREAM = "init"
DROPOUT_STREAM = "dropout"


class ReportModel:
    """End-to-end report generator over grid images."""

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        config.validate()
        if vocab_size < 5:
            raise ConfigError(f"vocab_size must cover the reserved ids, got {vocab_size}")
        self.config = config
        self.vocab_size = vocab_size
        self.hub = RngHub(seed)
        self.reg = ParamRegistry(dtype=DTYPES[config.dtype])
        init = self.hub.stream(INIT_STREAM)

        self.patches = PatchEncoder(self.reg, "patch", config.grid, config.patch,
                                    config.channels, config.d, init)
        if config.use_alignment:
            self.tags = TagPredictor(self.reg, "tags", config.d, config.tag_vocab,
                                     config.n_tags_select, init)
            self.align = AlignEncoder(self.reg, "align", config.d, config.n_heads,
                                      config.n_rounds, init)
            n_grains = config.n_rounds
        else:
            # alignment bypassed: the decoder reads raw region features as one grain
            self.tags = None
            self.align = None
            n_grains = 1
        self.decoder = ReportDecoder(self.reg, "decoder", config.d, config.n_heads,
                                     config.n_layers, n_grains, vocab_size,
                                     config.max_len, config.memory_slots,
                                     config.norm_mode, config.tie_output, init)

    def params(self) -> dict[str, Tensor]:
        return self.reg.named()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def _dropout_rng(self, train: bool) -> Optional[np.random.Generator]:
        return self.hub.stream(DROPOUT_STREAM) if train else None

    def tag_probs(self, grids: np.ndarray) -> Tensor:
        """Per-tag probabilities straight from the image, no alignment."""
        if self.tags is None:
            raise ConfigError("tag prediction requires alignment to be enabled")
        return self.tags.predict(self.patches(grids))

    def tag_pathway_params(self) -> dict[str, Tensor]:
        """Parameters that determine tag probabilities: the patch encoder
        and the prediction head. Tag embeddings are excluded; they train
        with the rest of the model either way."""
        if self.tags is None:
            raise ConfigError("there is no tag pathway when alignment is bypassed")
        head = {"tags.w": self.tags.w, "tags.b": self.tags.b}
        named = self.reg.named()
        head.update({k: v for k, v in named.items() if k.startswith("patch.")})
        return head

    def encode(self, grids: np.ndarray, gold_tags: Optional[Sequence[Sequence[int]]] = None,
               train: bool = False, probes: Optional[ProbeLog] = None
               ) -> tuple[list[Tensor], Optional[Tensor], Optional[TagSet]]:
        """Image batch to grains; returns (grains, tag_probs, tag_set).

        With alignment bypassed the grains are just the region features
        and both tag outputs are None. ``gold_tags`` switches the tag
        selection to teacher forcing; prediction is still returned for
        the tag loss either way.
        """
        rng = self._dropout_rng(train)
        regions = self.patches(grids)
        if not self.config.use_alignment:
            return [regions], None, None
        probs = self.tags.predict(regions)
        tag_set = self.tags.select(probs, gold=gold_tags)
        if probes is not None:
            probes.add("tags.ids", tag_set.ids)
            probes.add("tags.scores", tag_set.scores)
        grains = self.align(regions, tag_set.embeddings, self.config.keep_prob,
                            train, rng, probes)
        return grains, probs, tag_set

    def logits(self, grids: np.ndarray, tokens: np.ndarray,
               gold_tags: Optional[Sequence[Sequence[int]]] = None,
               train: bool = False, probes: Optional[ProbeLog] = None) -> Tensor:
        grains, _, _ = self.encode(grids, gold_tags, train, probes)
        return self.decoder(tokens, grains, self.config.keep_prob, train,
                            self._dropout_rng(train), probes)

    def batch_loss(self, batch: Batch, teacher_tags: bool = True, train: bool = True,
                   lambda_tag: float = 0.5) -> tuple[Tensor, dict[str, float]]:
        """Combined report and tag loss for one batch.

        Returns the loss tensor (for backward) plus a float breakdown.
        """
        rng = self._dropout_rng(train)
        gold = batch.gold_tags if teacher_tags else None
        grains, probs, _ = self.encode(batch.grids, gold, train)
        tokens_in = batch.tokens[:, :-1]
        targets = batch.tokens[:, 1:]
        logits = self.decoder(tokens_in, grains, self.config.keep_prob, train, rng)
        loss = report_loss(logits, targets, PAD_ID)
        parts = {"report": float(loss.data)}
        if probs is not None and lambda_tag > 0:
            tag_loss = self.tags.loss(probs, batch.tag_hot)
            parts["tag"] = float(tag_loss.data)
            loss = loss + tag_loss * lambda_tag
        parts["total"] = float(loss.data)
        return loss, parts

    def _sample_grains(self, grid: np.ndarray, probes: Optional[ProbeLog] = None) -> list[Tensor]:
        grids = np.asarray(grid)[None, ...]
        grains, _, _ = self.encode(grids, gold_tags=None, train=False, probes=probes)
        return grains

    def generate(self, grid: np.ndarray, max_new: Optional[int] = None, beam: int = 1,
                 alpha: float = 0.7, probes: Optional[ProbeLog] = None
                 ) -> tuple[list[int], float]:
        """Decode one report from one image; returns (token ids, score).

        The id sequence starts at BOS and ends with EOS unless the
        length cap cut generation short. Greedy is the beam=1 special
        case but keeps its own direct path.
        """
        if max_new is None:
            max_new = self.config.max_len - 1
        max_new = min(max_new, self.config.max_len - 1)
        grains = self._sample_grains(grid, probes)

        def next_logprobs(prefix: list[int]) -> np.ndarray:
            tokens = np.asarray(prefix, dtype=np.int64)[None, :]
            out = self.decoder(tokens, grains, keep_prob=1.0, train=False,
                               probes=probes)
            row = out.data[0, -1].astype(np.float64)
            shifted = row - row.max()
            return shifted - math.log(np.exp(shifted).sum())

        if beam == 1:
            ids, logp = greedy_decode(next_logprobs, BOS_ID, EOS_ID, max_new)
            return ids, sequence_score(logp, len(ids) - 1, alpha)
        return beam_decode(next_logprobs, BOS_ID, EOS_ID, beam, max_new, alpha)
