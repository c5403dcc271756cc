"""Shared fixtures: tiny model configurations and a small on-disk corpus."""

from __future__ import annotations

import numpy as np
import pytest

from multigrain.config import ModelConfig, RunConfig, TrainConfig
from multigrain.corpus import CorpusSpec, build_vocab, generate_corpus, split_corpus, save_samples
from multigrain.model import ReportModel


def tiny_model_config(**overrides) -> ModelConfig:
    """Fully wired but very small: d=8, 2 heads, 2 rounds, 2 layers,
    4 regions, 3 selected tags."""
    base = dict(
        d=8, n_heads=2, n_rounds=2, n_layers=2,
        grid=4, patch=2, channels=1,
        tag_vocab=6, n_tags_select=3,
        max_len=16, keep_prob=1.0, norm_mode="mcln",
        memory_slots=2, dtype="f64",
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 11, vocab_size: int = 20, **overrides) -> ReportModel:
    return ReportModel(tiny_model_config(**overrides), vocab_size=vocab_size, seed=seed)


def tiny_batch_inputs(model: ReportModel, batch: int = 2, seq: int = 5, seed: int = 3):
    """Random grids, tokens, and gold tags fitting a tiny model."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    grids = rng.uniform(0, 1, size=(batch, cfg.grid, cfg.grid, cfg.channels)).astype(np.float32)
    tokens = np.concatenate([
        np.ones((batch, 1), dtype=np.int64),  # BOS
        rng.integers(4, model.vocab_size, size=(batch, seq - 2)),
        np.full((batch, 1), 2, dtype=np.int64),  # EOS
    ], axis=1)
    gold = [tuple(sorted(rng.choice(cfg.tag_vocab, size=2, replace=False).tolist()))
            for _ in range(batch)]
    hot = np.zeros((batch, cfg.tag_vocab), dtype=np.float32)
    for row, tags in enumerate(gold):
        for t in tags:
            hot[row, t] = 1.0
    return grids, tokens, gold, hot


@pytest.fixture(scope="session")
def desk_corpus_dir(tmp_path_factory):
    """A small generated corpus on disk (64/8/16 split) shared by tests."""
    out = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(count=88, split=(64 / 88, 8 / 88, 16 / 88), seed=505)
    samples = generate_corpus(spec)
    splits = split_corpus(samples, spec)
    for name, part in splits.items():
        save_samples(out / f"{name}.jsonl", part)
    vocab = build_vocab(splits["train"])
    vocab.save(out / "vocab.txt")
    return out, spec


def desk_run_config(spec: CorpusSpec, **train_overrides) -> RunConfig:
    cfg = RunConfig()
    cfg.corpus = spec
    cfg.model.grid = spec.grid
    cfg.model.channels = spec.channels
    cfg.model.tag_vocab = spec.tag_vocab
    for key, val in train_overrides.items():
        setattr(cfg.train, key, val)
    return cfg
