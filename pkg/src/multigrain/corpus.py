"""Synthetic grid-image report corpus.

Each sample is a small float image on a G x G x C grid plus a short
lowercase report. Abnormal samples carry one or two finding tags; every
tag plants a distinctive 2x2 texture block in the image and contributes
one fixed template sentence to the report, so visual evidence, tag labels
and report text stay mutually consistent. The generator is bias
controlled: the abnormal fraction is an explicit dial, and all draws are
keyed by (corpus seed, sample index) so output is byte-for-byte
reproducible regardless of generation order or thread count.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, SequenceError
from .rng import derived_rng

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]

TAG_NAMES = [
    "opacity", "nodule", "streak", "haze", "shadow", "blotch",
    "speck", "band", "ring", "patchiness", "flare", "granularity",
    "wisp", "knot", "clump", "crest",
]

NORMAL_SENTENCES = [
    "the heart size is normal .",
    "the lungs are well expanded .",
    "no focal consolidation is seen .",
    "the mediastinal contour is unremarkable .",
    "no pleural effusion is present .",
    "the osseous structures are intact .",
]

GEN_THREADS_ENV = "MULTIGRAIN_GEN_THREADS"
_CELL = 2  # planted signatures live on a 2x2 pixel lattice


def tag_phrase(tag_id: int) -> str:
    """Canonical report sentence announcing one finding tag."""
    return f"there is a focal {TAG_NAMES[tag_id]} in the imaged field ."


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower())


@dataclass
class CorpusSpec:
    """Shape and bias dials for one synthetic corpus."""

    count: int = 704
    grid: int = 8
    channels: int = 1
    tag_vocab: int = 12
    p_abnormal: float = 0.3
    max_tags: int = 2
    seed: int = 1234
    split: tuple[float, float, float] = (512 / 704, 64 / 704, 128 / 704)
    min_freq: int = 1

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"corpus count must be positive, got {self.count}")
        if self.grid < _CELL or self.grid % _CELL != 0:
            raise ConfigError(f"grid size must be a positive multiple of {_CELL}, got {self.grid}")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if not (0 <= self.tag_vocab <= len(TAG_NAMES)):
            raise ConfigError(f"tag_vocab must lie in [0, {len(TAG_NAMES)}], got {self.tag_vocab}")
        if not (0.0 <= self.p_abnormal <= 1.0):
            raise ConfigError(f"p_abnormal must lie in [0, 1], got {self.p_abnormal}")
        if self.p_abnormal > 0 and not (1 <= self.max_tags <= self.tag_vocab):
            raise ConfigError(f"max_tags must lie in [1, tag_vocab={self.tag_vocab}], got {self.max_tags}")
        if len(self.split) != 3 or any(r < 0 for r in self.split):
            raise ConfigError(f"split must be three non-negative ratios, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-6:
            raise ConfigError(f"split ratios must sum to 1, got {self.split}")

    def split_counts(self) -> tuple[int, int, int]:
        n_train = round(self.count * self.split[0])
        n_val = round(self.count * self.split[1])
        n_train = min(n_train, self.count)
        n_val = min(n_val, self.count - n_train)
        return n_train, n_val, self.count - n_train - n_val


@dataclass
class Sample:
    """One image/report pair with its gold finding tags."""

    sample_id: str
    grid: np.ndarray  # (G, G, C) float32
    tags: tuple[int, ...]
    report: str

    def to_json(self) -> str:
        payload = {
            "grid": [round(float(v), 6) for v in self.grid.ravel()],
            "grid_shape": list(self.grid.shape),
            "id": self.sample_id,
            "report": self.report,
            "tags": list(self.tags),
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "Sample":
        try:
            payload = json.loads(line)
            grid = np.asarray(payload["grid"], dtype=np.float32).reshape(payload["grid_shape"])
            return Sample(
                sample_id=payload["id"],
                grid=grid,
                tags=tuple(int(t) for t in payload["tags"]),
                report=payload["report"],
            )
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed sample record: {exc}") from exc


def _signature_block(tag_id: int, channels: int) -> np.ndarray:
    """Distinctive cell texture for one tag.

    The four pixels of the cell carry the tag id in binary at strong
    amplitude, offset away from the background noise range so a linear
    patch projection can separate tags.
    """
    bits = [(tag_id >> b) & 1 for b in range(_CELL * _CELL)]
    block = 0.45 + 0.5 * np.array(bits, dtype=np.float32).reshape(_CELL, _CELL)
    return np.repeat(block[:, :, None], channels, axis=2)


def generate_sample(spec: CorpusSpec, index: int) -> Sample:
    """Build sample ``index`` deterministically from the corpus seed."""
    rng = derived_rng(spec.seed, index)
    g, c = spec.grid, spec.channels
    grid = rng.uniform(0.0, 0.25, size=(g, g, c)).astype(np.float32)

    tags: tuple[int, ...] = ()
    if spec.tag_vocab > 0 and rng.random() < spec.p_abnormal:
        n_tags = int(rng.integers(1, spec.max_tags + 1))
        tags = tuple(sorted(rng.choice(spec.tag_vocab, size=n_tags, replace=False).tolist()))

    cells_per_side = g // _CELL
    n_cells = cells_per_side * cells_per_side
    if tags:
        chosen = rng.choice(n_cells, size=len(tags), replace=False)
        for tag, cell in zip(tags, chosen):
            r, col = (int(cell) // cells_per_side) * _CELL, (int(cell) % cells_per_side) * _CELL
            grid[r:r + _CELL, col:col + _CELL, :] = _signature_block(tag, c)

    n_normal = int(rng.integers(2, 5))
    normal_idx = sorted(rng.choice(len(NORMAL_SENTENCES), size=n_normal, replace=False).tolist())
    sentences = [NORMAL_SENTENCES[i] for i in normal_idx]
    for tag in tags:  # ascending tag id, inserted at a drawn position
        pos = int(rng.integers(0, len(sentences) + 1))
        sentences.insert(pos, tag_phrase(tag))

    grid = np.round(grid, 6)
    return Sample(sample_id=f"s{index:05d}", grid=grid, tags=tags, report=" ".join(sentences))


def generate_corpus(spec: CorpusSpec) -> list[Sample]:
    """All samples of a corpus, in index order.

    Honors MULTIGRAIN_GEN_THREADS for parallel generation; results are
    identical either way because each sample derives its own rng.
    """
    spec.validate()
    threads = int(os.environ.get(GEN_THREADS_ENV, "1") or "1")
    indices = range(spec.count)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda i: generate_sample(spec, i), indices))
    return [generate_sample(spec, i) for i in indices]


def split_corpus(samples: Sequence[Sample], spec: CorpusSpec) -> dict[str, list[Sample]]:
    n_train, n_val, n_test = spec.split_counts()
    return {
        "train": list(samples[:n_train]),
        "val": list(samples[n_train:n_train + n_val]),
        "test": list(samples[n_train + n_val:]),
    }


def save_samples(path: Path, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json())
            fh.write("\n")


def load_samples(path: Path) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"sample file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return [Sample.from_json(line) for line in fh if line.strip()]


class Vocabulary:
    """Token/id mapping with four reserved ids at the front.

    Ids 0..3 are <pad>, <bos>, <eos>, <unk>. Corpus tokens follow,
    ordered by descending frequency then lexicographically, so the
    mapping is a pure function of the training reports.
    """

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:4]) != RESERVED:
            raise DataError(f"vocabulary must start with reserved tokens {RESERVED}")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str, max_len: Optional[int] = None) -> list[int]:
        """Token ids framed as [BOS, ..., EOS]; unknown words map to <unk>."""
        ids = [BOS_ID]
        ids.extend(self.token_to_id.get(t, UNK_ID) for t in tokenize(text))
        ids.append(EOS_ID)
        if max_len is not None and len(ids) > max_len:
            raise SequenceError(f"encoded report needs {len(ids)} positions, limit is {max_len}")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i in (PAD_ID, BOS_ID):
                continue
            if i == EOS_ID:
                break
            words.append(self.id_to_token[i] if 0 <= i < len(self.id_to_token) else RESERVED[UNK_ID])
        return " ".join(words)

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.id_to_token))
            fh.write("\n")

    @staticmethod
    def load(path: Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocabulary file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return Vocabulary(tokens)


def build_vocab(samples: Sequence[Sample], min_freq: int = 1) -> Vocabulary:
    counts: dict[str, int] = {}
    for s in samples:
        for tok in tokenize(s.report):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, n in counts.items() if n >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + kept)


@dataclass
class Batch:
    """One training batch, padded to the longest sequence."""

    sample_ids: list[str]
    grids: np.ndarray        # (B, G, G, C)
    tokens: np.ndarray       # (B, T) int64, [BOS ... EOS PAD...]
    tag_hot: np.ndarray      # (B, tag_vocab) float32 multi-hot
    gold_tags: list[tuple[int, ...]] = field(default_factory=list)


def make_batch(samples: Sequence[Sample], vocab: Vocabulary, tag_vocab: int,
               max_len: Optional[int] = None) -> Batch:
    encoded = [vocab.encode(s.report, max_len) for s in samples]
    t_max = max(len(e) for e in encoded)
    tokens = np.full((len(samples), t_max), PAD_ID, dtype=np.int64)
    for row, ids in enumerate(encoded):
        tokens[row, :len(ids)] = ids
    tag_hot = np.zeros((len(samples), tag_vocab), dtype=np.float32)
    for row, s in enumerate(samples):
        for t in s.tags:
            if t >= tag_vocab:
                raise DataError(f"sample {s.sample_id} carries tag {t} outside vocab of {tag_vocab}")
            tag_hot[row, t] = 1.0
    grids = np.stack([s.grid for s in samples]).astype(np.float32)
    return Batch(
        sample_ids=[s.sample_id for s in samples],
        grids=grids,
        tokens=tokens,
        tag_hot=tag_hot,
        gold_tags=[s.tags for s in samples],
    )


def batch_iter(samples: Sequence[Sample], vocab: Vocabulary, tag_vocab: int,
               batch_size: int, seed: int, epoch: int,
               max_len: Optional[int] = None) -> Iterator[Batch]:
    """Shuffled minibatches; the order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    order = derived_rng(seed, 0x5A5A, epoch).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield make_batch(chunk, vocab, tag_vocab, max_len)


def corpus_stats(samples: Sequence[Sample]) -> dict:
    n_abn = sum(1 for s in samples if s.tags)
    lens = [len(tokenize(s.report)) for s in samples]
    return {
        "samples": len(samples),
        "abnormal_fraction": n_abn / len(samples) if samples else 0.0,
        "mean_report_tokens": float(np.mean(lens)) if lens else 0.0,
        "max_report_tokens": int(max(lens)) if lens else 0,
    }
