"""Corpus-level BLEU, ROUGE-L, and finding-phrase recall.

All three work on token lists; callers tokenize references and generated
reports the same way the corpus tokenizer does, so identity generation
reaches exact 1.0 scores.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import Sample, tag_phrase, tokenize
from .errors import DataError

TokenSeq = Sequence[str]


def _ngram_counts(tokens: TokenSeq, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[TokenSeq], references: Sequence[TokenSeq],
         max_n: int = 4, smooth: bool = True) -> list[float]:
    """Corpus BLEU-1..max_n with clipped counts and brevity penalty.

    Modified n-gram precision pools clipped matches over the corpus.
    With ``smooth`` on, an order n >= 2 whose clipped match count is
    zero counts as one match instead (the denominator is untouched);
    order 1 is never smoothed, so an empty overlap still scores zero.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"bleu needs paired corpora, got {len(hypotheses)} vs {len(references)}")
    if not hypotheses:
        raise DataError("bleu of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)

    scores = []
    log_precisions: list[float] = []
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if smooth and n >= 2 and m == 0:
            m = 1
        if t == 0 or m == 0:
            log_precisions.append(float("-inf"))
        else:
            log_precisions.append(math.log(m / t))
        usable = log_precisions[:n]
        if any(math.isinf(lp) for lp in usable):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(usable) / n))
    return scores


def lcs_length(a: TokenSeq, b: TokenSeq) -> int:
    """Length of the longest common subsequence, O(len(a)*len(b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypotheses: Sequence[TokenSeq], references: Sequence[TokenSeq],
            beta: float = 1.2) -> float:
    """Mean per-sample LCS F-measure with recall weight ``beta``."""
    if len(hypotheses) != len(references):
        raise DataError(f"rouge_l needs paired corpora, got {len(hypotheses)} vs {len(references)}")
    if not hypotheses:
        raise DataError("rouge_l of an empty corpus")
    total = 0.0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        if not hyp or not ref:
            continue
        lcs = lcs_length(hyp, ref)
        if lcs == 0:
            continue
        precision = lcs / len(hyp)
        recall = lcs / len(ref)
        total += (1 + beta * beta) * precision * recall / (recall + beta * beta * precision)
    return total / len(hypotheses)


def _contains_subsequence(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    first = needle[0]
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i] == first and haystack[i:i + len(needle)] == needle:
            return True
    return False


def abnormality_recall(generated: Sequence[str], samples: Sequence[Sample]) -> float:
    """Fraction of gold finding tags whose template phrase appears verbatim
    (as a contiguous token run) in the generated report.

    Samples without gold tags do not contribute. A corpus with no tagged
    samples scores 0 by definition.
    """
    if len(generated) != len(samples):
        raise DataError(f"recall needs one generation per sample, got {len(generated)} vs {len(samples)}")
    hits = 0
    total = 0
    for text, sample in zip(generated, samples):
        if not sample.tags:
            continue
        tokens = tokenize(text)
        for tag in sample.tags:
            total += 1
            if _contains_subsequence(tokens, tokenize(tag_phrase(tag))):
                hits += 1
    return hits / total if total else 0.0


@dataclass
class EvalReport:
    """Bundle of generation metrics over one corpus split."""

    bleu: list[float]
    rouge_l: float
    abnormality_recall: float
    samples: int

    def as_dict(self) -> dict[str, float]:
        out = {f"bleu_{i + 1}": v for i, v in enumerate(self.bleu)}
        out["rouge_l"] = self.rouge_l
        out["abnormality_recall"] = self.abnormality_recall
        out["samples"] = self.samples
        return out

    def to_kv_text(self) -> str:
        return "".join(f"{k}\t{v:.6f}\n" if isinstance(v, float) else f"{k}\t{v}\n"
                       for k, v in self.as_dict().items())

    def format_row(self, label: str) -> str:
        cells = [label] + [f"{v:.6f}" for v in self.bleu] + [
            f"{self.rouge_l:.6f}", f"{self.abnormality_recall:.6f}"]
        return "\t".join(cells)


EVAL_HEADER = "\t".join(["run", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "abn_recall"])


def evaluate_generations(generated: Sequence[str], samples: Sequence[Sample]) -> EvalReport:
    """Score generated reports against their samples' references."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    hyp_tokens = [tokenize(g) for g in generated]
    ref_tokens = [tokenize(s.report) for s in samples]
    return EvalReport(
        bleu=bleu(hyp_tokens, ref_tokens),
        rouge_l=rouge_l(hyp_tokens, ref_tokens),
        abnormality_recall=abnormality_recall(generated, samples),
        samples=len(samples),
    )
