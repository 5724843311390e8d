"""Sentence corpora: a seeded synthetic generator and a plain-text reader."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedmem.errors import InputError
from fedmem.vocab import NUM_SPECIAL, Vocabulary

Sentence = list[int]


@dataclass(frozen=True)
class CorpusConfig:
    """Synthetic corpus generator settings.

    Unigrams follow Zipf's law over the ordinary vocabulary (rank r has weight
    ``r ** -zipf_exponent``, rank 1 being the first ordinary token). Order-2
    structure comes from hashing each two-word context into one of
    ``context_classes`` classes; each class owns ``successors`` preferred next
    words (themselves Zipf draws), used with probability ``markov_weight``.
    """

    num_sentences: int = 50_000
    vocab_size: int = 1000
    zipf_exponent: float = 1.0
    markov_weight: float = 0.6
    context_classes: int = 4096
    successors: int = 8
    mean_length: float = 8.0
    min_length: int = 3
    max_length: int = 20

    def __post_init__(self):
        if self.vocab_size <= NUM_SPECIAL + 1:
            raise InputError("vocabulary too small")
        if not 0 <= self.markov_weight <= 1:
            raise InputError("markov_weight must be in [0, 1]")
        if not 1 <= self.min_length <= self.max_length:
            raise InputError("bad sentence length bounds")


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate_corpus(cfg: CorpusConfig, rng: np.random.Generator) -> list[Sentence]:
    """Sentences of token ids in ``[NUM_SPECIAL, vocab_size)``."""
    n_words = cfg.vocab_size - NUM_SPECIAL
    cdf = np.cumsum(zipf_probabilities(n_words, cfg.zipf_exponent))
    cdf[-1] = 1.0

    def zipf_draw(size):
        return np.searchsorted(cdf, rng.random(size), side="right") + NUM_SPECIAL

    table = zipf_draw(cfg.context_classes * cfg.successors).reshape(
        cfg.context_classes, cfg.successors)
    lengths = np.clip(rng.poisson(cfg.mean_length, cfg.num_sentences),
                      cfg.min_length, cfg.max_length)
    total = int(lengths.sum())
    # pre-draw every random quantity so generation cost is one pass
    use_markov = rng.random(total) < cfg.markov_weight
    fallback = zipf_draw(total)
    pick = rng.integers(0, cfg.successors, total)

    sentences = []
    pos = 0
    for n in lengths:
        a, b = 0, 0
        sent = []
        for _ in range(n):
            if use_markov[pos] and len(sent) >= 1:
                cls = (a * 1_000_003 + b * 7919) % cfg.context_classes
                w = int(table[cls, pick[pos]])
            else:
                w = int(fallback[pos])
            sent.append(w)
            a, b = b, w
            pos += 1
        sentences.append(sent)
    return sentences


def fit_zipf_exponent(sentences: Sequence[Sequence[int]], top: int = 100) -> float:
    """Least-squares slope of log-frequency vs log-rank over the top ranks."""
    counts = Counter(t for s in sentences for t in s)
    freq = np.array(sorted(counts.values(), reverse=True)[:top], dtype=np.float64)
    ranks = np.arange(1, freq.size + 1)
    slope = np.polyfit(np.log(ranks), np.log(freq), 1)[0]
    return float(-slope)


def read_lines(path: str | Path) -> list[list[str]]:
    """Whitespace-tokenised non-empty lines of a UTF-8 file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read corpus {path}: {exc}") from exc
    lines = [line.split() for line in text.splitlines()]
    lines = [toks for toks in lines if toks]
    if not lines:
        raise InputError(f"corpus {path} is empty")
    return lines


def build_vocabulary(lines: Sequence[Sequence[str]], size: int) -> Vocabulary:
    """Most frequent words (ties by first appearance) filling ``size`` slots."""
    counts = Counter(w for toks in lines for w in toks)
    ranked = sorted(counts, key=lambda w: -counts[w])  # stable: first-seen order on ties
    return Vocabulary.from_words(ranked[:max(size - NUM_SPECIAL, 0)])


def ingest_corpus(path: str | Path, vocab: Vocabulary) -> list[Sentence]:
    """Read a one-sentence-per-line file; unknown words map to OOV."""
    return [vocab.encode(toks) for toks in read_lines(path)]


def write_corpus(sentences: Sequence[Sequence[int]], vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(" ".join(vocab.decode(s)) + "\n")
