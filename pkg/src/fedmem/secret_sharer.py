"""Canary memorization audit: random-sampling rank and beam-search extraction.

Both methods condition on ``[BOS] + prefix`` (canaries are trained as whole
sentences) and score the 3-token suffix by log-perplexity.

Rank convention: ``rank = 1 + #{r in R : P(r | p) <= P(s | p)}``. A canary
more likely than every reference gets rank 1; references tied with the canary
count against it.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedmem.errors import InputError
from fedmem.lm import ModelParams, beam_search, log_perplexities
from fedmem.population import Canary
from fedmem.vocab import BOS, NUM_SPECIAL

DEFAULT_REFERENCE_SIZE = 10_000
DEFAULT_BEAM_WIDTH = 5
REPORT_COLUMNS = ("canary_id", "n_u", "n_e", "rank", "reference_size", "exposure",
                  "found", "beam_position")
_QUANTILES = (0.001, 0.01, 0.5)


@dataclass
class RankResult:
    canary_id: int
    rank: int
    reference_size: int
    canary_log_perplexity: float
    reference_quantiles: dict = field(default_factory=dict)

    @property
    def exposure(self) -> float:
        return rank_to_exposure(self.rank, self.reference_size)


@dataclass
class ExtractionResult:
    canary_id: int
    found: bool
    position: int | None
    beams: list


def rank_to_exposure(rank: int, reference_size: int) -> float:
    """``-log2(rank / (|R| + 1))``: 0 for the worst rank, ~log2|R| for rank 1."""
    if not 1 <= rank <= reference_size + 1:
        raise ValueError(f"rank {rank} outside [1, {reference_size + 1}]")
    return -math.log2(rank / (reference_size + 1))


def sample_references(vocab_size: int, length: int, count: int,
                      rng: np.random.Generator) -> np.ndarray:
    """``count`` sequences of i.i.d. uniform ordinary tokens (canary support)."""
    return rng.integers(NUM_SPECIAL, vocab_size, size=(count, length))


def _context(canary: Canary) -> list[int]:
    return [BOS, *canary.prefix]


def rank_from_scores(score: float, ref_scores: np.ndarray,
                     ties: np.ndarray | None = None) -> int:
    """``1 + #{r : ref_score <= score}``, also counting any entry flagged in ``ties``."""
    worse_or_equal = np.asarray(ref_scores) <= score
    if ties is not None:
        worse_or_equal |= ties
    return 1 + int(np.count_nonzero(worse_or_equal))


def random_sampling_rank(params: ModelParams, canary: Canary,
                         reference_size: int = DEFAULT_REFERENCE_SIZE,
                         rng: np.random.Generator | None = None,
                         references: np.ndarray | None = None) -> RankResult:
    """Rank of the canary suffix among random same-length suffixes.

    Pass ``references`` to score against a fixed set (e.g. a full enumeration);
    otherwise ``reference_size`` sequences are drawn from ``rng``.
    """
    if references is None:
        if reference_size < 1:
            raise ValueError("reference set must be non-empty")
        if rng is None:
            raise ValueError("need rng or references")
        references = sample_references(params.vocab_size, len(canary.suffix),
                                       reference_size, rng)
    return _rank(params, canary, np.atleast_2d(references))


def _rank(params: ModelParams, canary: Canary, references: np.ndarray) -> RankResult:
    # scoring canary and references in one batch keeps equal-perplexity ties
    # exact; copies of the canary itself are ties by definition
    suffix = np.asarray(canary.suffix)
    batch = np.vstack([suffix[None, :], references])
    scores = log_perplexities(params, _context(canary), batch)
    score, ref_scores = float(scores[0]), scores[1:]
    rank = rank_from_scores(score, ref_scores, np.all(references == suffix, axis=1))
    quantiles = {q: float(np.quantile(ref_scores, q)) for q in _QUANTILES}
    return RankResult(canary.id, rank, int(ref_scores.size), score, quantiles)


def beam_extraction(params: ModelParams, canary: Canary,
                    width: int = DEFAULT_BEAM_WIDTH) -> ExtractionResult:
    """Beam search from the 2-word prefix; found iff the suffix is a returned beam."""
    beams = beam_search(params, _context(canary), len(canary.suffix), width)
    seqs = [s for s, _ in beams]
    suffix = tuple(canary.suffix)
    position = seqs.index(suffix) + 1 if suffix in seqs else None
    return ExtractionResult(canary.id, position is not None, position, beams)


@dataclass
class AuditSettings:
    reference_size: int = DEFAULT_REFERENCE_SIZE
    beam_width: int = DEFAULT_BEAM_WIDTH


@dataclass
class AuditRow:
    canary: Canary
    rank: RankResult
    extraction: ExtractionResult

    def record(self) -> dict:
        return {
            "canary_id": self.canary.id,
            "n_u": self.canary.config.n_u,
            "n_e": self.canary.config.n_e,
            "rank": self.rank.rank,
            "reference_size": self.rank.reference_size,
            "exposure": repr(self.rank.exposure),
            "found": int(self.extraction.found),
            "beam_position": self.extraction.position or "",
        }


@dataclass
class AuditReport:
    rows: list[AuditRow]

    def cells(self) -> dict[tuple[int, int], list[AuditRow]]:
        out = defaultdict(list)
        for r in self.rows:
            out[(r.canary.config.n_u, r.canary.config.n_e)].append(r)
        return dict(sorted(out.items()))

    def cell_min_ranks(self) -> dict[tuple[int, int], int]:
        return {k: min(r.rank.rank for r in v) for k, v in self.cells().items()}

    def cell_extractions(self) -> dict[tuple[int, int], int]:
        return {k: sum(r.extraction.found for r in v) for k, v in self.cells().items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r.record())
        return buf.getvalue()

    def to_text(self) -> str:
        """Table with one line per (n_u, n_e) cell: ranks, then beam hits."""
        size = self.rows[0].rank.reference_size if self.rows else 0
        head = f"{'n_u':>4} {'n_e':>4}  {'ranks (out of ' + _short(size) + ')':<28} extracted"
        lines = [head, "-" * max(len(head), 48)]
        for (nu, ne), rows in self.cells().items():
            ranks = ", ".join(_short(r.rank.rank) for r in rows)
            hits = sum(r.extraction.found for r in rows)
            lines.append(f"{nu:>4} {ne:>4}  {ranks:<28} {hits} / {len(rows)}")
        return "\n".join(lines) + "\n"


def _short(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.3g}M"
    if n >= 10_000:
        return f"{n / 1e3:.3g}k"
    return str(n)


def audit_report(params: ModelParams, canaries: Sequence[Canary],
                 settings: AuditSettings = AuditSettings(),
                 rng: np.random.Generator | None = None) -> AuditReport:
    """Rank and beam-search every canary.

    One reference set per suffix length is drawn and shared by all canaries.
    """
    for c in canaries:
        if max(c.tokens) >= params.vocab_size or min(c.tokens) < 0:
            raise InputError(f"canary {c.id} uses tokens outside the model vocabulary")
    if not canaries:
        return AuditReport([])
    rng = rng if rng is not None else np.random.default_rng(0)
    refs = {}
    for length in sorted({len(c.suffix) for c in canaries}):
        refs[length] = sample_references(params.vocab_size, length,
                                         settings.reference_size, rng)
    rows = []
    for c in canaries:
        rows.append(AuditRow(c, _rank(params, c, refs[len(c.suffix)]),
                             beam_extraction(params, c, settings.beam_width)))
    return AuditReport(rows)


def read_report_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


__all__ = [
    "AuditReport", "AuditSettings", "ExtractionResult", "RankResult", "audit_report",
    "beam_extraction", "random_sampling_rank", "rank_from_scores", "rank_to_exposure",
    "read_report_csv",
]
