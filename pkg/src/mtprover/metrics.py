"""Edit-distance error rates and real-time factor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from mtprover import kernels


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    def __post_init__(self):
        if min(self.substitutions, self.deletions, self.insertions, self.reference_length) < 0:
            raise ValueError("edit counts must be non-negative")

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.reference_length + other.reference_length,
        )


def intern(*seqs: Sequence[Hashable]) -> list[np.ndarray]:
    """Map tokens to dense int64 ids shared across ``seqs``."""
    ids: dict = {}
    return [np.fromiter((ids.setdefault(t, len(ids)) for t in s), dtype=np.int64, count=len(s)) for s in seqs]


def edit_counts(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> EditCounts:
    """Unit-cost alignment counts; among equal-cost alignments substitutions win."""
    ref, hyp = intern(reference, hypothesis)
    s, d, i = kernels.edit_ops(ref, hyp)
    return EditCounts(int(s), int(d), int(i), len(reference))


def error_rate(counts: EditCounts) -> float:
    """``(S + D + I) / N``; may exceed 1 when the hypothesis has many insertions."""
    if counts.reference_length <= 0:
        raise ValueError("error rate is undefined for an empty reference")
    return counts.errors / counts.reference_length


@dataclass(frozen=True)
class RtfMeasurement:
    processing_seconds: float
    audio_seconds: float

    def __post_init__(self):
        if not self.audio_seconds > 0:
            raise ValueError("audio duration must be positive")
        if not self.processing_seconds > 0:
            raise ValueError("processing time must be positive")


def rtf(m: RtfMeasurement) -> float:
    return m.processing_seconds / m.audio_seconds


def score_corpus(pairs: Iterable[tuple[str, Sequence[Hashable], Sequence[Hashable]]]) -> dict:
    """Per-utterance and pooled error rates for ``(utt_id, reference, hypothesis)`` triples.

    The pooled rate divides total errors by total reference length.
    """
    utterances = []
    total = EditCounts(0, 0, 0, 0)
    for utt_id, ref, hyp in pairs:
        c = edit_counts(ref, hyp)
        total = total + c
        utterances.append(
            {
                "id": utt_id,
                "substitutions": c.substitutions,
                "deletions": c.deletions,
                "insertions": c.insertions,
                "reference_length": c.reference_length,
                "error_rate": error_rate(c) if c.reference_length else None,
            }
        )
    return {
        "utterances": utterances,
        "corpus": {
            "substitutions": total.substitutions,
            "deletions": total.deletions,
            "insertions": total.insertions,
            "reference_length": total.reference_length,
            "error_rate": error_rate(total) if total.reference_length else None,
        },
    }
