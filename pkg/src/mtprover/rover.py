"""Three-system hypothesis fusion for long-form pseudo-labels.

Pipeline per clip: normalize each hypothesis, align them into a word
transition network (WTN), keep tokens with at least two votes, and score the
clip by its disagreement rate (1-1-1 slots over total slots). Clips whose
rate exceeds the threshold are discarded; consecutive surviving clips are
concatenated into long-form samples.
"""

from __future__ import annotations

import logging
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from mtprover import kernels
from mtprover.defaults import DISAGREEMENT_THRESHOLD, LONGFORM_MAX_SECONDS, MAX_CLIP_SECONDS
from mtprover.metrics import intern

logger = logging.getLogger(__name__)

NULL = None

KEPT = "kept"
DISCARDED = "discarded"
EMPTY_HYPOTHESIS = "empty-hypothesis"

# Scripts written without spaces; each codepoint becomes one token.
_CHAR_UNIT_RANGES = (
    (0x3040, 0x30FF),  # hiragana, katakana
    (0x3400, 0x4DBF),  # CJK extension A
    (0x4E00, 0x9FFF),  # CJK unified ideographs
    (0xF900, 0xFAFF),  # CJK compatibility ideographs
    (0x20000, 0x2FA1F),  # CJK extensions B and later
)

_APOSTROPHES = {"'", "’"}


def is_char_unit(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CHAR_UNIT_RANGES)


def fold_width(text: str) -> str:
    """Fullwidth ASCII variants (U+FF01..U+FF5E) to ASCII, ideographic space to space."""
    out = []
    for ch in text:
        cp = ord(ch)
        if 0xFF01 <= cp <= 0xFF5E:
            out.append(chr(cp - 0xFEE0))
        elif cp == 0x3000:
            out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


def normalize_text(raw: str, language_hint: str | None = None) -> list[str]:
    """Tokenize a transcript for voting and scoring.

    Steps: width folding, case folding, replacing Unicode punctuation
    (categories P*) with spaces, then splitting on whitespace. Apostrophes
    between two letters are kept so contractions stay one token. Characters
    from the ranges in ``_CHAR_UNIT_RANGES`` are split into single-codepoint
    tokens. Digits are left as written.

    ``language_hint`` is accepted for record compatibility; tokenization is
    decided per character from its script, so the hint does not change the
    result.
    """
    text = fold_width(raw).casefold()
    chars = []
    n = len(text)
    for i, ch in enumerate(text):
        if unicodedata.category(ch).startswith("P"):
            if ch in _APOSTROPHES and 0 < i < n - 1 and text[i - 1].isalpha() and text[i + 1].isalpha():
                chars.append("'")
            else:
                chars.append(" ")
        elif is_char_unit(ch):
            chars.append(f" {ch} ")
        else:
            chars.append(ch)
    return "".join(chars).split()


def join_tokens(tokens: Sequence[str]) -> str:
    """Inverse of whitespace tokenization: no space between adjacent CJK units."""
    out = []
    prev_unit = False
    for i, tok in enumerate(tokens):
        unit = len(tok) == 1 and is_char_unit(tok)
        if i and not (unit and prev_unit):
            out.append(" ")
        out.append(tok)
        prev_unit = unit
    return "".join(out)


@dataclass(frozen=True)
class WordTransitionNetwork:
    """Ordered slots; ``slots[i][s]`` is system ``s``'s arc in slot ``i`` (``None`` = NULL)."""

    slots: tuple[tuple[str | None, ...], ...]
    num_systems: int

    def __len__(self):
        return len(self.slots)


def build_wtn(hyps: Sequence[Sequence[str]]) -> WordTransitionNetwork:
    """Fold hypotheses into a WTN in the given order.

    The first hypothesis seeds one slot per token. Each later hypothesis is
    aligned against the slots with unit costs (a token matches a slot for
    free if any arc in the slot carries it); unmatched slots get a NULL arc
    for the new system and unmatched tokens open a new slot with NULL arcs
    for the earlier systems. Equal-cost alternatives are resolved as
    match/substitution, then deletion, then insertion.
    """
    if not hyps:
        raise ValueError("at least one hypothesis is required")
    ids = intern(*hyps)
    vocab = {}
    for seq, arr in zip(hyps, ids):
        for tok, i in zip(seq, arr):
            vocab[int(i)] = tok
    slots = ids[0].reshape(-1, 1).copy()
    for k in range(1, len(hyps)):
        toks = ids[k]
        ops = kernels.align_slots(np.ascontiguousarray(slots), toks)
        grown = np.full((len(ops), k + 1), -1, dtype=np.int64)
        grown[ops != kernels.OP_INS, :k] = slots
        grown[ops != kernels.OP_DEL, k] = toks
        slots = grown
    decoded = tuple(tuple(vocab[int(a)] if a >= 0 else NULL for a in row) for row in slots)
    return WordTransitionNetwork(decoded, len(hyps))


@dataclass(frozen=True)
class FusionResult:
    fused_tokens: tuple[str, ...]
    disagreed_positions: int
    text_units: int
    e_hat: float
    kept: bool
    verdict: str = KEPT
    clip_id: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.e_hat <= 1.0:
            raise ValueError(f"e_hat {self.e_hat} outside [0, 1]")


def vote_slot(arcs: Sequence[str | None]) -> tuple[str | None, bool]:
    """Winner of one three-arc slot and whether the slot is a disagreement.

    A value with two or more votes wins (a winning NULL emits nothing); a
    1-1-1 split is a disagreement and emits nothing.
    """
    if len(arcs) != 3:
        raise ValueError(f"voting expects 3 arcs per slot, got {len(arcs)}")
    value, votes = Counter(arcs).most_common(1)[0]
    if votes >= 2:
        return value, False
    return NULL, True


def vote_wtn(wtn: WordTransitionNetwork, threshold: float = DISAGREEMENT_THRESHOLD) -> FusionResult:
    fused = []
    disagreed = 0
    for arcs in wtn.slots:
        value, disagreement = vote_slot(arcs)
        if disagreement:
            disagreed += 1
        elif value is not NULL:
            fused.append(value)
    units = len(wtn.slots)
    e_hat = disagreed / units if units else 0.0
    kept = e_hat <= threshold
    return FusionResult(tuple(fused), disagreed, units, e_hat, kept, KEPT if kept else DISCARDED)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    start: float
    end: float
    hyps: tuple[str, str, str]
    lang: str | None = None

    def __post_init__(self):
        if len(self.hyps) != 3:
            raise ValueError(f"clip {self.clip_id}: expected 3 hypotheses, got {len(self.hyps)}")
        if not self.end > self.start:
            raise ValueError(f"clip {self.clip_id}: end {self.end} is not after start {self.start}")
        if self.duration > MAX_CLIP_SECONDS:
            raise ValueError(f"clip {self.clip_id}: duration {self.duration:g}s exceeds {MAX_CLIP_SECONDS:g}s")

    @property
    def duration(self) -> float:
        return self.end - self.start


def fuse_clip(clip: ClipRecord, threshold: float = DISAGREEMENT_THRESHOLD) -> FusionResult:
    """Normalize, align, vote. Kept iff ``e_hat <= threshold`` and no hypothesis is empty."""
    hyps = [normalize_text(h, clip.lang) for h in clip.hyps]
    result = vote_wtn(build_wtn(hyps), threshold)
    if any(len(h) == 0 for h in hyps):
        return replace(result, kept=False, verdict=EMPTY_HYPOTHESIS, clip_id=clip.clip_id)
    return replace(result, clip_id=clip.clip_id)


@dataclass(frozen=True)
class LongFormSample:
    sample_id: str
    clip_ids: tuple[str, ...]
    text: str
    duration: float
    unrefined: bool = False


def concatenate_segments(
    items: Iterable[tuple[ClipRecord, FusionResult]],
    max_duration: float = LONGFORM_MAX_SECONDS,
) -> list[LongFormSample]:
    """Group consecutive kept clips greedily under a total-duration budget.

    A discarded clip ends the current group. A kept clip longer than the
    budget on its own cannot be placed and also ends the group.
    """
    samples: list[LongFormSample] = []
    group: list[tuple[ClipRecord, FusionResult]] = []

    def close():
        if group:
            tokens = [t for _, r in group for t in r.fused_tokens]
            samples.append(
                LongFormSample(
                    f"sample-{len(samples):06d}",
                    tuple(c.clip_id for c, _ in group),
                    join_tokens(tokens),
                    sum(c.duration for c, _ in group),
                )
            )
            group.clear()

    used = 0.0
    for clip, result in items:
        if not result.kept or clip.duration > max_duration:
            close()
            used = 0.0
            continue
        if group and used + clip.duration > max_duration:
            close()
            used = 0.0
        group.append((clip, result))
        used += clip.duration
    close()
    return samples


def identity_hook(text: str) -> str:
    return text


def refine_hook(sample: LongFormSample, hook: Callable[[str], str] = identity_hook) -> LongFormSample:
    """Apply a text post-processing hook; on failure keep the sample, flagged unrefined."""
    try:
        text = hook(sample.text)
    except Exception:
        logger.warning("refinement failed for %s", sample.sample_id, exc_info=True)
        return replace(sample, unrefined=True)
    return replace(sample, text=text)


@dataclass
class SessionOutput:
    results: list[FusionResult] = field(default_factory=list)
    samples: list[LongFormSample] = field(default_factory=list)


def fuse_session(
    clips: Sequence[ClipRecord],
    threshold: float = DISAGREEMENT_THRESHOLD,
    max_duration: float = LONGFORM_MAX_SECONDS,
    workers: int = 1,
    hook: Callable[[str], str] = identity_hook,
) -> SessionOutput:
    """Fuse every clip (optionally on a thread pool) then concatenate in input order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: fuse_clip(c, threshold), clips))
    else:
        results = [fuse_clip(c, threshold) for c in clips]
    samples = [refine_hook(s, hook) for s in concatenate_segments(zip(clips, results), max_duration)]
    return SessionOutput(results, samples)
