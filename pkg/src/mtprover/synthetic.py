"""Seeded generators for test models and clip sessions."""

from __future__ import annotations

import itertools

import numpy as np

from mtprover.models import TableModel
from mtprover.rover import ClipRecord

WORDS = (
    "the of and to in is was for on that with as it by at from this be are or an were which "
    "have has had not but they his her she he we you all one two three data model speech audio"
).split()
CJK = list("的一是在不了有和人这中大为上个国我以要他时来用们生到作地于出就分对成会可主发年动同工也能下过子说产种面而方后多定行学法所民得经")


def random_table_model(
    seed: int,
    vocab_size: int = 6,
    num_branches: int = 5,
    context_order: int = 1,
    match_prob: float = 0.5,
    coverage: float = 0.9,
) -> TableModel:
    """Random table model whose branches copy the greedy lookahead with probability ``match_prob``.

    Uncovered contexts fall back to uniform, so greedy paths also visit ties.
    """
    rng = np.random.default_rng(seed)
    V, H, k = vocab_size, num_branches, context_order
    keys = [key for key in itertools.product(range(V), repeat=k) if rng.random() < coverage]
    mains = {key: rng.dirichlet(np.full(V, 0.5)) for key in keys}

    def greedy_next(ctx):
        p = mains.get(tuple(ctx[-k:]))
        return 0 if p is None else int(np.argmax(p))

    model = TableModel(V, H, k)
    for key in keys:
        ctx = list(key)
        path = []
        for _ in range(H + 1):
            y = greedy_next(ctx)
            path.append(y)
            ctx.append(y)
        branches = []
        for h in range(1, H + 1):
            noise = rng.dirichlet(np.full(V, 0.5))
            if rng.random() < match_prob:
                b = 0.3 * noise
                b[path[h]] += 0.7
            else:
                b = noise
            branches.append(b / b.sum())
        model.set(key, mains[key], branches)
    return model


def _perturb(tokens, rng, error_rate):
    out = []
    for tok in tokens:
        r = rng.random()
        if r < error_rate / 3:
            continue
        if r < 2 * error_rate / 3:
            out.append(str(rng.choice(WORDS)))
        elif r < error_rate:
            out.append(tok)
            out.append(str(rng.choice(WORDS)))
        else:
            out.append(tok)
    return out


def _surface(tokens, rng):
    words = [w.upper() if rng.random() < 0.1 else w for w in tokens]
    text = " ".join(words)
    if rng.random() < 0.5:
        text = text[:1].upper() + text[1:] + rng.choice([".", "!", "?", ","])
    return text


def synthetic_session(num_clips: int, seed: int, max_words: int = 20) -> list[ClipRecord]:
    """Consecutive clips with three noisy hypotheses each; roughly a fifth are CJK."""
    rng = np.random.default_rng(seed)
    clips = []
    t = 0.0
    for i in range(num_clips):
        dur = float(np.round(rng.uniform(2.0, 30.0), 3))
        n = int(rng.integers(1, max_words + 1))
        cjk = rng.random() < 0.2
        pool = CJK if cjk else WORDS
        ref = [str(rng.choice(pool)) for _ in range(n)]
        err = float(rng.choice([0.0, 0.02, 0.1, 0.3]))
        hyps = []
        for _ in range(3):
            toks = _perturb(ref, rng, err)
            hyps.append("".join(toks) if cjk else _surface(toks, rng))
        clips.append(ClipRecord(f"clip-{i:06d}", t, t + dur, tuple(hyps), "zh" if cjk else "en"))
        t = float(np.round(t + dur + rng.uniform(0.0, 1.0), 3))
    return clips
