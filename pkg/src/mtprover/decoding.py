"""Greedy decoding with verified multi-token proposals.

Each outer step takes the greedy main token ``y0`` and the branch proposals
``y1..yH`` available at the last committed position, runs one forward pass
over ``[y0, y1, ..., yH]``, and accepts the longest prefix of proposals that
matches the main head's greedy choice along that extension. The accepted
tokens are committed, the cache is truncated back to the committed length,
and the output at the last committed position seeds the next step. The
emitted sequence is identical to plain greedy decoding.

Acceptance rates are strict: position ``h`` counts as accepted in a step only
if positions ``1..h`` all matched, so the rates are non-increasing in ``h``
and the mean accepted length per step is ``1 + sum(rates)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from mtprover.mtp import InvalidDistribution, MTPConfig, ModelStepOutput, check_distribution


class StepModel(Protocol):
    vocab_size: int
    num_branches: int

    def extend(self, cache: "DecodeCache", tokens: Sequence[int]) -> list[ModelStepOutput]: ...


class DecodeError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"decode step {step}: {message}")
        self.step = step


class DecodeCache:
    """Per-position model state, truncated to roll back rejected proposals.

    The states are opaque to the cache; the model decides what to store.
    """

    def __init__(self):
        self.tokens: list[int] = []
        self.states: list = []

    @property
    def committed_len(self) -> int:
        return len(self.tokens)

    def append(self, token: int, state) -> None:
        self.tokens.append(token)
        self.states.append(state)

    def truncate(self, n: int) -> int:
        """Keep the first ``n`` positions; returns how many were dropped."""
        if not 0 <= n <= len(self.tokens):
            raise ValueError(f"cannot truncate a cache of length {len(self.tokens)} to {n}")
        dropped = len(self.tokens) - n
        del self.tokens[n:]
        del self.states[n:]
        return dropped


@dataclass(frozen=True)
class DecodeConfig:
    mtp: MTPConfig = field(default_factory=MTPConfig)
    max_tokens: int = 256
    eos_token: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")


@dataclass
class AcceptanceStats:
    """Counters for one or more decode sessions.

    ``steps`` counts verification steps. ``accepted_tokens`` is the sum over
    those steps of ``1 + k`` where ``k`` is the accepted proposal prefix;
    ``tokens`` is what was actually emitted, which can be less when the
    token budget cuts a step short.
    """

    num_branches: int
    attempts: list[int] = field(default_factory=list)
    accepts: list[int] = field(default_factory=list)
    steps: int = 0
    accepted_tokens: int = 0
    tokens: int = 0
    forward_passes: int = 0
    rollbacks: int = 0

    def __post_init__(self):
        if not self.attempts:
            self.attempts = [0] * self.num_branches
        if not self.accepts:
            self.accepts = [0] * self.num_branches
        if len(self.attempts) != self.num_branches or len(self.accepts) != self.num_branches:
            raise ValueError("counter vectors must have one entry per branch")

    @property
    def rates(self) -> list[float]:
        return [a / n if n else 0.0 for a, n in zip(self.accepts, self.attempts)]

    @property
    def avg_accepted_length(self) -> float:
        if self.steps == 0:
            return 1.0
        return self.accepted_tokens / self.steps

    @property
    def tokens_per_forward_pass(self) -> float:
        return self.tokens / self.forward_passes if self.forward_passes else 0.0

    def record_step(self, attempted: int, accepted: int, dropped: int) -> None:
        for h in range(attempted):
            self.attempts[h] += 1
        for h in range(accepted):
            self.accepts[h] += 1
        self.steps += 1
        self.accepted_tokens += 1 + accepted
        if dropped:
            self.rollbacks += 1

    def merge(self, other: "AcceptanceStats") -> "AcceptanceStats":
        if other.num_branches != self.num_branches:
            raise ValueError("cannot merge stats with different branch counts")
        return AcceptanceStats(
            self.num_branches,
            [a + b for a, b in zip(self.attempts, other.attempts)],
            [a + b for a, b in zip(self.accepts, other.accepts)],
            self.steps + other.steps,
            self.accepted_tokens + other.accepted_tokens,
            self.tokens + other.tokens,
            self.forward_passes + other.forward_passes,
            self.rollbacks + other.rollbacks,
        )

    def check(self) -> None:
        """Raise AssertionError if the counters violate the prefix or budget invariants."""
        for h in range(1, self.num_branches):
            assert self.accepts[h] <= self.accepts[h - 1], f"accepts not monotone at position {h + 1}"
        for a, n in zip(self.accepts, self.attempts):
            assert a <= n
        assert self.tokens >= self.forward_passes or self.tokens == 0, "fewer tokens than forward passes"


def greedy_pick(dist: np.ndarray) -> int:
    """Argmax with ties going to the lowest token id."""
    return int(np.argmax(dist))


def _checked(out: ModelStepOutput, step: int, num_branches: int) -> ModelStepOutput:
    try:
        check_distribution(out.main, "main")
        if len(out.branches) < num_branches:
            raise InvalidDistribution(f"model returned {len(out.branches)} branches, need {num_branches}")
        for h in range(num_branches):
            check_distribution(out.branches[h], f"branch {h + 1}")
    except InvalidDistribution as exc:
        raise DecodeError(step, str(exc)) from exc
    return out


def _check_prompt(model, prompt):
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    for tok in prompt:
        if not 0 <= int(tok) < model.vocab_size:
            raise ValueError(f"prompt token {tok} outside vocabulary of size {model.vocab_size}")


def autoregressive_run(model: StepModel, prompt: Sequence[int], config: DecodeConfig):
    """Plain greedy decoding; returns the tokens and the pass/token counters."""
    _check_prompt(model, prompt)
    stats = AcceptanceStats(config.mtp.num_branches)
    cache = DecodeCache()
    cur = _checked(model.extend(cache, list(prompt))[-1], 0, 0)
    stats.forward_passes += 1
    out: list[int] = []
    while True:
        y = greedy_pick(cur.main)
        out.append(y)
        if y == config.eos_token or len(out) >= config.max_tokens:
            break
        cur = _checked(model.extend(cache, [y])[0], len(out), 0)
        stats.forward_passes += 1
    stats.tokens = len(out)
    return out, stats


def autoregressive_decode(model: StepModel, prompt: Sequence[int], config: DecodeConfig) -> list[int]:
    return autoregressive_run(model, prompt, config)[0]


def verified_decode(
    model: StepModel,
    prompt: Sequence[int],
    config: DecodeConfig,
    batched: bool = True,
) -> tuple[list[int], AcceptanceStats]:
    """Greedy decoding accelerated by verified branch proposals.

    With ``batched=False`` the proposals are verified one forward pass at a
    time; the emitted tokens are the same either way, only the pass count
    differs.
    """
    _check_prompt(model, prompt)
    H = config.mtp.num_branches
    eos = config.eos_token
    if model.num_branches < H:
        raise ValueError(f"model has {model.num_branches} branches, decode config wants {H}")
    stats = AcceptanceStats(H)
    cache = DecodeCache()
    cur = _checked(model.extend(cache, list(prompt))[-1], 0, H)
    stats.forward_passes += 1
    out: list[int] = []
    step = 0
    while len(out) < config.max_tokens:
        y0 = greedy_pick(cur.main)
        remaining = config.max_tokens - len(out)
        if remaining == 1 or y0 == eos:
            out.append(y0)
            break
        step += 1
        proposals = [greedy_pick(b) for b in cur.branches[:H]]
        ext = [y0, *proposals]
        base = cache.committed_len

        if batched:
            outs = [_checked(o, step, H) for o in model.extend(cache, ext)]
            stats.forward_passes += 1
        else:
            outs = [_checked(model.extend(cache, [y0])[0], step, H)]
            stats.forward_passes += 1

        accepted = 0
        attempted = H
        for h in range(1, H + 1):
            if accepted < h - 1:
                continue
            if ext[h - 1] == eos:
                # positions past an accepted eos are never reached
                attempted = h - 1
                break
            if ext[h] != greedy_pick(outs[h - 1].main):
                continue
            accepted = h
            if not batched:
                if h + 1 >= remaining:
                    attempted = h
                    break
                if ext[h] != eos:
                    outs.append(_checked(model.extend(cache, [ext[h]])[0], step, H))
                    stats.forward_passes += 1

        commit = min(accepted + 1, remaining)
        if eos is not None and eos in ext[:commit]:
            commit = ext.index(eos) + 1
        dropped = cache.truncate(min(base + commit, cache.committed_len))
        stats.record_step(attempted, accepted, dropped)
        out.extend(ext[:commit])
        if ext[commit - 1] == eos:
            break
        if len(out) >= config.max_tokens:
            break
        cur = outs[commit - 1]
    stats.tokens = len(out)
    return out, stats


def expected_accepted_length(rates: Sequence[float]) -> float:
    """Mean tokens per outer step, ``1 + sum(rates)``, for strict per-position rates."""
    _check_rates(rates)
    return 1.0 + math.fsum(rates)


def _check_rates(rates):
    prev = 1.0
    for h, r in enumerate(rates, start=1):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rate at position {h} is {r!r}, outside [0, 1]")
        if r > prev:
            raise ValueError(
                f"rate at position {h} ({r}) exceeds position {h - 1} ({prev}); strict rates cannot increase"
            )
        prev = r


def conditional_rates(rates: Sequence[float]) -> list[float]:
    """Per-position match probabilities given that every earlier position matched."""
    _check_rates(rates)
    out = []
    prev = 1.0
    for r in rates:
        q = r / prev if prev > 0 else 0.0
        if q > 1.0:
            raise ValueError(f"conditional acceptance probability {q} exceeds 1")
        out.append(q)
        prev = r
    return out


def simulate_acceptance(rates: Sequence[float], steps: int, seed: int, chunk: int = 1 << 17) -> AcceptanceStats:
    """Monte Carlo decode steps whose strict acceptance rates are ``rates``.

    Each step draws a match for every position from the conditional rates and
    accepts the leading run of matches.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    q = np.asarray(conditional_rates(rates), dtype=np.float64)
    H = len(q)
    if H == 0:
        raise ValueError("at least one rate is required")
    rng = np.random.default_rng(seed)
    counts = np.zeros(H + 1, dtype=np.int64)
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        match = rng.random((n, H)) < q
        k = np.cumprod(match, axis=1).sum(axis=1)
        counts += np.bincount(k, minlength=H + 1)
        done += n
    # accepts[h-1] = number of steps whose accepted prefix reaches h
    reach = counts[::-1].cumsum()[::-1]
    accepts = [int(x) for x in reach[1:]]
    accepted_tokens = int(steps + sum(accepts))
    return AcceptanceStats(
        H,
        attempts=[steps] * H,
        accepts=accepts,
        steps=steps,
        accepted_tokens=accepted_tokens,
        tokens=accepted_tokens,
        forward_passes=steps,
        rollbacks=int(steps - counts[H]),
    )


def acceptance_summary(stats: AcceptanceStats) -> dict:
    """Report of strict rates, mean accepted length and pass efficiency."""
    if stats.steps == 0 and stats.tokens == 0:
        raise ValueError("no decode steps recorded")
    H = stats.num_branches
    length = stats.avg_accepted_length
    return {
        "num_branches": H,
        "rates": stats.rates,
        "avg_accepted_length": length,
        "avg_accepted_length_display": f"{length:.2f} / {H + 1}",
        "tokens": stats.tokens,
        "forward_passes": stats.forward_passes,
        "tokens_per_forward_pass": stats.tokens_per_forward_pass,
        "rollbacks": stats.rollbacks,
        "steps": stats.steps,
        "accepted_tokens": stats.accepted_tokens,
        "attempts": list(stats.attempts),
        "accepts": list(stats.accepts),
    }


def stats_from_summary(report: dict) -> AcceptanceStats:
    return AcceptanceStats(
        int(report["num_branches"]),
        [int(x) for x in report["attempts"]],
        [int(x) for x in report["accepts"]],
        int(report["steps"]),
        int(report["accepted_tokens"]),
        int(report["tokens"]),
        int(report["forward_passes"]),
        int(report["rollbacks"]),
    )
