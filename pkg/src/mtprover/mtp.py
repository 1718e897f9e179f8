"""Multi-token prediction configuration, step outputs and loss arithmetic.

A decode step yields a main next-token distribution plus ``H`` branch
distributions, where branch ``h`` predicts the token ``h`` places after the
main head's target. Training combines the main cross-entropy with the branch
cross-entropies under exponentially decaying weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mtprover.defaults import DECAY, NUM_BRANCHES

DIST_TOL = 1e-9


class InvalidDistribution(ValueError):
    pass


class NoTrainablePositions(ValueError):
    pass


@dataclass(frozen=True)
class MTPConfig:
    num_branches: int = NUM_BRANCHES
    alpha: float = DECAY

    def __post_init__(self):
        if int(self.num_branches) != self.num_branches or self.num_branches < 1:
            raise ValueError(f"num_branches must be a positive integer, got {self.num_branches!r}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha!r}")


def check_distribution(probs, name: str = "distribution") -> np.ndarray:
    """Return ``probs`` as a float64 vector, raising if it is not a distribution."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistribution(f"{name}: expected a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidDistribution(f"{name}: non-finite entries")
    if np.any(p < 0.0):
        raise InvalidDistribution(f"{name}: negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > DIST_TOL:
        raise InvalidDistribution(f"{name}: entries sum to {total!r}, not 1")
    return p


@dataclass
class ModelStepOutput:
    """Main distribution ``main`` and the branch distributions, branch 1 first."""

    main: np.ndarray
    branches: list[np.ndarray] = field(default_factory=list)

    def validate(self) -> "ModelStepOutput":
        check_distribution(self.main, "main")
        vocab = self.main.shape[0]
        for h, b in enumerate(self.branches, start=1):
            check_distribution(b, f"branch {h}")
            if b.shape[0] != vocab:
                raise InvalidDistribution(f"branch {h}: vocabulary {b.shape[0]} != {vocab}")
        return self


@dataclass(frozen=True)
class PositionTargets:
    """Targets for one position: ``x[t+1]`` and ``x[t+1+h]`` for each branch ``h``.

    ``valid_mask[h-1]`` is False where the sequence ends before ``x[t+1+h]``;
    masked entries carry no target and their ``future_tokens`` value is ignored.
    """

    next_token: int
    future_tokens: tuple[int, ...] = ()
    valid_mask: tuple[bool, ...] = ()

    @classmethod
    def from_sequence(cls, tokens: Sequence[int], t: int, num_branches: int) -> "PositionTargets":
        n = len(tokens)
        if t + 1 >= n:
            raise IndexError(f"position {t} has no next-token target in a length-{n} sequence")
        future = []
        mask = []
        for h in range(1, num_branches + 1):
            i = t + 1 + h
            mask.append(i < n)
            future.append(int(tokens[i]) if i < n else -1)
        return cls(int(tokens[t + 1]), tuple(future), tuple(mask))


def branch_weights(config: MTPConfig) -> np.ndarray:
    """Normalized geometric weights ``alpha**(h-1) / sum_j alpha**(j-1)``."""
    powers = config.alpha ** np.arange(config.num_branches, dtype=np.float64)
    return powers / powers.sum()


def cross_entropy(probs: np.ndarray, target: int, floor: float | None = None) -> float:
    """Natural-log cross-entropy of ``target``.

    A zero probability gives ``inf`` unless ``floor`` is supplied, in which
    case the probability is clamped from below first.
    """
    p = float(probs[target])
    if floor is not None:
        p = max(p, floor)
    if p <= 0.0:
        return math.inf
    return -math.log(p)


def mtp_position_loss(
    main: np.ndarray,
    branches: Sequence[np.ndarray],
    targets: PositionTargets,
    weights: np.ndarray,
    floor: float | None = None,
) -> float:
    if len(branches) > len(weights):
        raise ValueError(f"{len(branches)} branches but only {len(weights)} weights")
    loss = cross_entropy(main, targets.next_token, floor)
    for h, probs in enumerate(branches):
        if h >= len(targets.future_tokens) or not targets.valid_mask[h]:
            continue
        loss += float(weights[h]) * cross_entropy(probs, targets.future_tokens[h], floor)
    return loss


def sequence_loss(
    step_outputs: Sequence[ModelStepOutput],
    targets: Sequence[int],
    config: MTPConfig,
    floor: float | None = None,
) -> float:
    """Mean per-position loss over a sequence.

    ``step_outputs[t]`` holds the predictions made at position ``t``; its main
    head is scored against ``targets[t+1]``. Branch targets that fall past the
    end of ``targets`` are masked.
    """
    positions = len(targets) - 1
    if positions < 1 or len(step_outputs) == 0:
        raise NoTrainablePositions("sequence has no position with a next-token target")
    if len(step_outputs) != positions:
        raise ValueError(f"{len(step_outputs)} step outputs for {positions} trainable positions")
    weights = branch_weights(config)
    total = 0.0
    for t, out in enumerate(step_outputs):
        tg = PositionTargets.from_sequence(targets, t, config.num_branches)
        total += mtp_position_loss(out.main, out.branches, tg, weights, floor)
    return total / positions
