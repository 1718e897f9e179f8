"""Desk-scale step models.

``TableModel`` is a deterministic lookup table used to exercise the decoder.
``LinearMTPModel`` is a small trainable MTP model: a mean-of-embeddings
backbone, ``H`` chained branch projections, and an output head shared by the
main path and every branch. Gradients are written out by hand.

Both models implement the decoder's step protocol: ``vocab_size``,
``num_branches``, ``step(context)`` and ``extend(cache, tokens)``, where each
``extend`` call is one forward pass.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from mtprover.defaults import (
    FROZEN_BRANCH_LR,
    JOINT_CALIBRATION_LR,
    PARAM_INIT_SCALE,
    TRAIN_PROB_FLOOR,
)
from mtprover.mtp import MTPConfig, ModelStepOutput, NoTrainablePositions, branch_weights

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def unit_normalize(x: np.ndarray) -> np.ndarray:
    """L2-normalize along the last axis; the stabilizer keeps zero vectors at zero."""
    return x / np.sqrt((x * x).sum(axis=-1, keepdims=True) + NORM_EPS)


def _unit_normalize_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    s = np.sqrt((x * x).sum(axis=-1, keepdims=True) + NORM_EPS)
    dot = (x * grad_out).sum(axis=-1, keepdims=True)
    return grad_out / s - x * dot / s**3


# ---------------------------------------------------------------------------
# Table model
# ---------------------------------------------------------------------------


@dataclass
class TableModel:
    """Lookup from the last ``context_order`` tokens to a stored step output.

    Contexts shorter than ``context_order`` and unknown keys fall back to
    uniform distributions.
    """

    vocab_size: int
    num_branches: int
    context_order: int = 1
    entries: dict[tuple[int, ...], ModelStepOutput] = field(default_factory=dict)

    def __post_init__(self):
        u = np.full(self.vocab_size, 1.0 / self.vocab_size)
        self._fallback = ModelStepOutput(u, [u.copy() for _ in range(self.num_branches)])

    @property
    def fallback(self) -> ModelStepOutput:
        return self._fallback

    def set(self, key: Sequence[int], main, branches) -> None:
        key = tuple(int(k) for k in key)
        if len(key) != self.context_order:
            raise ValueError(f"key {key} does not have length {self.context_order}")
        out = ModelStepOutput(
            np.asarray(main, dtype=np.float64),
            [np.asarray(b, dtype=np.float64) for b in branches],
        ).validate()
        if len(out.branches) != self.num_branches:
            raise ValueError(f"expected {self.num_branches} branch distributions, got {len(out.branches)}")
        self.entries[key] = out

    def step(self, context: Sequence[int]) -> ModelStepOutput:
        if len(context) < self.context_order:
            return self._fallback
        key = tuple(int(t) for t in context[len(context) - self.context_order:])
        return self.entries.get(key, self._fallback)

    def extend(self, cache, tokens: Sequence[int]) -> list[ModelStepOutput]:
        outputs = []
        for tok in tokens:
            cache.append(int(tok), int(tok))
            outputs.append(self.step(cache.tokens))
        return outputs


def table_step(model: TableModel, context: Sequence[int]) -> ModelStepOutput:
    return model.step(context)


# ---------------------------------------------------------------------------
# Linear MTP model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gradients:
    E: np.ndarray
    F: np.ndarray
    G: tuple[np.ndarray, ...]
    U: np.ndarray

    def blocks(self) -> dict[str, np.ndarray]:
        out = {"E": self.E, "F": self.F, "U": self.U}
        for h, g in enumerate(self.G, start=1):
            out[f"G{h}"] = g
        return out


@dataclass(frozen=True, eq=False)
class LinearMTPModel:
    """Linear MTP model with shared embedding ``E`` and output head ``U``.

    Shapes: ``E`` (V, d), ``F`` (d, d), each ``G[h]`` (d, 2d), ``U`` (d, V).
    The context vector is the mean embedding of the last ``context_window``
    tokens (all tokens when ``None``). Parameter arrays are read-only;
    training returns new models.
    """

    E: np.ndarray
    F: np.ndarray
    G: tuple[np.ndarray, ...]
    U: np.ndarray
    context_window: int | None = None

    def __post_init__(self):
        V, d = self.E.shape
        if self.F.shape != (d, d):
            raise ValueError(f"F has shape {self.F.shape}, expected {(d, d)}")
        if self.U.shape != (d, V):
            raise ValueError(f"U has shape {self.U.shape}, expected {(d, V)}")
        if len(self.G) < 1:
            raise ValueError("at least one branch projection is required")
        for h, g in enumerate(self.G, start=1):
            if g.shape != (d, 2 * d):
                raise ValueError(f"G{h} has shape {g.shape}, expected {(d, 2 * d)}")
        if self.context_window is not None and self.context_window < 1:
            raise ValueError("context_window must be positive or None")
        for arr in (self.E, self.F, self.U, *self.G):
            arr.flags.writeable = False

    @classmethod
    def from_arrays(cls, E, F, G, U, context_window=None) -> "LinearMTPModel":
        cp = lambda a: np.array(a, dtype=np.float64, copy=True)  # noqa: E731
        return cls(cp(E), cp(F), tuple(cp(g) for g in G), cp(U), context_window)

    @classmethod
    def random(
        cls,
        vocab_size: int,
        hidden_dim: int,
        num_branches: int,
        seed: int,
        context_window: int | None = None,
        scale: float = PARAM_INIT_SCALE,
    ) -> "LinearMTPModel":
        rng = np.random.default_rng(seed)
        V, d = vocab_size, hidden_dim
        E = rng.uniform(-scale, scale, (V, d))
        F = rng.uniform(-scale, scale, (d, d))
        G = tuple(rng.uniform(-scale, scale, (d, 2 * d)) for _ in range(num_branches))
        U = rng.uniform(-scale, scale, (d, V))
        return cls(E, F, G, U, context_window)

    @classmethod
    def zeros(cls, vocab_size, hidden_dim, num_branches, context_window=None) -> "LinearMTPModel":
        V, d = vocab_size, hidden_dim
        G = tuple(np.zeros((d, 2 * d)) for _ in range(num_branches))
        return cls(np.zeros((V, d)), np.zeros((d, d)), G, np.zeros((d, V)), context_window)

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.E.shape[1]

    @property
    def num_branches(self) -> int:
        return len(self.G)

    def with_params(self, **changes) -> "LinearMTPModel":
        return replace(self, **changes)

    def equals(self, other: "LinearMTPModel") -> bool:
        """Bitwise parameter equality."""
        if self.context_window != other.context_window or self.num_branches != other.num_branches:
            return False
        pairs = [(self.E, other.E), (self.F, other.F), (self.U, other.U), *zip(self.G, other.G)]
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)

    # -- inference ---------------------------------------------------------

    def _context_vector(self, prefix_sums: Sequence[np.ndarray], n: int) -> np.ndarray:
        # prefix_sums[i] is the embedding sum of the first i+1 tokens.
        w = n if self.context_window is None else min(n, self.context_window)
        top = prefix_sums[n - 1]
        if n - w > 0:
            return (top - prefix_sums[n - w - 1]) / w
        return top / w

    def _outputs_from_hidden(self, h0: np.ndarray, shifts: Sequence[int] | None) -> ModelStepOutput:
        main = softmax(h0 @ self.U)
        branches = []
        prev = h0
        shift = int(np.argmax(main))
        for h, g in enumerate(self.G):
            if shifts is not None:
                if h >= len(shifts):
                    break
                shift = int(shifts[h])
            z = np.concatenate([unit_normalize(prev), unit_normalize(self.E[shift])])
            hh = g @ z
            probs = softmax(hh @ self.U)
            branches.append(probs)
            prev = hh
            shift = int(np.argmax(probs))
        return ModelStepOutput(main, branches)

    def step(self, context: Sequence[int]) -> ModelStepOutput:
        """Output at the last context position, feeding greedy proposals to the branches."""
        cache = _ScratchCache()
        return self.extend(cache, context)[-1]

    def extend(self, cache, tokens: Sequence[int]) -> list[ModelStepOutput]:
        outputs = []
        for tok in tokens:
            tok = int(tok)
            prev = cache.states[-1] if cache.states else np.zeros(self.hidden_dim)
            cache.append(tok, prev + self.E[tok])
            c = self._context_vector(cache.states, len(cache.states))
            outputs.append(self._outputs_from_hidden(self.F @ c, None))
        return outputs


class _ScratchCache:
    def __init__(self):
        self.tokens: list[int] = []
        self.states: list = []

    def append(self, token, state):
        self.tokens.append(token)
        self.states.append(state)


def linear_forward(
    model: LinearMTPModel,
    context: Sequence[int],
    teacher_shift_tokens: Sequence[int],
) -> ModelStepOutput:
    """Step output at the end of ``context`` with explicit branch inputs.

    ``teacher_shift_tokens[h-1]`` is the token embedded into branch ``h``
    (``x[t+h]``). Branches without a shift token are omitted.
    """
    if len(context) == 0:
        raise ValueError("context must be non-empty")
    emb = model.E[np.asarray(context, dtype=np.int64)]
    prefix = list(np.cumsum(emb, axis=0))
    c = model._context_vector(prefix, len(prefix))
    return model._outputs_from_hidden(model.F @ c, list(teacher_shift_tokens))


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


@dataclass
class _LossParts:
    total: float
    main: float
    branch: float


def _sequence_loss_and_grads(model, x, weights, horizon, floor, grads):
    """Mean loss of one sequence; accumulates gradients into ``grads`` when given."""
    E, F, U = model.E, model.F, model.U
    d = model.hidden_dim
    T = len(x)
    P = T - 1
    cs = np.zeros((T + 1, d))
    cs[1:] = np.cumsum(E[x], axis=0)
    hi = np.arange(1, P + 1)
    w = P if model.context_window is None else model.context_window
    lo = np.maximum(0, hi - w)
    n = (hi - lo).astype(np.float64)
    C = (cs[hi] - cs[lo]) / n[:, None]
    H0 = C @ F.T

    def head(hidden, targets, scale):
        probs = softmax(hidden @ U)
        rows = np.arange(len(targets))
        pt = probs[rows, targets]
        if floor is not None:
            clamped = pt < floor
            pt = np.maximum(pt, floor)
        ce = -np.log(pt)
        if grads is None:
            return ce.sum(), None
        dlogits = probs
        dlogits[rows, targets] -= 1.0
        if floor is not None:
            dlogits[clamped] = 0.0
        dlogits *= scale
        grads["U"] += hidden.T @ dlogits
        return ce.sum(), dlogits @ U.T

    main_sum, dH0 = head(H0, x[1:], 1.0 / P)

    hiddens = [H0]
    inputs = []
    branch_sum = 0.0
    dh_own = []
    for h in range(1, horizon + 1):
        Ph = T - 1 - h
        if Ph <= 0:
            break
        prev = hiddens[-1][:Ph]
        shift_rows = x[h:h + Ph]
        z = np.concatenate([unit_normalize(prev), unit_normalize(E[shift_rows])], axis=1)
        Hh = z @ model.G[h - 1].T
        ce_sum, dHh = head(Hh, x[h + 1:h + 1 + Ph], weights[h - 1] / P)
        branch_sum += weights[h - 1] * ce_sum
        hiddens.append(Hh)
        inputs.append((prev, shift_rows, z))
        dh_own.append(dHh)

    if grads is not None:
        carry = None
        for h in range(len(inputs), 0, -1):
            prev, shift_rows, z = inputs[h - 1]
            dHh = dh_own[h - 1]
            if carry is not None:
                dHh = dHh.copy()
                dHh[: carry.shape[0]] += carry
            G = model.G[h - 1]
            grads["G"][h - 1] += dHh.T @ z
            dz = dHh @ G
            carry = _unit_normalize_grad(prev, dz[:, :d])
            np.add.at(grads["E"], shift_rows, _unit_normalize_grad(E[shift_rows], dz[:, d:]))
        if carry is not None:
            dH0 = dH0.copy()
            dH0[: carry.shape[0]] += carry
        grads["F"] += dH0.T @ C
        dC = dH0 @ F
        D = dC / n[:, None]
        # token s feeds positions t with lo[t] <= s < hi[t]
        dcs = np.zeros((P + 1, d))
        dcs[1:] = np.cumsum(D, axis=0)
        s = np.arange(P)
        t_end = np.minimum(s + w, P)
        np.add.at(grads["E"], x[:P], dcs[t_end] - dcs[s])

    return _LossParts((main_sum + branch_sum) / P, main_sum / P, branch_sum / P)


def _prepare_batch(model, batch):
    seqs = []
    for seq in batch:
        arr = np.asarray(seq, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("each sequence must be one-dimensional")
        if arr.size and (arr.min() < 0 or arr.max() >= model.vocab_size):
            raise ValueError(f"token id out of range for vocabulary of size {model.vocab_size}")
        if arr.size >= 2:
            seqs.append(arr)
    if not seqs:
        raise NoTrainablePositions("batch has no sequence with a next-token target")
    return seqs


def _batch_pass(model, batch, config, horizon, floor, want_grads):
    seqs = _prepare_batch(model, batch)
    weights = branch_weights(config)
    horizon = min(config.num_branches, model.num_branches) if horizon is None else horizon
    if horizon > model.num_branches or horizon > config.num_branches:
        raise ValueError(f"horizon {horizon} exceeds the configured branch count")
    grads = None
    if want_grads:
        grads = {
            "E": np.zeros_like(model.E),
            "F": np.zeros_like(model.F),
            "G": [np.zeros_like(g) for g in model.G],
            "U": np.zeros_like(model.U),
        }
    total = main = branch = 0.0
    for x in seqs:
        parts = _sequence_loss_and_grads(model, x, weights, horizon, floor, grads)
        total += parts.total
        main += parts.main
        branch += parts.branch
    k = len(seqs)
    parts = _LossParts(total / k, main / k, branch / k)
    if not want_grads:
        return parts, None
    g = Gradients(grads["E"] / k, grads["F"] / k, tuple(a / k for a in grads["G"]), grads["U"] / k)
    return parts, g


def batch_loss(model, batch, config: MTPConfig, horizon: int | None = None, floor: float | None = None) -> float:
    """Mean over sequences of the per-sequence mean MTP loss."""
    return _batch_pass(model, batch, config, horizon, floor, False)[0].total


def linear_backward(
    model: LinearMTPModel,
    batch: Sequence[Sequence[int]],
    config: MTPConfig,
    horizon: int | None = None,
    floor: float | None = None,
) -> Gradients:
    """Analytic gradients of ``batch_loss`` for every parameter block.

    ``horizon`` limits how many branches are scored; ``horizon=0`` gives the
    plain next-token loss.
    """
    return _batch_pass(model, batch, config, horizon, floor, True)[1]


# ---------------------------------------------------------------------------
# Branch initialization and staged training
# ---------------------------------------------------------------------------


def init_branches_from_backbone(
    model: LinearMTPModel, seed: int, scale: float = PARAM_INIT_SCALE
) -> LinearMTPModel:
    """Copy ``F`` into the hidden-state half of every branch projection.

    The token-embedding half is drawn fresh from ``U(-scale, scale)``.
    """
    rng = np.random.default_rng(seed)
    d = model.hidden_dim
    G = []
    for _ in range(model.num_branches):
        g = np.empty((d, 2 * d))
        g[:, :d] = model.F
        g[:, d:] = rng.uniform(-scale, scale, (d, d))
        G.append(g)
    return model.with_params(G=tuple(G))


class Stage(str, enum.Enum):
    FROZEN_BRANCH_ALIGNMENT = "frozen_branch_alignment"
    JOINT_CALIBRATION = "joint_calibration"


_STAGE_DEFAULT_LR = {
    Stage.FROZEN_BRANCH_ALIGNMENT: FROZEN_BRANCH_LR,
    Stage.JOINT_CALIBRATION: JOINT_CALIBRATION_LR,
}


@dataclass(frozen=True)
class TrainStageConfig:
    """One training stage.

    ``learning_rate`` defaults to the stage's production peak rate (2e-4 for
    branch alignment, 2e-5 for joint calibration). Those rates assume a large
    model and a warmup/cosine schedule; the toy recipe overrides them. Plain
    gradient descent is used, full-batch unless ``batch_size`` is set, in
    which case ``seed`` drives the minibatch draw.
    """

    stage: Stage
    steps: int
    seed: int = 0
    learning_rate: float | None = None
    batch_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", _STAGE_DEFAULT_LR[self.stage])
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss!r}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainResult:
    model: LinearMTPModel
    losses: list[float]
    main_losses: list[float]
    branch_losses: list[float]


def train_stage(
    model: LinearMTPModel,
    data: Sequence[Sequence[int]],
    stage: TrainStageConfig,
    mtp: MTPConfig,
) -> TrainResult:
    """Run ``stage.steps`` gradient-descent updates; losses are recorded before each update."""
    rng = np.random.default_rng(stage.seed)
    data = list(data)
    lr = stage.learning_rate
    joint = stage.stage is Stage.JOINT_CALIBRATION
    E, F, U = model.E, model.F, model.U
    G = list(model.G)
    current = model
    losses, mains, branches = [], [], []
    for step in range(stage.steps):
        if stage.batch_size is not None and stage.batch_size < len(data):
            pick = rng.choice(len(data), size=stage.batch_size, replace=False)
            batch = [data[i] for i in sorted(pick)]
        else:
            batch = data
        parts, grads = _batch_pass(current, batch, mtp, None, TRAIN_PROB_FLOOR, True)
        if not np.isfinite(parts.total):
            raise TrainingDiverged(step, parts.total)
        losses.append(parts.total)
        mains.append(parts.main)
        branches.append(parts.branch)
        G = [g - lr * dg for g, dg in zip(G, grads.G)]
        if joint:
            E = E - lr * grads.E
            F = F - lr * grads.F
            U = U - lr * grads.U
        current = LinearMTPModel(E, F, tuple(G), U, model.context_window)
        if step % 100 == 0:
            logger.debug("%s step %d loss %.6f", stage.stage.value, step, parts.total)
    if current is model:
        return TrainResult(model, losses, mains, branches)
    return TrainResult(current, losses, mains, branches)


def train_recipe(
    model: LinearMTPModel,
    data: Sequence[Sequence[int]],
    mtp: MTPConfig,
    alignment: TrainStageConfig,
    calibration: TrainStageConfig,
    init_seed: int,
) -> tuple[LinearMTPModel, dict[str, TrainResult]]:
    """Branch init from the backbone, then frozen-branch alignment, then joint calibration."""
    if alignment.stage is not Stage.FROZEN_BRANCH_ALIGNMENT or calibration.stage is not Stage.JOINT_CALIBRATION:
        raise ValueError("recipe expects an alignment stage followed by a calibration stage")
    model = init_branches_from_backbone(model, init_seed)
    first = train_stage(model, data, alignment, mtp)
    second = train_stage(first.model, data, calibration, mtp)
    return second.model, {alignment.stage.value: first, calibration.stage.value: second}


def cyclic_corpus(vocab_size: int, length: int, num_sequences: int | None = None) -> list[list[int]]:
    """Sequences stepping through ``0..V-1`` cyclically, one per start offset."""
    n = vocab_size if num_sequences is None else num_sequences
    return [[(s + i) % vocab_size for i in range(length)] for s in range(n)]
