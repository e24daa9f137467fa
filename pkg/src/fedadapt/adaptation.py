"""Single-instance online adaptation: NONE, FULL and MAD."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from .metrics import MetricParams, make_record
from .model import BlockedWeights, forward, grad_block, grad_full, loss_per_block, sgd_apply

DEFAULT_DECAY = 0.9
DEFAULT_LR = 3e-4


class AdaptMode(str, enum.Enum):
    NONE = "none"
    FULL = "full"
    MAD = "mad"


class SamplingPolicy(str, enum.Enum):
    UNIFORM = "uniform"
    COUNT_SOFTMAX = "count_softmax"


@dataclass(frozen=True)
class DenseNoisy:
    """Label on every frame, corrupted by Gaussian noise."""

    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SparseExact:
    """Exact label present with probability ``p``, absent otherwise."""

    p: float = 1.0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")


SupervisionMode = Union[DenseNoisy, SparseExact]


class SupervisionKind(str, enum.Enum):
    """Supervision family whose strength comes from each frame's domain."""

    DENSE_NOISY = "dense_noisy"
    SPARSE_EXACT = "sparse_exact"

    def for_frame(self, frame) -> SupervisionMode:
        if self is SupervisionKind.DENSE_NOISY:
            return DenseNoisy(frame.sigma)
        return SparseExact(frame.label_prob)


def resolve_supervision(sup, frame) -> SupervisionMode:
    if isinstance(sup, SupervisionKind):
        return sup.for_frame(frame)
    return sup


def supervise(t_true: float, mode: SupervisionMode, rng: np.random.Generator) -> Optional[float]:
    """Training label seen by the learner, or ``None`` when no label arrives."""
    if not np.isfinite(t_true):
        raise ValueError(f"target must be finite, got {t_true!r}")
    if isinstance(mode, DenseNoisy):
        return float(t_true + mode.sigma * rng.standard_normal())
    if isinstance(mode, SparseExact):
        return float(t_true) if rng.random() < mode.p else None
    raise TypeError(f"unknown supervision mode {mode!r}")


@dataclass(frozen=True)
class UpdateHistogram:
    counts: np.ndarray
    decay: float = DEFAULT_DECAY

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64).reshape(-1)
        if counts.size < 1 or np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise ValueError("histogram counts must be finite and non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, num_blocks: int, decay: float = DEFAULT_DECAY) -> "UpdateHistogram":
        return cls(np.zeros(num_blocks), decay)

    def probabilities(self) -> np.ndarray:
        shifted = np.exp(self.counts - self.counts.max())
        return shifted / shifted.sum()

    def incremented(self, blocks) -> "UpdateHistogram":
        counts = self.counts.copy()
        counts[list(blocks)] += 1.0
        return UpdateHistogram(counts, self.decay)

    def __eq__(self, other):
        if not isinstance(other, UpdateHistogram):
            return NotImplemented
        return self.decay == other.decay and np.array_equal(self.counts, other.counts)


def softmax_sample(H: UpdateHistogram, policy: SamplingPolicy, rng: np.random.Generator) -> int:
    n = H.counts.size
    if policy is SamplingPolicy.UNIFORM:
        return int(rng.integers(n))
    p = H.probabilities()
    # inverse CDF keeps exactly one uniform draw per sample
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), n - 1))


def decay_selected(H: UpdateHistogram, j: int) -> UpdateHistogram:
    if not 0 <= j < H.counts.size:
        raise IndexError(f"block index {j} out of range")
    counts = H.counts.copy()
    counts[j] = H.decay * counts[j]
    return UpdateHistogram(counts, H.decay)


@dataclass(frozen=True)
class StepReport:
    prediction: float
    losses: np.ndarray
    label: Optional[float]
    updated_blocks: tuple = ()

    @property
    def supervised(self) -> bool:
        return bool(self.updated_blocks)


def adapt_step(w: BlockedWeights, frame, mode: AdaptMode, sup, lr: float,
               H: UpdateHistogram, policy: SamplingPolicy, rng: np.random.Generator):
    """One online step on ``frame``; returns ``(w', H', report)``.

    The report's prediction and losses come from the weights before the update.
    """
    mode = AdaptMode(mode)
    trace = forward(w, frame.x)
    losses = loss_per_block(trace, frame.target)
    if mode is AdaptMode.NONE:
        return w, H, StepReport(trace.prediction, losses, None)
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    label = supervise(frame.target, resolve_supervision(sup, frame), rng)
    if label is None:
        return w, H, StepReport(trace.prediction, losses, None)
    if mode is AdaptMode.FULL:
        grads = grad_full(w, frame.x, label, trace)
        blocks = tuple(range(w.spec.num_blocks))
    else:
        i = softmax_sample(H, SamplingPolicy(policy), rng)
        grads = [grad_block(w, frame.x, label, i, trace)]
        blocks = (i,)
    return sgd_apply(w, grads, lr), H.incremented(blocks), StepReport(
        trace.prediction, losses, label, blocks
    )


@dataclass
class SequenceResult:
    weights: BlockedWeights
    records: list = field(default_factory=list)
    histogram: Optional[UpdateHistogram] = None
    updates: int = 0


def run_sequence(w0: BlockedWeights, stream: Iterator, mode: AdaptMode, sup, lr: float,
                 steps: int, *, policy: SamplingPolicy = SamplingPolicy.COUNT_SOFTMAX,
                 rng: np.random.Generator | int = 0, metric_params: MetricParams = MetricParams(),
                 histogram: UpdateHistogram | None = None) -> SequenceResult:
    """Adapt over ``steps`` frames, recording every frame's error before its update.

    ``round_id`` in each record counts the weight writes performed so far.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    H = histogram if histogram is not None else UpdateHistogram.zeros(w0.spec.num_blocks)
    w, updates, records = w0, 0, []
    it = iter(stream)
    for _ in range(steps):
        try:
            frame = next(it)
        except StopIteration:
            raise RuntimeError(f"stream exhausted after {len(records)} of {steps} frames")
        w, H, report = adapt_step(w, frame, mode, sup, lr, H, policy, rng)
        records.append(make_record(frame, report.prediction, updates, metric_params))
        updates += report.supervised
    return SequenceResult(w, records, H, updates)
