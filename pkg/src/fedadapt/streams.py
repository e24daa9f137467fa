"""Synthetic nonstationary regression streams.

Every domain maps ``x ~ U[-1, 1]^d`` to ``A * sin(a @ x + phi)``. Deployment
domains built from the same ``seed`` share a base function and differ by a
name-seeded perturbation, so adaptation on one domain partially transfers to
the others. The neutral (pre-training) domain is a rescaled, perturbed copy
of the base function, far enough away that an unadapted model fails often.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .adaptation import AdaptMode, SparseExact, UpdateHistogram, adapt_step, SamplingPolicy
from .model import BlockedWeights

AMPLITUDE_RANGE = (10.0, 50.0)
DEFAULT_SPREAD = 0.03
NEUTRAL_SPREAD = 0.1
NEUTRAL_AMPLITUDE_SHIFT = 0.4
_FAMILY_TAG = 0x5EED_0001
_NEUTRAL_TAG = 0x5EED_0002
_STREAM_TAG = 0x5EED_0003


class Difficulty(str, enum.Enum):
    EASY = "easy"
    HARD = "hard"


# (sigma, label probability) per difficulty
SUPERVISION_DEFAULTS = {
    Difficulty.EASY: (0.5, 0.5),
    Difficulty.HARD: (5.0, 0.1),
}


def name_key(name: str) -> int:
    """Stable 32-bit key for mixing a domain name into a seed."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=4).digest(), "little")


def seed_sequence(*words: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(w) & 0xFFFFFFFFFFFFFFFF for w in words])


@dataclass(frozen=True)
class DomainSpec:
    name: str
    amplitude: float
    frequency: tuple
    phase: float
    sigma: float
    label_prob: float
    seed: int = 0

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if not 0 < self.label_prob <= 1:
            raise ValueError("label_prob must be in (0, 1]")
        if self.name == "all":
            raise ValueError("'all' is reserved for aggregate metrics")

    def target(self, X: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(np.asarray(X) @ np.asarray(self.frequency) + self.phase)


def _draw_function(rng: np.random.Generator, input_dim: int):
    amplitude = rng.uniform(*AMPLITUDE_RANGE)
    frequency = rng.uniform(-1.0, 1.0, size=input_dim)
    phase = rng.uniform(-np.pi, np.pi)
    return amplitude, frequency, phase


def make_domain(name: str, seed: int, difficulty: Difficulty | str = Difficulty.EASY, *,
                input_dim: int = 8, spread: float = DEFAULT_SPREAD,
                sigma: float | None = None, label_prob: float | None = None) -> DomainSpec:
    """Deployment domain ``name`` from the family rooted at ``seed``.

    Difficulty only sets the supervision strength; the target function depends
    on ``(name, seed)`` alone.
    """
    difficulty = Difficulty(difficulty)
    default_sigma, default_p = SUPERVISION_DEFAULTS[difficulty]
    amplitude, frequency, phase = _draw_function(
        np.random.default_rng(seed_sequence(seed, _FAMILY_TAG)), input_dim
    )
    rng = np.random.default_rng(seed_sequence(seed, _FAMILY_TAG, name_key(name)))
    amplitude = float(np.clip(amplitude * np.exp(spread * rng.standard_normal()), *AMPLITUDE_RANGE))
    frequency = frequency + spread * rng.standard_normal(input_dim)
    phase = phase + spread * np.pi * rng.standard_normal()
    return DomainSpec(
        name=name,
        amplitude=amplitude,
        frequency=tuple(float(f) for f in frequency),
        phase=float(phase),
        sigma=default_sigma if sigma is None else sigma,
        label_prob=default_p if label_prob is None else label_prob,
        seed=seed,
    )


def neutral_domain(seed: int, *, input_dim: int = 8, name: str = "neutral",
                   spread: float = NEUTRAL_SPREAD,
                   amplitude_shift: float = NEUTRAL_AMPLITUDE_SHIFT) -> DomainSpec:
    """Pre-training domain: the family's base function, rescaled and perturbed.

    The amplitude is scaled by ``exp(+-amplitude_shift)`` (sign drawn from the
    seed); frequency and phase get ``spread``-sized perturbations.
    """
    base = make_domain(name, seed, input_dim=input_dim, spread=0.0)
    rng = np.random.default_rng(seed_sequence(seed, _NEUTRAL_TAG))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    amplitude = float(np.clip(base.amplitude * np.exp(sign * amplitude_shift), *AMPLITUDE_RANGE))
    frequency = np.asarray(base.frequency) + spread * rng.standard_normal(input_dim)
    phase = base.phase + spread * np.pi * rng.standard_normal()
    return DomainSpec(name, amplitude, tuple(float(f) for f in frequency), float(phase),
                      sigma=0.0, label_prob=1.0, seed=seed)


@dataclass(frozen=True)
class Frame:
    index: int
    x: np.ndarray
    target: float
    domain: str
    sigma: float
    label_prob: float


@dataclass(frozen=True)
class SequenceSpec:
    segments: tuple

    def __post_init__(self):
        segments = tuple((str(name), int(count)) for name, count in self.segments)
        if not segments or any(count < 1 for _, count in segments):
            raise ValueError("a sequence needs at least one segment with a positive frame count")
        object.__setattr__(self, "segments", segments)

    @property
    def length(self) -> int:
        return sum(count for _, count in self.segments)

    @property
    def domain_names(self) -> list:
        return [name for name, _ in self.segments]


class FrameStream:
    """Deterministic frame iterator over a sequence; replays it when ``loop`` is set.

    Plain object state (no generator) so a stream can be pickled mid-run.
    """

    def __init__(self, seq: SequenceSpec, domains: Mapping[str, DomainSpec], seed: int,
                 *, loop: bool = False, input_dim: int | None = None):
        missing = [n for n in seq.domain_names if n not in domains]
        if missing:
            raise KeyError(f"sequence references unknown domains: {missing}")
        self.seq = seq
        self.loop = loop
        if input_dim is None:
            input_dim = len(domains[seq.domain_names[0]].frequency)
        rng = np.random.default_rng(seed_sequence(seed, _STREAM_TAG))
        self.X = rng.uniform(-1.0, 1.0, size=(seq.length, input_dim))
        self.X.setflags(write=False)
        self._domains = []
        targets = []
        start = 0
        for name, count in seq.segments:
            dom = domains[name]
            targets.append(dom.target(self.X[start:start + count]))
            self._domains.extend([dom] * count)
            start += count
        self.targets = np.concatenate(targets)
        self.position = 0

    def __iter__(self):
        return self

    def __next__(self) -> Frame:
        n = self.position
        if n >= self.seq.length and not self.loop:
            raise StopIteration
        k = n % self.seq.length
        dom = self._domains[k]
        self.position += 1
        return Frame(n, self.X[k], float(self.targets[k]), dom.name, dom.sigma, dom.label_prob)


def stream(seq: SequenceSpec, domains: Mapping[str, DomainSpec], seed: int,
           *, loop: bool = False) -> FrameStream:
    return FrameStream(seq, domains, seed, loop=loop)


def warmup_pretrain(w0: BlockedWeights, domain: DomainSpec, steps: int, lr: float,
                    seed: int = 0) -> BlockedWeights:
    """FULL adaptation with exact labels on ``domain``; the result is every client's w_0."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return w0
    exact = DomainSpec(domain.name, domain.amplitude, domain.frequency, domain.phase,
                       sigma=0.0, label_prob=1.0, seed=domain.seed)
    frames = FrameStream(SequenceSpec(((exact.name, steps),)), {exact.name: exact}, seed,
                         input_dim=w0.spec.input_dim)
    rng = np.random.default_rng(seed)
    H = UpdateHistogram.zeros(w0.spec.num_blocks)
    w = w0
    for frame in frames:
        w, H, _ = adapt_step(w, frame, AdaptMode.FULL, SparseExact(1.0), lr, H,
                             SamplingPolicy.UNIFORM, rng)
    return w
