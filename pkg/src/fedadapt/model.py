"""Block-partitioned tanh chain with one linear output head per block.

Block ``i`` owns an encoder part ``(W_i, b_i)`` and a decoder part
``(v_i, c_i)``::

    h_0 = x
    h_i = tanh(W_i @ h_{i-1} + b_i)
    y_i = v_i @ h_i + c_i

Weights are stored as float32, one flat vector per block laid out as
``W_i`` (row-major), ``b_i``, ``v_i``, ``c_i``. Forward and backward
passes run in float64; updated weights are rounded back to float32.
Block indices are 0-based throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

PARTS = ("full", "encoder", "decoder")


@dataclass(frozen=True)
class ModelSpec:
    num_blocks: int = 5
    input_dim: int = 8
    hidden_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("num_blocks", "input_dim", "hidden_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    def in_dim(self, i: int) -> int:
        return self.input_dim if i == 0 else self.hidden_dim

    def encoder_param_count(self, i: int) -> int:
        return self.hidden_dim * self.in_dim(i) + self.hidden_dim

    def decoder_param_count(self, i: int) -> int:
        return self.hidden_dim + 1

    def block_param_count(self, i: int) -> int:
        self._check_block(i)
        return self.encoder_param_count(i) + self.decoder_param_count(i)

    @property
    def total_param_count(self) -> int:
        return sum(self.block_param_count(i) for i in range(self.num_blocks))

    def part_slice(self, i: int, part: str) -> slice:
        """Slice of block ``i``'s flat vector holding ``part``."""
        self._check_block(i)
        enc = self.encoder_param_count(i)
        if part == "full":
            return slice(0, self.block_param_count(i))
        if part == "encoder":
            return slice(0, enc)
        if part == "decoder":
            return slice(enc, enc + self.decoder_param_count(i))
        raise ValueError(f"unknown block part {part!r}")

    def _check_block(self, i: int) -> None:
        if not 0 <= i < self.num_blocks:
            raise IndexError(f"block index {i} out of range for {self.num_blocks} blocks")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class BlockedWeights:
    """Immutable weight set; ``blocks[i]`` is block i's flat float32 vector."""

    __slots__ = ("spec", "blocks", "_f64")

    def __init__(self, spec: ModelSpec, blocks: Sequence[np.ndarray]):
        if len(blocks) != spec.num_blocks:
            raise ValueError(f"expected {spec.num_blocks} blocks, got {len(blocks)}")
        frozen = []
        for i, block in enumerate(blocks):
            arr = np.array(block, dtype=np.float32, copy=True).reshape(-1)
            if arr.size != spec.block_param_count(i):
                raise ValueError(
                    f"block {i} has {arr.size} params, expected {spec.block_param_count(i)}"
                )
            frozen.append(_frozen(arr))
        self.spec = spec
        self.blocks = tuple(frozen)
        self._f64 = None

    @classmethod
    def _trusted(cls, spec: ModelSpec, blocks) -> "BlockedWeights":
        # blocks are already frozen float32 vectors of the right size
        w = cls.__new__(cls)
        w.spec, w.blocks, w._f64 = spec, tuple(blocks), None
        return w

    def unpack(self, i: int):
        """Return float32 views ``(W, b, v, c)`` of block ``i``."""
        return _unpack(self.spec, i, self.blocks[i])

    def unpack64(self, i: int):
        """Float64 copies of ``(W, b, v, c)``, cached per instance."""
        if self._f64 is None:
            self._f64 = tuple(
                _unpack(self.spec, k, block.astype(np.float64))
                for k, block in enumerate(self.blocks)
            )
        return self._f64[i]

    def with_blocks(self, updates: Mapping[int, np.ndarray]) -> "BlockedWeights":
        blocks = list(self.blocks)
        for i, block in updates.items():
            arr = np.array(block, dtype=np.float32).reshape(-1)
            if arr.size != self.spec.block_param_count(i):
                raise ValueError(f"block {i} has {arr.size} params, expected "
                                 f"{self.spec.block_param_count(i)}")
            blocks[i] = _frozen(arr)
        return BlockedWeights._trusted(self.spec, blocks)

    def to_bytes(self) -> bytes:
        return b"".join(block.astype("<f4").tobytes() for block in self.blocks)

    @classmethod
    def from_bytes(cls, spec: ModelSpec, data: bytes) -> "BlockedWeights":
        expected = 4 * spec.total_param_count
        if len(data) != expected:
            raise ValueError(f"expected {expected} bytes, got {len(data)}")
        flat = np.frombuffer(data, dtype="<f4")
        blocks, start = [], 0
        for i in range(spec.num_blocks):
            n = spec.block_param_count(i)
            blocks.append(flat[start:start + n])
            start += n
        return cls(spec, blocks)

    def __eq__(self, other):
        if not isinstance(other, BlockedWeights):
            return NotImplemented
        return self.spec == other.spec and self.to_bytes() == other.to_bytes()

    def __reduce__(self):
        return (BlockedWeights, (self.spec, self.blocks))

    def __hash__(self):
        return hash(self.to_bytes())

    def __repr__(self):
        return f"BlockedWeights({self.spec!r})"


def _unpack(spec: ModelSpec, i: int, flat: np.ndarray):
    m, n = spec.hidden_dim, spec.in_dim(i)
    W = flat[: m * n].reshape(m, n)
    b = flat[m * n: m * n + m]
    v = flat[m * n + m: m * n + 2 * m]
    c = flat[m * n + 2 * m]
    return W, b, v, c


def _pack(dz: np.ndarray, h_prev: np.ndarray, dy: float, h: np.ndarray) -> np.ndarray:
    """Flat block gradient from the pre-activation and head gradients."""
    m, n = dz.size, h_prev.size
    g = np.empty(m * n + 2 * m + 1)
    g[: m * n] = (dz[:, None] * h_prev).ravel()
    g[m * n: m * n + m] = dz
    g[m * n + m: m * n + 2 * m] = dy * h
    g[-1] = dy
    return g


def init_weights(spec: ModelSpec) -> BlockedWeights:
    """Draw every parameter i.i.d. from U[-0.5, 0.5] with ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    blocks = [
        rng.uniform(-0.5, 0.5, size=spec.block_param_count(i)).astype(np.float32)
        for i in range(spec.num_blocks)
    ]
    return BlockedWeights(spec, blocks)


def zero_weights(spec: ModelSpec) -> BlockedWeights:
    return BlockedWeights(
        spec, [np.zeros(spec.block_param_count(i), np.float32) for i in range(spec.num_blocks)]
    )


@dataclass(frozen=True)
class ForwardTrace:
    x: np.ndarray
    hidden: tuple
    outputs: np.ndarray

    @property
    def prediction(self) -> float:
        return float(self.outputs[-1])


def _as_input(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != spec.input_dim:
        raise ValueError(f"input has length {x.size}, expected {spec.input_dim}")
    return x


def forward(w: BlockedWeights, x) -> ForwardTrace:
    x = _as_input(w.spec, x)
    h = x
    hidden, outputs = [], np.empty(w.spec.num_blocks)
    for i in range(w.spec.num_blocks):
        W, b, v, c = w.unpack64(i)
        h = np.tanh(W @ h + b)
        hidden.append(h)
        outputs[i] = v @ h + c
    return ForwardTrace(x=x, hidden=tuple(hidden), outputs=outputs)


def loss_per_block(trace: ForwardTrace, target: float) -> np.ndarray:
    if not np.isfinite(target):
        raise ValueError(f"target must be finite, got {target!r}")
    return (trace.outputs - float(target)) ** 2


@dataclass(frozen=True)
class BlockGradient:
    """Gradient for one block; ``flat`` follows the block serialization layout."""

    block: int
    flat: np.ndarray

    def unpack(self, spec: ModelSpec):
        return _unpack(spec, self.block, self.flat)


def grad_full(w: BlockedWeights, x, target: float, trace: ForwardTrace | None = None):
    """Exact gradient of the summed per-block loss with respect to every block."""
    if trace is None:
        trace = forward(w, x)
    spec = w.spec
    dy = 2.0 * (trace.outputs - float(target))
    grads = [None] * spec.num_blocks
    dh_next = np.zeros(spec.hidden_dim)
    for i in reversed(range(spec.num_blocks)):
        W, _, v, _ = w.unpack64(i)
        h = trace.hidden[i]
        h_prev = trace.x if i == 0 else trace.hidden[i - 1]
        dz = (dy[i] * v + dh_next) * (1.0 - h * h)
        grads[i] = BlockGradient(i, _pack(dz, h_prev, dy[i], h))
        dh_next = dz @ W
    return grads


def grad_block(w: BlockedWeights, x, target: float, i: int,
               trace: ForwardTrace | None = None) -> BlockGradient:
    """Gradient of block ``i``'s own loss with respect to block ``i`` only.

    Contributions of that loss to upstream blocks are dropped.
    """
    w.spec._check_block(i)
    if trace is None:
        trace = forward(w, x)
    _, _, v, _ = w.unpack64(i)
    h = trace.hidden[i]
    h_prev = trace.x if i == 0 else trace.hidden[i - 1]
    dy = 2.0 * (trace.outputs[i] - float(target))
    dz = dy * v * (1.0 - h * h)
    return BlockGradient(i, _pack(dz, h_prev, dy, h))


def sgd_apply(w: BlockedWeights, grads: Iterable[BlockGradient], lr: float) -> BlockedWeights:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    blocks = list(w.blocks)
    touched = False
    for g in grads:
        if g.flat.shape != blocks[g.block].shape:
            raise ValueError(f"gradient for block {g.block} has shape {g.flat.shape}")
        blocks[g.block] = _frozen((blocks[g.block] - lr * g.flat).astype(np.float32))
        touched = True
    return BlockedWeights._trusted(w.spec, blocks) if touched else w
