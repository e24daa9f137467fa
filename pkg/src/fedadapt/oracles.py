"""Independent reference checks for gradients, aggregation and federated degeneracy.

Nothing here reuses the production forward/backward code paths: the
finite-difference oracle has its own evaluator, and the aggregation oracle
recomputes means with exactly rounded sums.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .adaptation import AdaptMode, DenseNoisy, SamplingPolicy, run_sequence
from .federation import FedMode, aggregate
from .model import BlockedWeights, ModelSpec, grad_block, grad_full, init_weights
from .simnet import ClientSetup, Schedule, SimulationConfig, run_simulation
from .streams import FrameStream, SequenceSpec, make_domain
from .wire import BlockPayload, MsgType, WireMessage

FD_EPS = 1e-3
FD_REL_TOL = 1e-4
FD_ABS_TOL = 1e-6


def reference_outputs(spec: ModelSpec, flat_blocks, x) -> np.ndarray:
    """Per-block outputs by an explicit scalar-loop recurrence (float64)."""
    m = spec.hidden_dim
    h = [float(v) for v in x]
    ys = []
    for i, flat in enumerate(flat_blocks):
        n = len(h)
        z = []
        for r in range(m):
            acc = float(flat[m * n + r])
            for col in range(n):
                acc += float(flat[r * n + col]) * h[col]
            z.append(math.tanh(acc))
        h = z
        head = float(flat[m * n + 2 * m])
        for r in range(m):
            head += float(flat[m * n + m + r]) * h[r]
        ys.append(head)
    return np.array(ys)


def _loss(spec, blocks, x, t, heads) -> float:
    y = reference_outputs(spec, blocks, x)
    return float(sum((y[i] - t) ** 2 for i in heads))


def _fd_block(spec, blocks, x, t, i, heads, eps=FD_EPS) -> np.ndarray:
    g = np.empty(blocks[i].size)
    for k in range(blocks[i].size):
        orig = blocks[i][k]
        blocks[i][k] = orig + eps
        up = _loss(spec, blocks, x, t, heads)
        blocks[i][k] = orig - eps
        down = _loss(spec, blocks, x, t, heads)
        blocks[i][k] = orig
        g[k] = (up - down) / (2 * eps)
    return g


def _mismatches(analytic, numeric) -> int:
    err = np.abs(analytic - numeric)
    return int(np.sum(err > np.maximum(FD_REL_TOL * np.abs(numeric), FD_ABS_TOL)))


@dataclass(frozen=True)
class GradientReport:
    instances: int
    coordinates: int
    failures: int
    max_abs_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def gradient_oracle(instances: int = 100, seed: int = 0, spec: ModelSpec | None = None,
                    target_range: float = 3.0) -> GradientReport:
    """Check grad_full and grad_block against central finite differences.

    Each instance draws fresh weights, input, target and a block index. With
    ``spec=None`` the shape is drawn too (B <= 3, d <= 4, m <= 5).
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    failures = coords = 0
    worst = 0.0
    fixed = spec
    for n in range(instances):
        spec = fixed or ModelSpec(int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                                  int(rng.integers(1, 6)))
        w = init_weights(ModelSpec(spec.num_blocks, spec.input_dim, spec.hidden_dim,
                                   seed=int(rng.integers(2**32))))
        x = rng.uniform(-1, 1, spec.input_dim)
        t = float(rng.uniform(-target_range, target_range))
        blocks = [b.astype(np.float64) for b in w.blocks]
        all_heads = range(spec.num_blocks)
        for g in grad_full(w, x, t):
            numeric = _fd_block(spec, blocks, x, t, g.block, all_heads)
            failures += _mismatches(g.flat, numeric)
            worst = max(worst, float(np.max(np.abs(g.flat - numeric))))
            coords += numeric.size
        i = int(rng.integers(spec.num_blocks))
        g = grad_block(w, x, t, i)
        numeric = _fd_block(spec, blocks, x, t, i, (i,))
        failures += _mismatches(g.flat, numeric)
        worst = max(worst, float(np.max(np.abs(g.flat - numeric))))
        coords += numeric.size
    return GradientReport(instances, coords, failures, worst, time.perf_counter() - start)


def exact_mean_f32(values) -> np.float32:
    """Correctly rounded mean of float32 values, rounded to float32."""
    return np.float32(math.fsum(float(v) for v in values) / len(values))


def ulp_distance(a: np.float32, b: np.float32) -> int:
    ia = np.array(a, dtype=np.float32).view(np.int32).astype(np.int64)
    ib = np.array(b, dtype=np.float32).view(np.int32).astype(np.int64)
    # map sign-magnitude ordering onto a monotone integer line
    ia = np.where(ia < 0, -(ia & 0x7FFFFFFF), ia)
    ib = np.where(ib < 0, -(ib & 0x7FFFFFFF), ib)
    return int(np.max(np.abs(ia - ib)))


def _full_update(w: BlockedWeights, cid: int) -> WireMessage:
    return WireMessage(MsgType.UPDATE, cid, 0, tuple(
        BlockPayload(i, "full", b) for i, b in enumerate(w.blocks)))


def aggregation_oracle(sizes=(1, 2, 3, 5), seed: int = 0,
                       spec: ModelSpec = ModelSpec()) -> dict:
    """Max ulp distance between ``aggregate`` and an exact mean, per client count."""
    out = {}
    for k in sizes:
        ws = [init_weights(ModelSpec(spec.num_blocks, spec.input_dim, spec.hidden_dim,
                                     seed=seed * 1000 + k * 10 + j)) for j in range(k)]
        server = init_weights(ModelSpec(spec.num_blocks, spec.input_dim, spec.hidden_dim,
                                        seed=seed + 99991))
        merged, _ = aggregate(server, [_full_update(w, j + 1) for j, w in enumerate(ws)])
        worst = 0
        for i in range(spec.num_blocks):
            stacked = np.stack([w.blocks[i] for w in ws])
            expected = np.array([exact_mean_f32(col) for col in stacked.T], dtype=np.float32)
            worst = max(worst, ulp_distance(merged.blocks[i], expected))
        out[k] = worst
    return out


def partial_aggregation_example():
    """Three clients on a 5-block toy with 4 params per block (hidden=1, input=1).

    Clients 1 and 2 send block 1, client 3 sends block 3 (0-based).
    Returns ``(server_before, server_after, expected_after, keys)``.
    """
    spec = ModelSpec(num_blocks=5, input_dim=1, hidden_dim=1)
    sizes = [spec.block_param_count(i) for i in range(5)]
    before = BlockedWeights(spec, [np.full(n, 10.0 * (i + 1), np.float32)
                                   for i, n in enumerate(sizes)])
    sends = {1: (1, 1.0), 2: (1, 2.0), 3: (3, 7.0)}
    msgs = [WireMessage(MsgType.UPDATE, cid, 0,
                        (BlockPayload(b, "full", np.full(sizes[b], v, np.float32)),))
            for cid, (b, v) in sends.items()]
    after, keys = aggregate(before, msgs)
    expected = [blk.copy() for blk in before.blocks]
    expected[1][:] = 1.5
    expected[3][:] = 7.0
    return before, after, BlockedWeights(spec, expected), keys


@dataclass(frozen=True)
class DegeneracyReport:
    frames: int
    max_abs_diff: float
    federated_epe: np.ndarray
    single_epe: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= 1e-6


def degeneracy_oracle(seed: int = 0, frames: int = 300, lr: float = 3e-4,
                      sigma: float = 0.5, w0: BlockedWeights | None = None) -> DegeneracyReport:
    """One FedFULL client with T=1 on the listener's own stream vs single-agent FULL."""
    spec = ModelSpec(seed=seed)
    if w0 is None:
        w0 = init_weights(spec)
    dom = make_domain("track", seed, "easy", input_dim=spec.input_dim, sigma=sigma)
    seq = SequenceSpec((("track", frames),))
    listener = ClientSetup(0, seq, {"track": dom}, stream_seed=seed + 1, rng_seed=seed + 2)
    active = ClientSetup(1, seq, {"track": dom}, stream_seed=seed + 1, rng_seed=seed + 2)
    sup = DenseNoisy(sigma)
    sim = run_simulation(SimulationConfig(
        w0=w0, listener=listener, active=(active,), fed_mode=FedMode.FEDFULL,
        local_mode=AdaptMode.FULL, sup=sup, lr=lr, T=1,
        schedule=Schedule(start_barrier=True), allow_shared_domains=True,
    ))
    single = run_sequence(w0, FrameStream(seq, {"track": dom}, seed + 1), AdaptMode.FULL, sup,
                          lr, frames, policy=SamplingPolicy.COUNT_SOFTMAX, rng=seed + 2)
    fed = np.array([r.epe for r in sim.records])
    ref = np.array([r.epe for r in single.records])
    if fed.shape != ref.shape:
        return DegeneracyReport(frames, math.inf, fed, ref)
    return DegeneracyReport(frames, float(np.max(np.abs(fed - ref))), fed, ref)
