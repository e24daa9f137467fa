"""Server round protocol and client-side update rules for federated adaptation.

Active clients adapt on their own streams and periodically upload (part of)
their weights. The server waits until every active client has contributed to
the current round, averages each received block over the clients that sent
it, and dispatches the refreshed blocks to the listening clients. Listening
clients never optimize; they only overwrite blocks from dispatches.
"""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .adaptation import (
    DEFAULT_LR,
    AdaptMode,
    SamplingPolicy,
    UpdateHistogram,
    adapt_step,
    decay_selected,
    softmax_sample,
)
from .model import BlockedWeights, ModelSpec
from .wire import BlockPayload, MsgType, WireMessage

SERVER_ID = 0xFFFFFFFF


class FedMode(str, enum.Enum):
    FEDFULL = "fedfull"
    FEDMAD = "fedmad"
    FEDDEC = "feddec"
    FEDLAST = "fedlast"
    FEDENC = "fedenc"


class ClientRole(str, enum.Enum):
    ACTIVE = "active"
    LISTENING = "listening"


class ProtocolError(ValueError):
    pass


def upload_selection(mode: FedMode, spec: ModelSpec, sampled: int | None = None):
    """``(block, part)`` pairs a client uploads under ``mode``."""
    mode = FedMode(mode)
    B = spec.num_blocks
    if mode is FedMode.FEDFULL:
        return [(i, "full") for i in range(B)]
    if mode is FedMode.FEDMAD:
        if sampled is None:
            raise ValueError("FedMAD needs the sampled block")
        return [(sampled, "full")]
    if mode is FedMode.FEDDEC:
        return [(i, "decoder") for i in range(B)]
    if mode is FedMode.FEDLAST:
        return [(B - 1, "decoder")]
    return [(i, "encoder") for i in range(B)]


def extract_payload(w: BlockedWeights, selection) -> tuple:
    return tuple(
        BlockPayload(i, part, w.blocks[i][w.spec.part_slice(i, part)]) for i, part in selection
    )


class ActiveClient:
    """Adapting client; ``step()`` consumes one frame and may return an upload.

    Only supervised steps (ones that wrote weights) advance the window counter.
    """

    role = ClientRole.ACTIVE

    def __init__(self, client_id: int, weights: BlockedWeights, stream, *,
                 fed_mode: FedMode = FedMode.FEDFULL, T: int = 10, lr: float = DEFAULT_LR,
                 sup=None, local_mode: AdaptMode = AdaptMode.FULL,
                 policy: SamplingPolicy = SamplingPolicy.COUNT_SOFTMAX,
                 rng: np.random.Generator | int = 0):
        if T < 0:
            raise ValueError("T must be >= 0")
        if AdaptMode(local_mode) is AdaptMode.NONE:
            raise ValueError("active clients must adapt locally")
        self.client_id = client_id
        self.weights = weights
        self.stream = stream
        self.fed_mode = FedMode(fed_mode)
        self.T = T
        self.lr = lr
        self.sup = sup
        self.local_mode = AdaptMode(local_mode)
        self.policy = SamplingPolicy(policy)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.histogram = UpdateHistogram.zeros(weights.spec.num_blocks)
        self.window_steps = 0
        self.uploads = 0
        self.frames = 0
        self.last_sampled: int | None = None

    def step(self) -> Optional[WireMessage]:
        frame = next(self.stream)
        self.frames += 1
        self.weights, self.histogram, report = adapt_step(
            self.weights, frame, self.local_mode, self.sup, self.lr, self.histogram,
            self.policy, self.rng,
        )
        if report.supervised:
            self.window_steps += 1
        if self.window_steps >= self.T:
            return self.finish_window()
        return None

    def finish_window(self) -> WireMessage:
        sampled = None
        if self.fed_mode is FedMode.FEDMAD:
            sampled = softmax_sample(self.histogram, SamplingPolicy.COUNT_SOFTMAX, self.rng)
            self.histogram = decay_selected(self.histogram, sampled)
            self.last_sampled = sampled
        selection = upload_selection(self.fed_mode, self.weights.spec, sampled)
        msg = WireMessage(MsgType.UPDATE, self.client_id, self.uploads,
                          extract_payload(self.weights, selection))
        self.uploads += 1
        self.window_steps = 0
        return msg


def _run_window(client: ActiveClient, T: int) -> WireMessage:
    client.T = T
    if T == 0:
        return client.finish_window()
    while True:
        msg = client.step()
        if msg is not None:
            return msg


def client_update_full(client: ActiveClient, T: int) -> WireMessage:
    """T supervised FULL steps, then upload every block."""
    if client.fed_mode is not FedMode.FEDFULL:
        raise ValueError(f"client {client.client_id} runs {client.fed_mode.value}, not fedfull")
    return _run_window(client, T)


def client_update_mad(client: ActiveClient, T: int) -> WireMessage:
    """T supervised local steps, then upload the one block sampled from the update histogram."""
    if client.fed_mode is not FedMode.FEDMAD:
        raise ValueError(f"client {client.client_id} runs {client.fed_mode.value}, not fedmad")
    return _run_window(client, T)


def client_update_variant(client: ActiveClient, T: int) -> WireMessage:
    if client.fed_mode not in (FedMode.FEDDEC, FedMode.FEDLAST, FedMode.FEDENC):
        raise ValueError(f"{client.fed_mode.value} is not a partial-aggregation variant")
    return _run_window(client, T)


class ListeningClient:
    role = ClientRole.LISTENING

    def __init__(self, client_id: int, weights: BlockedWeights):
        self.client_id = client_id
        self.weights = weights
        self.round_id = 0


def listener_apply(client: ListeningClient, dispatch: WireMessage) -> None:
    """Overwrite exactly the dispatched blocks; callers invoke this between frames."""
    if client.role is not ClientRole.LISTENING:
        raise ProtocolError("only listening clients apply dispatches")
    client.weights = apply_payload(client.weights, dispatch.blocks)
    client.round_id = dispatch.round


def apply_payload(w: BlockedWeights, payload: Iterable[BlockPayload]) -> BlockedWeights:
    updates = {}
    for p in payload:
        block = updates.get(p.block)
        if block is None:
            block = updates[p.block] = w.blocks[p.block].copy()
        sl = w.spec.part_slice(p.block, p.part)
        if p.values.size != sl.stop - sl.start:
            raise ProtocolError(f"block {p.block} ({p.part}) has wrong size {p.values.size}")
        block[sl] = p.values
    return w.with_blocks(updates) if updates else w


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    aggregated: tuple
    dispatch: WireMessage
    updates: tuple = ()


@dataclass
class ServerState:
    """Single-owner server state machine.

    ``buffer`` holds the current round's update per active client; updates
    for later rounds wait in ``pending`` and are never dropped.
    """

    weights: BlockedWeights
    active: tuple
    listeners: tuple = ()
    T: int = 10
    round: int = 0
    buffer: dict = field(default_factory=dict)
    pending: dict = field(default_factory=lambda: defaultdict(dict))

    def __post_init__(self):
        self.active = tuple(sorted(self.active))
        self.listeners = tuple(self.listeners)
        if len(set(self.active)) != len(self.active):
            raise ValueError("duplicate active client ids")
        if set(self.active) & set(self.listeners):
            raise ValueError("a client cannot be both active and listening")


def aggregate(w: BlockedWeights, updates) -> tuple:
    """Coordinate-wise mean over the clients that sent each coordinate.

    Returns ``(new_weights, aggregated_keys)``; coordinates nobody sent keep
    their current value.
    """
    spec = w.spec
    sums: dict = {}
    counts: dict = {}
    keys = set()
    for msg in updates:
        for p in msg.blocks:
            sl = spec.part_slice(p.block, p.part)
            if p.values.size != sl.stop - sl.start:
                raise ProtocolError(f"block {p.block} ({p.part}) has wrong size {p.values.size}")
            n = spec.block_param_count(p.block)
            if p.block not in sums:
                sums[p.block] = np.zeros(n)
                counts[p.block] = np.zeros(n, dtype=np.int64)
            sums[p.block][sl] += p.values
            counts[p.block][sl] += 1
            keys.add(p.key)
    new_blocks = {}
    for i, total in sums.items():
        covered = counts[i] > 0
        block = w.blocks[i].copy()
        block[covered] = (total[covered] / counts[i][covered]).astype(np.float32)
        new_blocks[i] = block
    new_w = w.with_blocks(new_blocks) if new_blocks else w
    return new_w, tuple(sorted(keys, key=lambda k: (k[0], ("full", "encoder", "decoder").index(k[1]))))


def server_ingest(state: ServerState, msg: WireMessage) -> Optional[RoundOutcome]:
    if msg.msg_type is not MsgType.UPDATE:
        raise ProtocolError("server only ingests UPDATE messages")
    if msg.client_id not in state.active:
        raise ProtocolError(f"unknown active client {msg.client_id}")
    if msg.round < state.round:
        raise ProtocolError(
            f"stale update from client {msg.client_id}: round {msg.round} < {state.round}"
        )
    if msg.round == state.round:
        if msg.client_id in state.buffer:
            raise ProtocolError(f"duplicate update from client {msg.client_id} in round {msg.round}")
        state.buffer[msg.client_id] = msg
    else:
        if msg.client_id in state.pending[msg.round]:
            raise ProtocolError(f"duplicate update from client {msg.client_id} in round {msg.round}")
        state.pending[msg.round][msg.client_id] = msg
    if len(state.buffer) < len(state.active):
        return None

    updates = tuple(state.buffer[k] for k in state.active)
    state.weights, keys = aggregate(state.weights, updates)
    state.round += 1
    state.buffer = dict(state.pending.pop(state.round, {}))
    dispatch = WireMessage(MsgType.DISPATCH, SERVER_ID, state.round,
                           extract_payload(state.weights, keys))
    return RoundOutcome(state.round, keys, dispatch, updates)
