"""Virtual-time network simulation of active clients, server and one listener.

Time is kept in integer nanoseconds. Events at the same instant are ordered
by phase (active frame, listener frame, upload arrival, dispatch arrival) and
then by client id, so a listener frame at time ``t`` sees exactly the
dispatches that arrived strictly before ``t``.

Active clients never receive anything from the server, so their upload
streams can be computed independently; the parallel engine does that in
worker processes and replays server and listener in the same total order as
the reference event loop.
"""
from __future__ import annotations

import heapq
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .adaptation import DEFAULT_LR, AdaptMode, SamplingPolicy
from .federation import (
    ActiveClient,
    FedMode,
    ListeningClient,
    ServerState,
    listener_apply,
    server_ingest,
)
from .metrics import MetricParams, make_record
from .model import BlockedWeights, forward
from .streams import DomainSpec, FrameStream, SequenceSpec
from .wire import encoded_length

log = logging.getLogger(__name__)

NS = 1_000_000_000
_ACTIVE_FRAME, _LISTENER_FRAME, _UPLOAD, _DISPATCH = range(4)


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    active_period: float = 0.05
    listener_period: float = 0.05
    start_barrier: bool = True
    loop_sequences: bool = True
    latency: float = 0.0
    # safety valve for configs whose clients never upload
    max_warmup_frames: int = 1_000_000

    def __post_init__(self):
        if self.active_period <= 0 or self.listener_period <= 0:
            raise ValueError("frame periods must be positive")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")


@dataclass(frozen=True)
class ClientSetup:
    client_id: int
    sequence: SequenceSpec
    domains: Mapping[str, DomainSpec]
    stream_seed: int
    rng_seed: int

    def make_stream(self, loop: bool, input_dim: int) -> FrameStream:
        return FrameStream(self.sequence, self.domains, self.stream_seed, loop=loop,
                           input_dim=input_dim)


@dataclass(frozen=True)
class SimulationConfig:
    w0: BlockedWeights
    listener: ClientSetup
    active: tuple = ()
    fed_mode: Optional[FedMode] = None
    local_mode: AdaptMode = AdaptMode.FULL
    sup: object = None
    lr: float = DEFAULT_LR
    T: int = 10
    policy: SamplingPolicy = SamplingPolicy.COUNT_SOFTMAX
    schedule: Schedule = Schedule()
    metric_params: MetricParams = MetricParams()
    allow_shared_domains: bool = False

    def validate(self) -> None:
        ids = [s.client_id for s in self.active]
        if len(set(ids + [self.listener.client_id])) != len(ids) + 1:
            raise SimulationError("client ids must be unique")
        if self.fed_mode is not None:
            if not self.active:
                raise SimulationError("a federated mode needs at least one active client")
            if self.T < 1:
                raise SimulationError("T must be >= 1 in a simulation")
        elif self.active:
            raise SimulationError("active clients given without a federated mode")
        if not self.allow_shared_domains:
            banned = set(self.listener.sequence.domain_names)
            for s in self.active:
                leaked = banned & set(s.sequence.domain_names)
                if leaked:
                    raise SimulationError(
                        f"active client {s.client_id} runs on listener domain(s) {sorted(leaked)}"
                    )


@dataclass
class RoundLog:
    round: int
    time: float
    bytes_to_server: int
    bytes_to_client: int
    blocks: str


@dataclass
class TrafficLedger:
    bytes_to_server: int = 0
    bytes_to_client: int = 0
    virtual_time: float = 0.0
    uploads: int = 0
    dispatches: int = 0
    upload_sizes: list = field(default_factory=list)
    rounds: list = field(default_factory=list)

    def record_upload(self, size: int) -> None:
        self.bytes_to_server += size
        self.uploads += 1
        self.upload_sizes.append(size)

    def record_dispatch(self, size: int) -> None:
        self.bytes_to_client += size
        self.dispatches += 1

    def rate_to_server(self) -> Optional[float]:
        return self.bytes_to_server / self.virtual_time if self.virtual_time > 0 else None

    def rate_to_client(self) -> Optional[float]:
        return self.bytes_to_client / self.virtual_time if self.virtual_time > 0 else None


@dataclass(frozen=True)
class TrafficReport:
    mbps_to_server: Optional[float]
    mbps_to_client: Optional[float]
    mb_per_update_to_server: Optional[float]
    mb_per_update_to_client: Optional[float]


def traffic_report(ledger: TrafficLedger, updates_count: int | None = None) -> TrafficReport:
    """MB (10^6 bytes) per second of virtual time and per server round."""
    rounds = len(ledger.rounds) if updates_count is None else updates_count
    t = ledger.virtual_time
    return TrafficReport(
        mbps_to_server=ledger.bytes_to_server / 1e6 / t if t > 0 else None,
        mbps_to_client=ledger.bytes_to_client / 1e6 / t if t > 0 else None,
        mb_per_update_to_server=ledger.bytes_to_server / 1e6 / rounds if rounds else None,
        mb_per_update_to_client=ledger.bytes_to_client / 1e6 / rounds if rounds else None,
    )


@dataclass
class SimulationResult:
    records: list
    ledger: TrafficLedger
    server_weights: BlockedWeights
    listener_weights: BlockedWeights
    listener_start: float
    first_uploads: dict
    rounds: int


def _make_active(config: SimulationConfig, setup: ClientSetup) -> ActiveClient:
    return ActiveClient(
        setup.client_id,
        config.w0,
        setup.make_stream(config.schedule.loop_sequences, config.w0.spec.input_dim),
        fed_mode=config.fed_mode,
        T=config.T,
        lr=config.lr,
        sup=config.sup,
        local_mode=config.local_mode,
        policy=config.policy,
        rng=setup.rng_seed,
    )


def _step(client: ActiveClient):
    try:
        return client.step()
    except StopIteration:
        raise SimulationError(
            f"active client {client.client_id} exhausted its sequence; enable loop_sequences"
        ) from None


class _Hub:
    """Server, listener and ledger; both engines feed it events in the same order."""

    def __init__(self, config: SimulationConfig, n_active_ids):
        self.config = config
        self.server = ServerState(config.w0, tuple(n_active_ids), (config.listener.client_id,),
                                  config.T)
        self.listener = ListeningClient(config.listener.client_id, config.w0)
        self.stream = config.listener.make_stream(False, config.w0.spec.input_dim)
        self.ledger = TrafficLedger()
        self.records: list = []
        self.inbox: list = []

    def upload(self, t: int, msg):
        self.ledger.record_upload(encoded_length(msg))
        outcome = server_ingest(self.server, msg)
        if outcome is None:
            return None
        self.ledger.rounds.append(RoundLog(
            round=outcome.round,
            time=t / NS,
            bytes_to_server=sum(encoded_length(u) for u in outcome.updates),
            bytes_to_client=encoded_length(outcome.dispatch) * len(self.server.listeners),
            blocks=" ".join(f"{i}:{part}" for i, part in outcome.aggregated),
        ))
        return outcome.dispatch

    def dispatch(self, msg) -> None:
        self.ledger.record_dispatch(encoded_length(msg))
        self.inbox.append(msg)

    def listener_frame(self) -> None:
        for msg in self.inbox:
            listener_apply(self.listener, msg)
        self.inbox.clear()
        frame = next(self.stream)
        prediction = forward(self.listener.weights, frame.x).prediction
        self.records.append(make_record(frame, prediction, self.listener.round_id,
                                        self.config.metric_params))

    def result(self, listener_start: int, horizon: int, first_uploads) -> SimulationResult:
        self.ledger.virtual_time = horizon / NS
        return SimulationResult(
            records=self.records,
            ledger=self.ledger,
            server_weights=self.server.weights,
            listener_weights=self.listener.weights,
            listener_start=listener_start / NS,
            first_uploads={k: v / NS for k, v in sorted(first_uploads.items())},
            rounds=self.server.round,
        )


class _Clock:
    def __init__(self, schedule: Schedule):
        self.active = to_ns(schedule.active_period)
        self.listener = to_ns(schedule.listener_period)
        self.latency = to_ns(schedule.latency)


def _run_reference(config: SimulationConfig) -> SimulationResult:
    sched, clock = config.schedule, _Clock(config.schedule)
    n_frames = config.listener.sequence.length
    clients = {s.client_id: _make_active(config, s) for s in config.active}
    hub = _Hub(config, clients)
    first_uploads: dict = {}
    heap: list = []
    counter = 0

    def push(t, phase, cid, payload):
        nonlocal counter
        heapq.heappush(heap, (t, phase, cid, counter, payload))
        counter += 1

    start = horizon = None

    def start_listener(t):
        nonlocal start, horizon
        start, horizon = t, t + n_frames * clock.listener
        push(t, _LISTENER_FRAME, config.listener.client_id, 0)

    for cid in sorted(clients):
        push(0, _ACTIVE_FRAME, cid, 0)
    if not clients or not sched.start_barrier:
        start_listener(0)

    while heap:
        t, phase, cid, _, payload = heapq.heappop(heap)
        if horizon is not None and t >= horizon:
            break
        if phase == _ACTIVE_FRAME:
            if horizon is None and payload >= sched.max_warmup_frames:
                raise SimulationError(f"client {cid} sent no update within {payload} frames")
            msg = _step(clients[cid])
            if msg is not None:
                push(t + clock.latency, _UPLOAD, cid, msg)
            push((payload + 1) * clock.active, _ACTIVE_FRAME, cid, payload + 1)
        elif phase == _UPLOAD:
            first_uploads.setdefault(cid, t)
            dispatch = hub.upload(t, payload)
            if dispatch is not None:
                push(t + clock.latency, _DISPATCH, config.listener.client_id, dispatch)
            if horizon is None and len(first_uploads) == len(clients):
                start_listener(t)
        elif phase == _DISPATCH:
            hub.dispatch(payload)
        else:
            hub.listener_frame()
            if payload + 1 < n_frames:
                push(start + (payload + 1) * clock.listener, _LISTENER_FRAME, cid, payload + 1)
    return hub.result(start, horizon, first_uploads)


def _client_uploads(config: SimulationConfig, setup: ClientSetup, horizon: Optional[int]):
    """Run one active client alone; returns ``[(arrival_ns, msg), ...]``.

    With ``horizon=None`` the client stops after its first upload.
    """
    clock = _Clock(config.schedule)
    client = _make_active(config, setup)
    uploads = []
    n = 0
    while True:
        t = n * clock.active
        if horizon is not None and t >= horizon:
            break
        if horizon is None and n >= config.schedule.max_warmup_frames:
            raise SimulationError(f"client {setup.client_id} sent no update within {n} frames")
        msg = _step(client)
        if msg is not None:
            arrival = t + clock.latency
            if horizon is not None and arrival >= horizon:
                break
            uploads.append((arrival, msg))
            if horizon is None:
                break
        n += 1
    return uploads


def _run_parallel(config: SimulationConfig, workers: int | None) -> SimulationResult:
    sched, clock = config.schedule, _Clock(config.schedule)
    n_frames = config.listener.sequence.length
    setups = sorted(config.active, key=lambda s: s.client_id)
    hub = _Hub(config, [s.client_id for s in setups])

    with ProcessPoolExecutor(max_workers=workers) as pool:
        firsts = list(pool.map(_client_uploads, [config] * len(setups), setups,
                               [None] * len(setups)))
        first_uploads = {s.client_id: f[0][0] for s, f in zip(setups, firsts)}
        start = max(first_uploads.values()) if setups and sched.start_barrier else 0
        horizon = start + n_frames * clock.listener
        streams = list(pool.map(_client_uploads, [config] * len(setups), setups,
                                [horizon] * len(setups)))

    events = []
    for setup, uploads in zip(setups, streams):
        for k, (t, msg) in enumerate(uploads):
            events.append((t, _UPLOAD, setup.client_id, k, msg))
    for n in range(n_frames):
        events.append((start + n * clock.listener, _LISTENER_FRAME, config.listener.client_id,
                       n, None))
    heapq.heapify(events)
    counter = len(events)
    while events:
        t, phase, cid, _, payload = heapq.heappop(events)
        if phase == _UPLOAD:
            dispatch = hub.upload(t, payload)
            if dispatch is not None and t + clock.latency < horizon:
                heapq.heappush(events, (t + clock.latency, _DISPATCH, config.listener.client_id,
                                        counter, dispatch))
                counter += 1
        elif phase == _DISPATCH:
            hub.dispatch(payload)
        else:
            hub.listener_frame()
    return hub.result(start, horizon, first_uploads)


ENGINES = ("reference", "parallel")


def run_simulation(config: SimulationConfig, engine: str = "reference",
                   workers: int | None = None) -> SimulationResult:
    config.validate()
    log.debug("simulating %d active clients, engine=%s", len(config.active), engine)
    if engine == "reference":
        return _run_reference(config)
    if engine == "parallel":
        return _run_parallel(config, workers)
    raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
