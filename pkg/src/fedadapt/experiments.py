"""Experiment configuration, runner, CSV outputs and parameter sweeps.

Configs are YAML documents validated against :class:`ExperimentConfig`.
Every field has a default, so an empty document is a valid config.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .adaptation import (
    DEFAULT_LR,
    AdaptMode,
    SamplingPolicy,
    SupervisionKind,
    run_sequence,
)
from .federation import FedMode
from .metrics import DomainMetrics, FrameRecord, MetricParams, compute_metrics
from .model import BlockedWeights, ModelSpec, init_weights
from .simnet import ClientSetup, Schedule, SimulationConfig, run_simulation, traffic_report
from .streams import (
    DEFAULT_SPREAD,
    NEUTRAL_AMPLITUDE_SHIFT,
    NEUTRAL_SPREAD,
    DomainSpec,
    FrameStream,
    SequenceSpec,
    make_domain,
    neutral_domain,
    seed_sequence,
    warmup_pretrain,
)

log = logging.getLogger(__name__)

SINGLE_MODES = ("none", "full", "mad")
FED_MODES = tuple(m.value for m in FedMode)
SWEEP_AXES = ("T", "num_clients", "fed_mode")
DEFAULT_POOL = ["city", "residential", "campus", "road", "rain", "fog", "dusk", "snow"]
LISTENER_ID = 0

_LISTENER_TAG = 0x11
_CLIENT_TAG = 0x22
_WARMUP_TAG = 0x33


class ConfigError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    num_blocks: int = Field(5, ge=1)
    input_dim: int = Field(8, ge=1)
    hidden_dim: int = Field(16, ge=1)


class WarmupSection(_Section):
    steps: int = Field(5000, ge=0)
    lr: float = Field(DEFAULT_LR, gt=0)


class DifficultySection(_Section):
    sigma: float = Field(ge=0)
    label_prob: float = Field(gt=0, le=1)


class DomainsSection(_Section):
    spread: float = Field(DEFAULT_SPREAD, ge=0)
    neutral_spread: float = Field(NEUTRAL_SPREAD, ge=0)
    neutral_amplitude_shift: float = Field(NEUTRAL_AMPLITUDE_SHIFT, ge=0)
    easy: DifficultySection = DifficultySection(sigma=0.5, label_prob=0.5)
    hard: DifficultySection = DifficultySection(sigma=5.0, label_prob=0.1)
    pool: List[str] = Field(default_factory=lambda: list(DEFAULT_POOL), min_length=1)


class Segment(_Section):
    domain: str
    frames: int = Field(ge=1)
    difficulty: Literal["easy", "hard"] = "hard"


class ListenerSection(_Section):
    segments: List[Segment] = Field(
        default_factory=lambda: [Segment(domain="night", frames=3000, difficulty="hard")],
        min_length=1,
    )
    loops: int = Field(1, ge=1)


class ActiveSection(_Section):
    count: int = Field(3, ge=0)
    segments_per_client: int = Field(5, ge=1)
    segment_frames: int = Field(200, ge=1)
    difficulty: Literal["easy", "hard"] = "easy"
    share_listener_stream: bool = False


class ScheduleSection(_Section):
    active_period: float = Field(0.05, gt=0)
    listener_period: float = Field(0.05, gt=0)
    start_barrier: bool = True
    loop_sequences: bool = True
    latency: float = Field(0.0, ge=0)


class MetricsSection(_Section):
    d1_abs_threshold: float = Field(3.0, gt=0)
    d1_rel_threshold: float = Field(0.05, gt=0)


class SweepSection(_Section):
    axis: Literal["T", "num_clients", "fed_mode"]
    values: List[Union[int, str]] = Field(min_length=1)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    mode: Literal["none", "full", "mad", "fedfull", "fedmad", "feddec", "fedlast", "fedenc"] = "fedfull"
    local_mode: Literal["full", "mad"] = "full"
    sampling: Literal["uniform", "count_softmax"] = "count_softmax"
    supervision: Literal["dense_noisy", "sparse_exact"] = "sparse_exact"
    lr: float = Field(DEFAULT_LR, gt=0)
    T: int = Field(10, ge=1)
    engine: Literal["reference", "parallel"] = "reference"
    model: ModelSection = ModelSection()
    warmup: WarmupSection = WarmupSection()
    domains: DomainsSection = DomainsSection()
    listener: ListenerSection = ListenerSection()
    active: ActiveSection = ActiveSection()
    schedule: ScheduleSection = ScheduleSection()
    metrics: MetricsSection = MetricsSection()
    sweep: Optional[SweepSection] = None

    @model_validator(mode="after")
    def _check_consistency(self):
        names = [s.domain for s in self.listener.segments]
        if "all" in names or "all" in self.domains.pool:
            raise ValueError("'all' is reserved and cannot name a domain")
        if self.is_federated:
            if self.active.count < 1:
                raise ValueError("active.count must be >= 1 for a federated mode")
            if not self.active.share_listener_stream and not self.client_pool:
                raise ValueError("domains.pool has no domain outside the listener's sequence")
        elif self.active.share_listener_stream:
            raise ValueError("active.share_listener_stream needs a federated mode")
        return self

    @property
    def is_federated(self) -> bool:
        return self.mode in FED_MODES

    @property
    def client_pool(self) -> list:
        banned = {s.domain for s in self.listener.segments}
        return [d for d in self.domains.pool if d not in banned]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        data = self.model_dump()
        for key, value in changes.items():
            target = data
            *parents, leaf = key.split(".")
            for p in parents:
                target = target[p]
            target[leaf] = value
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as exc:
            msgs = "; ".join(f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}"
                             for e in exc.errors())
            raise ConfigError(f"override {changes}: {msgs}") from None


def _yaml_lines(text: str) -> dict:
    """Map dotted field paths to 1-based source lines."""
    lines: dict = {}

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                walk(value, f"{path}.{key.value}" if path else str(key.value))
                lines.setdefault(f"{path}.{key.value}" if path else str(key.value),
                                 key.start_mark.line + 1)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, f"{path}.{i}")

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = _yaml_lines(text)
        problems = []
        for err in exc.errors():
            path = ".".join(str(p) for p in err["loc"])
            line = None
            probe = path
            while probe and line is None:
                line = lines.get(probe)
                probe = probe.rpartition(".")[0]
            where = f"{source}:{line}" if line else source
            problems.append(f"{where}: {path or '<root>'}: {err['msg']}")
        raise ConfigError("\n".join(problems)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


# --- world construction -----------------------------------------------------

def _derive(*words) -> int:
    return int(seed_sequence(*words).generate_state(1, np.uint64)[0])


@dataclass
class World:
    spec: ModelSpec
    w0: BlockedWeights
    domains: dict
    listener: ClientSetup
    active: tuple


def _domain(cfg: ExperimentConfig, name: str, difficulty: str) -> DomainSpec:
    sup = cfg.domains.easy if difficulty == "easy" else cfg.domains.hard
    return make_domain(name, cfg.seed, difficulty, input_dim=cfg.model.input_dim,
                       spread=cfg.domains.spread, sigma=sup.sigma, label_prob=sup.label_prob)


def pretrained_weights(cfg: ExperimentConfig) -> BlockedWeights:
    spec = ModelSpec(cfg.model.num_blocks, cfg.model.input_dim, cfg.model.hidden_dim, cfg.seed)
    neutral = neutral_domain(cfg.seed, input_dim=cfg.model.input_dim,
                             spread=cfg.domains.neutral_spread,
                             amplitude_shift=cfg.domains.neutral_amplitude_shift)
    return warmup_pretrain(init_weights(spec), neutral, cfg.warmup.steps, cfg.warmup.lr,
                           seed=_derive(cfg.seed, _WARMUP_TAG))


def build_world(cfg: ExperimentConfig, w0: BlockedWeights | None = None) -> World:
    if w0 is None:
        w0 = pretrained_weights(cfg)
    domains = {}
    for seg in cfg.listener.segments:
        domains[seg.domain] = _domain(cfg, seg.domain, seg.difficulty)
    listener_seq = SequenceSpec(
        tuple((s.domain, s.frames) for s in cfg.listener.segments) * cfg.listener.loops
    )
    listener = ClientSetup(LISTENER_ID, listener_seq, dict(domains),
                           stream_seed=_derive(cfg.seed, _LISTENER_TAG),
                           rng_seed=_derive(cfg.seed, _LISTENER_TAG, 1))
    active = []
    if cfg.is_federated:
        pool = cfg.client_pool
        for name in pool:
            domains.setdefault(name, _domain(cfg, name, cfg.active.difficulty))
        for k in range(1, cfg.active.count + 1):
            if cfg.active.share_listener_stream:
                active.append(ClientSetup(k, listener.sequence, listener.domains,
                                          listener.stream_seed, listener.rng_seed))
                continue
            rng = np.random.default_rng(seed_sequence(cfg.seed, _CLIENT_TAG, k))
            picks = rng.integers(len(pool), size=cfg.active.segments_per_client)
            seq = SequenceSpec(tuple((pool[i], cfg.active.segment_frames) for i in picks))
            active.append(ClientSetup(k, seq, {n: domains[n] for n in seq.domain_names},
                                      stream_seed=_derive(cfg.seed, _CLIENT_TAG, k, 1),
                                      rng_seed=_derive(cfg.seed, _CLIENT_TAG, k, 2)))
    return World(w0.spec, w0, domains, listener, tuple(active))


# --- running ----------------------------------------------------------------

@dataclass
class SummaryRow:
    mode: str
    metrics: "OrderedDict[str, DomainMetrics]"
    mbps_to_server: float
    mbps_to_client: float
    rounds: int
    frames: int
    bytes_to_server: int = 0
    bytes_to_client: int = 0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    summary: SummaryRow
    records: list
    round_log: list
    ledger: object = None


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{x:.9g}"
    return str(x)


def _r9(x: float) -> float:
    return float(f"{x:.9g}")


FRAME_COLUMNS = ("index", "domain", "prediction", "target", "epe", "d1", "round")
SUMMARY_COLUMNS = ("mode", "domain", "frames", "epe", "d1_pct", "to_server_mbps",
                   "to_client_mbps", "rounds")
TRAFFIC_COLUMNS = ("round", "time_s", "bytes_to_server", "bytes_to_client", "blocks")


def summarize(mode: str, records, rounds: int, mbps_to_server: float, mbps_to_client: float,
              bytes_to_server: int = 0, bytes_to_client: int = 0) -> SummaryRow:
    """Aggregate records at the precision written to ``frames.csv``."""
    rounded = [FrameRecord(r.index, r.domain, _r9(r.prediction), _r9(r.target), _r9(r.epe),
                           r.d1, r.round_id) for r in records]
    return SummaryRow(mode, compute_metrics(rounded), mbps_to_server, mbps_to_client, rounds,
                      len(records), bytes_to_server, bytes_to_client)


def run_config(cfg: ExperimentConfig, *, engine: str | None = None,
               w0: BlockedWeights | None = None) -> ExperimentResult:
    world = build_world(cfg, w0)
    params = MetricParams(cfg.metrics.d1_abs_threshold, cfg.metrics.d1_rel_threshold)
    sup = SupervisionKind(cfg.supervision)
    n_frames = world.listener.sequence.length
    if not cfg.is_federated:
        stream = FrameStream(world.listener.sequence, world.listener.domains,
                             world.listener.stream_seed, input_dim=cfg.model.input_dim)
        res = run_sequence(world.w0, stream, AdaptMode(cfg.mode), sup, cfg.lr, n_frames,
                           policy=SamplingPolicy(cfg.sampling), rng=world.listener.rng_seed,
                           metric_params=params)
        summary = summarize(cfg.mode, res.records, 0, 0.0, 0.0)
        return ExperimentResult(cfg, summary, res.records, [])

    sim_cfg = SimulationConfig(
        w0=world.w0,
        listener=world.listener,
        active=world.active,
        fed_mode=FedMode(cfg.mode),
        local_mode=AdaptMode(cfg.local_mode),
        sup=sup,
        lr=cfg.lr,
        T=cfg.T,
        policy=SamplingPolicy(cfg.sampling),
        schedule=Schedule(**cfg.schedule.model_dump()),
        metric_params=params,
        allow_shared_domains=cfg.active.share_listener_stream,
    )
    sim = run_simulation(sim_cfg, engine=engine or cfg.engine)
    report = traffic_report(sim.ledger)
    summary = summarize(cfg.mode, sim.records, sim.rounds, report.mbps_to_server or 0.0,
                        report.mbps_to_client or 0.0, sim.ledger.bytes_to_server,
                        sim.ledger.bytes_to_client)
    return ExperimentResult(cfg, summary, sim.records, sim.ledger.rounds, sim.ledger)


def frames_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRAME_COLUMNS)
    for r in records:
        w.writerow([_fmt(v) for v in (r.index, r.domain, r.prediction, r.target, r.epe, r.d1,
                                      r.round_id)])
    return buf.getvalue()


def summary_rows(summary: SummaryRow):
    for domain, m in summary.metrics.items():
        yield (summary.mode, domain, m.frames, m.epe, m.d1, summary.mbps_to_server,
               summary.mbps_to_client, summary.rounds)


def summary_csv(summary: SummaryRow) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summary_rows(summary):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def traffic_csv(round_log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAFFIC_COLUMNS)
    for r in round_log:
        w.writerow([_fmt(v) for v in (r.round, r.time, r.bytes_to_server, r.bytes_to_client,
                                      r.blocks)])
    return buf.getvalue()


def summary_from_frames_csv(text: str, mode: str) -> "OrderedDict[str, DomainMetrics]":
    """Recompute per-domain metrics from a ``frames.csv`` document."""
    rows = list(csv.DictReader(io.StringIO(text)))
    records = [FrameRecord(int(r["index"]), r["domain"], float(r["prediction"]),
                           float(r["target"]), float(r["epe"]), r["d1"] == "1", int(r["round"]))
               for r in rows]
    return compute_metrics(records)


def check_invariants(result: ExperimentResult, frames_text: str, summary_text: str) -> None:
    recomputed = summary_from_frames_csv(frames_text, result.summary.mode)
    expected = summary_csv(SummaryRow(result.summary.mode, recomputed,
                                      result.summary.mbps_to_server,
                                      result.summary.mbps_to_client, result.summary.rounds,
                                      result.summary.frames))
    if expected != summary_text:
        raise InvariantViolation("summary.csv is not recomputable from frames.csv")
    ledger = result.ledger
    if ledger is not None:
        if ledger.bytes_to_server != sum(ledger.upload_sizes):
            raise InvariantViolation("to-server byte counter disagrees with upload log")
        if sum(r.bytes_to_server for r in ledger.rounds) > ledger.bytes_to_server:
            raise InvariantViolation("per-round upload bytes exceed the ledger total")
        if sum(r.bytes_to_client for r in ledger.rounds) != ledger.bytes_to_client:
            raise InvariantViolation("per-round dispatch bytes disagree with the ledger total")
    for r in result.records:
        if r.epe != abs(r.prediction - r.target):
            raise InvariantViolation(f"frame {r.index}: epe inconsistent with prediction")


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    texts = {
        "frames.csv": frames_csv(result.records),
        "summary.csv": summary_csv(result.summary),
        "traffic.csv": traffic_csv(result.round_log),
    }
    check_invariants(result, texts["frames.csv"], texts["summary.csv"])
    paths = {}
    for name, text in texts.items():
        path = out / name
        tmp = path.with_suffix(".csv.tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
        paths[name] = path
    return paths


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, engine: str | None = None,
                   w0: BlockedWeights | None = None) -> ExperimentResult:
    result = run_config(cfg, engine=engine, w0=w0)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


# --- sweeps -----------------------------------------------------------------

def _int_value(axis: str, value) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"sweep axis {axis} needs integer values, got {value!r}") from None


def sweep_point(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "T":
        return base.with_overrides(T=_int_value(axis, value))
    if axis == "num_clients":
        return base.with_overrides(**{"active.count": _int_value(axis, value)})
    if axis == "fed_mode":
        return base.with_overrides(mode=str(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


SWEEP_COLUMNS = ("axis", "value") + SUMMARY_COLUMNS + ("bytes_per_round_to_server",
                                                         "bytes_per_round_to_client")


def _sweep_job(args):
    cfg, w0, engine = args
    return run_config(cfg, engine=engine, w0=w0)


def run_sweep(base: ExperimentConfig, axis: str, values, out_dir=None, *,
              engine: str | None = None, jobs: int = 1):
    """One experiment per value; all points share the seed and pre-trained weights."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    configs = [sweep_point(base, axis, v) for v in values]
    w0 = pretrained_weights(base)
    tasks = [(cfg, w0, engine) for cfg in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    else:
        results = [_sweep_job(t) for t in tasks]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, (value, result) in enumerate(zip(values, results)):
            write_outputs(result, out / f"point_{k:02d}_{axis}_{value}")
        (out / "sweep.csv").write_text(sweep_csv(axis, values, results))
    return list(zip(values, results))


def sweep_csv(axis: str, values, results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for value, result in zip(values, results):
        s = result.summary
        per_round = ((s.bytes_to_server / s.rounds, s.bytes_to_client / s.rounds)
                     if s.rounds else ("", ""))
        for row in summary_rows(s):
            w.writerow([axis, value] + [_fmt(v) for v in row] + [_fmt(v) for v in per_round])
    return buf.getvalue()
