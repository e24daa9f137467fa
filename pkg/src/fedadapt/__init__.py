"""Federated online adaptation of a block-partitioned learner over simulated networks."""
from .adaptation import (
    AdaptMode,
    DenseNoisy,
    SamplingPolicy,
    SparseExact,
    SupervisionKind,
    UpdateHistogram,
    adapt_step,
    decay_selected,
    run_sequence,
    softmax_sample,
    supervise,
)
from .estimator import BlockChainRegressor
from .experiments import ConfigError, ExperimentConfig, InvariantViolation, run_experiment, run_sweep
from .federation import FedMode, ProtocolError, ServerState, aggregate, server_ingest
from .metrics import FrameRecord, MetricParams, compute_metrics
from .model import BlockedWeights, ModelSpec, forward, grad_block, grad_full, init_weights, sgd_apply
from .simnet import Schedule, SimulationConfig, run_simulation, traffic_report
from .streams import DomainSpec, FrameStream, SequenceSpec, make_domain, stream, warmup_pretrain
from .wire import WireMessage, decode, encode

__version__ = "0.1.0"
