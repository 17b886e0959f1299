"""Privacy-preserving cross-domain DDoS detection.

Domain agents mask windowed flow features; a computing server holding the
training set emits masked distance components; a detection server removes
the masks, runs a budgeted KD-tree kNN, and raises alarms.  The verdicts are
bit-for-bit identical to a plaintext kNN over the same data.
"""

from .agent import AgentConfig, DomainAgent
from .computing import ComputingServer, PreliminaryResult
from .detection import Alarm, DetectionServer, Verdict
from .features import FeatureTuple, FixedPointCodec, extract_features
from .flows import (
    FlowRecord,
    FlowWindow,
    Label,
    Protocol,
    Stage,
    load_flows,
    synth_syn_flood,
    window_flows,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    MetricsReport,
    compute_metrics,
    run_experiment,
    run_scaling,
)
from .knn import (
    KdTreeModel,
    NeighborSet,
    TrainingInstance,
    bbf_search,
    build_kdtree,
    linear_scan,
    vote,
)
from .masking import MaskVector, MaskedTuple, apply_mask, gen_masks, remove_mask

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "Alarm",
    "ComputingServer",
    "DetectionServer",
    "DomainAgent",
    "ExperimentConfig",
    "ExperimentReport",
    "FeatureTuple",
    "FixedPointCodec",
    "FlowRecord",
    "FlowWindow",
    "KdTreeModel",
    "Label",
    "MaskVector",
    "MaskedTuple",
    "MetricsReport",
    "NeighborSet",
    "PreliminaryResult",
    "Protocol",
    "Stage",
    "TrainingInstance",
    "Verdict",
    "apply_mask",
    "bbf_search",
    "build_kdtree",
    "compute_metrics",
    "extract_features",
    "gen_masks",
    "linear_scan",
    "load_flows",
    "remove_mask",
    "run_experiment",
    "run_scaling",
    "synth_syn_flood",
    "vote",
    "window_flows",
]
