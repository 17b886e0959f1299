"""Experiment harness: cross-validation, metrics, timing, domain scaling.

Ground truth is window-level: a window counts as ATTACK when any of its
flows is labeled ATTACK.  Folds are contiguous time slices, never shuffled.
PLAINTEXT mode runs the identical pipeline with the perturbation disabled
(all-zero masks), so its verdicts must match PRIVACY mode exactly.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features as feat
from . import knn
from .agent import AgentConfig, DomainAgent
from .computing import ComputingServer
from .detection import DetectionServer, Verdict
from .flows import (
    FlowRecord,
    FlowWindow,
    Label,
    Stage,
    load_flows,
    synth_syn_flood,
    window_flows,
)
from .knn import TrainingInstance
from .services import CsService, DsService

MODES = ("PRIVACY", "PLAINTEXT")
_ATTACK_STAGES = (Stage.SCANNING, Stage.INTRUSION, Stage.ATTACKING)


class ConfigError(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synth"  # path to a flow CSV, or "synth"
    mode: str = "PRIVACY"
    n_domains: int = 1
    k: int = knn.DEFAULT_K
    node_budget: int | None = knn.DEFAULT_NODE_BUDGET
    scale: int = 1000
    window_length_ms: int = 3000
    folds: int = 6
    seed: int = 0
    transport: str = "memory"  # "memory" or "sockets"
    synth_normal: int = 9000
    synth_attack: int = 9000
    synth_attackers: int = 5
    synth_duration_ms: int = 360_000

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.n_domains < 1:
            raise ConfigError("need at least one domain")
        if self.folds < 2:
            raise ConfigError("cross-validation needs folds >= 2")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.node_budget is not None and self.node_budget < 1:
            raise ConfigError("node_budget must be >= 1 or unbounded")
        if self.window_length_ms < 1000:
            raise ConfigError("window_ms below 1000 breaks (serial, time) keys")
        if self.transport not in ("memory", "sockets"):
            raise ConfigError("transport must be 'memory' or 'sockets'")


@dataclass(frozen=True)
class StageMetrics:
    stage: str
    precision: float | None
    recall: float | None
    attack_windows: int


@dataclass(frozen=True)
class MetricsReport:
    precision: float | None
    recall: float | None
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int
    verdict_counts: dict[str, int]
    stage_metrics: tuple[StageMetrics, ...] = ()


@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_train: int
    n_test_windows: int
    metrics: MetricsReport
    wall_time_s: float


@dataclass(frozen=True)
class ComponentTimes:
    pretreat_s: float = 0.0
    computing_s: float = 0.0
    detection_s: float = 0.0


@dataclass(frozen=True)
class ExperimentReport:
    mode: str
    folds: tuple[FoldResult, ...]
    mean_precision: float | None
    mean_recall: float | None
    component_times: ComponentTimes
    total_windows: int
    total_alarms: int


@dataclass(frozen=True)
class ScalingRow:
    domains: int
    windows: int
    wall_time_s: float


@dataclass(frozen=True)
class ScalingReport:
    rows: tuple[ScalingRow, ...]
    slope_s_per_domain: float
    intercept_s: float
    r_squared: float


def compute_metrics(
    verdicts: Sequence[Label],
    truth: Sequence[Label],
    stages: Sequence[Stage] | None = None,
) -> MetricsReport:
    """Exact precision/recall counting; undefined ratios come back as None.

    When stages are supplied, each attack stage is additionally scored
    against the subset of windows that are either NORMAL or carry that
    stage.
    """
    if len(verdicts) != len(truth):
        raise LengthMismatch(f"{len(verdicts)} verdicts vs {len(truth)} truths")
    if stages is not None and len(stages) != len(truth):
        raise LengthMismatch("stages must align with truth")

    def count(pairs) -> MetricsReport:
        tp = fp = fn = tn = 0
        for v, t in pairs:
            if v is Label.ATTACK and t is Label.ATTACK:
                tp += 1
            elif v is Label.ATTACK:
                fp += 1
            elif t is Label.ATTACK:
                fn += 1
            else:
                tn += 1
        precision = tp / (tp + fp) if tp + fp else None
        recall = tp / (tp + fn) if tp + fn else None
        return MetricsReport(
            precision,
            recall,
            tp,
            fp,
            fn,
            tn,
            verdict_counts={
                "ATTACK": tp + fp,
                "NORMAL": fn + tn,
            },
        )

    overall = count(zip(verdicts, truth))
    if stages is None:
        return overall

    per_stage = []
    for stage in _ATTACK_STAGES:
        pairs = [
            (v, t)
            for v, t, s in zip(verdicts, truth, stages)
            if t is Label.NORMAL or s is stage
        ]
        attack_count = sum(1 for _, t in pairs if t is Label.ATTACK)
        sub = count(pairs)
        per_stage.append(
            StageMetrics(stage.value, sub.precision, sub.recall, attack_count)
        )
    return MetricsReport(
        overall.precision,
        overall.recall,
        overall.true_positives,
        overall.false_positives,
        overall.false_negatives,
        overall.true_negatives,
        overall.verdict_counts,
        tuple(per_stage),
    )


def window_truth(window: FlowWindow) -> tuple[Label, Stage]:
    """A window is ATTACK if any flow in it is; its stage is the most
    advanced stage present."""
    label = Label.NORMAL
    stage = Stage.NONE
    order = {s: i for i, s in enumerate(Stage)}
    for f in window.flows:
        if f.label is Label.ATTACK:
            label = Label.ATTACK
            if order[f.stage] > order[stage]:
                stage = f.stage
    return label, stage


def build_training_set(
    windows: Sequence[FlowWindow],
    codec: feat.FixedPointCodec,
    cap_per_class: int | None = None,
    seed: int = 0,
) -> list[TrainingInstance]:
    """Turn labeled windows into training instances, optionally balanced by
    subsampling each class down to cap_per_class."""
    by_class: dict[Label, list[tuple[int, ...]]] = {
        Label.NORMAL: [],
        Label.ATTACK: [],
    }
    for window in windows:
        label, _ = window_truth(window)
        t = feat.extract_features(window, codec)
        by_class[label].append(tuple(v & feat.VALUE_MAX for v in t.feature_words()))
    if cap_per_class is not None:
        rng = random.Random(seed)
        for label, rows in by_class.items():
            if len(rows) > cap_per_class:
                by_class[label] = rng.sample(rows, cap_per_class)
    instances = []
    next_id = 0
    for label in (Label.NORMAL, Label.ATTACK):
        for row in by_class[label]:
            instances.append(TrainingInstance(row, label, next_id))
            next_id += 1
    return instances


@dataclass
class PipelineTimer:
    pretreat_s: float = 0.0
    computing_s: float = 0.0
    detection_s: float = 0.0


def run_pipeline_direct(
    windows: Sequence[FlowWindow],
    agent: DomainAgent,
    cs: ComputingServer,
    ds: DetectionServer,
    timer: PipelineTimer | None = None,
) -> list[Verdict]:
    """In-process composition of the three roles for one window stream.

    Whether the perturbation is applied is the agent's concern
    (AgentConfig.privacy); the message flow and arithmetic are identical
    either way.
    """
    verdicts = []
    clock = time.perf_counter
    for window in windows:
        t0 = clock()
        masked, mask = agent.pretreat(window)
        t1 = clock()
        prelim = cs.preliminary_compute(masked)
        t2 = clock()
        verdicts.append(ds.detect(prelim, mask))
        t3 = clock()
        if timer is not None:
            timer.pretreat_s += t1 - t0
            timer.computing_s += t2 - t1
            timer.detection_s += t3 - t2
    return verdicts


def _run_fold_sockets(
    per_domain_windows: dict[int, list[FlowWindow]],
    cfg: ExperimentConfig,
    cs: ComputingServer,
    ds: DetectionServer,
) -> list[Verdict]:
    """Drive one fold over loopback sockets (PLAIN, loopback only)."""
    from .services import SocketServer
    from .transport import open_channel

    ds_service = DsService(ds)
    ds_server = SocketServer(ds_service.handle)
    ds_server.start()
    cs_to_ds = open_channel(ds_server.endpoint, "PLAIN", allow_insecure=True)
    cs_service = CsService(cs, cs_to_ds)
    cs_service.announce_topology()
    cs_server = SocketServer(cs_service.handle)
    cs_server.start()
    try:
        for domain_id, windows in sorted(per_domain_windows.items()):
            agent = DomainAgent(
                AgentConfig(
                    domain_id=domain_id,
                    window_length_ms=cfg.window_length_ms,
                    scale=cfg.scale,
                    seed=cfg.seed + domain_id,
                    privacy=cfg.mode == "PRIVACY",
                )
            )
            agent_cs = open_channel(cs_server.endpoint, "PLAIN", allow_insecure=True)
            agent_ds = open_channel(ds_server.endpoint, "PLAIN", allow_insecure=True)
            agent.run_windows(windows, agent_cs, agent_ds)
            agent_cs.close()
            agent_ds.close()
    finally:
        cs_to_ds.close()
        cs_server.stop()
        ds_server.stop()
    return list(ds.verdicts)


def run_experiment(
    cfg: ExperimentConfig, alarm_log_path: str | None = None
) -> ExperimentReport:
    """Time-sliced cross-validation over the configured dataset.

    When alarm_log_path is given every alarm of the run is appended there as
    one JSON object per line.
    """
    flows = _load_dataset(cfg)
    codec = feat.FixedPointCodec(cfg.scale)
    per_domain = _split_domains(flows, cfg)

    # Windows per domain, all tiled from each domain's own time range.
    domain_windows = {
        d: window_flows(fl, d, cfg.window_length_ms) for d, fl in per_domain.items()
    }
    all_counts = [len(w) for w in domain_windows.values()]
    if min(all_counts) < cfg.folds:
        raise InsufficientData(
            f"{min(all_counts)} windows cannot fill {cfg.folds} folds"
        )

    fold_results = []
    times = PipelineTimer()
    total_alarms = 0
    total_windows = 0
    for fold in range(cfg.folds):
        train_windows: list[FlowWindow] = []
        test_stream: dict[int, list[FlowWindow]] = {}
        for domain_id, windows in sorted(domain_windows.items()):
            bounds = _fold_bounds(len(windows), cfg.folds)
            lo, hi = bounds[fold]
            test_stream[domain_id] = windows[lo:hi]
            train_windows.extend(windows[:lo] + windows[hi:])

        train = build_training_set(train_windows, codec)
        if not train:
            raise InsufficientData(f"fold {fold} has an empty training slice")

        cs = ComputingServer(k=cfg.k, node_budget=cfg.node_budget)
        cs.load_training(train)
        ds = DetectionServer(
            k=cfg.k, node_budget=cfg.node_budget, alarm_log_path=alarm_log_path
        )
        ds.set_topology_blob(cs.topology_blob())

        started = time.perf_counter()
        if cfg.transport == "sockets":
            verdicts = _run_fold_sockets(test_stream, cfg, cs, ds)
        else:
            verdicts = []
            for domain_id, windows in sorted(test_stream.items()):
                agent = DomainAgent(
                    AgentConfig(
                        domain_id=domain_id,
                        window_length_ms=cfg.window_length_ms,
                        scale=cfg.scale,
                        seed=cfg.seed + domain_id,
                        privacy=cfg.mode == "PRIVACY",
                    )
                )
                verdicts.extend(run_pipeline_direct(windows, agent, cs, ds, timer=times))
        elapsed = time.perf_counter() - started

        verdicts.sort(key=lambda v: (v.serial_number, v.time))
        truth_by_key: dict[tuple[int, int], tuple[Label, Stage]] = {}
        for domain_id, windows in test_stream.items():
            for w in windows:
                truth_by_key[(domain_id, w.window_start // 1000)] = window_truth(w)
        labels = [v.label for v in verdicts]
        truths = [truth_by_key[(v.serial_number, v.time)][0] for v in verdicts]
        stages = [truth_by_key[(v.serial_number, v.time)][1] for v in verdicts]
        metrics = compute_metrics(labels, truths, stages)
        total_alarms += metrics.verdict_counts["ATTACK"]
        total_windows += len(verdicts)
        fold_results.append(
            FoldResult(fold, len(train), len(verdicts), metrics, elapsed)
        )

    return ExperimentReport(
        mode=cfg.mode,
        folds=tuple(fold_results),
        mean_precision=_mean_or_none([f.metrics.precision for f in fold_results]),
        mean_recall=_mean_or_none([f.metrics.recall for f in fold_results]),
        component_times=ComponentTimes(
            times.pretreat_s, times.computing_s, times.detection_s
        ),
        total_windows=total_windows,
        total_alarms=total_alarms,
    )


def run_scaling(cfg: ExperimentConfig, max_domains: int = 6) -> ScalingReport:
    """Wall time as the domain count grows, each domain carrying the same
    per-domain load; reports a least-squares linear fit with R^2."""
    if max_domains < 1:
        raise ConfigError("max_domains must be >= 1")
    codec = feat.FixedPointCodec(cfg.scale)

    # One reference stream, reused per domain so the per-domain load is fixed.
    base = synth_syn_flood(
        cfg.seed,
        cfg.synth_normal,
        cfg.synth_attack,
        cfg.synth_attackers,
        cfg.synth_duration_ms,
    )
    base_windows = window_flows(base, 0, cfg.window_length_ms)
    split = max(len(base_windows) // 2, 1)
    train = build_training_set(base_windows[:split], codec)
    test_template = base_windows[split:]

    rows = []
    for domains in range(1, max_domains + 1):
        cs = ComputingServer(k=cfg.k, node_budget=cfg.node_budget)
        cs.load_training(train)
        ds = DetectionServer(k=cfg.k, node_budget=cfg.node_budget)
        ds.set_topology_blob(cs.topology_blob())
        streams = {
            d: [
                FlowWindow(d, w.window_start, w.window_length, w.flows)
                for w in test_template
            ]
            for d in range(1, domains + 1)
        }
        started = time.perf_counter()
        windows_done = 0
        for d, windows in streams.items():
            agent = DomainAgent(
                AgentConfig(
                    domain_id=d,
                    window_length_ms=cfg.window_length_ms,
                    scale=cfg.scale,
                    seed=cfg.seed + d,
                    privacy=cfg.mode == "PRIVACY",
                )
            )
            run_pipeline_direct(windows, agent, cs, ds)
            windows_done += len(windows)
        rows.append(
            ScalingRow(domains, windows_done, time.perf_counter() - started)
        )

    xs = np.array([r.domains for r in rows], dtype=float)
    ys = np.array([r.wall_time_s for r in rows], dtype=float)
    if len(rows) >= 2:
        slope, intercept = np.polyfit(xs, ys, 1)
        fitted = slope * xs + intercept
        ss_res = float(((ys - fitted) ** 2).sum())
        ss_tot = float(((ys - ys.mean()) ** 2).sum())
        r_squared = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    else:
        slope, intercept, r_squared = ys[0], 0.0, 1.0
    return ScalingReport(tuple(rows), float(slope), float(intercept), r_squared)


def _load_dataset(cfg: ExperimentConfig) -> list[FlowRecord]:
    if cfg.dataset == "synth":
        return synth_syn_flood(
            cfg.seed,
            cfg.synth_normal,
            cfg.synth_attack,
            cfg.synth_attackers,
            cfg.synth_duration_ms,
        )
    if not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset not found: {cfg.dataset}")
    return load_flows(cfg.dataset)


def _split_domains(
    flows: list[FlowRecord], cfg: ExperimentConfig
) -> dict[int, list[FlowRecord]]:
    """Round-robin flows across domains, preserving each stream's time order."""
    streams: dict[int, list[FlowRecord]] = {
        d: [] for d in range(1, cfg.n_domains + 1)
    }
    for i, f in enumerate(flows):
        streams[1 + i % cfg.n_domains].append(f)
    return streams


def _fold_bounds(n: int, folds: int) -> list[tuple[int, int]]:
    """Contiguous fold boundaries over n time-ordered windows."""
    bounds = []
    base = n // folds
    extra = n % folds
    start = 0
    for i in range(folds):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def _mean_or_none(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def parse_config_file(path: str) -> ExperimentConfig:
    """Read the documented key-value config: one `key = value` per line,
    blank lines and #-comments ignored."""
    known = {
        "dataset": str,
        "mode": str,
        "k": int,
        "budget": lambda v: None if v.lower() in ("none", "unbounded") else int(v),
        "folds": int,
        "domains": int,
        "seed": int,
        "scale": int,
        "window_ms": int,
        "transport": str,
        "synth_normal": int,
        "synth_attack": int,
        "synth_attackers": int,
        "synth_duration_ms": int,
    }
    rename = {
        "budget": "node_budget",
        "domains": "n_domains",
        "window_ms": "window_length_ms",
    }
    values: dict[str, object] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in known:
            raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
        try:
            values[rename.get(key, key)] = known[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{line_no}: bad value for {key}") from exc
    return ExperimentConfig(**values)  # type: ignore[arg-type]
