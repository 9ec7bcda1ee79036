"""Deterministic trace-driven simulation of the edge-cloud pipeline.

Time is accounted in integer nanoseconds so the latency breakdown sums to the
per-frame totals exactly; milliseconds appear only in reports.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .dataset import EmbeddingDataset
from .errors import (
    CtxSwitchError,
    FrameError,
    InsufficientSamples,
    LogDisabled,
    NewClassUncovered,
    SchemaViolation,
)
from .heads import HeadHyperparams, predict, train_heads
from .similarity import SimilarityMatrix, context_representation
from .switching import (
    AllClassModel,
    CloudProvider,
    LFUCache,
    LocalProvider,
    SwitchState,
    detect_change,
    hybrid_switch,
    identify_class,
    local_fallback,
)

__all__ = [
    "SimConfig",
    "FrameTrace",
    "System",
    "SimulationReport",
    "context_change_count",
    "synthesize_sequence",
    "transmission_ms",
    "run",
    "measure_fpfn_online",
    "make_cloud_trainer",
    "write_report_json",
    "write_report_csv",
    "write_frames_csv",
    "REPORT_CSV_FIELDS",
]

NS_PER_MS = 1_000_000


@dataclass(frozen=True)
class SimConfig:
    mode: str = "cloud"
    device: str = "pi0"
    data_rate_mbps: float = 3.0
    context_interval: int = 30
    theta: float = 0.5
    m_set: tuple = (2, 3, 4)
    cache_capacity: int | None = None
    frame_bytes: int = 30_000
    cloud_ms: float = 0.0
    recent_capacity: int = 8
    replace: str = "recency"
    keep_log: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.mode not in ("cloud", "local"):
            raise SchemaViolation("mode", "expected 'cloud' or 'local'")
        if not self.data_rate_mbps > 0:
            raise SchemaViolation("data_rate_mbps", "must be positive")
        if self.context_interval < 1:
            raise SchemaViolation("context_interval", "must be >= 1")
        if self.frame_bytes < 0:
            raise SchemaViolation("frame_bytes", "must be non-negative")


@dataclass(frozen=True)
class FrameTrace:
    frames: tuple
    contexts: tuple
    boundaries: tuple
    split: str = "test"

    @property
    def n_changes(self) -> int:
        return len(self.contexts) - 1

    def __len__(self):
        return len(self.frames)


@dataclass
class System:
    """Everything a run needs besides the trace.

    Cloud mode uses ``trainer(combo, config_id)``; local mode uses the
    ``installed`` heads keyed by ``(combo, config_id)``.
    """

    dataset: EmbeddingDataset
    predictors: dict
    all_class: AllClassModel
    similarity: SimilarityMatrix
    trainer: object = None
    installed: dict | None = None
    head_bytes: object = None


@dataclass
class SimulationReport:
    mode: str
    device: str
    context_interval: int
    frames: int
    accuracy: float
    avg_latency_ms: float
    avg_device_flops_m: float
    allclass_latency_ms: float
    allclass_flops_m: float
    speedup_vs_allclass: float
    total_ns: int
    breakdown_ns: dict
    trigger_count: int
    switch_count: int
    fp_count: int
    fn_count: int
    uncovered_count: int
    cache_hits: int
    cache_misses: int
    contexts: list = field(default_factory=list)
    frame_log: list | None = None
    baselines: list = field(default_factory=list)

    @property
    def breakdown_ms(self) -> dict:
        return {k: v / NS_PER_MS / self.frames for k, v in self.breakdown_ns.items()}

    def to_dict(self, include_frames: bool = True) -> dict:
        d = asdict(self)
        d["breakdown_avg_ms"] = self.breakdown_ms
        d["contexts"] = [[list(c), cfg] for c, cfg in self.contexts]
        if not include_frames:
            d.pop("frame_log")
        return d


def context_change_count(ccr: float, test_size: int) -> int:
    """``ceil(CCR * |TS|)`` computed on the exact rational value of ``ccr``."""
    frac = Fraction(ccr).limit_denominator(10**9) if isinstance(ccr, float) else Fraction(ccr)
    return math.ceil(frac * test_size)


def synthesize_sequence(classes, m: int, n_changes: int, interval: int, dataset: EmbeddingDataset,
                        seed: int, split: str = "test") -> FrameTrace:
    """Random walk over ``m``-class contexts, one class replaced per step.

    Each of the ``n_changes + 1`` contexts lasts ``interval`` frames drawn
    uniformly (with replacement) from the split's samples of its classes.
    """
    classes = sorted(int(c) for c in classes)
    if not 1 <= m < len(classes):
        raise SchemaViolation("m", f"need 1 <= m < {len(classes)}")
    if interval < 1 or n_changes < 0:
        raise SchemaViolation("interval", "interval >= 1 and n_changes >= 0 required")
    mat = dataset.matrix(dataset.manifest.configs[0].id, split)
    pools = {c: np.flatnonzero(mat.labels == c) for c in classes}
    for c, idx in pools.items():
        if len(idx) == 0:
            raise InsufficientSamples(f"class {c} has no {split} samples")

    rng = np.random.default_rng(seed)
    current = sorted(rng.choice(classes, size=m, replace=False).tolist())
    contexts = [tuple(current)]
    for _ in range(n_changes):
        out = current[int(rng.integers(m))]
        pool = [c for c in classes if c not in current]
        new = pool[int(rng.integers(len(pool)))]
        current = sorted([c for c in current if c != out] + [new])
        contexts.append(tuple(current))

    frames, boundaries = [], []
    for ctx in contexts:
        boundaries.append(len(frames))
        rows = np.concatenate([pools[c] for c in ctx])
        for r in rng.choice(rows, size=interval, replace=True):
            frames.append((mat.sample_ids[r], int(mat.labels[r])))
    return FrameTrace(tuple(frames), tuple(contexts), tuple(boundaries), split)


def transmission_ms(nbytes: int, rate_mbps: float) -> float:
    if not rate_mbps > 0:
        raise SchemaViolation("rate_mbps", "must be positive")
    return nbytes * 8 / (rate_mbps * 1e6) * 1000


def _tx_ns(nbytes: int, rate_mbps: float) -> int:
    return int(round(Fraction(nbytes * 8_000) / Fraction(rate_mbps).limit_denominator(10**9)))


def _ms_to_ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def make_cloud_trainer(dataset: EmbeddingDataset, hyper: HeadHyperparams = HeadHyperparams(), theta: float = 0.5):
    """Cloud-side trainer; trained heads are memoised by (combo, config)."""
    memo = {}

    def trainer(combo, config_id):
        key = (tuple(combo), config_id)
        if key not in memo:
            memo[key] = train_heads(dataset, config_id, key[0], hyper, theta=theta)
        return memo[key]

    trainer.memo = memo
    return trainer


def _default_head_bytes(system):
    from .heads import head_param_count
    manifest = system.dataset.manifest

    def nbytes(combo, config_id):
        cfg = manifest.config(config_id)
        hidden = system.all_class.classifier.hidden_dim
        return head_param_count(cfg.embedding_dim, hidden, len(combo)) * cfg.param_bytes_per_weight

    return nbytes


def _initial_context(sim, trace, system, flops, n_classes):
    ctx0 = tuple(trace.contexts[0])
    if sim.mode == "local":
        key = local_fallback(ctx0, system.installed, None, flops)
        return key[0], key[1], system.installed[key]
    options = {}
    for m in sorted(set(sim.m_set)):
        if m > n_classes or m < 2 or m not in system.predictors:
            continue
        if m <= len(ctx0):
            combo = ctx0[:m]
        else:
            combo = ctx0 + tuple(c for c in range(n_classes) if c not in ctx0)[: m - len(ctx0)]
        combo = tuple(sorted(combo))
        cid = system.predictors[m].predict(context_representation(system.similarity, combo))
        options[m] = (combo, cid)
    if not options:
        raise SchemaViolation("m_set", "no predictor for any context size in m_set")
    m_best = min(options, key=lambda m: (flops[options[m][1]], -m))
    combo, cid = options[m_best]
    return combo, cid, system.trainer(combo, cid)


def run(sim: SimConfig, trace: FrameTrace, system: System) -> SimulationReport:
    """Replay ``trace`` frame by frame through detector, all-class model and switching."""
    dataset = system.dataset
    manifest = dataset.manifest
    flops = {c.id: c.flops_m for c in manifest.configs}
    dev_ns = {c.id: _ms_to_ns(c.latency_ms(sim.device)) for c in manifest.configs}
    allclass_dev_ns = _ms_to_ns(system.all_class.device_latency_ms[sim.device])
    n_classes = dataset.n_classes
    split = trace.split

    if sim.mode == "cloud":
        if system.trainer is None:
            raise SchemaViolation("trainer", "cloud mode needs a trainer")
        cache = LFUCache(sim.cache_capacity)
        head_bytes = system.head_bytes or _default_head_bytes(system)
        provider = CloudProvider(system.trainer, cache, head_bytes)
    else:
        if not system.installed:
            raise SchemaViolation("installed", "local mode needs pre-installed heads")
        cache = None
        provider = LocalProvider(system.installed, flops)

    combo, cid, clf = _initial_context(sim, trace, system, flops, n_classes)
    if cache is not None:
        # cold start: the first context is pre-deployed, no charge
        cache.preload((combo, cid), clf)
    state = SwitchState(combo, cid, clf, recent_capacity=sim.recent_capacity,
                        m_set=tuple(sim.m_set), cache=cache, policy=sim.replace)
    contexts = [(combo, cid)]

    ac_cfg = system.all_class.config_id
    ac_index = dataset.row_index(ac_cfg, split)
    ac_X = dataset.matrix(ac_cfg, split).X
    indices = {c.id: dataset.row_index(c.id, split) for c in manifest.configs}
    mats = {c.id: dataset.matrix(c.id, split).X for c in manifest.configs}
    uplink_ns = _tx_ns(sim.frame_bytes, sim.data_rate_mbps)
    cloud_ns = _ms_to_ns(sim.cloud_ms)

    totals = {"device_inference": 0, "uplink": 0, "head_download": 0, "allclass_inference": 0}
    total_ns = 0
    flops_sum = 0.0
    correct = triggers = switches = fp = fn = uncovered = 0
    log = [] if sim.keep_log else None

    for i, (sid, true) in enumerate(trace.frames):
        try:
            in_ctx = true in state.combo
            cur_combo, cur_cfg = state.combo, state.config_id
            if sid not in indices[cur_cfg] or sid not in ac_index:
                raise SchemaViolation("trace", f"sample {sid!r} is not in split {split!r}")
            out = predict(state.classifier, mats[cur_cfg][indices[cur_cfg][sid]])
            d_ns = dev_ns[cur_cfg]
            f = flops[cur_cfg]
            up = ac = dl = 0
            identified = -1
            fired = detect_change(out, sim.theta)
            if fired:
                triggers += 1
                if sim.mode == "cloud":
                    up, ac = uplink_ns, cloud_ns
                else:
                    ac = allclass_dev_ns
                    f += system.all_class.flops_m
                identified = identify_class(system.all_class, ac_X[ac_index[sid]])
                label = identified
                if identified not in state.combo:
                    try:
                        dec = hybrid_switch(state, identified, system.predictors, provider,
                                            flops=flops, n_classes=n_classes,
                                            similarity=system.similarity)
                    except NewClassUncovered:
                        uncovered += 1
                        state.observe(identified)
                    else:
                        switches += 1
                        dl = _tx_ns(dec.download_bytes, sim.data_rate_mbps)
                        contexts.append((dec.combo, dec.config_id))
                else:
                    state.observe(identified)
            else:
                label = out.predicted_class
                state.observe(label)
        except CtxSwitchError as exc:
            raise FrameError(i, exc) from exc

        fp += fired and in_ctx
        fn += (not fired) and (not in_ctx)
        correct += label == true
        frame_ns = d_ns + up + dl + ac
        totals["device_inference"] += d_ns
        totals["uplink"] += up
        totals["head_download"] += dl
        totals["allclass_inference"] += ac
        total_ns += frame_ns
        flops_sum += f
        if log is not None:
            log.append({
                "frame": i, "sample_id": sid, "true_class": int(true), "in_context": bool(in_ctx),
                "combo": "-".join(map(str, cur_combo)), "config": cur_cfg, "change_score": out.change_score,
                "triggered": bool(fired), "identified": int(identified), "emitted": int(label),
                "correct": bool(label == true), "device_ns": d_ns, "uplink_ns": up,
                "download_ns": dl, "allclass_ns": ac, "total_ns": frame_ns, "flops_m": f,
            })

    n = len(trace.frames)
    if n == 0:
        raise SchemaViolation("trace", "trace has no frames")
    return SimulationReport(
        mode=sim.mode,
        device=sim.device,
        context_interval=sim.context_interval,
        frames=n,
        accuracy=correct / n,
        avg_latency_ms=total_ns / n / NS_PER_MS,
        avg_device_flops_m=flops_sum / n,
        allclass_latency_ms=allclass_dev_ns / NS_PER_MS,
        allclass_flops_m=system.all_class.flops_m,
        speedup_vs_allclass=allclass_dev_ns * n / total_ns if total_ns else math.inf,
        total_ns=total_ns,
        breakdown_ns=totals,
        trigger_count=triggers,
        switch_count=switches,
        fp_count=int(fp),
        fn_count=int(fn),
        uncovered_count=uncovered,
        cache_hits=cache.hits if cache else 0,
        cache_misses=cache.misses if cache else 0,
        contexts=contexts,
        frame_log=log,
    )


def measure_fpfn_online(report: SimulationReport) -> tuple:
    """(FP rate, FN rate) over in-context and out-of-context frames of a logged run."""
    if report.frame_log is None:
        raise LogDisabled("run the simulation with keep_log=True")
    fired = np.array([r["triggered"] for r in report.frame_log], dtype=bool)
    inside = np.array([r["in_context"] for r in report.frame_log], dtype=bool)
    fpr = float(fired[inside].mean()) if inside.any() else 0.0
    fnr = float((~fired[~inside]).mean()) if (~inside).any() else 0.0
    return fpr, fnr


REPORT_CSV_FIELDS = ("mode", "device", "interval", "acc", "avg_ms", "speedup",
                     "triggers", "switches", "fp", "fn")


def write_report_json(report: SimulationReport, path, include_frames: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(include_frames), indent=2) + "\n", encoding="utf-8")


def report_csv_text(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_FIELDS)
    for r in reports:
        w.writerow([r.mode, r.device, r.context_interval, repr(r.accuracy), repr(r.avg_latency_ms),
                    repr(r.speedup_vs_allclass), r.trigger_count, r.switch_count, r.fp_count, r.fn_count])
    return buf.getvalue()


def write_report_csv(reports, path) -> None:
    if isinstance(reports, SimulationReport):
        reports = [reports]
    Path(path).write_text(report_csv_text(reports), encoding="utf-8")


def write_frames_csv(report: SimulationReport, path) -> None:
    if report.frame_log is None:
        raise LogDisabled("run the simulation with keep_log=True")
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if not report.frame_log:
            return
        w = csv.DictWriter(fh, fieldnames=list(report.frame_log[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(report.frame_log)
