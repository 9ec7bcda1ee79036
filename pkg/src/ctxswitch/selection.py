"""Choosing which micro-classifiers to keep on a storage-limited device."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageInfeasible, EmptyTrace, ExhaustedCandidates, RateOutOfRange, SchemaViolation
from .heads import head_param_count

__all__ = [
    "Candidate",
    "SelectionResult",
    "StorageModel",
    "expected_flops",
    "coverage",
    "greedy_select",
    "greecomp",
    "accucomp",
    "topk_frequent",
    "storage_footprint",
    "build_candidates",
    "write_selection",
]


def expected_flops(f_i: float, f_full: float, ccr: float, fpr: float, fnr: float) -> float:
    """Expected per-frame computation of a deployed micro-classifier.

    A real context change (rate ``ccr``) runs the all-class model unless the
    detector misses it; an in-context frame runs it only on a false alarm.
    """
    for name, r in (("CCR", ccr), ("FPR", fpr), ("FNR", fnr)):
        if not 0.0 <= r <= 1.0:
            raise RateOutOfRange(f"{name}={r} outside [0, 1]")
    if not (f_i > 0 and f_full > 0):
        raise SchemaViolation("flops", "f_i and f_full must be positive")
    return (ccr * (fnr * f_i + (1 - fnr) * (f_i + f_full))
            + (1 - ccr) * (fpr * (f_i + f_full) + (1 - fpr) * f_i))


@dataclass(frozen=True)
class Candidate:
    combo: tuple
    config_id: str
    flops: float
    accuracy: float | None = None

    @property
    def key(self) -> tuple:
        return (self.combo, self.config_id)


@dataclass
class SelectionResult:
    selected: list
    initial: list
    audit: list = field(default_factory=list)
    accuracies: dict = field(default_factory=dict)

    @property
    def avg_flops(self) -> float:
        return float(np.mean([c.flops for c in self.selected]))

    @property
    def avg_accuracy(self) -> float | None:
        vals = [self.accuracies.get(c.key) for c in self.selected]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))


def coverage(selection) -> set:
    out = set()
    for c in selection:
        out.update(c.combo)
    return out


def _covers(selection, N) -> bool:
    return len(coverage(selection)) == N


def _avg(selection) -> float:
    return math.fsum(c.flops for c in selection) / len(selection)


def _sort_candidates(candidates):
    # stable on input order for equal F
    return sorted(candidates, key=lambda c: c.flops)


def _random_cover(S, n, N, rng, max_draws):
    for _ in range(max_draws):
        idx = rng.choice(len(S), size=n, replace=False)
        pick = [S[i] for i in sorted(idx)]
        if _covers(pick, N):
            return pick
    raise CoverageInfeasible(f"no covering set of {n} found in {max_draws} random draws")


def greecomp(candidates, n: int, N: int, seed: int = 0, max_draws: int = 1000, initial=None):
    """Stage 1: lower the average expected FLOPs while keeping full coverage.

    Repeatedly swaps the heaviest member for the lightest strictly lighter
    non-member that keeps all ``N`` classes covered, and stops once an
    iteration fails to lower the average. Returns ``(selected, initial, audit)``.
    """
    S = _sort_candidates(candidates)
    m = max((len(c.combo) for c in S), default=0)
    if n <= 0 or m == 0 or n * m < N or n > len(S):
        raise CoverageInfeasible(f"{n} micro-classifiers of size {m} cannot cover {N} classes")
    if not _covers(S, N):
        raise CoverageInfeasible("the candidates together do not cover every class")
    if initial is None:
        C = _random_cover(S, n, N, np.random.default_rng(seed), max_draws)
    else:
        C = list(initial)
        if len(C) != n or not _covers(C, N):
            raise CoverageInfeasible("given initial set does not cover every class")
    init = list(C)
    audit = []
    old, new = 1.0, 0.0
    first = True
    while first or new < old:
        first = False
        old = _avg(C)
        heaviest = max(C, key=lambda c: c.flops)
        for cand in S:
            if cand.flops >= heaviest.flops:
                break
            if cand in C:
                continue
            trial = [cand if c is heaviest else c for c in C]
            if _covers(trial, N):
                C = trial
                break
        new = _avg(C)
        if new < old:
            audit.append({"stage": 1, "removed": _cand_json(heaviest), "added": _cand_json(cand),
                          "avg_before": old, "avg_after": new, "covered": len(coverage(C))})
    return C, init, audit


def accucomp(selected, candidates, N: int, acc_thr: float, trainer=None, criterion: str = "average",
             accuracies: dict | None = None):
    """Stage 2: raise accuracy until the set meets ``acc_thr``.

    The least accurate member is replaced by the lightest candidate not yet
    tried that keeps coverage and trains to a higher accuracy. ``trainer``
    maps a candidate to its accuracy; known accuracies are reused.
    """
    if criterion not in ("average", "min"):
        raise SchemaViolation("criterion", "expected 'average' or 'min'")
    accs = dict(accuracies or {})

    def acc_of(c):
        if c.key not in accs:
            if c.accuracy is not None:
                accs[c.key] = float(c.accuracy)
            elif trainer is None:
                raise SchemaViolation("trainer", f"no accuracy known for {c.key}")
            else:
                accs[c.key] = float(trainer(c))
        return accs[c.key]

    S = _sort_candidates(candidates)
    C = list(selected)
    audit = []
    if trainer is not None or all(c.accuracy is not None for c in C):
        for c in C:
            acc_of(c)
    if acc_thr <= 0:
        return C, audit, accs

    def score(sel):
        vals = [acc_of(c) for c in sel]
        return float(np.mean(vals)) if criterion == "average" else min(vals)

    tried = {c.key for c in C}
    while score(C) < acc_thr:
        lowest = min(C, key=lambda c: (acc_of(c), -c.flops))
        low_acc = acc_of(lowest)
        replaced = False
        for cand in S:
            if cand.key in tried:
                continue
            trial = [cand if c is lowest else c for c in C]
            if not _covers(trial, N):
                continue
            tried.add(cand.key)
            if acc_of(cand) > low_acc:
                before = score(C)
                C = trial
                audit.append({"stage": 2, "removed": _cand_json(lowest), "added": _cand_json(cand),
                              "acc_removed": low_acc, "acc_added": accs[cand.key],
                              "score_before": before, "score_after": score(C)})
                replaced = True
                break
        if not replaced:
            raise ExhaustedCandidates(
                f"accuracy {score(C):.4f} below {acc_thr} and no candidate improves it")
    return C, audit, accs


def greedy_select(candidates, n: int, N: int, acc_thr: float = 0.0, trainer=None, *, seed: int = 0,
                  criterion: str = "average", max_draws: int = 1000, initial=None) -> SelectionResult:
    """GreeComp followed by AccuComp."""
    C, init, audit1 = greecomp(candidates, n, N, seed=seed, max_draws=max_draws, initial=initial)
    C, audit2, accs = accucomp(C, candidates, N, acc_thr, trainer, criterion)
    return SelectionResult(selected=C, initial=init, audit=audit1 + audit2, accuracies=accs)


def topk_frequent(trace, k: int) -> list:
    """The ``k`` most frequent contexts of a trace; ties go to the earlier first occurrence."""
    trace = [tuple(c) for c in trace]
    if not trace:
        raise EmptyTrace("trace has no contexts")
    counts = Counter(trace)
    first = {}
    for i, c in enumerate(trace):
        first.setdefault(c, i)
    ranked = sorted(counts, key=lambda c: (-counts[c], first[c]))
    return ranked[:max(k, 0)]


@dataclass(frozen=True)
class StorageModel:
    """Bytes needed on the device: one extractor per config plus head pairs."""

    extractor_bytes: dict
    embedding_dim: dict
    bytes_per_weight: dict
    hidden_dim: int = 64
    all_class_bytes: int = 0

    @classmethod
    def from_manifest(cls, manifest, hidden_dim: int = 64, all_class_bytes: int | None = None):
        ext = {c.id: c.extractor_bytes for c in manifest.configs}
        dims = {c.id: c.embedding_dim for c in manifest.configs}
        bpw = {c.id: c.param_bytes_per_weight for c in manifest.configs}
        if all_class_bytes is None:
            ref = manifest.reference
            all_class_bytes = ref.extractor_bytes + head_param_count(
                ref.embedding_dim, hidden_dim, manifest.n_classes) * ref.param_bytes_per_weight
        return cls(ext, dims, bpw, hidden_dim, int(all_class_bytes))

    def head_bytes(self, combo, config_id: str) -> int:
        return head_param_count(self.embedding_dim[config_id], self.hidden_dim, len(combo)) \
            * self.bytes_per_weight[config_id]


def _key_of(item):
    if isinstance(item, Candidate):
        return item.key
    combo, cid = item
    return (tuple(combo), cid)


def storage_footprint(selected, storage: StorageModel, mode: str = "cloud") -> int:
    if mode not in ("cloud", "unattended", "local"):
        raise SchemaViolation("mode", "expected 'cloud' or 'unattended'")
    total = sum(storage.extractor_bytes.values())
    for combo, cid in {_key_of(s) for s in selected}:
        total += storage.head_bytes(combo, cid)
    if mode != "cloud":
        total += storage.all_class_bytes
    return int(total)


def build_candidates(dataset, combos, predictor, ccr: float, hyper, *, f_full: float | None = None,
                     estimate_rates: bool = True, split: str = "val", similarity=None):
    """Candidates for selection: kNN-predicted config, expected FLOPs, accuracy.

    With ``estimate_rates`` each candidate's heads are trained once to measure
    FP/FN on ``split``; otherwise both rates are taken as 0.
    """
    from .heads import evaluate_fpfn, train_heads
    from .similarity import context_representation, similarity_matrix

    S = similarity if similarity is not None else similarity_matrix(dataset)
    manifest = dataset.manifest
    full = manifest.reference.flops_m if f_full is None else f_full
    if not dataset.has_split(split):
        split = "test"
    out = []
    for combo in combos:
        combo = tuple(sorted(combo))
        cid = predictor.predict(context_representation(S, combo))
        f_i = manifest.config(cid).flops_m
        fpr = fnr = 0.0
        acc = None
        if estimate_rates:
            clf = train_heads(dataset, cid, combo, hyper, val_split=split)
            fpr, fnr = evaluate_fpfn(clf, dataset, split)
            acc = clf.val_accuracy
        out.append(Candidate(combo, cid, expected_flops(f_i, full, ccr, fpr, fnr), acc))
    return _sort_candidates(out)


def _cand_json(c: Candidate) -> dict:
    return {"combo": list(c.combo), "config": c.config_id, "flops": c.flops}


def write_selection(result: SelectionResult, storage: StorageModel, path, *, mode: str = "unattended",
                    class_names=None) -> dict:
    doc = {
        "contexts": [
            {
                "combo": list(c.combo),
                "classes": [class_names[i] for i in c.combo] if class_names else None,
                "config": c.config_id,
                "expected_flops": c.flops,
                "accuracy": result.accuracies.get(c.key, c.accuracy),
                "head_bytes": storage.head_bytes(c.combo, c.config_id),
            }
            for c in result.selected
        ],
        "avg_expected_flops": result.avg_flops,
        "avg_accuracy": result.avg_accuracy,
        "storage_bytes": storage_footprint(result.selected, storage, mode),
        "mode": mode,
        "audit": result.audit,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc
