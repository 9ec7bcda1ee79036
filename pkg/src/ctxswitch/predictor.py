"""kNN configuration predictor.

Each training point is a class combination described by the mean and
standard deviation of its pairwise class similarities and labelled with its
oracle configuration: the cheapest configuration whose trained
micro-classifier reaches the target validation accuracy.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataset import EmbeddingDataset
from .errors import BadM, EmptyTrainingSet, PredictorError, SchemaViolation
from .heads import HeadHyperparams, evaluate_accuracy, train_heads
from .similarity import ContextRepresentation, SimilarityMatrix, context_representation

__all__ = [
    "TrainingPoint",
    "ConfigPredictor",
    "OracleResult",
    "enumerate_combinations",
    "select_config",
    "oracle_config",
    "accuracy_table",
    "quartile_groups",
    "sd_sample",
    "random_sample",
    "build_predictor",
    "predict_config",
    "save_predictor",
    "load_predictor",
]


@dataclass(frozen=True)
class TrainingPoint:
    combo: tuple
    representation: tuple
    best_config: str


@dataclass(frozen=True)
class OracleResult:
    config_id: str
    accuracies: dict
    unmet: bool = False


@dataclass
class ConfigPredictor:
    points: list
    acc_thr: float
    k_start: int = 3
    m: int | None = None
    normalize: bool = False
    vote: str = "plurality"
    _feat: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.acc_thr < 1:
            raise SchemaViolation("acc_thr", "must be in (0, 1)")
        if self.vote not in ("plurality", "strict"):
            raise SchemaViolation("vote", "expected 'plurality' or 'strict'")
        self.points = sorted(self.points, key=lambda p: p.combo)
        self._feat = np.array([p.representation for p in self.points], dtype=np.float64).reshape(-1, 2)

    def _scaled(self, feats):
        if not self.normalize or len(self._feat) < 2:
            return feats
        mu = self._feat.mean(axis=0)
        sd = self._feat.std(axis=0)
        sd[sd == 0] = 1.0
        return (feats - mu) / sd

    def neighbours(self, representation) -> list:
        """Training points ordered by distance, ties by combo."""
        if not self.points:
            raise EmptyTrainingSet("predictor has no training points")
        q = np.asarray(_features(representation), dtype=np.float64)[None, :]
        dist = np.linalg.norm(self._scaled(self._feat) - self._scaled(q), axis=1)
        order = sorted(range(len(self.points)), key=lambda i: (dist[i], self.points[i].combo))
        return [self.points[i] for i in order]

    def predict(self, representation) -> str:
        return predict_config(self, representation)


def _features(rep):
    if isinstance(rep, ContextRepresentation):
        return rep.features
    mean, std = rep
    return (float(mean), float(std))


def enumerate_combinations(N: int, m: int) -> list:
    if not 2 <= m <= N:
        raise BadM(f"need 2 <= m <= N, got m={m}, N={N}")
    return list(combinations(range(N), m))


def select_config(accuracies: dict, config_order, acc_thr: float) -> tuple:
    """Cheapest config meeting ``acc_thr``; else the most accurate, flagged unmet.

    ``config_order`` lists config ids from cheapest to most expensive.
    """
    for cid in config_order:
        if accuracies[cid] >= acc_thr:
            return cid, False
    best = max(config_order, key=lambda c: accuracies[c])  # first max = cheapest on ties
    return best, True


def _sorted_configs(dataset, configs):
    if configs is None:
        return [c.id for c in dataset.manifest.configs_by_flops()]
    ids = [c if isinstance(c, str) else c.id for c in configs]
    flops = [dataset.manifest.config(c).flops_m for c in ids]
    if any(a > b for a, b in zip(flops, flops[1:])):
        raise SchemaViolation("configs", "must be sorted ascending by flops_m")
    return ids


def oracle_config(dataset: EmbeddingDataset, combo, configs=None, acc_thr: float = 0.9,
                  hyper: HeadHyperparams = HeadHyperparams(), val_split: str = "val") -> OracleResult:
    """Train one micro-classifier per config and pick the cheapest that qualifies."""
    order = _sorted_configs(dataset, configs)
    split = val_split if dataset.has_split(val_split) else "test"
    accs = {}
    for cid in order:
        clf = train_heads(dataset, cid, combo, hyper, val_split=split)
        accs[cid] = clf.val_accuracy
    cid, unmet = select_config(accs, order, acc_thr)
    return OracleResult(cid, accs, unmet)


def _table_row(args):
    dataset, combo, cid, hyper, splits = args
    clf = train_heads(dataset, cid, combo, hyper, val_split=splits[0])
    return {s: evaluate_accuracy(clf, dataset, s) for s in splits}


def accuracy_table(dataset: EmbeddingDataset, combos, configs=None,
                   hyper: HeadHyperparams = HeadHyperparams(),
                   splits=("val", "test"), jobs: int = 1) -> dict:
    """Accuracy of every (combo, config) pair on each split.

    Returns ``{(combo, config_id): {split: accuracy}}``; this is the
    brute-force oracle that the predictor approximates.
    """
    order = _sorted_configs(dataset, configs)
    splits = tuple(s for s in splits if dataset.has_split(s)) or ("test",)
    tasks = [(dataset, tuple(sorted(c)), cid, hyper, splits) for c in combos for cid in order]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_table_row, tasks, chunksize=4))
    else:
        rows = [_table_row(t) for t in tasks]
    return {(t[1], t[2]): r for t, r in zip(tasks, rows)}


def quartile_groups(combos, S: SimilarityMatrix) -> list:
    """Split combos into four groups at the 25/50/75th percentiles of mean similarity."""
    combos = [tuple(sorted(c)) for c in combos]
    means = np.array([context_representation(S, c).mean_sim for c in combos])
    if len(combos) == 0:
        return [[], [], [], []]
    q1, q2, q3 = np.percentile(means, [25, 50, 75])
    bucket = np.where(means <= q1, 0, np.where(means <= q2, 1, np.where(means <= q3, 2, 3)))
    return [[c for c, b in zip(combos, bucket) if b == g] for g in range(4)]


def sd_sample(combos, S: SimilarityMatrix, fraction: float, seed: int) -> list:
    """Similarity-directed sample: ``ceil(fraction * |group|)`` from each quartile group."""
    if not 0 < fraction <= 1:
        raise SchemaViolation("fraction", "must be in (0, 1]")
    rng = np.random.default_rng(seed)
    picked = []
    for group in quartile_groups(combos, S):
        if not group:
            continue
        k = math.ceil(fraction * len(group))
        idx = rng.choice(len(group), size=k, replace=False)
        picked.extend(group[i] for i in sorted(idx))
    return sorted(set(picked))


def random_sample(combos, count: int, seed: int) -> list:
    combos = sorted({tuple(sorted(c)) for c in combos})
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(combos), size=min(count, len(combos)), replace=False)
    return sorted(combos[i] for i in idx)


def build_predictor(dataset: EmbeddingDataset, sampled, configs=None, acc_thr: float = 0.9,
                    hyper: HeadHyperparams = HeadHyperparams(), *, S: SimilarityMatrix | None = None,
                    table: dict | None = None, k_start: int = 3, normalize: bool = False,
                    vote: str = "plurality", val_split: str = "val") -> ConfigPredictor:
    """Label each sampled combo with its oracle config and store it as a kNN point.

    ``table`` (as returned by :func:`accuracy_table`) short-circuits training.
    """
    from .similarity import similarity_matrix

    combos = sorted({tuple(sorted(int(x) for x in c)) for c in sampled})
    if not combos:
        raise EmptyTrainingSet("no sampled combinations")
    sizes = {len(c) for c in combos}
    if len(sizes) != 1:
        raise PredictorError(f"mixed combo sizes {sorted(sizes)}")
    order = _sorted_configs(dataset, configs)
    if S is None:
        S = similarity_matrix(dataset)
    split = val_split if dataset.has_split(val_split) else "test"
    points = []
    for combo in combos:
        if table is not None:
            accs = {cid: table[(combo, cid)][split] for cid in order}
            best, _ = select_config(accs, order, acc_thr)
        else:
            best = oracle_config(dataset, combo, order, acc_thr, hyper, val_split=split).config_id
        rep = context_representation(S, combo)
        points.append(TrainingPoint(combo, rep.features, best))
    return ConfigPredictor(points, acc_thr, k_start=k_start, m=sizes.pop(),
                           normalize=normalize, vote=vote)


def predict_config(predictor: ConfigPredictor, representation) -> str:
    """Expanding-k majority vote.

    Starting at ``k_start`` neighbours, return the winning config as soon as
    one exists, otherwise grow k by one. In ``plurality`` mode a winner is a
    unique most common label; in ``strict`` mode it must hold more than half
    the votes. If every point is used without a winner, the nearest point's
    label is returned.
    """
    ranked = predictor.neighbours(representation)
    n = len(ranked)
    for k in range(min(predictor.k_start, n), n + 1):
        counts = Counter(p.best_config for p in ranked[:k]).most_common()
        top, top_n = counts[0]
        if predictor.vote == "strict":
            if top_n * 2 > k:
                return top
        elif len(counts) == 1 or counts[1][1] < top_n:
            return top
    return ranked[0].best_config


def save_predictor(predictor: ConfigPredictor, path) -> None:
    doc = {
        "m": predictor.m,
        "acc_thr": predictor.acc_thr,
        "k_start": predictor.k_start,
        "normalize": predictor.normalize,
        "vote": predictor.vote,
        "points": [
            {"combo": list(p.combo), "mean": p.representation[0],
             "std": p.representation[1], "config": p.best_config}
            for p in predictor.points
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_predictor(path) -> ConfigPredictor:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        points = [TrainingPoint(tuple(p["combo"]), (float(p["mean"]), float(p["std"])), p["config"])
                  for p in doc["points"]]
        return ConfigPredictor(points, float(doc["acc_thr"]), k_start=int(doc.get("k_start", 3)),
                               m=doc.get("m"), normalize=bool(doc.get("normalize", False)),
                               vote=doc.get("vote", "plurality"))
    except (KeyError, TypeError) as exc:
        raise SchemaViolation(str(path), f"malformed predictor file: {exc}") from None
