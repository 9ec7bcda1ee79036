"""Pairwise class similarity and context representations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataset import EmbeddingDataset, class_representation
from .errors import ComboTooSmall, DuplicateClassInCombo, EmptyRow, ZeroVector

__all__ = [
    "SimilarityMatrix",
    "ContextRepresentation",
    "cosine_similarity",
    "similarity_matrix",
    "context_representation",
    "minmax_representation",
    "normalize_similarities",
    "confusion_similarity",
    "confusion_similarity_matrix",
    "write_similarity_csv",
]


@dataclass(frozen=True)
class SimilarityMatrix:
    config_id: str
    values: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, ij):
        return float(self.values[ij])


@dataclass(frozen=True)
class ContextRepresentation:
    combo: tuple
    mean_sim: float
    std_sim: float

    @property
    def features(self) -> tuple:
        return (self.mean_sim, self.std_sim)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(min(1.0, max(-1.0, float(u @ v) / (nu * nv))))


def similarity_matrix(dataset: EmbeddingDataset, config_id: str | None = None) -> SimilarityMatrix:
    """Cosine similarities between class-mean embeddings.

    Uses the manifest's reference config (highest FLOPs unless overridden)
    when ``config_id`` is None.
    """
    if config_id is None:
        config_id = dataset.manifest.reference.id
    n = dataset.n_classes
    reps = [class_representation(dataset, config_id, c).vector for c in range(n)]
    for i in range(n):
        if np.linalg.norm(reps[i]) == 0:
            raise ZeroVector(f"class {i} has a zero mean embedding")
    S = np.eye(n)
    for i, j in combinations(range(n), 2):
        S[i, j] = S[j, i] = cosine_similarity(reps[i], reps[j])
    S.flags.writeable = False
    return SimilarityMatrix(config_id, S)


def _pair_values(S: SimilarityMatrix, combo) -> tuple:
    combo = [int(c) for c in combo]
    if len(combo) < 2:
        raise ComboTooSmall(f"combo {combo} has fewer than two classes")
    if len(set(combo)) != len(combo):
        raise DuplicateClassInCombo(f"combo {combo} repeats a class")
    combo = tuple(sorted(combo))
    return combo, [S.values[i, j] for i, j in combinations(combo, 2)]


def context_representation(S: SimilarityMatrix, combo) -> ContextRepresentation:
    """Mean and population standard deviation of the combo's pairwise similarities."""
    combo, vals = _pair_values(S, combo)
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return ContextRepresentation(combo, mean, math.sqrt(var))


def minmax_representation(S: SimilarityMatrix, combo) -> tuple:
    _, vals = _pair_values(S, combo)
    return (float(max(vals)), float(min(vals)))


def normalize_similarities(values) -> list:
    """Min-max scale to [0, 1]; a constant list maps to zeros."""
    vals = [float(v) for v in values]
    lo, hi = min(vals), max(vals)
    if hi == lo:
        return [0.0] * len(vals)
    return [(v - lo) / (hi - lo) for v in vals]


def confusion_similarity(confusion, i: int, j: int) -> float:
    """Symmetric misclassification rate between classes ``i`` and ``j``.

    ``confusion[a][b]`` counts samples of true class ``a`` predicted as ``b``.
    """
    C = np.asarray(confusion, dtype=np.float64)
    ni, nj = C[i].sum(), C[j].sum()
    if ni <= 0 or nj <= 0:
        raise EmptyRow(f"class {i if ni <= 0 else j} has no samples in the confusion matrix")
    return float((C[i, j] + C[j, i]) / (ni + nj))


def confusion_similarity_matrix(confusion) -> SimilarityMatrix:
    C = np.asarray(confusion, dtype=np.float64)
    n = C.shape[0]
    S = np.eye(n)
    for i, j in combinations(range(n), 2):
        S[i, j] = S[j, i] = confusion_similarity(C, i, j)
    return SimilarityMatrix("confusion", S)


def write_similarity_csv(S: SimilarityMatrix, class_names, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + list(class_names))
        for name, row in zip(class_names, S.values):
            w.writerow([name] + [repr(float(v)) for v in row])
