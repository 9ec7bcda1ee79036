"""Embedding datasets standing in for frozen feature extractors.

On disk a dataset is a directory::

    manifest.json
    embeddings/<config_id>/<split>.csv

Each CSV has the header ``sample_id,class_index,seq_index,e0,...,e{d-1}``;
floats are written with Python's shortest round-trip representation so that
loading and re-writing a canonical file reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateClass,
    EmptyClass,
    EmptySplit,
    InfeasibleGeometry,
    MissingFile,
    NonFiniteValue,
    SchemaViolation,
    UnknownClassIndex,
)

__all__ = [
    "ConfigDescriptor",
    "Manifest",
    "EmbeddingMatrix",
    "EmbeddingDataset",
    "ClassRepresentation",
    "load_manifest",
    "load_embeddings",
    "load_dataset",
    "write_embeddings",
    "write_dataset",
    "class_representation",
    "synthesize_gaussian_dataset",
    "embedding_header",
    "graded_center_distances",
]

REQUIRED_SPLITS = ("train", "test")


@dataclass(frozen=True)
class ConfigDescriptor:
    id: str
    pruning_pct: int
    resolution: int
    flops_m: float
    embedding_dim: int
    device_latency_ms: dict = field(default_factory=dict)
    param_bytes_per_weight: int = 4
    extractor_bytes: int = 0

    def latency_ms(self, device: str) -> float:
        try:
            return self.device_latency_ms[device]
        except KeyError:
            raise SchemaViolation(
                f"configs[{self.id}].device_latency_ms", f"no entry for device {device!r}"
            ) from None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "pruning_pct": self.pruning_pct,
            "resolution": self.resolution,
            "flops_m": self.flops_m,
            "embedding_dim": self.embedding_dim,
            "device_latency_ms": dict(self.device_latency_ms),
            "param_bytes_per_weight": self.param_bytes_per_weight,
            "extractor_bytes": self.extractor_bytes,
        }


@dataclass(frozen=True)
class Manifest:
    dataset_name: str
    classes: tuple
    configs: tuple
    splits: dict
    notes: str = ""
    reference_config: str | None = None
    root: Path | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def config(self, config_id: str) -> ConfigDescriptor:
        for c in self.configs:
            if c.id == config_id:
                return c
        raise SchemaViolation("configs", f"unknown config id {config_id!r}")

    def configs_by_flops(self) -> list:
        """Configs sorted ascending by FLOPs (ties keep manifest order)."""
        return sorted(self.configs, key=lambda c: c.flops_m)

    @property
    def reference(self) -> ConfigDescriptor:
        if self.reference_config is not None:
            return self.config(self.reference_config)
        return max(self.configs, key=lambda c: c.flops_m)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise UnknownClassIndex(f"unknown class name {name!r}") from None

    def embedding_path(self, config_id: str, split: str) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / "embeddings" / config_id / f"{split}.csv"

    def to_dict(self) -> dict:
        out = {
            "dataset_name": self.dataset_name,
            "classes": list(self.classes),
            "configs": [c.to_dict() for c in self.configs],
            "splits": {k: list(v) for k, v in self.splits.items()},
            "notes": self.notes,
        }
        if self.reference_config is not None:
            out["reference_config"] = self.reference_config
        return out


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Rows of one (config, split) file, in file order."""

    sample_ids: tuple
    labels: np.ndarray
    seq_index: np.ndarray
    X: np.ndarray

    def __len__(self):
        return len(self.sample_ids)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def rows_of(self, classes) -> np.ndarray:
        """Boolean mask of rows whose label is in ``classes``."""
        return np.isin(self.labels, np.asarray(list(classes), dtype=np.int64))


@dataclass(frozen=True)
class ClassRepresentation:
    config_id: str
    class_index: int
    vector: np.ndarray
    sample_count: int


class EmbeddingDataset:
    """A manifest plus every (config, split) embedding matrix, immutable."""

    def __init__(self, manifest: Manifest, matrices: dict):
        self.manifest = manifest
        self._matrices = dict(matrices)
        self._index = {}

    def matrix(self, config_id: str, split: str) -> EmbeddingMatrix:
        try:
            return self._matrices[(config_id, split)]
        except KeyError:
            if split not in self.manifest.splits:
                raise EmptySplit(f"split {split!r} not in manifest") from None
            raise SchemaViolation("configs", f"unknown config id {config_id!r}") from None

    def has_split(self, split: str) -> bool:
        return split in self.manifest.splits and len(self.manifest.splits[split]) > 0

    def row_index(self, config_id: str, split: str) -> dict:
        """Mapping sample_id -> row number for one matrix (cached)."""
        key = (config_id, split)
        if key not in self._index:
            mat = self.matrix(config_id, split)
            self._index[key] = {sid: i for i, sid in enumerate(mat.sample_ids)}
        return self._index[key]

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    def items(self):
        return self._matrices.items()


def embedding_header(dim: int) -> list:
    return ["sample_id", "class_index", "seq_index"] + [f"e{k}" for k in range(dim)]


def _require(obj, key, kind, where):
    if key not in obj:
        raise SchemaViolation(f"{where}{key}", "missing")
    val = obj[key]
    if kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind) and not (kind is int and isinstance(val, bool))
    if not ok:
        raise SchemaViolation(f"{where}{key}", f"expected {kind.__name__}")
    return val


def _parse_config(raw, i) -> ConfigDescriptor:
    where = f"configs[{i}]."
    if not isinstance(raw, dict):
        raise SchemaViolation(f"configs[{i}]", "expected object")
    cid = _require(raw, "id", str, where)
    pruning = _require(raw, "pruning_pct", int, where)
    if not 0 <= pruning <= 99:
        raise SchemaViolation(where + "pruning_pct", "must be in 0..99")
    resolution = _require(raw, "resolution", int, where)
    if resolution <= 0:
        raise SchemaViolation(where + "resolution", "must be positive")
    flops = float(_require(raw, "flops_m", float, where))
    if not flops > 0:
        raise SchemaViolation(where + "flops_m", "must be positive")
    dim = _require(raw, "embedding_dim", int, where)
    if dim <= 0:
        raise SchemaViolation(where + "embedding_dim", "must be positive")
    lat = raw.get("device_latency_ms", {})
    if not isinstance(lat, dict):
        raise SchemaViolation(where + "device_latency_ms", "expected object")
    for dev, ms in lat.items():
        if not isinstance(ms, (int, float)) or isinstance(ms, bool) or not ms > 0:
            raise SchemaViolation(where + f"device_latency_ms.{dev}", "must be positive")
    bpw = raw.get("param_bytes_per_weight", 4)
    if not isinstance(bpw, int) or bpw <= 0:
        raise SchemaViolation(where + "param_bytes_per_weight", "must be a positive integer")
    ext = raw.get("extractor_bytes", 0)
    if not isinstance(ext, int) or ext < 0:
        raise SchemaViolation(where + "extractor_bytes", "must be a non-negative integer")
    return ConfigDescriptor(
        id=cid,
        pruning_pct=pruning,
        resolution=resolution,
        flops_m=flops,
        embedding_dim=dim,
        device_latency_ms={k: float(v) for k, v in lat.items()},
        param_bytes_per_weight=bpw,
        extractor_bytes=ext,
    )


def manifest_from_dict(raw: dict, root: Path | None = None) -> Manifest:
    if not isinstance(raw, dict):
        raise SchemaViolation("manifest", "expected a JSON object")
    name = _require(raw, "dataset_name", str, "")
    classes = _require(raw, "classes", list, "")
    if not all(isinstance(c, str) for c in classes):
        raise SchemaViolation("classes", "class names must be strings")
    if len(classes) < 2:
        raise SchemaViolation("classes", "need at least two classes")
    seen = set()
    for c in classes:
        if c in seen:
            raise DuplicateClass(f"duplicate class name {c!r}")
        seen.add(c)
    raw_configs = _require(raw, "configs", list, "")
    if not raw_configs:
        raise SchemaViolation("configs", "need at least one config")
    configs = tuple(_parse_config(c, i) for i, c in enumerate(raw_configs))
    ids = [c.id for c in configs]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("configs", "config ids must be unique")
    splits_raw = _require(raw, "splits", dict, "")
    splits = {}
    owner = {}
    for sname, ids_ in splits_raw.items():
        if not isinstance(ids_, list) or not all(isinstance(s, str) for s in ids_):
            raise SchemaViolation(f"splits.{sname}", "expected a list of sample ids")
        for sid in ids_:
            if sid in owner:
                raise SchemaViolation(
                    f"splits.{sname}", f"sample {sid!r} also in split {owner[sid]!r}"
                )
            owner[sid] = sname
        splits[sname] = tuple(ids_)
    for req in REQUIRED_SPLITS:
        if not splits.get(req):
            raise EmptySplit(f"split {req!r} missing or empty")
    ref = raw.get("reference_config")
    if ref is not None and ref not in ids:
        raise SchemaViolation("reference_config", f"unknown config id {ref!r}")
    notes = raw.get("notes", "")
    if not isinstance(notes, str):
        raise SchemaViolation("notes", "expected string")
    return Manifest(
        dataset_name=name,
        classes=tuple(classes),
        configs=configs,
        splits=splits,
        notes=notes,
        reference_config=ref,
        root=root,
    )


def load_manifest(path) -> Manifest:
    """Parse and validate ``manifest.json``, checking every embedding file header."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation("manifest", f"invalid JSON: {exc.msg}") from None
    manifest = manifest_from_dict(raw, root=path.parent)
    for cfg in manifest.configs:
        expected = ",".join(embedding_header(cfg.embedding_dim))
        for split in manifest.splits:
            f = manifest.embedding_path(cfg.id, split)
            if not f.is_file():
                raise MissingFile(str(f))
            with f.open("r", encoding="utf-8", newline="") as fh:
                header = fh.readline().rstrip("\r\n")
            if header != expected:
                ncols = len(header.split(","))
                if header.startswith("sample_id,class_index,seq_index,") and ncols - 3 != cfg.embedding_dim:
                    raise DimensionMismatch(
                        f"{f}: header has {ncols - 3} embedding columns, config declares {cfg.embedding_dim}"
                    )
                raise SchemaViolation(str(f), "malformed header")
    return manifest


def _parse_float(text, where):
    try:
        val = float(text)
    except ValueError:
        raise SchemaViolation(where, f"not a number: {text!r}") from None
    if not math.isfinite(val):
        raise NonFiniteValue(f"{where}: {text!r}")
    return val


def load_embeddings(manifest: Manifest, config_id: str, split: str) -> EmbeddingMatrix:
    """Read one embedding CSV, validating dimensions, labels and finiteness."""
    cfg = manifest.config(config_id)
    if split not in manifest.splits:
        raise EmptySplit(f"split {split!r} not in manifest")
    path = manifest.embedding_path(config_id, split)
    if not path.is_file():
        raise MissingFile(str(path))
    d = cfg.embedding_dim
    n_classes = manifest.n_classes
    ids, labels, seqs, rows = [], [], [], []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaViolation(str(path), "empty file")
        if len(header) - 3 != d:
            raise DimensionMismatch(f"{path}: header has {len(header) - 3} columns, expected {d}")
        for lineno, rec in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(rec) - 3 != d:
                raise DimensionMismatch(f"{where}: {len(rec) - 3} values, expected {d}")
            try:
                ci = int(rec[1])
                si = int(rec[2])
            except ValueError:
                raise SchemaViolation(where, "class_index/seq_index must be integers") from None
            if not 0 <= ci < n_classes:
                raise UnknownClassIndex(f"{where}: class_index {ci}")
            ids.append(rec[0])
            labels.append(ci)
            seqs.append(si)
            rows.append([_parse_float(v, where) for v in rec[3:]])
    expected_ids = manifest.splits[split]
    if len(ids) != len(expected_ids) or set(ids) != set(expected_ids):
        raise SchemaViolation(
            f"splits.{split}", f"{path} rows do not match the split's sample ids"
        )
    return _freeze_matrix(ids, labels, seqs, np.array(rows, dtype=np.float64).reshape(len(ids), d))


def _freeze_matrix(ids, labels, seqs, X) -> EmbeddingMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    seqs = np.asarray(seqs, dtype=np.int64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    for a in (labels, seqs, X):
        a.flags.writeable = False
    return EmbeddingMatrix(tuple(ids), labels, seqs, X)


def load_dataset(path) -> EmbeddingDataset:
    """Load a manifest (file or containing directory) and all its matrices."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = load_manifest(path)
    mats = {}
    for cfg in manifest.configs:
        for split in manifest.splits:
            mats[(cfg.id, split)] = load_embeddings(manifest, cfg.id, split)
    return EmbeddingDataset(manifest, mats)


def format_embeddings(mat: EmbeddingMatrix) -> str:
    buf = io.StringIO()
    buf.write(",".join(embedding_header(mat.dim)) + "\n")
    for sid, ci, si, row in zip(mat.sample_ids, mat.labels, mat.seq_index, mat.X):
        buf.write(f"{sid},{int(ci)},{int(si)},")
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def write_embeddings(mat: EmbeddingMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_embeddings(mat))


def write_dataset(dataset: EmbeddingDataset, out_dir) -> Path:
    """Write manifest.json and every embedding CSV under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(dataset.manifest.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    for (cid, split), mat in sorted(dataset.items()):
        write_embeddings(mat, out_dir / "embeddings" / cid / f"{split}.csv")
    return manifest_path


def class_representation(dataset: EmbeddingDataset, config_id: str, class_index: int) -> ClassRepresentation:
    """Mean train-split embedding of one class.

    Components are summed with ``math.fsum`` so the result does not depend on
    the order of samples.
    """
    mat = dataset.matrix(config_id, "train")
    rows = mat.X[mat.labels == class_index]
    if len(rows) == 0:
        raise EmptyClass(f"class {class_index} has no train samples under {config_id}")
    n = len(rows)
    vec = np.array([math.fsum(col) / n for col in rows.T], dtype=np.float64)
    return ClassRepresentation(config_id, int(class_index), vec, n)


def _classical_mds(distances: np.ndarray, dim: int, rtol: float = 1e-9) -> np.ndarray:
    D = np.asarray(distances, dtype=np.float64)
    n = D.shape[0]
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    B = -0.5 * J @ (D**2) @ J
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(abs(evals[0]), 1.0)
    tol = rtol * scale
    if evals[-1] < -1e-6 * scale:
        raise InfeasibleGeometry("distance matrix is not Euclidean (negative eigenvalue)")
    rank = int(np.sum(evals > tol))
    if rank > dim:
        raise InfeasibleGeometry(f"distances need {rank} dimensions, only {dim} available")
    coords = np.zeros((n, dim))
    if rank:
        coords[:, :rank] = evecs[:, :rank] * np.sqrt(evals[:rank])
    return coords


def graded_center_distances(n_classes: int, seed: int, scale: float = 3.0, latent_dim: int = 4) -> np.ndarray:
    """Pairwise distances of random points in a ``latent_dim``-space.

    Gives a spread of near (hard) and far (easy) class pairs and is always
    embeddable in ``latent_dim`` dimensions.
    """
    rng = np.random.default_rng(seed)
    pts = scale * rng.standard_normal((n_classes, latent_dim))
    D = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    return (D + D.T) / 2


DEFAULT_MS_PER_MFLOP = {"pi0": 2.0, "gap8": 1.2}


def synthesize_gaussian_dataset(
    n_classes: int,
    dim: int,
    cluster_spread: float,
    center_distances,
    samples_per_class: int,
    configs,
    seed: int,
    *,
    split_fractions=(0.6, 0.2, 0.2),
    center_offset: float | None = None,
    ms_per_mflop: dict | None = None,
    name: str = "synthetic",
) -> EmbeddingDataset:
    """Gaussian clusters whose centers realise ``center_distances``.

    ``configs`` is a list of ``(flops_m, noise_scale)``. Every sample has one
    intrinsic draw shared by all configs; each config adds its own isotropic
    noise of scale ``noise_scale`` on top, so cheaper configs (larger noise)
    are less separable. Centers are shifted by ``center_offset`` along the
    all-ones direction (default: the largest requested distance) so that
    cosine similarity between class means tracks their distance.
    """
    if n_classes < 2:
        raise SchemaViolation("n_classes", "need at least two classes")
    D = np.asarray(center_distances, dtype=np.float64)
    if D.shape != (n_classes, n_classes):
        raise SchemaViolation("center_distances", f"expected {n_classes}x{n_classes}")
    if not np.allclose(D, D.T) or np.any(np.diag(D) != 0):
        raise SchemaViolation("center_distances", "must be symmetric with zero diagonal")
    if not configs:
        raise SchemaViolation("configs", "need at least one config")

    centers = _classical_mds(D, dim)
    offset = float(D.max()) if center_offset is None else float(center_offset)
    if offset == 0.0:
        offset = 1.0
    centers = centers + offset * np.ones(dim) / math.sqrt(dim)

    rng = np.random.default_rng(seed)
    fr = np.asarray(split_fractions, dtype=np.float64)
    names = ("train", "val", "test")[: len(fr)]
    counts = np.floor(fr / fr.sum() * samples_per_class).astype(int)
    counts[0] += samples_per_class - counts.sum()

    ids_by_split = {s: [] for s in names}
    labels_by_split = {s: [] for s in names}
    base_by_split = {s: [] for s in names}
    serial = 0
    for c in range(n_classes):
        base = centers[c] + cluster_spread * rng.standard_normal((samples_per_class, dim))
        start = 0
        for s, cnt in zip(names, counts):
            for k in range(cnt):
                ids_by_split[s].append(f"s{serial:06d}")
                serial += 1
                labels_by_split[s].append(c)
            base_by_split[s].append(base[start:start + cnt])
            start += cnt

    lat_rates = DEFAULT_MS_PER_MFLOP if ms_per_mflop is None else ms_per_mflop
    max_flops = max(f for f, _ in configs)
    descriptors = []
    mats = {}
    for k, (flops, noise) in enumerate(configs):
        cid = f"c{k}"
        descriptors.append(
            ConfigDescriptor(
                id=cid,
                pruning_pct=0,
                resolution=int(round(224 * math.sqrt(flops / max_flops))),
                flops_m=float(flops),
                embedding_dim=dim,
                device_latency_ms={dev: float(flops) * r for dev, r in lat_rates.items()},
                param_bytes_per_weight=4,
                extractor_bytes=int(round(flops * 10_000)),
            )
        )
        for s in names:
            base = np.concatenate(base_by_split[s]) if base_by_split[s] else np.zeros((0, dim))
            X = base + noise * rng.standard_normal(base.shape)
            seq = [-1] * len(base)
            mats[(cid, s)] = _freeze_matrix(ids_by_split[s], labels_by_split[s], seq, X)

    manifest = Manifest(
        dataset_name=name,
        classes=tuple(f"class{c:02d}" for c in range(n_classes)),
        configs=tuple(descriptors),
        splits={s: tuple(ids_by_split[s]) for s in names},
        notes=f"gaussian synthetic, seed={seed}",
    )
    return EmbeddingDataset(manifest, mats)
