import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctxswitch.dataset import embedding_header, synthesize_gaussian_dataset

settings.register_profile(
    "ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")


def equidistant(n, dist):
    D = np.full((n, n), float(dist))
    np.fill_diagonal(D, 0.0)
    return D


@pytest.fixture(scope="session")
def separable_ds():
    """Four far-apart tight clusters, two noiseless configs."""
    return synthesize_gaussian_dataset(
        4, 8, 0.1, equidistant(4, 10.0), 30, [(50.0, 0.0), (200.0, 0.0)], seed=0
    )


@pytest.fixture(scope="session")
def five_class_ds():
    """Five separable classes with a cheap and an expensive config."""
    return synthesize_gaussian_dataset(
        5, 8, 0.1, equidistant(5, 10.0), 30, [(50.0, 0.0), (400.0, 0.0)], seed=1
    )


def write_manifest_dir(root: Path, classes=("a", "b", "c"), dim=3, rows=None, configs=("c0", "c1"),
                       splits=None, manifest_extra=None):
    """Write a hand-made dataset; ``rows[split]`` is a list of (sid, class, values)."""
    if rows is None:
        rows = {
            "train": [("t0", 0, [1.0, 0.0, 0.0]), ("t1", 1, [0.0, 1.0, 0.0]),
                      ("t2", 2, [0.0, 0.0, 1.0]), ("t3", 0, [3.0, 0.0, 0.0])],
            "test": [("u0", 0, [1.0, 0.1, 0.0]), ("u1", 1, [0.0, 1.0, 0.1])],
        }
    if splits is None:
        splits = {s: [r[0] for r in rs] for s, rs in rows.items()}
    manifest = {
        "dataset_name": "toy",
        "classes": list(classes),
        "configs": [
            {"id": cid, "pruning_pct": 10 * k, "resolution": 224, "flops_m": 100.0 * (k + 1),
             "embedding_dim": dim, "device_latency_ms": {"pi0": 10.0 * (k + 1)}}
            for k, cid in enumerate(configs)
        ],
        "splits": splits,
    }
    manifest.update(manifest_extra or {})
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    for cid in configs:
        for split, rs in rows.items():
            f = root / "embeddings" / cid / f"{split}.csv"
            f.parent.mkdir(parents=True, exist_ok=True)
            lines = [",".join(embedding_header(dim))]
            for sid, ci, vals in rs:
                lines.append(",".join([sid, str(ci), "-1"] + [str(v) for v in vals]))
            f.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root / "manifest.json"


def single_matrix_ds(X, labels, n_classes=None, config="c0"):
    """In-memory dataset with one config and only a train split filled in."""
    from ctxswitch.dataset import ConfigDescriptor, EmbeddingDataset, Manifest, _freeze_matrix

    n = len(labels)
    n_classes = max(labels) + 1 if n_classes is None else n_classes
    ids = [f"x{i}" for i in range(n)]
    X = np.asarray(X, dtype=float)
    cfg = ConfigDescriptor(config, 0, 224, 1.0, X.shape[1])
    m = Manifest("t", tuple(f"k{i}" for i in range(max(n_classes, 2))), (cfg,),
                 {"train": tuple(ids), "test": ("y",)})
    mats = {(config, "train"): _freeze_matrix(ids, labels, [-1] * n, X)}
    return EmbeddingDataset(m, mats)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Print and collect one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").split("(")[0] or 0)):
            terminalreporter.write_line(line)
