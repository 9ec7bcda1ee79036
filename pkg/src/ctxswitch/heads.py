"""Two-head micro-classifiers trained on frozen embeddings.

A micro-classifier owns two independent two-layer perceptrons reading the
same embedding:

* a classification head, ``d -> H (ReLU) -> m`` logits with softmax, and
* a context-change head, ``d -> H (ReLU) -> 1`` with a sigmoid, trained to
  output 0 on the combo's classes and 1 on everything else.

Training minimises ``CE(in-combo rows) + BCE(all rows)`` with mini-batch SGD
and momentum. All randomness (Glorot-uniform init, negative sampling,
shuffling) comes from one ``numpy.random.default_rng(seed)`` (PCG64), so a
run is bit-for-bit reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import EmbeddingDataset
from .errors import (
    DimensionMismatch,
    EmptyClass,
    EmptySplit,
    HeadFormatError,
    NoNegativesAvailable,
    NotADistribution,
    SchemaViolation,
)

__all__ = [
    "HeadHyperparams",
    "MicroClassifier",
    "PredictionOutcome",
    "PARAM_ORDER",
    "head_param_count",
    "init_params",
    "loss_and_grads",
    "train_heads",
    "train_all_class",
    "predict",
    "predict_batch",
    "evaluate_accuracy",
    "evaluate_fpfn",
    "fpfn_from_scores",
    "maxprob_change_detector",
    "maxprob_fpfn",
    "confusion_matrix",
    "gradient_check",
    "make_batch",
    "save_heads",
    "load_heads",
    "head_filename",
]

PARAM_ORDER = ("cls_W1", "cls_b1", "cls_W2", "cls_b2", "reg_W1", "reg_b1", "reg_W2", "reg_b2")


@dataclass(frozen=True)
class HeadHyperparams:
    hidden_dim: int = 64
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    negative_ratio: float = 1.0
    seed: int = 42

    def __post_init__(self):
        for name in ("hidden_dim", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise SchemaViolation(name, "must be positive")
        if not self.learning_rate > 0:
            raise SchemaViolation("learning_rate", "must be positive")
        if not 0 <= self.momentum < 1:
            raise SchemaViolation("momentum", "must be in [0, 1)")
        if self.negative_ratio < 0:
            raise SchemaViolation("negative_ratio", "must be non-negative")


@dataclass(frozen=True)
class PredictionOutcome:
    class_probs: np.ndarray
    predicted_class: int
    change_score: float


@dataclass(frozen=True)
class MicroClassifier:
    config_id: str
    combo: tuple
    params: dict
    theta: float = 0.5
    train_accuracy: float | None = None
    val_accuracy: float | None = None
    seed: int | None = None
    loss_history: tuple = field(default=(), compare=False)

    @property
    def m(self) -> int:
        return len(self.combo)

    @property
    def embedding_dim(self) -> int:
        return self.params["cls_W1"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.params["cls_W1"].shape[1]

    @property
    def param_count(self) -> int:
        return sum(self.params[k].size for k in PARAM_ORDER)

    def predict(self, embedding) -> PredictionOutcome:
        return predict(self, embedding)


def head_param_count(d: int, hidden: int, m: int) -> int:
    """Parameters of one classification + change-detection head pair."""
    return 2 * (d * hidden + hidden) + (hidden * m + m) + (hidden + 1)


def init_params(d: int, hidden: int, m: int, rng: np.random.Generator) -> dict:
    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    return {
        "cls_W1": glorot(d, hidden),
        "cls_b1": np.zeros(hidden),
        "cls_W2": glorot(hidden, m),
        "cls_b2": np.zeros(m),
        "reg_W1": glorot(d, hidden),
        "reg_b1": np.zeros(hidden),
        "reg_W2": glorot(hidden, 1),
        "reg_b2": np.zeros(1),
    }


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(params, X):
    hc = X @ params["cls_W1"] + params["cls_b1"]
    logits = np.maximum(hc, 0.0) @ params["cls_W2"] + params["cls_b2"]
    hr = X @ params["reg_W1"] + params["reg_b1"]
    z = (np.maximum(hr, 0.0) @ params["reg_W2"] + params["reg_b2"])[:, 0]
    return logits, z


def loss_and_grads(params: dict, X, y, t, need_grads: bool = True):
    """Joint loss and its gradient.

    ``y`` holds the combo-local class of each row, or -1 for out-of-combo
    rows (which only enter the change-detection term); ``t`` is the 0/1
    change target.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    t = np.asarray(t, dtype=np.float64)
    n = len(X)
    inside = y >= 0
    Xc, yc = X[inside], y[inside]
    nc = len(Xc)

    hc = Xc @ params["cls_W1"] + params["cls_b1"]
    ac = np.maximum(hc, 0.0)
    logits = ac @ params["cls_W2"] + params["cls_b2"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    ce = float(np.sum(logsum - shifted[np.arange(nc), yc]) / nc) if nc else 0.0

    hr = X @ params["reg_W1"] + params["reg_b1"]
    ar = np.maximum(hr, 0.0)
    z = (ar @ params["reg_W2"] + params["reg_b2"])[:, 0]
    bce = float(np.sum(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))) / n)
    loss = ce + bce
    if not need_grads:
        return loss, None

    grads = {}
    if nc:
        dlog = np.exp(shifted - logsum[:, None])
        dlog[np.arange(nc), yc] -= 1.0
        dlog /= nc
        grads["cls_W2"] = ac.T @ dlog
        grads["cls_b2"] = dlog.sum(axis=0)
        dh = (dlog @ params["cls_W2"].T) * (hc > 0)
        grads["cls_W1"] = Xc.T @ dh
        grads["cls_b1"] = dh.sum(axis=0)
    else:
        for k in ("cls_W1", "cls_b1", "cls_W2", "cls_b2"):
            grads[k] = np.zeros_like(params[k])
    dz = ((_sigmoid(z) - t) / n)[:, None]
    grads["reg_W2"] = ar.T @ dz
    grads["reg_b2"] = dz.sum(axis=0)
    dh = (dz @ params["reg_W2"].T) * (hr > 0)
    grads["reg_W1"] = X.T @ dh
    grads["reg_b1"] = dh.sum(axis=0)
    return loss, grads


def _check_combo(combo, n_classes):
    combo = tuple(sorted(int(c) for c in combo))
    if len(combo) < 2 or len(set(combo)) != len(combo):
        raise SchemaViolation("combo", f"need >= 2 distinct classes, got {combo}")
    if combo[0] < 0 or combo[-1] >= n_classes:
        raise SchemaViolation("combo", f"class index out of range in {combo}")
    return combo


def _freeze(params):
    out = {}
    for k in PARAM_ORDER:
        a = np.array(params[k], dtype=np.float64)
        a.flags.writeable = False
        out[k] = a
    return out


def train_heads(
    dataset: EmbeddingDataset,
    config_id: str,
    combo,
    hyper: HeadHyperparams = HeadHyperparams(),
    theta: float = 0.5,
    val_split: str = "val",
) -> MicroClassifier:
    """Train both heads of a micro-classifier for ``combo`` at ``config_id``."""
    combo = _check_combo(combo, dataset.n_classes)
    mat = dataset.matrix(config_id, "train")
    local = np.full(dataset.n_classes, -1, dtype=np.int64)
    local[list(combo)] = np.arange(len(combo))

    for c in combo:
        if not np.any(mat.labels == c):
            raise EmptyClass(f"class {c} has no train samples under {config_id}")
    inside = np.flatnonzero(local[mat.labels] >= 0)
    outside = np.flatnonzero(local[mat.labels] < 0)

    rng = np.random.default_rng(hyper.seed)
    params = init_params(mat.dim, hyper.hidden_dim, len(combo), rng)

    n_neg = int(round(hyper.negative_ratio * len(inside)))
    if hyper.negative_ratio > 0:
        if len(outside) == 0:
            raise NoNegativesAvailable(f"combo {combo} covers every class")
        neg = rng.choice(outside, size=n_neg, replace=n_neg > len(outside))
    else:
        neg = np.empty(0, dtype=np.int64)

    rows = np.concatenate([inside, neg])
    X = mat.X[rows]
    y = np.concatenate([local[mat.labels[inside]], np.full(len(neg), -1)])
    t = np.concatenate([np.zeros(len(inside)), np.ones(len(neg))])

    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    n = len(rows)
    bs = hyper.batch_size
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = loss_and_grads(params, X[idx], y[idx], t[idx])
            total += loss * len(idx)
            for k in PARAM_ORDER:
                velocity[k] = hyper.momentum * velocity[k] - hyper.learning_rate * grads[k]
                params[k] = params[k] + velocity[k]
        history.append(total / n)

    clf = MicroClassifier(
        config_id=config_id,
        combo=combo,
        params=_freeze(params),
        theta=theta,
        seed=hyper.seed,
        loss_history=tuple(history),
    )
    train_acc = evaluate_accuracy(clf, dataset, "train")
    val_acc = evaluate_accuracy(clf, dataset, val_split) if dataset.has_split(val_split) else None
    return replace(clf, train_accuracy=train_acc, val_accuracy=val_acc)


def train_all_class(dataset: EmbeddingDataset, config_id: str, hyper: HeadHyperparams = HeadHyperparams()) -> MicroClassifier:
    """Classifier over every class; its change head is trained but never consulted."""
    return train_heads(
        dataset, config_id, range(dataset.n_classes), replace(hyper, negative_ratio=0.0)
    )


def predict_batch(classifier: MicroClassifier, X):
    """Vectorised forward pass: (probs, predicted global class, change score)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != classifier.embedding_dim:
        raise DimensionMismatch(
            f"embedding has shape {X.shape[1:]}; classifier expects {classifier.embedding_dim}"
        )
    logits, z = _forward(classifier.params, X)
    probs = _softmax(logits)
    pred = np.asarray(classifier.combo, dtype=np.int64)[np.argmax(probs, axis=1)]
    return probs, pred, _sigmoid(z)


def predict(classifier: MicroClassifier, embedding) -> PredictionOutcome:
    x = np.asarray(embedding, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a single embedding vector, got shape {x.shape}")
    probs, pred, score = predict_batch(classifier, x[None, :])
    return PredictionOutcome(probs[0], int(pred[0]), float(score[0]))


def evaluate_accuracy(classifier: MicroClassifier, dataset: EmbeddingDataset, split: str) -> float:
    """Fraction of the split's combo-class samples classified correctly."""
    if not dataset.has_split(split):
        raise EmptySplit(f"split {split!r} is empty or missing")
    mat = dataset.matrix(classifier.config_id, split)
    mask = mat.rows_of(classifier.combo)
    if not mask.any():
        raise EmptySplit(f"split {split!r} has no samples of {classifier.combo}")
    _, pred, _ = predict_batch(classifier, mat.X[mask])
    return float(np.mean(pred == mat.labels[mask]))


def fpfn_from_scores(scores, in_context, theta: float) -> tuple:
    """(FP rate, FN rate) with change declared iff score > theta."""
    scores = np.asarray(scores, dtype=np.float64)
    in_context = np.asarray(in_context, dtype=bool)
    if in_context.all() or not in_context.any():
        raise EmptySplit("need both in-context and out-of-context samples")
    fired = scores > theta
    return float(fired[in_context].mean()), float((~fired[~in_context]).mean())


def evaluate_fpfn(classifier: MicroClassifier, dataset: EmbeddingDataset, split: str, theta: float | None = None) -> tuple:
    if not dataset.has_split(split):
        raise EmptySplit(f"split {split!r} is empty or missing")
    theta = classifier.theta if theta is None else theta
    mat = dataset.matrix(classifier.config_id, split)
    _, _, scores = predict_batch(classifier, mat.X)
    return fpfn_from_scores(scores, mat.rows_of(classifier.combo), theta)


def maxprob_change_detector(class_probs, threshold: float) -> bool:
    """Max-softmax baseline: change iff the top probability is below ``threshold``."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise NotADistribution(f"probabilities {p.tolist()} do not sum to 1")
    return bool(p.max() < threshold)


def maxprob_fpfn(classifier: MicroClassifier, dataset: EmbeddingDataset, split: str, threshold: float) -> tuple:
    """FP/FN rates of the max-softmax detector (vectorised form of the rule above)."""
    mat = dataset.matrix(classifier.config_id, split)
    probs, _, _ = predict_batch(classifier, mat.X)
    in_context = mat.rows_of(classifier.combo)
    fired = probs.max(axis=1) < threshold
    if in_context.all() or not in_context.any():
        raise EmptySplit("need both in-context and out-of-context samples")
    return float(fired[in_context].mean()), float((~fired[~in_context]).mean())


def confusion_matrix(classifier: MicroClassifier, dataset: EmbeddingDataset, split: str) -> np.ndarray:
    """N x N counts (true row, predicted column) over the classifier's classes."""
    mat = dataset.matrix(classifier.config_id, split)
    mask = mat.rows_of(classifier.combo)
    _, pred, _ = predict_batch(classifier, mat.X[mask])
    n = dataset.n_classes
    C = np.zeros((n, n), dtype=np.int64)
    np.add.at(C, (mat.labels[mask], pred), 1)
    return C


def make_batch(classifier: MicroClassifier, X, labels):
    """Turn global labels into the (X, y, t) triple used by the loss."""
    local = {c: i for i, c in enumerate(classifier.combo)}
    y = np.array([local.get(int(c), -1) for c in labels], dtype=np.int64)
    return np.asarray(X, dtype=np.float64), y, (y < 0).astype(np.float64)


def gradient_check(classifier: MicroClassifier, batch, step: float = 1e-5, atol: float = 1e-8) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Where both gradients are below ``atol`` in magnitude the absolute gap is
    used instead, so exact zeros do not divide by zero.
    """
    X, y, t = batch
    params = {k: np.array(v, dtype=np.float64) for k, v in classifier.params.items()}
    _, grads = loss_and_grads(params, X, y, t)
    worst = 0.0
    for k in PARAM_ORDER:
        p = params[k]
        flat = p.reshape(-1)
        g = grads[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_and_grads(params, X, y, t, need_grads=False)
            flat[i] = orig - step
            lm, _ = loss_and_grads(params, X, y, t, need_grads=False)
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            scale = max(abs(num), abs(g[i]))
            err = abs(num - g[i]) if scale < atol else abs(num - g[i]) / scale
            worst = max(worst, err)
    return worst


def head_filename(combo) -> str:
    return "-".join(str(c) for c in combo) + ".bin"


def save_heads(classifier: MicroClassifier, path) -> None:
    """JSON header line followed by little-endian float32 parameters."""
    header = {
        "config_id": classifier.config_id,
        "combo": list(classifier.combo),
        "theta": classifier.theta,
        "seed": classifier.seed,
        "embedding_dim": classifier.embedding_dim,
        "hidden_dim": classifier.hidden_dim,
        "param_count": classifier.param_count,
        "train_accuracy": classifier.train_accuracy,
        "val_accuracy": classifier.val_accuracy,
    }
    blob = np.concatenate([classifier.params[k].reshape(-1) for k in PARAM_ORDER])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob.astype("<f4").tobytes())


def load_heads(path) -> MicroClassifier:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise HeadFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise HeadFormatError(f"{path}: header is not JSON") from None
    d, h, m = header["embedding_dim"], header["hidden_dim"], len(header["combo"])
    expected = head_param_count(d, h, m)
    body = raw[nl + 1:]
    if header.get("param_count") != expected or len(body) != 4 * expected:
        raise HeadFormatError(
            f"{path}: expected {expected} float32 parameters, found {len(body) // 4}"
        )
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    shapes = {
        "cls_W1": (d, h), "cls_b1": (h,), "cls_W2": (h, m), "cls_b2": (m,),
        "reg_W1": (d, h), "reg_b1": (h,), "reg_W2": (h, 1), "reg_b2": (1,),
    }
    params, pos = {}, 0
    for k in PARAM_ORDER:
        size = int(np.prod(shapes[k]))
        params[k] = flat[pos:pos + size].reshape(shapes[k])
        pos += size
    return MicroClassifier(
        config_id=header["config_id"],
        combo=tuple(header["combo"]),
        params=_freeze(params),
        theta=header["theta"],
        train_accuracy=header.get("train_accuracy"),
        val_accuracy=header.get("val_accuracy"),
        seed=header.get("seed"),
    )
