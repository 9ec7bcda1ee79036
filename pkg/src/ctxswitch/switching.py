"""Runtime context management: change detection, class identification,
the hybrid switching policy and the head cache."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NewClassUncovered, PredictorError, SchemaViolation
from .heads import MicroClassifier, PredictionOutcome, predict
from .similarity import SimilarityMatrix, context_representation

__all__ = [
    "LFUCache",
    "AllClassModel",
    "SwitchState",
    "SwitchDecision",
    "CloudProvider",
    "LocalProvider",
    "detect_change",
    "identify_class",
    "candidate_combo",
    "hybrid_switch",
    "cache_get_or_admit",
    "local_fallback",
]


class LFUCache:
    """Least-frequently-used store; ties evict the least recently used entry.

    Access counts are kept for keys even after they are evicted, so an entry's
    priority depends only on the access history and never on the capacity.
    That makes the cache a stack algorithm: a bigger cache never has a lower
    hit ratio on the same trace. The entry being admitted is never the one
    evicted. ``capacity=None`` means unbounded.
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise SchemaViolation("cache_capacity", "must be >= 1")
        self.capacity = capacity
        self._store = {}
        self._freq = {}
        self._last = {}
        self._tick = 0
        self.hits = 0
        self.misses = 0
        self.evicted = []

    def __contains__(self, key):
        return key in self._store

    def __len__(self):
        return len(self._store)

    def keys(self):
        return list(self._store)

    def frequency(self, key) -> int:
        return self._freq.get(key, 0)

    def _touch(self, key):
        self._tick += 1
        self._freq[key] = self._freq.get(key, 0) + 1
        self._last[key] = self._tick

    def preload(self, key, value) -> None:
        """Insert ``value`` without counting a miss (pre-deployed heads)."""
        self.get_or_admit(key, lambda: value)
        self.misses -= 1

    def get_or_admit(self, key, loader):
        if key in self._store:
            self.hits += 1
            self._touch(key)
            return self._store[key]
        value = loader()
        self.misses += 1
        self._touch(key)
        self._store[key] = value
        if self.capacity is not None and len(self._store) > self.capacity:
            victim = min((k for k in self._store if k != key),
                         key=lambda k: (self._freq[k], self._last[k]))
            del self._store[victim]
            self.evicted.append(victim)
        return value

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def cache_get_or_admit(cache: LFUCache, key, loader):
    return cache.get_or_admit(key, loader)


@dataclass(frozen=True)
class AllClassModel:
    classifier: MicroClassifier
    flops_m: float
    device_latency_ms: dict

    @property
    def config_id(self) -> str:
        return self.classifier.config_id

    @classmethod
    def from_manifest(cls, classifier, manifest):
        cfg = manifest.config(classifier.config_id)
        return cls(classifier, cfg.flops_m, dict(cfg.device_latency_ms))


def detect_change(outcome: PredictionOutcome, theta: float) -> bool:
    return outcome.change_score > theta


def identify_class(all_class, embedding) -> int:
    clf = all_class.classifier if isinstance(all_class, AllClassModel) else all_class
    return predict(clf, embedding).predicted_class


@dataclass
class SwitchState:
    combo: tuple
    config_id: str
    classifier: object
    recent: list = field(default_factory=list)
    recent_capacity: int = 8
    m_set: tuple = (2, 3, 4)
    cache: LFUCache | None = None
    policy: str = "recency"

    def __post_init__(self):
        if self.policy not in ("recency", "farthest"):
            raise SchemaViolation("replace", "expected 'recency' or 'farthest'")
        self.combo = tuple(sorted(self.combo))
        self.m_set = tuple(sorted(set(self.m_set)))

    def observe(self, cls: int) -> None:
        """Record ``cls`` as the most recently seen distinct class."""
        cls = int(cls)
        if cls in self.recent:
            self.recent.remove(cls)
        self.recent.insert(0, cls)
        del self.recent[self.recent_capacity:]


def candidate_combo(state: SwitchState, new_class: int, m: int, n_classes: int,
                    similarity: SimilarityMatrix | None = None) -> tuple:
    """The ``m``-class context formed around ``new_class``.

    ``recency`` keeps the ``m-1`` most recently seen other classes, padding
    from the current combo and then from the lowest class indices.
    ``farthest`` keeps the current-combo classes most similar to the new class,
    i.e. drops the farthest ones.
    """
    chosen = []

    def take(seq):
        for c in seq:
            if len(chosen) == m - 1:
                return
            if c != new_class and c not in chosen:
                chosen.append(c)

    if state.policy == "farthest":
        if similarity is None:
            raise SchemaViolation("similarity", "the farthest policy needs a similarity matrix")
        ranked = sorted(state.combo, key=lambda c: (-similarity.values[new_class, c], c))
        take(ranked)
        take(state.recent)
    else:
        take(state.recent)
        take(state.combo)
    take(range(n_classes))
    return tuple(sorted(chosen + [int(new_class)]))


@dataclass(frozen=True)
class SwitchDecision:
    combo: tuple
    config_id: str
    m: int
    options: dict
    download_bytes: int = 0
    cache_hit: bool = False


class CloudProvider:
    """Heads trained on demand in the cloud and cached on the device."""

    def __init__(self, trainer, cache: LFUCache, head_bytes):
        self.trainer = trainer
        self.cache = cache
        self.head_bytes = head_bytes

    def fetch(self, combo, config_id, new_class=None):
        key = (tuple(combo), config_id)
        hit = key in self.cache
        clf = self.cache.get_or_admit(key, lambda: self.trainer(key[0], config_id))
        return key[0], config_id, clf, 0 if hit else int(self.head_bytes(key[0], config_id)), hit


class LocalProvider:
    """Pre-installed heads only; falls back to the best-overlapping installed context."""

    def __init__(self, installed: dict, flops: dict | None = None):
        self.installed = dict(installed)
        self.flops = flops or {}

    def fetch(self, combo, config_id, new_class=None):
        key = (tuple(combo), config_id)
        if key not in self.installed:
            key = local_fallback(combo, self.installed, new_class, self.flops)
        return key[0], key[1], self.installed[key], 0, True


def local_fallback(desired, installed, new_class: int | None = None, flops: dict | None = None):
    """Installed context overlapping ``desired`` the most and containing ``new_class``.

    ``installed`` holds ``(combo, config_id)`` keys (or bare combos). Ties go
    to the cheaper config, then to the lexicographically smaller combo.
    """
    desired = set(int(c) for c in desired)
    flops = flops or {}
    items = list(installed)
    bare = bool(items) and not isinstance(items[0][0], tuple)
    keys = [(tuple(k), None) if bare else (tuple(k[0]), k[1]) for k in items]
    if new_class is not None:
        keys = [k for k in keys if new_class in k[0]]
    if not keys:
        raise NewClassUncovered(f"no installed context contains class {new_class}")
    best = min(keys, key=lambda k: (-len(desired & set(k[0])), flops.get(k[1], 0.0), k[0]))
    return best[0] if bare else best


def hybrid_switch(state: SwitchState, new_class: int, predictors: dict, provider, *,
                  flops: dict, n_classes: int, similarity: SimilarityMatrix) -> SwitchDecision:
    """Switch to the context size whose predicted config is cheapest.

    On equal FLOPs the larger context wins. The chosen heads come from
    ``provider`` and ``state`` is updated in place.
    """
    new_class = int(new_class)
    if new_class in state.combo:
        raise SchemaViolation("new_class", f"class {new_class} is already in the current context")
    options = {}
    for m in state.m_set:
        if m > n_classes or m < 2:
            continue
        if m not in predictors:
            raise PredictorError(f"no configuration predictor for context size {m}")
        combo = candidate_combo(state, new_class, m, n_classes, similarity)
        cid = predictors[m].predict(context_representation(similarity, combo))
        if cid not in flops:
            raise PredictorError(f"predictor returned unknown config {cid!r}")
        options[m] = (combo, cid)
    if not options:
        raise PredictorError(f"no usable context size in {state.m_set}")
    m_best = min(options, key=lambda m: (flops[options[m][1]], -m))
    combo, cid = options[m_best]
    combo, cid, clf, nbytes, hit = provider.fetch(combo, cid, new_class)
    state.combo, state.config_id, state.classifier = tuple(combo), cid, clf
    state.observe(new_class)
    return SwitchDecision(tuple(combo), cid, m_best, options, nbytes, hit)
