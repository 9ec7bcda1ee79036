import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxswitch.errors import DimensionMismatch, NewClassUncovered
from ctxswitch.heads import PredictionOutcome
from ctxswitch.predictor import ConfigPredictor, TrainingPoint
from ctxswitch.similarity import SimilarityMatrix
from ctxswitch.switching import (
    CloudProvider,
    LFUCache,
    LocalProvider,
    SwitchState,
    cache_get_or_admit,
    candidate_combo,
    detect_change,
    hybrid_switch,
    identify_class,
    local_fallback,
)
from test_heads import zero_classifier


def outcome(score):
    return PredictionOutcome(np.array([1.0]), 0, score)


def reference_lfu(trace, capacity):
    """Plain-list replay: evict least total accesses, then least recent, never the newcomer."""
    store, freq, last, hits, evicted = [], {}, {}, 0, []
    for t, key in enumerate(trace):
        freq[key] = freq.get(key, 0) + 1
        last[key] = t
        if key in store:
            hits += 1
            continue
        store.append(key)
        if len(store) > capacity:
            others = [k for k in store if k != key]
            victim = sorted(others, key=lambda k: (freq[k], last[k]))[0]
            store.remove(victim)
            evicted.append(victim)
    return hits, evicted, sorted(store)


def replay(trace, capacity):
    c = LFUCache(capacity)
    for key in trace:
        c.get_or_admit(key, lambda: key)
    return c


class TestDetect:
    def test_above(self):
        assert detect_change(outcome(0.7), 0.5)

    def test_boundary(self):
        assert not detect_change(outcome(0.5), 0.5)

    def test_zero(self):
        assert not detect_change(outcome(0.0), 0.5)


class TestIdentify:
    def test_trained_model(self, separable_ds):
        from ctxswitch.heads import HeadHyperparams, train_all_class
        clf = train_all_class(separable_ds, "c1", HeadHyperparams(epochs=20))
        mat = separable_ds.matrix("c1", "test")
        assert [identify_class(clf, x) for x in mat.X] == mat.labels.tolist()

    def test_uniform_logits(self):
        assert identify_class(zero_classifier(combo=(0, 1, 2)), np.ones(4)) == 0

    def test_wrong_dim(self):
        with pytest.raises(DimensionMismatch):
            identify_class(zero_classifier(), np.ones(7))


class TestLFU:
    def test_capacity_one(self):
        c = replay(["A", "B"], 1)
        assert c.evicted == ["A"] and c.keys() == ["B"]

    def test_frequent_entry_does_not_block_newcomer(self):
        c = replay(["A", "A", "A", "B"], 1)
        assert c.keys() == ["B"] and c.frequency("A") == 3

    def test_frequency_then_recency(self):
        c = replay(["A", "A", "B", "C"], 2)
        assert c.evicted == ["B"]
        c = replay(["A", "B", "C"], 2)
        assert c.evicted == ["A"]

    def test_hits_never_evict(self):
        c = replay(["A", "B"] + ["A", "B"] * 10, 2)
        assert c.evicted == [] and c.hits == 20

    def test_loader_called_on_miss_only(self):
        calls = []
        c = LFUCache(2)
        for key in "ABAB":
            cache_get_or_admit(c, key, lambda k=key: calls.append(k) or k)
        assert calls == ["A", "B"]

    def test_unbounded(self):
        c = replay(list(range(50)), None)
        assert len(c) == 50 and c.evicted == []

    @given(st.lists(st.integers(0, 7), min_size=1, max_size=60), st.integers(1, 6))
    def test_matches_reference(self, trace, cap):
        c = replay(trace, cap)
        hits, evicted, store = reference_lfu(trace, cap)
        assert (c.hits, c.evicted, sorted(c.keys())) == (hits, evicted, store)

    @given(st.lists(st.integers(0, 9), min_size=1, max_size=80))
    def test_hit_ratio_monotone(self, trace):
        ratios = [replay(trace, cap).hit_ratio for cap in range(1, 11)]
        assert all(a <= b for a, b in zip(ratios, ratios[1:]))


def _state(combo, recent=(), m_set=(2, 3, 4), policy="recency"):
    return SwitchState(combo, "c0", None, recent=list(recent), m_set=m_set, policy=policy)


class TestCandidateCombo:
    def test_recency(self):
        s = _state((1, 2, 3), recent=[3, 1, 2])
        assert candidate_combo(s, 7, 3, 10) == (1, 3, 7)

    def test_padded_from_current_combo(self):
        s = _state((1, 2, 3), recent=[2])
        assert candidate_combo(s, 7, 4, 10) == (1, 2, 3, 7)

    def test_padded_from_lowest_index(self):
        s = _state((5, 6), recent=[])
        assert candidate_combo(s, 7, 4, 10) == (0, 5, 6, 7)

    def test_farthest_drops_least_similar(self):
        S = np.eye(5)
        S[4, 1] = S[1, 4] = 0.9
        S[4, 2] = S[2, 4] = 0.1
        S[4, 3] = S[3, 4] = 0.5
        s = _state((1, 2, 3), recent=[2, 3, 1], policy="farthest")
        assert candidate_combo(s, 4, 3, 5, SimilarityMatrix("c0", S)) == (1, 3, 4)


def _const_predictor(cid):
    return ConfigPredictor([TrainingPoint((0, 1), (0.0, 0.0), cid)], 0.5, k_start=1)


class _Provider:
    def fetch(self, combo, config_id, new_class=None):
        return combo, config_id, "heads", 10, False


class TestHybrid:
    FLOPS = {"f20": 20.0, "f35": 35.0}
    S = SimilarityMatrix("c0", np.eye(10))

    def test_largest_m_at_min_flops(self):
        preds = {2: _const_predictor("f20"), 3: _const_predictor("f20"), 4: _const_predictor("f35")}
        s = _state((0, 1, 2), recent=[2, 1, 0])
        dec = hybrid_switch(s, 9, preds, _Provider(), flops=self.FLOPS, n_classes=10, similarity=self.S)
        assert dec.m == 3 and dec.combo == (1, 2, 9)
        assert s.combo == (1, 2, 9) and s.recent[0] == 9

    def test_singleton_m_set(self):
        preds = {3: _const_predictor("f35")}
        s = _state((0, 1, 2), recent=[2, 1, 0], m_set=(3,))
        dec = hybrid_switch(s, 5, preds, _Provider(), flops=self.FLOPS, n_classes=10, similarity=self.S)
        assert dec.m == 3 and len(dec.combo) == 3 and set(dec.options) == {3}

    def test_cloud_provider_charges_on_miss(self):
        trained = []

        def trainer(combo, cid):
            trained.append((combo, cid))
            return zero_classifier(combo=combo)

        p = CloudProvider(trainer, LFUCache(), lambda combo, cid: 1000)
        assert p.fetch((0, 1), "c0")[3:] == (1000, False)
        assert p.fetch((0, 1), "c0")[3:] == (0, True)
        assert trained == [((0, 1), "c0")]


class TestLocalFallback:
    def test_uncovered(self):
        with pytest.raises(NewClassUncovered):
            local_fallback({1, 2, 9}, [(1, 2, 3), (4, 5, 6)], 9)

    def test_overlap(self):
        assert local_fallback({1, 2, 9}, [(1, 9), (7, 8, 9)], 9) == (1, 9)

    def test_exact(self):
        assert local_fallback((1, 2, 3), [(1, 2, 3), (1, 2)], 1) == (1, 2, 3)

    def test_ties_cheaper_config(self):
        installed = [((0, 1), "big"), ((0, 1), "small"), ((1, 5), "small")]
        got = local_fallback((0, 1), installed, 1, {"big": 9.0, "small": 1.0})
        assert got == ((0, 1), "small")

    def test_local_provider(self):
        inst = {((1, 9), "c0"): "h1", ((7, 8, 9), "c0"): "h2"}
        combo, cid, heads, nbytes, hit = LocalProvider(inst).fetch((1, 2, 9), "c1", 9)
        assert (combo, cid, heads, nbytes) == ((1, 9), "c0", "h1", 0)
