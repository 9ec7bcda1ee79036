import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxswitch.dataset import ConfigDescriptor, Manifest
from ctxswitch.errors import CoverageInfeasible, EmptyTrace, ExhaustedCandidates, RateOutOfRange
from ctxswitch.heads import HeadHyperparams
from ctxswitch.predictor import ConfigPredictor, TrainingPoint
from ctxswitch.selection import (
    Candidate,
    SelectionResult,
    StorageModel,
    accucomp,
    build_candidates,
    coverage,
    expected_flops,
    greecomp,
    greedy_select,
    storage_footprint,
    topk_frequent,
    write_selection,
)

EXAMPLE = [Candidate((0, 1), "a", 5.0), Candidate((2, 3), "a", 6.0),
           Candidate((0, 2), "a", 1.0), Candidate((1, 3), "a", 2.0)]


def rates():
    return st.floats(0, 1)


class TestExpectedFlops:
    def test_no_triggers(self):
        assert expected_flops(10, 100, 0, 0, 0.3) == 10

    def test_always_triggers(self):
        assert expected_flops(10, 100, 1, 0.7, 0) == 110

    def test_substitution(self):
        assert expected_flops(10, 100, 0.1, 0.1, 0.1) == pytest.approx(28.0)

    def test_rate_out_of_range(self):
        with pytest.raises(RateOutOfRange):
            expected_flops(10, 100, 1.2, 0, 0)

    @given(rates(), rates(), rates(), st.floats(0.1, 1e3), st.floats(0.1, 1e3))
    def test_bounded(self, ccr, fpr, fnr, fi, ff):
        v = expected_flops(fi, ff, ccr, fpr, fnr)
        assert fi * (1 - 1e-12) <= v <= (fi + ff) * (1 + 1e-12)

    @given(rates(), rates(), rates(), st.floats(0, 1), st.floats(0.1, 1e3), st.floats(0.1, 1e3))
    def test_monotone_in_fpr(self, ccr, fpr, fnr, bump, fi, ff):
        hi = min(1.0, fpr + bump)
        assert expected_flops(fi, ff, ccr, fpr, fnr) <= expected_flops(fi, ff, ccr, hi, fnr) + 1e-9

    @given(rates(), rates(), rates(), st.floats(0, 1), st.floats(0.1, 1e3), st.floats(0.1, 1e3))
    def test_monotone_decreasing_in_fnr(self, ccr, fpr, fnr, bump, fi, ff):
        hi = min(1.0, fnr + bump)
        assert expected_flops(fi, ff, ccr, fpr, hi) <= expected_flops(fi, ff, ccr, fpr, fnr) + 1e-9


class TestGreeComp:
    def test_example_from_good_start(self):
        sel, init, audit = greecomp(EXAMPLE, 2, 4, initial=[EXAMPLE[2], EXAMPLE[3]])
        assert {c.combo for c in sel} == {(0, 2), (1, 3)}
        assert audit == []

    def test_example_seeded(self):
        res = greedy_select(EXAMPLE, 2, 4, seed=2)
        assert {c.combo for c in res.selected} == {(0, 2), (1, 3)}
        assert res.avg_flops == 1.5

    def test_example_local_optimum(self):
        # no single swap out of {(0,1),(2,3)} keeps every class covered
        sel, _, audit = greecomp(EXAMPLE, 2, 4, initial=[EXAMPLE[0], EXAMPLE[1]])
        assert {c.combo for c in sel} == {(0, 1), (2, 3)}
        assert audit == []

    def test_swap_recorded(self):
        cands = [Candidate((0, 1), "a", 9.0), Candidate((1, 2), "a", 1.0), Candidate((0, 2), "a", 3.0),
                 Candidate((0, 1), "b", 2.0)]
        sel, init, audit = greecomp(cands, 2, 3, initial=[cands[0], cands[1]])
        assert {c.key for c in sel} == {((1, 2), "a"), ((0, 1), "b")}
        assert audit[0]["avg_before"] == 5.0 and audit[0]["avg_after"] == 1.5

    def test_too_few(self):
        with pytest.raises(CoverageInfeasible):
            greecomp(EXAMPLE, 1, 4)

    def test_candidates_miss_a_class(self):
        with pytest.raises(CoverageInfeasible):
            greecomp(EXAMPLE[:1] + EXAMPLE[2:3], 2, 4)

    @given(st.integers(3, 6), st.integers(0, 10_000))
    def test_audit_invariants(self, N, seed):
        rng = np.random.default_rng(seed)
        cands = [Candidate(c, "a", float(rng.uniform(1, 10))) for c in combinations(range(N), 2)]
        n = min(len(cands), math.ceil(N / 2) + int(rng.integers(0, 2)))
        sel, init, audit = greecomp(cands, n, N, seed=seed)
        assert coverage(sel) == set(range(N)) and coverage(init) == set(range(N))
        assert len(sel) == n
        for a in audit:
            assert a["avg_after"] < a["avg_before"] and a["covered"] == N
        assert sum(c.flops for c in sel) <= sum(c.flops for c in init)


class TestAccuComp:
    def test_zero_threshold_no_op(self):
        res = greedy_select(EXAMPLE, 2, 4, 0.0, lambda c: 0.1, seed=2)
        assert [a for a in res.audit if a["stage"] == 2] == []

    def test_raises_accuracy(self):
        cands = EXAMPLE + [Candidate((0, 2), "b", 3.0)]
        acc = {((0, 2), "a"): 0.5, ((1, 3), "a"): 0.9, ((0, 2), "b"): 0.95,
               ((0, 1), "a"): 0.6, ((2, 3), "a"): 0.6}
        sel, audit, accs = accucomp([EXAMPLE[2], EXAMPLE[3]], cands, 4, 0.9, lambda c: acc[c.key])
        assert {c.key for c in sel} == {((0, 2), "b"), ((1, 3), "a")}
        assert audit[0]["acc_added"] == 0.95

    def test_min_criterion(self):
        cands = EXAMPLE + [Candidate((0, 2), "b", 3.0)]
        acc = {((0, 2), "a"): 0.85, ((1, 3), "a"): 0.99, ((0, 2), "b"): 0.95}
        sel, _, _ = accucomp([EXAMPLE[2], EXAMPLE[3]], cands, 4, 0.9, lambda c: acc.get(c.key, 0.0),
                             criterion="average")
        assert {c.key for c in sel} == {((0, 2), "a"), ((1, 3), "a")}
        sel, _, _ = accucomp([EXAMPLE[2], EXAMPLE[3]], cands, 4, 0.9, lambda c: acc.get(c.key, 0.0),
                             criterion="min")
        assert ((0, 2), "b") in {c.key for c in sel}

    def test_exhausted(self):
        with pytest.raises(ExhaustedCandidates):
            accucomp([EXAMPLE[2], EXAMPLE[3]], EXAMPLE, 4, 0.99, lambda c: 0.5)

    def test_lazy_training(self):
        calls = []

        def trainer(c):
            calls.append(c.key)
            return 1.0

        accucomp([EXAMPLE[2], EXAMPLE[3]], EXAMPLE, 4, 0.9, trainer)
        assert sorted(calls) == [((0, 2), "a"), ((1, 3), "a")]


class TestTopK:
    def test_counting(self):
        trace = [(0, 1, 2)] * 10 + [(3, 4, 5)] * 3
        assert topk_frequent(trace, 1) == [(0, 1, 2)]

    def test_saturation(self):
        trace = [(0, 1), (1, 2), (0, 1)]
        assert set(topk_frequent(trace, 10)) == {(0, 1), (1, 2)}

    def test_tie_earlier_first(self):
        trace = [(2, 3), (0, 1), (0, 1), (2, 3), (4, 5)]
        assert topk_frequent(trace, 1) == [(2, 3)]

    def test_empty(self):
        with pytest.raises(EmptyTrace):
            topk_frequent([], 2)


def _manifest(n_configs=4, dim=1280):
    cfgs = tuple(ConfigDescriptor(f"c{k}", 0, 224, 100.0 * (k + 1), dim, {"pi0": 1.0},
                                  extractor_bytes=1_000_000) for k in range(n_configs))
    return Manifest("t", tuple("abcdef"), cfgs, {"train": ("x",), "test": ("y",)})


class TestStorage:
    def test_extractors_only(self):
        st_ = StorageModel.from_manifest(_manifest(), all_class_bytes=0)
        assert storage_footprint([], st_, "cloud") == 4_000_000

    def test_head_pair_bytes(self):
        st_ = StorageModel.from_manifest(_manifest())
        assert st_.head_bytes((0, 1, 2), "c0") == 656_912

    def test_unattended_adds_all_class(self):
        st_ = StorageModel.from_manifest(_manifest(), all_class_bytes=123)
        sel = [Candidate((0, 1, 2), "c0", 1.0)]
        assert storage_footprint(sel, st_, "unattended") - storage_footprint(sel, st_, "cloud") == 123

    def test_duplicate_heads_counted_once(self):
        st_ = StorageModel.from_manifest(_manifest(), all_class_bytes=0)
        sel = [Candidate((0, 1, 2), "c0", 1.0), Candidate((0, 1, 2), "c0", 1.0)]
        assert storage_footprint(sel, st_, "cloud") == 4_000_000 + 656_912


class TestCandidates:
    def test_built_and_written(self, tmp_path, separable_ds):
        pred = ConfigPredictor([TrainingPoint((0, 1), (0.0, 0.0), "c0")], 0.9, k_start=1)
        cands = build_candidates(separable_ds, [(0, 1), (2, 3), (0, 3), (1, 2)], pred, 1 / 30,
                                 HeadHyperparams(epochs=15))
        assert all(c.config_id == "c0" and c.accuracy == 1.0 for c in cands)
        # perfect detector: expected cost is f_i + CCR * f_full
        for c in cands:
            assert c.flops == pytest.approx(50.0 + 200.0 / 30)
        res = greedy_select(cands, 2, 4, 0.9, seed=0)
        storage = StorageModel.from_manifest(separable_ds.manifest, hidden_dim=64)
        doc = write_selection(res, storage, tmp_path / "selection.json",
                              class_names=separable_ds.manifest.classes)
        assert len(doc["contexts"]) == 2 and doc["avg_accuracy"] == 1.0
        assert (tmp_path / "selection.json").exists()
