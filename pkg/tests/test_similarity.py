import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import single_matrix_ds
from ctxswitch.errors import ComboTooSmall, DuplicateClassInCombo, EmptyRow, ZeroVector
from ctxswitch.similarity import (
    SimilarityMatrix,
    confusion_similarity,
    context_representation,
    cosine_similarity,
    minmax_representation,
    normalize_similarities,
    similarity_matrix,
    write_similarity_csv,
)

vectors = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: math.sqrt(sum(x * x for x in v)) > 1e-3
)


def _matrix_from(pairs, n):
    S = np.eye(n)
    for (i, j), v in pairs.items():
        S[i, j] = S[j, i] = v
    return SimilarityMatrix("c0", S)


class TestCosine:
    def test_identical(self):
        assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_antipodal(self):
        assert cosine_similarity([1, 0], [-1, 0]) == -1.0

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_similarity([0, 0], [1, 0])

    @given(vectors, vectors)
    def test_symmetric_and_bounded(self, u, v):
        a = cosine_similarity(u, v)
        assert a == cosine_similarity(v, u)
        assert -1.0 <= a <= 1.0


class TestSimilarityMatrix:
    def test_identical_centers(self):
        ds = single_matrix_ds([[1.0, 2.0], [1.0, 2.0]], [0, 1])
        S = similarity_matrix(ds)
        assert S[0, 1] == pytest.approx(1.0)

    def test_orthogonal_centers(self):
        ds = single_matrix_ds([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        assert similarity_matrix(ds)[0, 1] == 0.0

    def test_three_centers_hand_evaluated(self):
        r = 1 / math.sqrt(2)
        ds = single_matrix_ds([[1.0, 0.0], [0.0, 1.0], [r, r]], [0, 1, 2])
        S = similarity_matrix(ds).values[:3, :3]
        expected = np.array([[1, 0, r], [0, 1, r], [r, r, 1]])
        np.testing.assert_allclose(S, expected, atol=1e-12)

    def test_symmetric_unit_diagonal(self, separable_ds):
        S = similarity_matrix(separable_ds).values
        np.testing.assert_array_equal(S, S.T)
        np.testing.assert_array_equal(np.diag(S), 1.0)
        assert similarity_matrix(separable_ds).config_id == "c1"

    def test_csv_dump(self, tmp_path, separable_ds):
        S = similarity_matrix(separable_ds)
        names = separable_ds.manifest.classes
        write_similarity_csv(S, names, tmp_path / "sim_matrix.csv")
        lines = (tmp_path / "sim_matrix.csv").read_text().splitlines()
        assert lines[0] == "class," + ",".join(names)
        back = np.array([[float(x) for x in ln.split(",")[1:]] for ln in lines[1:]])
        np.testing.assert_array_equal(back, S.values)


class TestContextRepresentation:
    def test_constant(self):
        S = _matrix_from({(0, 1): 0.5, (0, 2): 0.5, (1, 2): 0.5}, 3)
        rep = context_representation(S, (0, 1, 2))
        assert rep.mean_sim == pytest.approx(0.5)
        assert rep.std_sim == pytest.approx(0.0, abs=1e-15)

    def test_population_std(self):
        S = _matrix_from({(0, 1): 0.2, (0, 2): 0.4, (1, 2): 0.6}, 3)
        rep = context_representation(S, (0, 1, 2))
        assert rep.mean_sim == pytest.approx(0.4)
        assert rep.std_sim == pytest.approx(0.1633, abs=5e-5)

    def test_size_one(self):
        with pytest.raises(ComboTooSmall):
            context_representation(_matrix_from({}, 3), (1,))

    def test_duplicate(self):
        with pytest.raises(DuplicateClassInCombo):
            context_representation(_matrix_from({}, 3), (1, 1))

    def test_minmax(self):
        S = _matrix_from({(0, 1): 0.2, (0, 2): 0.4, (1, 2): 0.6}, 3)
        assert minmax_representation(S, (0, 1, 2)) == pytest.approx((0.6, 0.2))

    @given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.permutations([0, 1, 2, 3]))
    def test_order_invariant(self, sims, perm):
        pairs = dict(zip(combinations(range(4), 2), sims))
        S = _matrix_from(pairs, 4)
        a = context_representation(S, (0, 1, 2, 3))
        b = context_representation(S, tuple(perm))
        assert a.mean_sim == b.mean_sim
        assert a.std_sim == pytest.approx(b.std_sim, abs=1e-15)
        assert a.std_sim >= 0


class TestNormalize:
    def test_three_values(self):
        assert normalize_similarities([0.2, 0.4, 0.6]) == pytest.approx([0.0, 0.5, 1.0])

    def test_single(self):
        assert normalize_similarities([0.7]) == [0.0]

    def test_endpoints(self):
        assert normalize_similarities([-1, 1]) == [0.0, 1.0]

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=20))
    def test_range(self, vals):
        out = normalize_similarities(vals)
        assert all(0.0 <= x <= 1.0 for x in out)


class TestConfusionSimilarity:
    def test_no_cross_confusion(self):
        C = np.diag([10, 10])
        assert confusion_similarity(C, 0, 1) == 0.0

    def test_direct_substitution(self):
        C = np.array([[95, 5], [5, 95]])
        assert confusion_similarity(C, 0, 1) == pytest.approx(0.05)

    def test_empty_row(self):
        with pytest.raises(EmptyRow):
            confusion_similarity(np.array([[0, 0], [0, 4]]), 0, 1)
