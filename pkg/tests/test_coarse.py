import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spotmatch import coarse
from spotmatch.gradcheck import numerical_gradient, relative_error
from spotmatch.oracles import brute_mnn

# (e^10 / (e^10 + 1))^2 and (1 / (e^10 + 1))^2 at 50 digits
PC_DIAG10 = 0.99990920632356161393
PC_OFF10 = 2.0609664827234723e-09


def test_similarity_loop_oracle(rng):
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 3, 5))
    s = coarse.similarity_matrix(a, b, 0.3)
    af, bf = a.reshape(-1, 5), b.reshape(-1, 5)
    ref = np.array([[0.3 * sum(af[i, c] * bf[j, c] for c in range(5)) for j in range(6)] for i in range(12)])
    np.testing.assert_allclose(s, ref, atol=1e-10)


def test_similarity_channel_mismatch():
    with pytest.raises(ValueError):
        coarse.similarity_matrix(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)


class TestDualSoftmax:
    def test_diagonal_ten(self):
        p = coarse.dual_softmax(np.diag([10.0, 10.0]))
        np.testing.assert_allclose(p, [[PC_DIAG10, PC_OFF10], [PC_OFF10, PC_DIAG10]], rtol=1e-12, atol=0)

    def test_direct_evaluation(self, rng):
        s = rng.normal(size=(4, 4))
        e = np.exp(s)
        ref = (e / e.sum(1, keepdims=True)) * (e / e.sum(0, keepdims=True))
        np.testing.assert_allclose(coarse.dual_softmax(s), ref, atol=1e-12)

    @settings(max_examples=40)
    @given(arrays(float, (5, 6), elements=st.floats(-30, 30)))
    def test_bounded_by_both_factors(self, s):
        p = coarse.dual_softmax(s)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert np.all(p.sum(1) <= 1 + 1e-12) and np.all(p.sum(0) <= 1 + 1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            coarse.dual_softmax(np.array([[np.nan, 0.0]]))

    def test_log_backward(self, rng):
        s = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 5))
        _, factors = coarse.dual_log_softmax(s)

        def f():
            return float(np.sum(coarse.dual_log_softmax(s)[0] * w))

        assert relative_error(coarse.dual_log_softmax_backward(w, factors), numerical_gradient(f, s)) < 1e-7

    def test_row_log_backward(self, rng):
        s = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        _, factors = coarse.row_log_softmax(s)

        def f():
            return float(np.sum(coarse.row_log_softmax(s)[0] * w))

        assert relative_error(coarse.row_log_softmax_backward(w, factors), numerical_gradient(f, s)) < 1e-7


class TestMNN:
    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        p = coarse.dual_softmax(rng.normal(scale=3.0, size=(32, 32)))
        ms = coarse.extract_matches(p, 0.2)
        assert list(zip(ms.ref_index.tolist(), ms.src_index.tolist())) == brute_mnn(p, 0.2)

    def test_threshold_is_inclusive(self):
        p = np.array([[0.2, 0.1], [0.1, 0.19]])
        ms = coarse.extract_matches(p, 0.2)
        assert ms.ref_index.tolist() == [0] and ms.confidence.tolist() == [0.2]

    def test_ties_use_lowest_index(self):
        p = np.array([[0.5, 0.5], [0.1, 0.1]])
        ms = coarse.extract_matches(p, 0.0)
        assert list(zip(ms.ref_index, ms.src_index)) == [(0, 0)]

    @given(arrays(float, (6, 7), elements=st.floats(0, 1)))
    def test_matches_are_mutual_and_unique(self, p):
        ms = coarse.extract_matches(p, 0.0)
        assert len(set(ms.ref_index)) == len(ms) == len(set(ms.src_index))
        for i, j in zip(ms.ref_index, ms.src_index):
            assert p[i, j] == p[i].max() == p[:, j].max()


class TestCells:
    def test_centres(self):
        xy = coarse.cell_centers(np.array([[0, 0], [2, 5]]))
        np.testing.assert_array_equal(xy, [[3.5, 3.5], [43.5, 19.5]])

    def test_matchset_points(self):
        ms = coarse.MatchSet(np.array([5]), np.array([7]), np.array([0.9]), (2, 4), (2, 4))
        np.testing.assert_array_equal(ms.ref_cells(), [[1, 1]])
        np.testing.assert_array_equal(ms.src_points(), [[27.5, 11.5]])


def test_match_file_round_trip(tmp_path, rng):
    ref, src, conf = rng.random((4, 2)) * 100, rng.random((4, 2)) * 100, rng.random(4)
    coarse.write_matches(tmp_path / "m.txt", ref, src, conf)
    r, s, c = coarse.read_matches(tmp_path / "m.txt")
    np.testing.assert_allclose(r, ref, atol=5e-5)
    np.testing.assert_allclose(s, src, atol=5e-5)
    np.testing.assert_allclose(c, conf, atol=5e-7)


def test_empty_match_file(tmp_path):
    coarse.write_matches(tmp_path / "m.txt", np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    r, s, c = coarse.read_matches(tmp_path / "m.txt")
    assert r.shape == (0, 2) and c.shape == (0,)
