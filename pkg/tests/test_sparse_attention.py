import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotmatch import sparse_attention as sa
from spotmatch.gradcheck import numerical_gradient, relative_error
from spotmatch.oracles import masked_dense_attention, random_plan

pairs_strategy = st.lists(st.tuples(st.integers(0, 7), st.integers(0, 9)), max_size=60)


class TestPlan:
    @given(pairs_strategy)
    def test_sorted_unique_and_csr(self, pairs):
        plan = sa.build_plan(pairs, 8, 10)
        expect = sorted(set(pairs))
        assert plan.pairs().tolist() == [list(p) for p in expect]
        assert plan.group_start[0] == 0 and plan.group_start[-1] == plan.length
        for q in range(8):
            got = plan.key_index[plan.group_start[q] : plan.group_start[q + 1]]
            assert got.tolist() == sorted(k for qq, k in expect if qq == q)

    @given(pairs_strategy)
    def test_key_order_sorts_by_key(self, pairs):
        plan = sa.build_plan(pairs, 8, 10)
        k = plan.key_index[plan.key_order]
        assert np.all(np.diff(k) >= 0)
        assert plan.key_start[-1] == plan.length

    def test_shuffled_duplicates_give_same_plan(self, rng):
        q, k = rng.integers(0, 5, 30), rng.integers(0, 7, 30)
        perm = rng.permutation(60)
        a = sa.plan_from_arrays(q, k, 5, 7)
        b = sa.plan_from_arrays(np.r_[q, q][perm], np.r_[k, k][perm], 5, 7)
        assert a == b

    def test_dense_plan(self):
        plan = sa.dense_plan(3, 4)
        assert plan.length == 12
        np.testing.assert_array_equal(plan.group_sizes(), [4, 4, 4])

    def test_out_of_range_rejected(self):
        with pytest.raises(IndexError):
            sa.build_plan([(0, 5)], 2, 5)
        with pytest.raises(ValueError):
            sa.plan_from_arrays([0, 1], [0], 2, 2)

    def test_dump_load_round_trip(self, tmp_path, rng):
        plan, _ = random_plan(rng, 6, 9)
        sa.dump_plan(plan, tmp_path / "plan.txt")
        assert sa.load_plan(tmp_path / "plan.txt") == plan

    def test_load_detects_truncation(self, tmp_path):
        (tmp_path / "p.txt").write_text("2 2 3\n0 0\n1 1\n")
        with pytest.raises(ValueError):
            sa.load_plan(tmp_path / "p.txt")


class TestGroupedSoftmax:
    def test_per_group(self, rng):
        b = np.array([0, 3, 4, 9])
        x = rng.normal(size=(9, 2))
        got = sa.grouped_softmax(x, b)
        for lo, hi in zip(b[:-1], b[1:]):
            e = np.exp(x[lo:hi] - x[lo:hi].max(0))
            np.testing.assert_allclose(got[lo:hi], e / e.sum(0), atol=1e-15)

    def test_empty_groups_skipped(self):
        got = sa.grouped_softmax(np.array([1.0, 2.0]), np.array([0, 0, 2, 2]))
        np.testing.assert_allclose(got.sum(), 1.0)


class TestForward:
    @pytest.mark.parametrize("kind", ["dense", "singleton", "random", "sparse-with-empty"])
    @pytest.mark.parametrize("heads,dims", [(1, 4), (3, 5)])
    def test_masked_dense_equivalence(self, rng, kind, heads, dims):
        nq, nk = 11, 13
        q, k = rng.normal(size=(nq, heads, dims)), rng.normal(size=(nk, heads, dims))
        v = rng.normal(size=(nk, heads, dims))
        plan, mask = random_plan(rng, nq, nk, kind)
        res = sa.sparse_forward(q, k, v, plan)
        np.testing.assert_allclose(res.output, masked_dense_attention(q, k, v, mask, dims**-0.5), atol=1e-12)
        np.testing.assert_array_equal(res.empty_queries, np.flatnonzero(~mask.any(1)))

    def test_empty_queries_get_zeros(self, rng):
        q, k, v = (rng.normal(size=(4, 2, 3)) for _ in range(3))
        res = sa.sparse_forward(q, k, v, sa.build_plan([(1, 0), (1, 3)], 4, 4))
        np.testing.assert_array_equal(res.output[[0, 2, 3]], 0.0)
        np.testing.assert_array_equal(res.empty_queries, [0, 2, 3])

    @pytest.mark.parametrize("chunk", [1, 5, 64])
    def test_chunking_is_invisible(self, rng, chunk):
        q, k, v = (rng.normal(size=(20, 2, 4)) for _ in range(3))
        plan, _ = random_plan(rng, 20, 20)
        a = sa.sparse_forward(q, k, v, plan)
        b = sa.sparse_forward(q, k, v, plan, chunk=chunk)
        np.testing.assert_allclose(a.output, b.output, atol=1e-14)

    def test_weights_sum_to_one_per_query(self, rng):
        q, k, v = (rng.normal(size=(9, 2, 4)) for _ in range(3))
        plan, _ = random_plan(rng, 9, 9)
        w = sa.sparse_forward(q, k, v, plan).weights
        sums = np.add.reduceat(w, plan.group_start[:-1], axis=0)
        np.testing.assert_allclose(sums, 1.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 4))
    def test_aux_elements_proportional_to_length(self, length, heads):
        rng = np.random.default_rng(length)
        q, k, v = (rng.normal(size=(20, heads, 2)) for _ in range(3))
        flat = rng.choice(400, size=length, replace=False)
        plan = sa.plan_from_arrays(flat // 20, flat % 20, 20, 20)
        assert sa.sparse_forward(q, k, v, plan).aux_elements == 2 * length * heads

    def test_layout_errors(self, rng):
        plan = sa.dense_plan(3, 3)
        with pytest.raises(ValueError):
            sa.sparse_forward(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)), plan)
        with pytest.raises(ValueError):
            sa.sparse_forward(np.zeros((4, 1, 2)), np.zeros((3, 1, 2)), np.zeros((3, 1, 2)), plan)

    def test_scale_argument(self, rng):
        q, k, v = (rng.normal(size=(5, 1, 4)) for _ in range(3))
        plan = sa.dense_plan(5, 5)
        mask = np.ones((5, 5), bool)
        got = sa.sparse_forward(q, k, v, plan, scale=1.7).output
        np.testing.assert_allclose(got, masked_dense_attention(q, k, v, mask, 1.7), atol=1e-12)


class TestBackward:
    @pytest.mark.parametrize("kind", ["dense", "singleton", "random", "sparse-with-empty"])
    def test_finite_differences(self, rng, kind):
        q, k, v = (rng.normal(size=(6, 2, 3)) for _ in range(3))
        plan, _ = random_plan(rng, 6, 6, kind)
        up = rng.normal(size=(6, 2, 3))

        def f():
            return float(np.sum(sa.sparse_forward(q, k, v, plan).output * up))

        dq, dk, dv = sa.sparse_backward(q, k, v, plan, None, up)
        for ana, x in ((dq, q), (dk, k), (dv, v)):
            assert relative_error(ana, numerical_gradient(f, x)) < 1e-6

    def test_cached_weights_match_recomputed(self, rng):
        q, k, v = (rng.normal(size=(7, 2, 3)) for _ in range(3))
        plan, _ = random_plan(rng, 7, 7)
        up = rng.normal(size=(7, 2, 3))
        w = sa.sparse_forward(q, k, v, plan).weights
        a = sa.sparse_backward(q, k, v, plan, None, up)
        b = sa.sparse_backward(q, k, v, plan, None, up, weights=w, chunk=4)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-14)
