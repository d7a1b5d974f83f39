"""Soft, segment and discrete masks against brute-force references."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffwin.tensor import ShapeError, Tensor
from diffwin.windowmask import (
    BoundaryScores,
    build_structure,
    discrete_mask,
    expectation_oracle,
    read_matrix_csv,
    segment_soft_mask,
    soft_mask,
    soft_mask_matrix_form,
    write_matrix_csv,
)


def random_scores(rng, n, rows=1, peaked=False):
    """Random boundary distributions; ``peaked`` makes them nearly one-hot."""
    scale = 8.0 if peaked else 1.0
    left = rng.normal(scale=scale, size=(rows, n))
    right = rng.normal(scale=scale, size=(rows, n))
    soft = lambda z: np.exp(z - z.max(-1, keepdims=True)) / np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)
    return BoundaryScores.from_arrays(soft(left), soft(right))


def one_hot_scores(l, r, n):
    left, right = np.zeros((1, n)), np.zeros((1, n))
    left[0, l - 1] = 1.0
    right[0, r - 1] = 1.0
    return BoundaryScores.from_arrays(left, right)


class TestStructure:
    def test_upper_triangular(self):
        S = build_structure(4)
        np.testing.assert_array_equal(S.L, np.triu(np.ones((4, 4))))

    def test_segment_matrix_definition(self):
        n, b = 7, 3
        S = build_structure(n, b)
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                assert S.J[i - 1, j - 1] == (1.0 if i <= b * int(np.ceil(j / b)) else 0.0)

    def test_b_one_gives_l(self):
        S = build_structure(6, 1)
        np.testing.assert_array_equal(S.J, S.L)

    def test_b_larger_than_n_is_clamped(self):
        assert build_structure(3, 10).b == 3

    @pytest.mark.parametrize("n,b", [(0, 1), (3, 0), (4, -2)])
    def test_rejects_bad_sizes(self, n, b):
        with pytest.raises(ValueError):
            build_structure(n, b)

    def test_read_only(self):
        with pytest.raises(ValueError):
            build_structure(5).L[0, 0] = 3.0


class TestDiscreteMask:
    def test_worked_case(self):
        np.testing.assert_array_equal(discrete_mask(3, 8, 10), [0, 0, 1, 1, 1, 1, 1, 1, 0, 0])

    def test_single_position_window(self):
        np.testing.assert_array_equal(discrete_mask(2, 2, 4), [0, 1, 0, 0])

    def test_reversed_boundaries_empty(self):
        np.testing.assert_array_equal(discrete_mask(5, 2, 6), np.zeros(6))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            discrete_mask(0, 3, 5)

    @pytest.mark.parametrize("n", range(1, 13))
    def test_one_hot_soft_mask_equals_discrete(self, n):
        for l in range(1, n + 1):
            for r in range(l + 1, n + 1):
                m = soft_mask(one_hot_scores(l, r, n)).values.data[0]
                np.testing.assert_array_equal(m, discrete_mask(l, r, n))

    def test_one_hot_equal_boundaries_gives_two(self):
        m = soft_mask(one_hot_scores(3, 3, 5)).values.data[0]
        np.testing.assert_array_equal(m, [0, 0, 2, 0, 0])


class TestSoftMask:
    @pytest.mark.parametrize("n", [1, 2, 5, 9, 16])
    def test_matches_expectation(self, n):
        rng = np.random.default_rng(n)
        bs = random_scores(rng, n, rows=6)
        np.testing.assert_allclose(soft_mask(bs).values.data, expectation_oracle(bs), rtol=0, atol=1e-12)

    def test_scan_equals_matrix_form(self):
        rng = np.random.default_rng(1)
        bs = random_scores(rng, 11, rows=4)
        S = build_structure(11)
        np.testing.assert_allclose(soft_mask(bs).values.data, soft_mask_matrix_form(bs, S).data, atol=1e-14)

    def test_swapping_boundaries_is_symmetric(self):
        rng = np.random.default_rng(2)
        bs = random_scores(rng, 8, rows=3)
        swapped = BoundaryScores(bs.phi_right, bs.phi_left)
        np.testing.assert_allclose(soft_mask(bs).values.data, soft_mask(swapped).values.data, atol=1e-15)

    def test_batched_leading_dims(self):
        rng = np.random.default_rng(3)
        left = rng.dirichlet(np.ones(6), size=(2, 3, 4))
        right = rng.dirichlet(np.ones(6), size=(2, 3, 4))
        m = soft_mask(BoundaryScores.from_arrays(left, right)).values.data
        assert m.shape == (2, 3, 4, 6)
        flat = soft_mask(BoundaryScores.from_arrays(left.reshape(-1, 6), right.reshape(-1, 6))).values.data
        np.testing.assert_allclose(m.reshape(-1, 6), flat, atol=1e-15)

    def test_structure_size_mismatch(self):
        bs = random_scores(np.random.default_rng(0), 5)
        with pytest.raises(ShapeError):
            soft_mask(bs, build_structure(6))

    def test_mismatched_score_shapes(self):
        with pytest.raises(ShapeError):
            BoundaryScores(Tensor(np.ones((1, 3)) / 3), Tensor(np.ones((1, 4)) / 4))

    def test_validate_flags_non_distribution(self):
        with pytest.raises(ValueError):
            BoundaryScores.from_arrays(np.ones((1, 3)), np.ones((1, 3)) / 3).validate()

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 16), seed=st.integers(0, 2**31 - 1), peaked=st.booleans())
    def test_range_zero_to_two(self, n, seed, peaked):
        m = soft_mask(random_scores(np.random.default_rng(seed), n, rows=3, peaked=peaked)).values.data
        assert (m >= -1e-15).all() and (m <= 2 + 1e-12).all()

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 12), seed=st.integers(0, 2**31 - 1))
    def test_oracle_property(self, n, seed):
        bs = random_scores(np.random.default_rng(seed), n, rows=2)
        np.testing.assert_allclose(soft_mask(bs).values.data, expectation_oracle(bs), rtol=0, atol=1e-12)

    def test_mass_of_mask(self):
        # sum_i M_i = E[|r - l| + 2] when both boundaries are drawn independently
        rng = np.random.default_rng(4)
        n = 9
        bs = random_scores(rng, n)
        pl, pr = bs.phi_left.data[0], bs.phi_right.data[0]
        pos = np.arange(n)
        expected = sum(pl[a] * pr[b] * (abs(a - b) + 1 + (a == b)) for a in pos for b in pos)
        assert soft_mask(bs).values.data.sum() == pytest.approx(expected, abs=1e-12)


class TestSegmentMask:
    @pytest.mark.parametrize("b", [1, 2, 3, 5])
    @pytest.mark.parametrize("n", range(1, 17))
    def test_constant_within_segments(self, n, b):
        rng = np.random.default_rng(100 * n + b)
        m = segment_soft_mask(random_scores(rng, n, rows=3), b).values.data
        for start in range(0, n, b):
            block = m[:, start: start + b]
            np.testing.assert_array_equal(block, np.repeat(block[:, :1], block.shape[1], axis=1))

    @pytest.mark.parametrize("n", [1, 4, 13])
    def test_b_one_equals_token_mask(self, n):
        bs = random_scores(np.random.default_rng(n), n, rows=3)
        np.testing.assert_array_equal(segment_soft_mask(bs, 1).values.data, soft_mask(bs).values.data)

    @pytest.mark.parametrize("n,b", [(7, 2), (10, 3), (16, 5), (4, 4)])
    def test_gather_equals_matrix_form(self, n, b):
        bs = random_scores(np.random.default_rng(n * b), n, rows=3)
        S = build_structure(n, b)
        np.testing.assert_allclose(segment_soft_mask(bs, S).values.data,
                                   soft_mask_matrix_form(bs, S, segment=True).data, atol=1e-14)

    def test_prefix_identities_b2(self):
        rng = np.random.default_rng(7)
        n = 8
        a = rng.normal(size=n)
        S = build_structure(n, 2)
        fwd = a @ S.J
        back = a @ S.J.T
        # forward: pairs share the running sum through the end of their segment
        expected_fwd = [a[:2].sum(), a[:2].sum(), a[:4].sum(), a[:4].sum(), a[:6].sum(), a[:6].sum(), a.sum(), a.sum()]
        # backward: pairs share the tail sum from the start of their segment
        expected_back = [a.sum(), a.sum(), a[2:].sum(), a[2:].sum(), a[4:].sum(), a[4:].sum(), a[6:].sum(), a[6:].sum()]
        np.testing.assert_allclose(fwd, expected_fwd, atol=1e-12)
        np.testing.assert_allclose(back, expected_back, atol=1e-12)

    def test_segment_range(self):
        bs = random_scores(np.random.default_rng(9), 11, rows=5, peaked=True)
        m = segment_soft_mask(bs, 3).values.data
        assert m.min() >= 0 and m.max() <= 2 + 1e-12


class TestLengthInvariance:
    def test_same_code_path_any_length(self):
        for n in (8, 64):
            bs = random_scores(np.random.default_rng(n), n, rows=2)
            assert soft_mask(bs).shape == (2, n)
            assert segment_soft_mask(bs, 5).shape == (2, n)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        values = np.random.default_rng(0).random((3, 5))
        path = tmp_path / "m.csv"
        write_matrix_csv(path, values)
        header = path.read_text().splitlines()[0]
        assert header == "query_index,pos_1,pos_2,pos_3,pos_4,pos_5"
        np.testing.assert_array_equal(read_matrix_csv(path), values)

    def test_rejects_3d(self, tmp_path):
        with pytest.raises(ShapeError):
            write_matrix_csv(tmp_path / "x.csv", np.zeros((2, 2, 2)))
