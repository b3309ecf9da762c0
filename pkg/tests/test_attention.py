import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptrol.attention import (
    AttentionBlockWeights,
    ConditionSet,
    build_bias_vanilla,
    cross_attention,
    direct_adding,
    latent_to_image_mass,
    mm_attention,
)
from conceptrol.numerics import LOG_FLOOR


def random_block(g, c=4, h=2, d=3, block_id=0):
    return AttentionBlockWeights(
        block_id,
        g.normal(size=(h, c, d)),
        g.normal(size=(h, c, d)),
        g.normal(size=(h, c, c // h)),
    )


def naive_attention(x, c, w):
    """Per-head loop with scalar exp; independent of the vectorized kernel."""
    heads, d = w.heads, w.head_dim
    maps, cols = [], []
    for hd in range(heads):
        q = [[sum(x[i][k] * w.w_q[hd][k][j] for k in range(len(x[0]))) for j in range(d)] for i in range(len(x))]
        kk = [[sum(c[i][k] * w.w_k[hd][k][j] for k in range(len(c[0]))) for j in range(d)] for i in range(len(c))]
        v = [[sum(c[i][k] * w.w_v[hd][k][j] for k in range(len(c[0]))) for j in range(w.w_v.shape[2])] for i in range(len(c))]
        a = []
        for i in range(len(x)):
            logits = [sum(q[i][j] * kk[r][j] for j in range(d)) / math.sqrt(d) for r in range(len(c))]
            top = max(logits)
            e = [math.exp(z - top) for z in logits]
            s = sum(e)
            a.append([z / s for z in e])
        maps.append(a)
        cols.append([[sum(a[i][r] * v[r][j] for r in range(len(c))) for j in range(len(v[0]))] for i in range(len(x))])
    values = np.concatenate([np.array(cl) for cl in cols], axis=1)
    return np.array(maps), values


class TestConditionSet:
    def test_valid(self, rng):
        cs = ConditionSet(rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), (1, 3))
        assert cs.num_text == 5 and cs.num_concept == 2
        assert cs.concept_tokens.shape == (2, 4)

    @pytest.mark.parametrize("span", [(2, 2), (3, 1), (0, 6), (-1, 2)])
    def test_bad_span(self, rng, span):
        with pytest.raises(ValueError):
            ConditionSet(rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), span)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            ConditionSet(rng.normal(size=(5, 4)), rng.normal(size=(3, 5)), (0, 1))


class TestBlockWeights:
    def test_value_dim_checked(self, rng):
        with pytest.raises(ValueError):
            AttentionBlockWeights(0, rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3)))

    def test_read_only(self, rng):
        w = random_block(rng)
        with pytest.raises(ValueError):
            w.w_q[0, 0, 0] = 1.0


class TestCrossAttention:
    def test_single_key(self, rng):
        out = cross_attention(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), random_block(rng))
        assert np.array_equal(out.maps, np.ones((2, 1, 1)))

    def test_zero_logits_uniform(self, rng):
        w = AttentionBlockWeights(0, np.zeros((2, 4, 3)), np.zeros((2, 4, 3)), rng.normal(size=(2, 4, 2)))
        out = cross_attention(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), w)
        assert np.array_equal(out.maps, np.full((2, 3, 5), 0.2))

    def test_against_naive(self, rng):
        w = random_block(rng)
        x, c = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
        maps, values = naive_attention(x.tolist(), c.tolist(), w)
        out = cross_attention(x, c, w)
        assert np.max(np.abs(out.maps - maps)) <= 1e-12
        assert np.max(np.abs(out.values - values)) <= 1e-12

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            cross_attention(rng.normal(size=(2, 5)), rng.normal(size=(2, 4)), random_block(rng))

    @given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
    def test_rows_sum_to_one(self, seed, n, k):
        g = np.random.default_rng(seed)
        out = cross_attention(g.normal(size=(n, 4)), g.normal(size=(k, 4)), random_block(g))
        assert np.all(np.abs(out.maps.sum(axis=-1) - 1) <= 1e-12)
        assert np.all(out.maps >= 0)


class TestDirectAdding:
    def test_lambda_zero_is_text_only(self, rng):
        w = random_block(rng)
        x, ct, ci = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        assert np.array_equal(direct_adding(x, ct, ci, w, 0.0).values, cross_attention(x, ct, w).values)

    def test_same_condition_doubles(self, rng):
        w = random_block(rng)
        x, ct = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        out = direct_adding(x, ct, ct, w, 1.0)
        assert np.array_equal(out.values, 2 * cross_attention(x, ct, w).values)

    def test_recompose(self, rng):
        w = random_block(rng)
        x, ct, ci = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        a, b = cross_attention(x, ct, w).values, cross_attention(x, ci, w).values
        out = direct_adding(x, ct, ci, w, 0.5)
        assert np.array_equal(out.values, a + 0.5 * b)
        assert out.image_maps.shape == (2, 5, 2)

    def test_negative_lambda(self, rng):
        with pytest.raises(ValueError):
            direct_adding(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), random_block(rng), -0.1)


class TestVanillaBias:
    def test_lambda_one_zero(self):
        assert np.array_equal(build_bias_vanilla(1.0, 3, 2), np.zeros((7, 7)))

    def test_lambda_e(self):
        b = build_bias_vanilla(math.e, 2, 3)
        assert b.sum() == 18.0 and set(np.unique(b)) == {0.0, 1.0}

    def test_hand_indexed(self):
        b = build_bias_vanilla(2.0, 2, 3)
        assert b.shape == (8, 8)
        for i in range(8):
            for j in range(8):
                inside = (2 <= i <= 4 and 5 <= j <= 7) or (5 <= i <= 7 and 2 <= j <= 4)
                assert b[i, j] == (math.log(2.0) if inside else 0.0)

    def test_zero_floored(self):
        assert build_bias_vanilla(0.0, 1, 1)[1, 2] == LOG_FLOOR


def mm_instance(g, m=3, n=4, c=4):
    return g.normal(size=(n, c)), g.normal(size=(m, c)), g.normal(size=(n, c)), random_block(g, c=c)


class TestMMAttention:
    def test_unit_lambda_equals_plain(self, rng):
        x, ct, ci, w = mm_instance(rng)
        a = mm_attention(x, ct, ci, w, build_bias_vanilla(1.0, 3, 4))
        b = mm_attention(x, ct, ci, w, None)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.maps, b.maps)

    def test_floored_block_blocks_mass(self, rng):
        x, ct, ci, w = mm_instance(rng)
        out = mm_attention(x, ct, ci, w, build_bias_vanilla(0.0, 3, 4))
        assert np.all(out.maps[:, 3:7, 7:].sum(axis=-1) <= 1e-10)

    def test_monotone_mass(self, rng):
        x, ct, ci, w = mm_instance(rng)
        mass = [latent_to_image_mass(mm_attention(x, ct, ci, w, build_bias_vanilla(lam, 3, 4)), 3, 4).sum()
                for lam in (0.5, 1.0, 2.0)]
        assert mass[0] <= mass[1] <= mass[2]

    def test_bias_shape_checked(self, rng):
        x, ct, ci, w = mm_instance(rng)
        with pytest.raises(ValueError):
            mm_attention(x, ct, ci, w, np.zeros((5, 5)))

    def test_unequal_image_count(self, rng):
        x, ct, _, w = mm_instance(rng)
        with pytest.raises(ValueError):
            mm_attention(x, ct, rng.normal(size=(2, 4)), w)

    def test_matches_naive_over_fused(self, rng):
        x, ct, ci, w = mm_instance(rng)
        fused = np.concatenate([ct, x, ci])
        maps, values = naive_attention(fused.tolist(), fused.tolist(), w)
        out = mm_attention(x, ct, ci, w)
        assert np.max(np.abs(out.maps - maps)) <= 1e-12
        assert np.max(np.abs(out.values - values)) <= 1e-12

    @given(st.integers(0, 2**31), st.integers(1, 4), st.floats(0.1, 5.0))
    def test_condition_swap_symmetry(self, seed, n, lam):
        g = np.random.default_rng(seed)
        x, a, b, w = g.normal(size=(n, 4)), g.normal(size=(n, 4)), g.normal(size=(n, 4)), random_block(g)
        bias = build_bias_vanilla(lam, n, n)
        # move the first condition block to the end and the last to the front
        perm = np.r_[2 * n : 3 * n, n : 2 * n, 0:n]
        swapped = mm_attention(x, b, a, w, bias[np.ix_(perm, perm)])
        out = mm_attention(x, a, b, w, bias)
        assert np.max(np.abs(swapped.values - out.values[perm])) <= 1e-12

    @given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4))
    def test_rows_sum_to_one(self, seed, m, n):
        g = np.random.default_rng(seed)
        x, ct, ci, w = mm_instance(g, m, n)
        out = mm_attention(x, ct, ci, w, build_bias_vanilla(float(g.random() * 3), m, n))
        assert np.all(np.abs(out.maps.sum(axis=-1) - 1) <= 1e-12)
