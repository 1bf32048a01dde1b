import cmath
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointermem import tensor as T
from pointermem.rope3d import (
    DEFAULT_BASES,
    RopeConfig,
    TokenPosition,
    apply_rope,
    attention_scores,
    complex_multipliers,
    frequencies,
    hierarchical_rotate,
    rotate3d,
    verify_golden,
)

GOLDEN = Path(__file__).parent / "fixtures" / "rope_golden.json"


def oracle_rotate(vec, pos, d_head, base):
    """Per-slot complex multiply, written independently of the package."""
    n = d_head // 6
    out = np.empty(d_head)
    for j in range(d_head // 2):
        z = complex(vec[2 * j], vec[2 * j + 1]) * cmath.exp(1j * base ** (-(j // 3) / n) * pos[j % 3])
        out[2 * j], out[2 * j + 1] = z.real, z.imag
    return out


def oracle_scores(q, k, pq, pk, d_head, bases):
    """Explicit complex vectors and Re(q conj(k)) / sqrt(d)."""
    def cvec(v, p):
        rot = np.mean([oracle_rotate(v, p, d_head, b) for b in bases], axis=0)
        return rot[0::2] + 1j * rot[1::2]

    out = np.empty((len(q), len(k)))
    for a in range(len(q)):
        for b in range(len(k)):
            out[a, b] = (cvec(q[a], pq[a]) * np.conj(cvec(k[b], pk[b]))).sum().real / math.sqrt(d_head)
    return out


class TestConfig:
    @pytest.mark.parametrize("d", [0, 4, 8, 13])
    def test_rejects_bad_d_head(self, d):
        with pytest.raises(ValueError):
            RopeConfig(d)

    @pytest.mark.parametrize("bases", [(), (10.0, -1.0), (0.0,)])
    def test_rejects_bad_bases(self, bases):
        with pytest.raises(ValueError):
            RopeConfig(12, bases)

    def test_default_h(self):
        assert RopeConfig().h == 4 and RopeConfig().bases == DEFAULT_BASES


class TestFrequencies:
    def test_first_is_one(self):
        for b in DEFAULT_BASES:
            assert frequencies(RopeConfig(24), b)[0] == 1.0

    def test_direct_formula(self):
        cfg = RopeConfig(12)
        assert abs(frequencies(cfg, 10)[1] - 0.316227766) < 1e-9
        assert abs(frequencies(cfg, 10000)[1] - 0.01) < 1e-15
        assert len(frequencies(cfg, 10)) == 2

    @pytest.mark.parametrize("d", [6, 12, 24, 48])
    def test_strictly_decreasing(self, d):
        for b in DEFAULT_BASES:
            f = frequencies(RopeConfig(d), b)
            assert f.size == d // 6 and np.all(np.diff(f) < 0)


class TestRotate:
    def test_zero_position(self):
        v = np.random.default_rng(0).normal(size=24)
        cfg = RopeConfig(24)
        assert np.array_equal(rotate3d(v, (0, 0, 0), cfg, 100), v)
        assert np.array_equal(hierarchical_rotate(v, (0, 0, 0), cfg), v)

    def test_quarter_turn_x(self):
        out = rotate3d([1, 0, 1, 0, 1, 0], (math.pi / 2, 0, 0), RopeConfig(6), 10)
        np.testing.assert_allclose(out, [0, 1, 1, 0, 1, 0], atol=1e-15)

    def test_null_is_identity(self):
        v = np.random.default_rng(1).normal(size=12)
        out = hierarchical_rotate(v, TokenPosition((5.0, 1.0, -2.0), True), RopeConfig(12))
        assert np.array_equal(out, v)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            rotate3d(np.ones(10), (0, 0, 0), RopeConfig(12), 10)

    def test_matches_complex_oracle(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            d = (6, 12, 24)[seed % 3]
            v, p = rng.normal(size=d), rng.uniform(-5, 5, 3)
            for b in DEFAULT_BASES:
                assert np.abs(rotate3d(v, p, RopeConfig(d), b) - oracle_rotate(v, p, d, b)).max() < 1e-12

    def test_single_base_hierarchy_equals_rotate(self):
        rng = np.random.default_rng(2)
        v, p = rng.normal(size=12), rng.normal(size=3)
        cfg = RopeConfig(12, (100.0,))
        np.testing.assert_array_equal(hierarchical_rotate(v, p, cfg), rotate3d(v, p, cfg, 100.0))

    def test_hierarchical_is_mean_of_bases(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            v, p = rng.normal(size=24), rng.uniform(-4, 4, 3)
            cfg = RopeConfig(24)
            mean = np.mean([rotate3d(v, p, cfg, b) for b in cfg.bases], axis=0)
            assert np.abs(hierarchical_rotate(v, p, cfg) - mean).max() < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([6, 12, 24]), st.sampled_from(DEFAULT_BASES))
    def test_norm_preserved(self, seed, d, b):
        rng = np.random.default_rng(seed)
        v, p = rng.normal(size=d), rng.uniform(-50, 50, 3)
        assert abs(np.linalg.norm(rotate3d(v, p, RopeConfig(d), b)) - np.linalg.norm(v)) < 1e-12

    def test_golden_file(self):
        assert verify_golden(GOLDEN) < 1e-12
        doc = json.loads(GOLDEN.read_text())
        assert {c["d_head"] for c in doc["cases"]} == {6, 12, 24}


class TestScores:
    def test_all_null_is_plain_attention(self):
        rng = np.random.default_rng(0)
        q, k = rng.normal(size=(3, 12)), rng.normal(size=(4, 12))
        got = attention_scores(q, k, None, None, RopeConfig(12))
        np.testing.assert_allclose(got, q @ k.T / math.sqrt(12), rtol=0, atol=1e-15)

    def test_matches_complex_matrix_oracle(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            d = (6, 12, 24)[seed % 3]
            q, k = rng.normal(size=(3, d)), rng.normal(size=(4, d))
            pq, pk = rng.uniform(-3, 3, (3, 3)), rng.uniform(-3, 3, (4, 3))
            got = attention_scores(q, k, pq, pk, RopeConfig(d))
            assert np.abs(got - oracle_scores(q, k, pq, pk, d, DEFAULT_BASES)).max() < 1e-12

    def test_token_position_lists(self):
        rng = np.random.default_rng(1)
        q, k = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        pk = rng.normal(size=(2, 3))
        pos_q = [TokenPosition.null(), TokenPosition(tuple(pk[1]))]
        a = attention_scores(q, k, pos_q, pk, RopeConfig(6))
        b = attention_scores(q, k, np.array([[0, 0, 0], pk[1]]), pk, RopeConfig(6), null_q=[True, False])
        assert np.array_equal(a, b)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_single_base_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cfg = RopeConfig(12, (100.0,))
        q, k = rng.normal(size=(3, 12)), rng.normal(size=(4, 12))
        pq, pk = rng.uniform(-2, 2, (3, 3)), rng.uniform(-2, 2, (4, 3))
        d = rng.uniform(-10, 10, 3)
        ref = attention_scores(q, k, pq, pk, cfg)
        assert np.abs(attention_scores(q, k, pq + d, pk + d, cfg) - ref).max() < 1e-10


def test_apply_rope_matches_hierarchical_rotate():
    rng = np.random.default_rng(3)
    cfg = RopeConfig(12)
    x = rng.normal(size=(5, 2, 12))
    pos = rng.normal(size=(5, 3))
    null = np.array([False, True, False, False, True])
    out = apply_rope(T.Tensor(x), complex_multipliers(pos, cfg, null)).data
    for n in range(5):
        for h in range(2):
            want = x[n, h] if null[n] else hierarchical_rotate(x[n, h], pos[n], cfg)
            assert np.abs(out[n, h] - want).max() < 1e-13
