import numpy as np
import pytest
import torch

from apdlab.cd_core import DecodeConfig
from apdlab.sampling import (GenerationRequest, SamplerConfig, apply_temperature, compose_filters,
                             generate, generation_rows, sample_token, top_k_filter, top_p_filter,
                             write_generations)


class TestTopP:
    def test_hand_example(self):
        support, q = top_p_filter([0.5, 0.3, 0.2], 0.7)
        np.testing.assert_array_equal(support, [0, 1])
        np.testing.assert_allclose(q, [0.625, 0.375, 0.0])

    def test_identity_at_one(self, rng):
        p = rng.dirichlet(np.ones(9))
        np.testing.assert_allclose(top_p_filter(p, 1.0)[1], p)

    def test_argmax_only(self):
        support, q = top_p_filter([0.1, 0.6, 0.3], 0.5)
        np.testing.assert_array_equal(support, [1])
        np.testing.assert_array_equal(q, [0, 1, 0])

    def test_empty(self):
        with pytest.raises(ValueError):
            top_p_filter([], 0.5)


class TestTopK:
    def test_identity_and_argmax(self, rng):
        p = rng.dirichlet(np.ones(6))
        np.testing.assert_allclose(top_k_filter(p, 10)[1], p)
        assert top_k_filter(p, 1)[0].tolist() == [int(np.argmax(p))]

    def test_tie_break_by_id(self):
        support, q = top_k_filter(np.full(5, 0.2), 2)
        np.testing.assert_array_equal(support, [0, 1])
        np.testing.assert_allclose(q, [0.5, 0.5, 0, 0, 0])


class TestCompose:
    def test_top_p_k_hand(self):
        q = compose_filters([0.5, 0.3, 0.1, 0.1], SamplerConfig("top_p_k", p=0.7, k=3))
        np.testing.assert_allclose(q, [0.625, 0.375, 0, 0])

    def test_top_p_k_identity(self, rng):
        p = rng.dirichlet(np.ones(7))
        np.testing.assert_allclose(compose_filters(p, SamplerConfig("top_p_k", p=1.0, k=7)), p)

    @pytest.mark.parametrize("method", ["none", "top_p", "top_k", "top_p_k", "alpha"])
    def test_valid_distribution(self, method, rng):
        for _ in range(50):
            p = rng.dirichlet(np.full(30, 0.3))
            q = compose_filters(p, SamplerConfig(method, p=0.8, k=5, temperature=0.7), elm_probs=p)
            assert q.min() >= 0 and abs(q.sum() - 1) <= 1e-9
            assert np.all(q[p == 0] == 0)

    def test_alpha_uses_elm(self):
        dist = np.array([0.1, 0.1, 0.8])
        elm = np.array([0.9, 0.05, 0.05])
        np.testing.assert_array_equal(compose_filters(dist, SamplerConfig("alpha", alpha=0.1), elm), [1, 0, 0])

    def test_temperature(self):
        p = np.array([0.6, 0.3, 0.1])
        np.testing.assert_array_equal(apply_temperature(p, 0), [1, 0, 0])
        flat = apply_temperature(p, 100.0)
        assert flat.max() - flat.min() < 0.02
        np.testing.assert_allclose(apply_temperature(p, 0.5), p**2 / (p**2).sum())


class TestFilterProperties:
    def test_top_p_minimal_and_monotone(self, rng):
        for _ in range(500):
            p = rng.dirichlet(np.full(40, 0.2))
            p1, p2 = np.sort(rng.uniform(0.05, 1.0, 2))
            s1, _ = top_p_filter(p, p1)
            s2, _ = top_p_filter(p, p2)
            assert set(s1) <= set(s2)
            kept = p[s1]
            assert kept.sum() >= p1 - 1e-12
            assert kept.sum() - kept.min() < p1

    def test_top_k_monotone(self, rng):
        p = rng.dirichlet(np.ones(20))
        supports = [set(top_k_filter(p, k)[0]) for k in range(1, 21)]
        assert all(a <= b for a, b in zip(supports, supports[1:]))


class TestSampleToken:
    def test_point_mass(self):
        rng = np.random.default_rng(0)
        assert {sample_token([0, 0, 1, 0], rng) for _ in range(100)} == {2}

    def test_reproducible(self):
        p = [0.2, 0.5, 0.3]
        a = [sample_token(p, np.random.default_rng(5)) for _ in range(3)]
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        assert [sample_token(p, r1) for _ in range(50)] == [sample_token(p, r2) for _ in range(50)]
        assert len(set(a)) == 1

    def test_frequencies(self):
        rng = np.random.default_rng(1)
        draws = [sample_token([0.75, 0.25], rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.25) < 0.01


class TestGenerate:
    def test_zero_tokens(self, family):
        out = generate(GenerationRequest((3, 4), max_new_tokens=0), family.elm)
        assert out == [[]] * 8

    def test_reproducible_and_distinct_streams(self, family):
        req = GenerationRequest((3, 4, 5), max_new_tokens=6)
        cfg = SamplerConfig("none", seed=4)
        a = generate(req, family.elm, sampler=cfg)
        assert a == generate(req, family.elm, sampler=cfg)
        assert len(a) == 8 and all(len(c) == 6 for c in a)
        assert len({tuple(c) for c in a}) > 1

    def test_apd_with_alm_equals_cd(self, family):
        req_cd = GenerationRequest((3, 4, 5), max_new_tokens=5, n_continuations=3, source="cd")
        req_apd = GenerationRequest((3, 4, 5), max_new_tokens=5, n_continuations=3, source="apd")
        cfg = SamplerConfig("top_p", p=0.9, seed=2)
        cd = generate(req_cd, family.elm, alm=family.alm, decode=DecodeConfig(T=1.0), sampler=cfg)
        apd = generate(req_apd, family.elm, alm_prime=family.alm, sampler=cfg)
        assert cd == apd

    def test_long_prompt_truncated(self, family):
        req = GenerationRequest(tuple(range(2, 20)), max_new_tokens=2, n_continuations=1)
        assert len(generate(req, family.elm)[0]) == 2

    def test_rows(self, family, tmp_path):
        req = GenerationRequest((3,), max_new_tokens=2, n_continuations=2, prompt_id=7)
        rows = generation_rows(req, generate(req, family.elm), family.vocab)
        assert write_generations(tmp_path / "g.jsonl", rows) == 2
        assert rows[1]["prompt_id"] == 7 and rows[1]["continuation_idx"] == 1
        assert isinstance(rows[0]["text"], str)

    def test_bad_request(self):
        with pytest.raises(ValueError):
            GenerationRequest((1,), n_continuations=0)
        with pytest.raises(ValueError):
            GenerationRequest((1,), source="beam")
