import warnings

import numpy as np
import pytest

from apdlab.cd_core import softmax
from apdlab.lm_family import lm_logits_batch
from apdlab.traces import (TraceFormatError, TraceHashWarning, build_candidate_set, collect_traces,
                           read_traces, write_traces)


class TestCandidateSet:
    def test_small_vocabulary(self, rng):
        cs = build_candidate_set(rng.dirichlet(np.ones(15)), (20, 5, 5), seed=0)
        assert sorted(cs.tokens.tolist()) == list(range(15))
        assert set(cs.prov) == {"top"}

    def test_determinism(self, rng):
        p = rng.dirichlet(np.ones(500))
        a, b = build_candidate_set(p, seed=[4, 2]), build_candidate_set(p, seed=[4, 2])
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_uniform_structure(self):
        cs = build_candidate_set(np.full(1000, 1e-3), (20, 5, 5), seed=3)
        assert len(cs) == 30 and len(set(cs.tokens.tolist())) == 30
        # uniform ties rank by id, so the top band is ids 0..19, mid 20..99, tail >= 100
        np.testing.assert_array_equal(cs.tokens[:20], np.arange(20))
        assert all(20 <= t < 100 for t in cs.tokens[20:25])
        assert all(t >= 100 for t in cs.tokens[25:])
        assert cs.prov == ["top"] * 20 + ["mid"] * 5 + ["tail"] * 5

    def test_top_tokens_are_elm_top(self, rng):
        p = rng.dirichlet(np.full(300, 0.3))
        cs = build_candidate_set(p, seed=1)
        assert set(cs.tokens[:20].tolist()) == set(np.argsort(-p)[:20].tolist())

    def test_short_band(self, rng):
        cs = build_candidate_set(rng.dirichlet(np.ones(23)), (20, 5, 5), seed=0)
        assert cs.prov.count("mid") == 3 and cs.prov.count("tail") == 0


class TestCollect:
    def test_normalized(self, traces):
        for r in traces.records:
            np.testing.assert_allclose(r.probs.sum(axis=1), 1.0, atol=1e-6)
            assert r.probs.min() >= 0 and r.probs.max() <= 1

    def test_one_record_per_position(self, traces, corpus):
        assert len(traces) == sum(len(ln) for ln in corpus.train_lines[:12])
        assert [r.ctx_id for r in traces.records] == list(range(len(traces)))

    def test_replay(self, traces, family, rng):
        for j in rng.choice(len(traces), size=min(50, len(traces)), replace=False):
            r = traces.records[j]
            logits = np.stack([lm_logits_batch(m, r.ctx[None])[0][r.cands] for m in family.members])
            np.testing.assert_allclose(r.probs, softmax(logits, axis=1), atol=1e-6)
            np.testing.assert_allclose(r.l_elm, logits[-1], atol=1e-5)

    def test_top_coverage(self, traces, family):
        V = len(family.vocab)
        r = traces.records[5]
        p = softmax(lm_logits_batch(family.elm, r.ctx[None])[0])
        top = np.argsort(-p, kind="stable")[: min(8, V)]
        assert set(top.tolist()) <= set(r.cands.tolist())

    def test_needs_three_members(self, family, corpus):
        from apdlab.lm_family import ModelFamily
        small = ModelFamily(family.members[:1], family.vocab, {})
        with pytest.raises(ValueError):
            collect_traces(small, corpus.train_lines[:1])


class TestFile:
    def test_round_trip(self, traces, tmp_path):
        write_traces(traces, tmp_path / "t.jsonl")
        back = read_traces(tmp_path / "t.jsonl")
        assert back == traces
        for a, b in zip(traces.records, back.records):
            assert a.probs.dtype == b.probs.dtype == np.float32
            assert np.array_equal(a.probs.view(np.uint32), b.probs.view(np.uint32))

    def test_truncated(self, traces, tmp_path):
        path = tmp_path / "t.jsonl"
        write_traces(traces, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(TraceFormatError, match="byte offset") as exc:
            read_traces(path)
        assert exc.value.offset is not None

    def test_width_mismatch(self, traces, tmp_path):
        path = tmp_path / "t.jsonl"
        write_traces(traces, path)
        lines = path.read_text().splitlines(keepends=True)
        lines[0] = lines[0].replace('"n_models": 4', '"n_models": 7').replace(
            '"log_sizes": [', '"log_sizes": [-3.0, -2.0, -1.0, ')
        path.write_text("".join(lines))
        with pytest.raises(TraceFormatError, match="model rows"):
            read_traces(path)

    def test_hash_mismatch_warns(self, traces, family, tmp_path):
        path = tmp_path / "t.jsonl"
        traces.header["family_hash"], orig = "f" * 64, traces.header["family_hash"]
        try:
            write_traces(traces, path)
        finally:
            traces.header["family_hash"] = orig
        with pytest.warns(TraceHashWarning):
            back = read_traces(path, family=family)
        assert len(back) == len(traces)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            write_traces(traces, path)
            read_traces(path, family=family)
