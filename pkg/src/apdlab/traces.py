"""Candidate sets, per-model probability traces, and their JSON Lines file format."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cd_core import softmax
from .lm_family import ModelFamily, lm_logits_batch, make_contexts

TRACE_VERSION = 1
DEFAULT_LAYOUT = (20, 5, 5)
MID_BAND_END = 100  # mid samples come from ranks n_top+1 .. 100, tail from ranks > 100


class TraceFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


class TraceHashWarning(UserWarning):
    pass


@dataclass
class CandidateSet:
    tokens: np.ndarray  # int64, top tokens first, then mid samples, then tail samples
    prov: list[str]

    def __len__(self) -> int:
        return len(self.tokens)


def rank_order(p: np.ndarray) -> np.ndarray:
    """Token ids sorted by descending probability, ties by ascending id."""
    p = np.asarray(p)
    return np.lexsort((np.arange(p.size), -p))


def _sample_band(band: np.ndarray, p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if n <= 0 or band.size == 0:
        return band[:0]
    n = min(n, band.size)
    w = p[band].astype(np.float64)
    positive = np.count_nonzero(w > 0)
    if positive < n:
        # zero-probability tokens would be unreachable; give them a floor weight
        w = w + (w[w > 0].min() if positive else 1.0) * 1e-12
    return rng.choice(band, size=n, replace=False, p=w / w.sum())


def build_candidate_set(elm_probs, layout: Sequence[int] = DEFAULT_LAYOUT,
                        seed: int | Sequence[int] = 0) -> CandidateSet:
    p = np.asarray(elm_probs, dtype=np.float64)
    n_top, n_mid, n_tail = layout
    order = rank_order(p)
    if p.size <= n_top:
        return CandidateSet(order.astype(np.int64), ["top"] * p.size)
    rng = np.random.default_rng(seed)
    top = order[:n_top]
    mid = _sample_band(order[n_top:MID_BAND_END], p, n_mid, rng)
    tail = _sample_band(order[MID_BAND_END:], p, n_tail, rng)
    tokens = np.concatenate([top, mid, tail]).astype(np.int64)
    prov = ["top"] * len(top) + ["mid"] * len(mid) + ["tail"] * len(tail)
    return CandidateSet(tokens, prov)


@dataclass
class TraceRecord:
    ctx_id: int
    ctx: np.ndarray      # k-token window fed to every model
    cands: np.ndarray    # candidate token ids
    prov: list[str]
    probs: np.ndarray    # (N, |A_c|) probabilities renormalized within the candidate set
    l_alm: np.ndarray    # (|A_c|,) raw amateur logits
    l_elm: np.ndarray    # (|A_c|,) raw expert logits
    log_sizes: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_models(self) -> int:
        return self.probs.shape[0]


@dataclass
class TraceFile:
    header: dict
    records: list[TraceRecord]

    @property
    def log_sizes(self) -> np.ndarray:
        return np.asarray(self.header["log_sizes"], dtype=np.float64)

    @property
    def n_models(self) -> int:
        return int(self.header["n_models"])

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceFile) or self.header != other.header:
            return False
        if len(self.records) != len(other.records):
            return False
        return all(_records_equal(a, b) for a, b in zip(self.records, other.records))


def _records_equal(a: TraceRecord, b: TraceRecord) -> bool:
    return (a.ctx_id == b.ctx_id and a.prov == b.prov
            and all(np.array_equal(x, y) for x, y in
                    [(a.ctx, b.ctx), (a.cands, b.cands), (a.probs, b.probs),
                     (a.l_alm, b.l_alm), (a.l_elm, b.l_elm)]))


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def make_record(ctx_id: int, ctx: np.ndarray, logits_by_model: np.ndarray,
                layout: Sequence[int], seed: int) -> TraceRecord:
    """logits_by_model: (N, V) full-vocabulary logits of every family member for ``ctx``."""
    elm_probs = softmax(logits_by_model[-1])
    cs = build_candidate_set(elm_probs, layout, seed=[seed, ctx_id])
    sub = logits_by_model[:, cs.tokens]
    probs = softmax(sub, axis=1)  # within-candidate normalization per model
    return TraceRecord(ctx_id, np.asarray(ctx, dtype=np.int64), cs.tokens, cs.prov,
                       _f32(probs), _f32(sub[0]), _f32(sub[-1]))


def collect_traces(family: ModelFamily, lines_or_contexts, layout: Sequence[int] = DEFAULT_LAYOUT,
                   seed: int = 0, *, max_contexts: int | None = None) -> TraceFile:
    """One record per context position, probabilities normalized within each candidate set.

    ``lines_or_contexts`` is either a list of token-id lines (every position becomes a
    context) or an (n, k) array of windows.
    """
    if len(family) < 3:
        raise ValueError("trace collection needs a family of at least 3 models")
    if isinstance(lines_or_contexts, np.ndarray) and lines_or_contexts.ndim == 2:
        contexts = lines_or_contexts.astype(np.int64)
    else:
        contexts, _ = make_contexts(lines_or_contexts, family.k)
    if max_contexts is not None:
        contexts = contexts[:max_contexts]
    header = {"version": TRACE_VERSION, "family_hash": family.hash, "n_models": len(family),
              "log_sizes": [float(x) for x in family.log_sizes], "layout": list(layout),
              "seed": int(seed)}
    records = []
    chunk = 2048
    for start in range(0, len(contexts), chunk):
        block = contexts[start : start + chunk]
        logits = np.stack([lm_logits_batch(m, block) for m in family.members], axis=1)  # (B, N, V)
        for j in range(len(block)):
            records.append(make_record(start + j, block[j], logits[j], layout, seed))
    for r in records:
        r.log_sizes = np.asarray(header["log_sizes"])
    return TraceFile(header, records)


# ---------------------------------------------------------------- JSONL io


def _fmt(x) -> str:
    # shortest decimal that round-trips the float32 value
    v = np.float32(x)
    if not np.isfinite(v):
        raise ValueError("trace values must be finite")
    return str(v)


def _fmt_list(values) -> str:
    return "[" + ",".join(_fmt(v) for v in np.ravel(values)) + "]"


def _record_line(r: TraceRecord) -> str:
    parts = [
        f'"ctx_id":{int(r.ctx_id)}',
        f'"ctx":{json.dumps([int(t) for t in r.ctx])}',
        f'"cands":{json.dumps([int(t) for t in r.cands])}',
        f'"prov":{json.dumps(list(r.prov))}',
        '"probs":[' + ",".join(_fmt_list(row) for row in r.probs) + "]",
        f'"l_alm":{_fmt_list(r.l_alm)}',
        f'"l_elm":{_fmt_list(r.l_elm)}',
    ]
    return "{" + ",".join(parts) + "}"


def write_traces(traces: TraceFile, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(traces.header, sort_keys=True) + "\n")
        for r in traces.records:
            fh.write(_record_line(r) + "\n")


_HEADER_KEYS = {"version", "family_hash", "n_models", "log_sizes", "layout", "seed"}
_RECORD_KEYS = {"ctx_id", "ctx", "cands", "prov", "probs", "l_alm", "l_elm"}


def _parse_record(obj: dict, header: dict, offset: int, lineno: int) -> TraceRecord:
    missing = _RECORD_KEYS - set(obj)
    if missing:
        raise TraceFormatError(f"record missing fields {sorted(missing)}", offset, lineno)
    probs = _f32(obj["probs"])
    n_c = len(obj["cands"])
    if probs.ndim != 2 or probs.shape[0] != header["n_models"]:
        raise TraceFormatError(
            f"record has {probs.shape[0] if probs.ndim else 0} model rows, header says "
            f"{header['n_models']}", offset, lineno)
    if probs.shape[1] != n_c or len(obj["l_alm"]) != n_c or len(obj["l_elm"]) != n_c \
            or len(obj["prov"]) != n_c:
        raise TraceFormatError("record arrays disagree with the candidate count", offset, lineno)
    return TraceRecord(int(obj["ctx_id"]), np.asarray(obj["ctx"], dtype=np.int64),
                       np.asarray(obj["cands"], dtype=np.int64), list(obj["prov"]), probs,
                       _f32(obj["l_alm"]), _f32(obj["l_elm"]),
                       np.asarray(header["log_sizes"], dtype=np.float64))


def iter_trace_lines(path) -> Iterable[tuple[int, int, bytes]]:
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield lineno, offset, raw
            offset += len(raw)


def read_traces(path, family: ModelFamily | None = None) -> TraceFile:
    header = None
    records: list[TraceRecord] = []
    for lineno, offset, raw in iter_trace_lines(path):
        if not raw.endswith(b"\n"):
            raise TraceFormatError("truncated trace file: last line has no terminator",
                                   offset + len(raw), lineno)
        try:
            obj = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise TraceFormatError(f"malformed JSON: {exc.msg if hasattr(exc, 'msg') else exc}",
                                   offset, lineno) from exc
        if header is None:
            if not isinstance(obj, dict) or set(obj) != _HEADER_KEYS:
                raise TraceFormatError("first line is not a trace header", offset, lineno)
            if obj["version"] != TRACE_VERSION:
                raise TraceFormatError(f"unsupported trace version {obj['version']!r}", offset, lineno)
            ls = np.asarray(obj["log_sizes"], dtype=np.float64)
            if len(ls) != obj["n_models"] or np.any(np.diff(ls) <= 0):
                raise TraceFormatError("header log_sizes must be strictly increasing, one per model",
                                       offset, lineno)
            header = obj
            continue
        records.append(_parse_record(obj, header, offset, lineno))
    if header is None:
        raise TraceFormatError("empty trace file", 0, None)
    if family is not None and family.hash != header["family_hash"]:
        warnings.warn(f"{path}: traces were collected with a different family "
                      f"({header['family_hash'][:12]} vs {family.hash[:12]})", TraceHashWarning,
                      stacklevel=2)
    return TraceFile(header, records)
