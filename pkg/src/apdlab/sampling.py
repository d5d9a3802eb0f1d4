"""Truncation filters, inverse-CDF sampling and multi-continuation generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cd_core import DecodeConfig, alpha_mask, apd_distribution, cd_distribution, softmax
from .lm_family import TinyLM, Vocabulary, detokenize, lm_logits
from .traces import rank_order

METHODS = ("none", "top_p", "top_k", "top_p_k", "alpha")
SOURCES = ("elm", "cd", "apd")


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "top_p"
    p: float = 0.95
    k: int = 20
    temperature: float = 1.0
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown sampler method {self.method!r}")
        if not 0 < self.p <= 1:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: tuple[int, ...]
    max_new_tokens: int = 32
    n_continuations: int = 8
    source: str = "elm"
    prompt_id: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 0 or self.n_continuations < 1:
            raise ValueError("max_new_tokens must be >= 0 and n_continuations >= 1")
        if self.source not in SOURCES:
            raise ValueError(f"unknown distribution source {self.source!r}")


def _check(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("empty distribution")
    return p


def _keep(p: np.ndarray, support: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros_like(p)
    out[support] = p[support]
    total = out.sum()
    if not total > 0:
        raise ValueError("filter left no probability mass")
    return np.sort(support), out / total


def top_p_filter(probs, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimal probability-sorted prefix with mass >= p, renormalized."""
    q = _check(probs)
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    order = rank_order(q)
    cum = np.cumsum(q[order]) / q.sum()
    n = min(int(np.searchsorted(cum, p - 1e-12, side="left")) + 1, q.size)
    if p >= 1:
        n = q.size
    return _keep(q, order[:n])


def top_k_filter(probs, k: int) -> tuple[np.ndarray, np.ndarray]:
    q = _check(probs)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return _keep(q, rank_order(q)[:k])


def apply_temperature(probs, temperature: float) -> np.ndarray:
    q = _check(probs)
    if temperature == 0:
        out = np.zeros_like(q)
        out[rank_order(q)[0]] = 1.0
        return out
    if temperature == 1:
        return q / q.sum()
    with np.errstate(divide="ignore"):
        return softmax(np.log(q) / temperature)


def compose_filters(probs, config: SamplerConfig, elm_probs=None) -> np.ndarray:
    """Temperature, then the configured truncation (top-k before top-p), renormalized."""
    q = apply_temperature(probs, config.temperature)
    if config.method == "none":
        return q
    if config.method == "top_p":
        return top_p_filter(q, config.p)[1]
    if config.method == "top_k":
        return top_k_filter(q, config.k)[1]
    if config.method == "top_p_k":
        return top_p_filter(top_k_filter(q, config.k)[1], config.p)[1]
    ref = q if elm_probs is None else elm_probs
    return _keep(q, alpha_mask(ref, config.alpha))[1]


def sample_token(dist, rng: np.random.Generator) -> int:
    q = _check(dist)
    cum = np.cumsum(q)
    u = rng.random() * cum[-1]
    return int(min(np.searchsorted(cum, u, side="right"), q.size - 1))


def next_distribution(source: str, elm: TinyLM, context, alm: TinyLM | None = None,
                      alm_prime: TinyLM | None = None,
                      decode: DecodeConfig = DecodeConfig()) -> tuple[np.ndarray, np.ndarray]:
    """(modified distribution, raw ELM distribution) for one context."""
    l_elm = lm_logits(elm, context)
    p_elm = softmax(l_elm)
    if source == "elm":
        return p_elm, p_elm
    if source == "cd":
        if alm is None:
            raise ValueError("cd needs the amateur model")
        return cd_distribution(l_elm, lm_logits(alm, context), decode), p_elm
    if source == "apd":
        if alm_prime is None:
            raise ValueError("apd needs the fine-tuned amateur")
        return apd_distribution(l_elm, lm_logits(alm_prime, context), decode), p_elm
    raise ValueError(f"unknown distribution source {source!r}")


def generate(request: GenerationRequest, elm: TinyLM, *, alm: TinyLM | None = None,
             alm_prime: TinyLM | None = None, decode: DecodeConfig = DecodeConfig(),
             sampler: SamplerConfig = SamplerConfig()) -> list[list[int]]:
    """Autoregressive continuations; continuation i draws from default_rng([seed, i])."""
    out = []
    for idx in range(request.n_continuations):
        rng = np.random.default_rng([sampler.seed, idx])
        ids = list(request.prompt)
        new: list[int] = []
        for _ in range(request.max_new_tokens):
            dist, p_elm = next_distribution(request.source, elm, ids, alm, alm_prime, decode)
            tok = sample_token(compose_filters(dist, sampler, p_elm), rng)
            ids.append(tok)
            new.append(tok)
        out.append(new)
    return out


def generation_rows(request: GenerationRequest, continuations: Sequence[Sequence[int]],
                    vocab: Vocabulary | None = None) -> list[dict]:
    return [{"prompt_id": request.prompt_id, "continuation_idx": i, "token_ids": list(map(int, c)),
             "text": detokenize(c, vocab) if vocab is not None else None}
            for i, c in enumerate(continuations)]


def write_generations(path, rows) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            n += 1
    return n
