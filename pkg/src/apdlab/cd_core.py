"""Contrastive decoding, the APD output distribution, and the hypothetical-LM view of CD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class DecodeConfig:
    T: float = 1.0
    alpha: float = 0.1
    restrict_to: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"amateur temperature must be > 0, got {self.T}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class HlmResult:
    hlm_log_size: float
    logit_scale: float
    size_gap: float

    @property
    def hlm_size(self) -> float:
        return math.exp(self.hlm_log_size)


def cd_logit(l_elm, l_alm, T: float):
    if not T > 0:
        raise ValueError(f"amateur temperature must be > 0, got {T}")
    return np.asarray(l_elm, dtype=np.float64) - np.asarray(l_alm, dtype=np.float64) / T


def _restricted_softmax(logits: np.ndarray, restrict_to) -> np.ndarray:
    if restrict_to is None:
        return softmax(logits)
    idx = np.asarray(restrict_to, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("restrict_to must be non-empty")
    out = np.zeros_like(logits)
    out[idx] = softmax(logits[idx])
    return out


def cd_distribution(elm_logits, alm_logits, config: DecodeConfig = DecodeConfig()) -> np.ndarray:
    """softmax(L_elm - L_alm / T), optionally renormalized over ``config.restrict_to``."""
    elm = np.asarray(elm_logits, dtype=np.float64)
    alm = np.asarray(alm_logits, dtype=np.float64)
    if elm.shape != alm.shape:
        raise ValueError(f"logit length mismatch: {elm.shape} vs {alm.shape}")
    return _restricted_softmax(cd_logit(elm, alm, config.T), config.restrict_to)


def apd_distribution(elm_logits, alm_prime_logits, config: DecodeConfig | None = None) -> np.ndarray:
    # same formula as CD with the fine-tuned amateur; T defaults to 1
    return cd_distribution(elm_logits, alm_prime_logits, config or DecodeConfig(T=1.0))


def hlm_size(log_s_elm: float, log_s_alm: float, T: float) -> HlmResult:
    """Size of the model whose (scaled) logits CD reproduces under a linear logit/log-size law.

    log s_HLM = (T log s_ELM - log s_ALM) / (T - 1); CD logits equal (1 - 1/T) times
    that model's logits.
    """
    if not T > 1:
        raise ValueError(f"the extrapolation view needs T > 1, got {T}")
    if log_s_elm < log_s_alm:
        raise ValueError("expert must be at least as large as the amateur")
    gap = log_s_elm - log_s_alm
    # log s_ELM + gap / (T - 1) is the same quantity, better conditioned for huge T
    return HlmResult(log_s_elm + gap / (T - 1.0), 1.0 - 1.0 / T, gap)


def logit_gap(l_elm, l_alm) -> np.ndarray:
    return np.asarray(l_alm, dtype=np.float64) - np.asarray(l_elm, dtype=np.float64)


def verify_theorem(slopes: Sequence[float], intercepts: Sequence[float],
                   log_s_alm: float, log_s_elm: float, T: float) -> float:
    """Max |CD logit - (1 - 1/T) * line(log s_HLM)| over tokens whose logit is linear in log size."""
    slopes = np.asarray(slopes, dtype=np.float64)
    intercepts = np.asarray(intercepts, dtype=np.float64)
    h = hlm_size(log_s_elm, log_s_alm, T)
    l_elm = slopes * log_s_elm + intercepts
    l_alm = slopes * log_s_alm + intercepts
    l_hlm = slopes * h.hlm_log_size + intercepts
    return float(np.max(np.abs(cd_logit(l_elm, l_alm, T) - h.logit_scale * l_hlm)))


def alpha_mask(elm_probs, alpha: float) -> np.ndarray:
    """Token ids with p_ELM(w) >= alpha * max p_ELM, ascending."""
    p = np.asarray(elm_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty distribution")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return np.flatnonzero(p >= alpha * p.max())
