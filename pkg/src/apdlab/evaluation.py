"""Answer perplexity, accuracy, MRR, diversity metrics and the obvious-blindness probe.

QA scoring follows one protocol everywhere: at each answer step take the expert's top-20
tokens, renormalize the evaluated distribution over them, add 0.01 to every entry and
renormalize again.  Answers are teacher-forced on their own prefix.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .cd_core import DecodeConfig, apd_distribution, cd_distribution, softmax
from .curves import fit_curves, exp_decay
from .lm_family import TinyLM, lm_logits_batch, prepare_context
from .traces import rank_order

N_TOP = 20
SMOOTHING = 0.01
QA_INV_T_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6,
                 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)

Source = Callable[[tuple[int, ...]], np.ndarray]  # context ids -> full-vocabulary distribution


@dataclass(frozen=True)
class QAItem:
    prompt: tuple[int, ...]
    options: tuple[tuple[int, ...], ...]
    correct: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError("a QA item needs at least two options")
        if not 0 <= self.correct < len(self.options):
            raise ValueError("correct option index out of range")
        if any(len(o) == 0 for o in self.options):
            raise ValueError("answer options must be non-empty")

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt), "options": [list(o) for o in self.options],
                "correct": self.correct}

    @classmethod
    def from_dict(cls, d: dict) -> "QAItem":
        return cls(tuple(d["prompt"]), tuple(tuple(o) for o in d["options"]), int(d["correct"]))


@dataclass
class MetricReport:
    perplexity: float = float("nan")
    accuracy: float = float("nan")
    mrr: float = float("nan")
    dist_n: dict = field(default_factory=dict)
    rep: float = float("nan")
    n_items: int = 0
    n_ppl_items: int = 0
    n_acc_items: int = 0
    label: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- per-step primitives


def top_set(elm_probs, n_top: int = N_TOP) -> np.ndarray:
    return rank_order(elm_probs)[:n_top]


def smooth_top(q_top, smoothing: float = SMOOTHING) -> np.ndarray:
    """Renormalize over the candidate set, add ``smoothing``, renormalize again."""
    q = np.asarray(q_top, dtype=np.float64)
    total = q.sum(axis=-1, keepdims=True)
    q = np.divide(q, total, out=np.full_like(q, 1.0 / q.shape[-1]), where=total > 0)
    q = q + smoothing
    return q / q.sum(axis=-1, keepdims=True)


def smoothed_prob(source_probs, elm_probs, token: int, n_top: int = N_TOP,
                  smoothing: float = SMOOTHING) -> float:
    top = top_set(elm_probs, n_top)
    hit = np.flatnonzero(top == token)
    if hit.size == 0:
        raise ValueError(f"token {token} is outside the expert's top-{n_top}")
    return float(smooth_top(np.asarray(source_probs)[top], smoothing)[hit[0]])


def _prefix_contexts(item: QAItem, option: Sequence[int]):
    for j, tok in enumerate(option):
        yield tuple(item.prompt) + tuple(option[:j]), int(tok)


def answer_perplexity(source: Source, item: QAItem, elm: Source, *, n_top: int = N_TOP,
                      smoothing: float = SMOOTHING) -> np.ndarray:
    """Perplexity of every option; NaN for options leaving the expert's top set."""
    out = np.empty(len(item.options))
    for o, option in enumerate(item.options):
        logs = []
        for ctx, tok in _prefix_contexts(item, option):
            try:
                logs.append(math.log(smoothed_prob(source(ctx), elm(ctx), tok, n_top, smoothing)))
            except ValueError:
                logs = None
                break
        out[o] = math.exp(-float(np.mean(logs))) if logs else float("nan")
    return out


def option_in_top(item: QAItem, option: Sequence[int], elm: Source, n_top: int = N_TOP) -> bool:
    return all(tok in set(top_set(elm(ctx), n_top).tolist()) for ctx, tok in _prefix_contexts(item, option))


@dataclass
class FilterResult:
    ppl_items: list
    acc_items: list
    n_items: int

    @property
    def counts(self) -> dict:
        return {"n_items": self.n_items, "n_ppl_items": len(self.ppl_items),
                "n_acc_items": len(self.acc_items)}


def filter_items(items: Sequence[QAItem], elm: Source, n_top: int = N_TOP) -> FilterResult:
    """Perplexity set: correct answer fully in the top set.  Accuracy set: also one wrong option."""
    ppl, acc = [], []
    for item in items:
        ok = [option_in_top(item, o, elm, n_top) for o in item.options]
        if ok[item.correct]:
            ppl.append(item)
            if any(v for j, v in enumerate(ok) if j != item.correct):
                acc.append(item)
    return FilterResult(ppl, acc, len(items))


def is_correct(ppls: np.ndarray, correct: int) -> bool:
    """Strictly lowest perplexity among surviving (finite) options; ties lose."""
    target = ppls[correct]
    others = np.delete(ppls, correct)
    others = others[np.isfinite(others)]
    return bool(np.isfinite(target) and others.size > 0 and np.all(target < others))


def accuracy(source: Source, items: Sequence[QAItem], elm: Source, **kw) -> float:
    if not items:
        return float("nan")
    return float(np.mean([is_correct(answer_perplexity(source, it, elm, **kw), it.correct)
                          for it in items]))


def reciprocal_rank(scores: np.ndarray, target: int, ids: np.ndarray | None = None,
                    higher_is_better: bool = True) -> float:
    """1 / rank of ``target``; ties broken by ascending id."""
    s = np.asarray(scores, dtype=np.float64)
    ids = np.arange(s.size) if ids is None else np.asarray(ids)
    key = -s if higher_is_better else s
    order = np.lexsort((ids, key))
    return 1.0 / (int(np.flatnonzero(order == target)[0]) + 1)


def mrr_from_ranks(ranks: Sequence[int]) -> float:
    return float(np.mean([1.0 / r for r in ranks])) if len(ranks) else float("nan")


def mrr(source: Source, items: Sequence[QAItem], elm: Source, *, mode: str = "token",
        n_top: int = N_TOP, smoothing: float = SMOOTHING) -> float:
    """Token mode ranks a single-token answer inside the top set; other answers rank options."""
    if mode not in ("token", "option"):
        raise ValueError(f"unknown MRR mode {mode!r}")
    rr = []
    for item in items:
        answer = item.options[item.correct]
        if mode == "token" and len(answer) == 1:
            ctx = tuple(item.prompt)
            top = top_set(elm(ctx), n_top)
            q = np.asarray(source(ctx))[top]
            hit = np.flatnonzero(top == answer[0])
            if hit.size == 0:
                raise ValueError("answer token outside the expert's top set; filter items first")
            rr.append(reciprocal_rank(q, int(hit[0]), ids=top))
        else:
            ppls = answer_perplexity(source, item, elm, n_top=n_top, smoothing=smoothing)
            ppls = np.where(np.isfinite(ppls), ppls, np.inf)
            rr.append(reciprocal_rank(ppls, item.correct, higher_is_better=False))
    return float(np.mean(rr)) if rr else float("nan")


# ---------------------------------------------------------------- cached QA harness


class QAHarness:
    """Precomputes every model's logits on every teacher-forced answer step.

    ``models`` maps names to language models and must include "elm"; distribution
    functions receive that name -> (steps, V) logits mapping.
    """

    def __init__(self, items: Sequence[QAItem], models: Mapping[str, TinyLM],
                 n_top: int = N_TOP, smoothing: float = SMOOTHING):
        if "elm" not in models:
            raise ValueError("the harness needs an 'elm' model")
        self.items = list(items)
        self.n_top, self.smoothing = n_top, smoothing
        elm = models["elm"]
        windows, tokens, owner = [], [], []
        for i, item in enumerate(self.items):
            for o, opt in enumerate(item.options):
                for ctx, tok in _prefix_contexts(item, opt):
                    windows.append(prepare_context(ctx, elm.k, elm.vocab_size))
                    tokens.append(tok)
                    owner.append((i, o))
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.owner = owner
        w = np.stack(windows) if windows else np.zeros((0, elm.k), dtype=np.int64)
        self.logits = {name: lm_logits_batch(m, w) for name, m in models.items()}
        p_elm = softmax(self.logits["elm"]) if len(w) else np.zeros((0, elm.vocab_size))
        self.top = np.stack([top_set(p, n_top) for p in p_elm]) if len(w) else np.zeros((0, n_top), int)
        pos = self.top == self.tokens[:, None]
        self.in_top = pos.any(axis=1)
        self.pos = pos.argmax(axis=1)
        self._option_steps: dict[tuple[int, int], list[int]] = {}
        for s, key in enumerate(owner):
            self._option_steps.setdefault(key, []).append(s)
        self.option_ok = {key: bool(self.in_top[idx].all()) for key, idx in self._option_steps.items()}
        self.ppl_idx = [i for i, it in enumerate(self.items) if self.option_ok[(i, it.correct)]]
        self.acc_idx = [i for i in self.ppl_idx
                        if any(self.option_ok[(i, o)] for o in range(len(self.items[i].options))
                               if o != self.items[i].correct)]

    @property
    def counts(self) -> dict:
        return {"n_items": len(self.items), "n_ppl_items": len(self.ppl_idx),
                "n_acc_items": len(self.acc_idx)}

    def step_probs(self, dist_fn: Callable[[Mapping[str, np.ndarray]], np.ndarray]) -> np.ndarray:
        """(steps, n_top) smoothed probabilities over each step's top set."""
        q = np.asarray(dist_fn(self.logits))
        return smooth_top(np.take_along_axis(q, self.top, axis=1), self.smoothing)

    def option_ppls(self, qs: np.ndarray) -> dict[tuple[int, int], float]:
        logp = np.log(qs[np.arange(len(qs)), self.pos])
        return {key: (math.exp(-float(logp[idx].mean())) if self.option_ok[key] else float("nan"))
                for key, idx in self._option_steps.items()}

    def report(self, dist_fn, *, mrr_mode: str = "token", label: dict | None = None) -> MetricReport:
        qs = self.step_probs(dist_fn)
        ppl = self.option_ppls(qs)
        logp = np.log(qs[np.arange(len(qs)), self.pos])
        nll = [logp[s] for i in self.ppl_idx
               for s in self._option_steps[(i, self.items[i].correct)]]
        rep = MetricReport(n_items=len(self.items), n_ppl_items=len(self.ppl_idx),
                           n_acc_items=len(self.acc_idx), label=dict(label or {}))
        if nll:
            rep.perplexity = math.exp(-float(np.mean(nll)))
        ppl_arr = {i: np.array([ppl[(i, o)] for o in range(len(self.items[i].options))])
                   for i in self.ppl_idx}
        if self.acc_idx:
            rep.accuracy = float(np.mean([is_correct(ppl_arr[i], self.items[i].correct)
                                          for i in self.acc_idx]))
        rr = []
        for i in self.ppl_idx:
            item = self.items[i]
            steps = self._option_steps[(i, item.correct)]
            if mrr_mode == "token" and len(steps) == 1:
                s = steps[0]
                rr.append(reciprocal_rank(qs[s], int(self.pos[s]), ids=self.top[s]))
            else:
                arr = np.where(np.isfinite(ppl_arr[i]), ppl_arr[i], np.inf)
                rr.append(reciprocal_rank(arr, item.correct, higher_is_better=False))
        if rr:
            rep.mrr = float(np.mean(rr))
        return rep


def method_fn(method: str, inv_T: float = 1.0):
    """Distribution function over cached logits for elm / cd / apd at amateur weight 1/T."""
    if method == "elm":
        return lambda L: softmax(L["elm"])
    if inv_T <= 0:
        raise ValueError("1/T must be positive")
    other = {"cd": "alm", "apd": "alm_prime"}.get(method)
    if other is None:
        raise ValueError(f"unknown method {method!r}")
    return lambda L: softmax(L["elm"] - inv_T * L[other])


def sweep(harness: QAHarness, methods: Sequence[str], grid: Sequence[float] = QA_INV_T_GRID,
          criterion: str = "perplexity") -> tuple[list[MetricReport], dict]:
    """One report per (method, 1/T) and the best 1/T per method (ELM has no grid)."""
    reports, best = [], {}
    for method in methods:
        points = [None] if method == "elm" else list(grid)
        rows = []
        for w in points:
            rep = harness.report(method_fn(method, 1.0 if w is None else w),
                                 label={"method": method, "inv_T": w})
            rows.append(rep)
        reports.extend(rows)
        best[method] = select_best(rows, criterion)
    return reports, best


def select_best(rows: Sequence[MetricReport], criterion: str = "perplexity") -> MetricReport:
    if criterion == "perplexity":
        key = lambda r: (r.perplexity if np.isfinite(r.perplexity) else np.inf)  # noqa: E731
    elif criterion in ("accuracy", "mrr"):
        key = lambda r: -(getattr(r, criterion) if np.isfinite(getattr(r, criterion)) else -np.inf)  # noqa: E731
    else:
        raise ValueError(f"unknown selection criterion {criterion!r}")
    return min(rows, key=key)


# ---------------------------------------------------------------- generation diversity


def dist_n(continuations: Sequence[Sequence], n: int = 2) -> float:
    """Unique n-grams over all n-grams across one prompt's continuations (NaN if none)."""
    grams = [tuple(c[i : i + n]) for c in continuations for i in range(len(c) - n + 1)]
    return len(set(grams)) / len(grams) if grams else float("nan")


def mean_dist_n(prompts: Sequence[Sequence[Sequence]], n: int = 2) -> float:
    vals = [v for v in (dist_n(c, n) for c in prompts) if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def is_repetitive(tokens: Sequence, n: int = 4, min_count: int = 3) -> bool:
    counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return any(c >= min_count for c in counts.values())


def rep_ratio(continuations: Sequence[Sequence], predicate=is_repetitive) -> float:
    if not continuations:
        return float("nan")
    return float(np.mean([predicate(c) for c in continuations]))


# ---------------------------------------------------------------- obvious blindness


def obvious_blindness_probe(elm_logits=(2.0, 1.0), alm_logits=(1.8, -5.0),
                            ap_targets=(0.7, 0.2), n_models: int = 5, T: float = 1.0,
                            alm_prime_logits=None) -> dict:
    """CD versus APD argmax on a two-token scenario where the amateur already likes token A.

    Without ``alm_prime_logits`` the fine-tuned amateur is the oracle L_elm - log AP, with AP
    fitted on synthetic traces where A's probability rises toward ap_targets[0] and B's
    toward ap_targets[1].
    """
    elm = np.asarray(elm_logits, dtype=np.float64)
    alm = np.asarray(alm_logits, dtype=np.float64)
    p_cd = cd_distribution(elm, alm, DecodeConfig(T=T))
    fitted_ap = None
    if alm_prime_logits is None:
        s = np.log(np.logspace(6, 10, n_models))
        rise = np.array([0.45, 0.19])  # gap between each token's smallest-model probability and its limit
        ap = np.asarray(ap_targets, dtype=np.float64)
        obs = np.stack([t - r * exp_decay(0.0, 1.0, 0.8, s[0], s) for t, r in zip(ap, rise)])
        fitted_ap = fit_curves(obs, s).ap
        ap_norm = fitted_ap / fitted_ap.sum()
        alm_prime_logits = elm - np.log(ap_norm)
    p_apd = apd_distribution(elm, np.asarray(alm_prime_logits, dtype=np.float64))
    return {"cd_probs": p_cd.tolist(), "apd_probs": p_apd.tolist(),
            "cd_argmax": int(rank_order(p_cd)[0]), "apd_argmax": int(rank_order(p_apd)[0]),
            "elm_argmax": int(rank_order(softmax(elm))[0]),
            "fitted_ap": None if fitted_ap is None else fitted_ap.tolist()}
