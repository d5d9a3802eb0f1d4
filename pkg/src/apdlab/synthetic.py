"""A teacher language with a known next-token distribution, and QA items drawn from it.

The teacher conditions on the previous two words.  Its logits add a bigram table (each
word has one strongly preferred "obvious" successor), a per-word shift from the word two
back, and a sparse trigram interaction that only higher-capacity students can pick up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cd_core import softmax
from .evaluation import QAItem
from .lm_family import TinyLM, Vocabulary, build_vocab, lm_logits_batch, tokenize
from .traces import TRACE_VERSION, TraceFile, TraceRecord


@dataclass
class Teacher:
    words: list[str]
    bigram: np.ndarray      # (W+1, W); row W is the start state
    skip: np.ndarray        # (W+1, W)
    trigram: np.ndarray     # (W+1, W+1, W)

    @property
    def n_words(self) -> int:
        return len(self.words)

    def logits(self, prev2: int, prev1: int) -> np.ndarray:
        return self.bigram[prev1] + self.skip[prev2] + self.trigram[prev2, prev1]

    def probs(self, prev2: int, prev1: int) -> np.ndarray:
        return softmax(self.logits(prev2, prev1))

    @property
    def start(self) -> int:
        return self.n_words


def make_teacher(n_words: int = 64, seed: int = 0, *, obvious_boost: float = 3.0,
                 bigram_scale: float = 1.0, skip_scale: float = 0.7,
                 trigram_scale: float = 3.0, trigram_density: float = 0.08,
                 unigram_scale: float = 0.0) -> Teacher:
    rng = np.random.default_rng(seed)
    W = n_words
    bigram = rng.normal(0.0, bigram_scale, (W + 1, W))
    obvious = rng.integers(0, W, W + 1)
    bigram[np.arange(W + 1), obvious] += obvious_boost
    skip = rng.normal(0.0, skip_scale, (W + 1, W))
    hit = rng.random((W + 1, W + 1, W)) < trigram_density
    trigram = np.where(hit, rng.normal(0.0, trigram_scale, (W + 1, W + 1, W)), 0.0)
    # Zipf-like prior shared by every context: low ids are frequent everywhere
    bigram -= unigram_scale * np.log1p(np.arange(W))[None, :]
    words = [f"w{i:02d}" for i in range(W)]
    return Teacher(words, bigram, skip, trigram)


def sample_lines(teacher: Teacher, n_lines: int, line_len: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        p2 = p1 = teacher.start
        line = []
        for _ in range(line_len):
            w = int(rng.choice(teacher.n_words, p=teacher.probs(p2, p1)))
            line.append(w)
            p2, p1 = p1, w
        lines.append(line)
    return lines


def lines_to_text(teacher: Teacher, lines) -> str:
    return "\n".join(" ".join(teacher.words[w] for w in line) for line in lines) + "\n"


def teacher_vocab(teacher: Teacher) -> Vocabulary:
    return build_vocab(" ".join(teacher.words), mode="whitespace")


@dataclass
class QASet:
    items: list[QAItem]
    true_probs: np.ndarray  # (n_items, W) teacher next-word distribution per prompt


def make_qa(teacher: Teacher, vocab: Vocabulary, n_items: int, seed: int, *,
            prompt_len: int = 6, n_options: int = 4, distractor_pool: int = 10,
            contextual: bool = False, max_tries: int = 200) -> QASet:
    """Prompts are fresh teacher samples; the correct option is the teacher's argmax word,
    distractors are other words from the teacher's top ``distractor_pool``.

    ``contextual`` keeps only prompts whose answer needs the two-word interaction: the argmax
    differs from the argmax without the trigram term, and that shallow favourite is always
    one of the distractors.
    """
    rng = np.random.default_rng(seed)
    items, truth = [], []
    for _ in range(max_tries):
        for line in sample_lines(teacher, n_items, prompt_len, int(rng.integers(2**32))):
            if len(items) == n_items:
                break
            p2, p1 = (line[-2], line[-1]) if prompt_len >= 2 else (teacher.start, line[-1])
            p = teacher.probs(p2, p1)
            order = np.argsort(-p, kind="stable")
            if contextual:
                shallow = int(np.argmax(teacher.bigram[p1] + teacher.skip[p2]))
                if shallow == order[0]:
                    continue
                pool = [int(w) for w in order[1:distractor_pool] if w != shallow]
                wrong = [shallow] + [int(w) for w in rng.choice(pool, size=n_options - 2, replace=False)]
            else:
                wrong = rng.choice(order[1:distractor_pool], size=n_options - 1, replace=False)
            opts = [int(order[0])] + [int(w) for w in wrong]
            perm = rng.permutation(n_options)
            opts = [opts[j] for j in perm]
            correct = int(np.flatnonzero(perm == 0)[0])
            prompt = tuple(tokenize(" ".join(teacher.words[w] for w in line), vocab))
            options = tuple((vocab.lookup(teacher.words[w]),) for w in opts)
            items.append(QAItem(prompt, options, correct))
            truth.append(p)
        if len(items) == n_items:
            break
    if len(items) < n_items:
        raise ValueError(f"only {len(items)} of {n_items} prompts qualified")
    return QASet(items, np.stack(truth))


def oracle_traces(alm: TinyLM, n_records: int, n_models: int = 5, seed: int = 0, *,
                  n_cands: int = 8, flat: bool = False) -> TraceFile:
    """Traces whose per-model probabilities follow known exponential decays.

    Each candidate gets an asymptote from a Dirichlet draw and a decaying excess; rows are
    renormalized per model.  ``flat`` makes every model agree (no trend at all).  The
    amateur logits come from ``alm`` so the traces pass the training consistency check.
    """
    rng = np.random.default_rng(seed)
    V, k = alm.vocab_size, alm.k
    log_sizes = np.log(np.logspace(4, 7, n_models))
    s = log_sizes - log_sizes[0]
    C = min(n_cands, V)
    ctx = rng.integers(0, V, (n_records, k))
    l_alm_full = lm_logits_batch(alm, ctx)
    records = []
    for j in range(n_records):
        cands = rng.choice(V, size=C, replace=False)
        ap = rng.dirichlet(np.ones(C))
        if flat:
            probs = np.tile(ap, (n_models, 1))
        else:
            a = rng.uniform(0.0, 0.3, C)
            b = rng.uniform(0.5, 1.5, C)
            sign = np.where(rng.random(C) < 0.5, 1.0, -1.0)
            raw = np.clip(ap[None, :] + sign * a * np.exp(-b * s[:, None]), 1e-4, None)
            probs = raw / raw.sum(axis=1, keepdims=True)
        l_elm = np.log(probs[-1])
        records.append(TraceRecord(j, ctx[j].astype(np.int64), cands.astype(np.int64), ["top"] * C,
                                   probs.astype(np.float32), l_alm_full[j, cands].astype(np.float32),
                                   l_elm.astype(np.float32), log_sizes))
    header = {"version": TRACE_VERSION, "family_hash": "oracle", "n_models": n_models,
              "log_sizes": log_sizes.tolist(), "layout": [C, 0, 0], "seed": seed}
    return TraceFile(header, records)


@dataclass
class ToyConfig:
    n_words: int = 24
    n_lines: int = 3000
    line_len: int = 20
    specs: tuple = ((8, 80, 80), (16, 280, 280), (32, 960, 960), (64, 3100, 3100))
    family_epochs: int = 4
    family_lr: float = 1e-3
    family_batch: int = 256
    max_contexts: int | None = 20000
    apd_epochs: int = 5
    apd_lr: float = 1e-3
    lambda3: float = 0.1
    n_qa: int = 500
    seed: int = 0


def run_toy_experiment(config: ToyConfig = ToyConfig()) -> dict:
    """Train a family on teacher text, fine-tune ALM', and sweep ELM/CD/APD on contextual QA."""
    from .apd_training import TrainConfig, train_alm_prime
    from .evaluation import QAHarness, sweep
    from .lm_family import Corpus, train_family
    from .traces import collect_traces

    c = config
    teacher = make_teacher(c.n_words, seed=c.seed)
    vocab = teacher_vocab(teacher)
    lines = sample_lines(teacher, c.n_lines, c.line_len, seed=c.seed + 1)
    corpus = Corpus.from_text(lines_to_text(teacher, lines), vocab=vocab, mode="whitespace", seed=c.seed)
    fam = train_family(corpus, c.specs, seed=c.seed, k=3, epochs=c.family_epochs, lr=c.family_lr,
                       batch_size=c.family_batch)
    traces = collect_traces(fam, corpus.train_lines, seed=c.seed, max_contexts=c.max_contexts)
    res = train_alm_prime(traces, fam.alm, TrainConfig(lambda3=c.lambda3, lr=c.apd_lr,
                                                       epochs=c.apd_epochs, seed=c.seed),
                          family_hash=fam.hash)
    qa = make_qa(teacher, vocab, c.n_qa, seed=c.seed + 7, contextual=True)
    harness = QAHarness(qa.items, {"elm": fam.elm, "alm": fam.alm, "alm_prime": res.alm_prime})
    reports, best = sweep(harness, ["elm", "cd", "apd"])
    return {"family": fam.manifest["members"], "n_traces": len(traces), "counts": harness.counts,
            "reports": reports, "best": best, "train_history": res.history}
