"""Tiny fixed-window feedforward language models trained as a size-ordered family."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .containers import ContainerError, read_container, write_container

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, member: int, epoch: int, step: int):
        super().__init__(f"family member {member} diverged (NaN loss) at epoch {epoch}, step {step}")
        self.member = member
        self.epoch = epoch
        self.step = step


class ModelFormatError(ContainerError):
    pass


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    mode: str = "char"

    def __post_init__(self):
        if self.mode not in ("char", "whitespace"):
            raise ValueError(f"unknown tokenization mode {self.mode!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if self.tokens[:2] != (PAD, UNK):
            raise ValueError("ids 0 and 1 are reserved for <pad> and <unk>")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def hash(self) -> str:
        blob = json.dumps({"mode": self.mode, "tokens": list(self.tokens)}).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), d["mode"])


def _split_units(text: str, mode: str) -> list[str]:
    return list(text) if mode == "char" else text.split()


def build_vocab(texts: Sequence[str] | str, mode: str = "char") -> Vocabulary:
    if isinstance(texts, str):
        texts = texts.splitlines()
    seen = {}
    for line in texts:
        for unit in _split_units(line, mode):
            seen.setdefault(unit, None)
    body = sorted(t for t in seen if t not in (PAD, UNK))
    return Vocabulary((PAD, UNK, *body), mode)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.lookup(u) for u in _split_units(text, vocab.mode)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    sep = "" if vocab.mode == "char" else " "
    return sep.join(vocab.token(int(i)) for i in ids)


# ---------------------------------------------------------------- corpus


@dataclass
class Corpus:
    lines: list[np.ndarray]
    vocab: Vocabulary
    valid_ratio: float = 0.1
    seed: int = 0
    text_hash: str = ""
    valid_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        V = len(self.vocab)
        for line in self.lines:
            if line.size and (line.min() < 0 or line.max() >= V):
                raise ValueError("corpus contains token ids outside the vocabulary")
        n_valid = int(round(self.valid_ratio * len(self.lines)))
        digest = hashlib.sha256(f"{self.text_hash}:{self.valid_ratio}:{self.seed}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        self.valid_index = np.sort(rng.permutation(len(self.lines))[:n_valid])

    @classmethod
    def from_text(cls, text: str, vocab: Vocabulary | None = None, mode: str = "char",
                  valid_ratio: float = 0.1, seed: int = 0) -> "Corpus":
        raw_lines = [ln for ln in text.splitlines() if ln.strip()]
        vocab = vocab or build_vocab(raw_lines, mode)
        lines = [np.asarray(tokenize(ln, vocab), dtype=np.int64) for ln in raw_lines]
        text_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return cls(lines, vocab, valid_ratio, seed, text_hash)

    @classmethod
    def from_file(cls, path, **kwargs) -> "Corpus":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **kwargs)

    @property
    def train_lines(self) -> list[np.ndarray]:
        held = set(self.valid_index.tolist())
        return [ln for i, ln in enumerate(self.lines) if i not in held]

    @property
    def valid_lines(self) -> list[np.ndarray]:
        return [self.lines[i] for i in self.valid_index]

    @property
    def n_tokens(self) -> int:
        return int(sum(len(ln) for ln in self.lines))


def make_contexts(lines: Sequence[np.ndarray], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Every position of every line becomes (left-padded k-token window, next token)."""
    xs, ys = [], []
    for line in lines:
        line = np.asarray(line, dtype=np.int64)
        if line.size == 0:
            continue
        padded = np.concatenate([np.full(k, PAD_ID, dtype=np.int64), line])
        windows = np.lib.stride_tricks.sliding_window_view(padded[:-1], k)
        xs.append(windows)
        ys.append(line)
    if not xs:
        return np.zeros((0, k), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs).copy(), np.concatenate(ys)


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class SizeSpec:
    embed: int
    hidden: tuple[int, int]

    @classmethod
    def coerce(cls, spec) -> "SizeSpec":
        if isinstance(spec, SizeSpec):
            return spec
        if isinstance(spec, dict):
            return cls(int(spec["embed"]), tuple(int(h) for h in spec["hidden"]))
        embed, h1, h2 = spec
        return cls(int(embed), (int(h1), int(h2)))

    def param_count(self, vocab_size: int, k: int) -> int:
        h1, h2 = self.hidden
        return (vocab_size * self.embed + (k * self.embed + 1) * h1
                + (h1 + 1) * h2 + (h2 + 1) * vocab_size)


class TinyLM(nn.Module):
    """Embed a k-token window, concatenate, two GELU hidden layers, logits over V."""

    def __init__(self, vocab_size: int, k: int, spec: SizeSpec, vocab_hash: str = ""):
        super().__init__()
        self.vocab_size = vocab_size
        self.k = k
        self.spec = spec
        self.vocab_hash = vocab_hash
        h1, h2 = spec.hidden
        self.embed = nn.Embedding(vocab_size, spec.embed)
        self.fc1 = nn.Linear(k * spec.embed, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.out = nn.Linear(h2, vocab_size)
        self.act = nn.GELU()

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.embed.weight.normal_(0.0, 1.0, generator=generator)
            for lin in (self.fc1, self.fc2, self.out):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed(x).reshape(x.shape[0], -1)
        h = self.act(self.fc1(h))
        h = self.act(self.fc2(h))
        return self.out(h)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def log_size(self) -> float:
        return math.log(self.param_count)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def clone(self) -> "TinyLM":
        twin = TinyLM(self.vocab_size, self.k, self.spec, self.vocab_hash)
        twin.load_state_dict({n: t.clone() for n, t in self.state_dict().items()})
        return twin


def prepare_context(context: Sequence[int], k: int, vocab_size: int) -> np.ndarray:
    ctx = np.asarray(context, dtype=np.int64).reshape(-1)
    if ctx.size and (ctx.min() < 0 or ctx.max() >= vocab_size):
        raise ValueError(f"context contains ids outside [0, {vocab_size})")
    ctx = ctx[-k:] if k else ctx[:0]
    if ctx.size < k:
        ctx = np.concatenate([np.full(k - ctx.size, PAD_ID, dtype=np.int64), ctx])
    return ctx


def lm_logits(model: TinyLM, context: Sequence[int]) -> np.ndarray:
    ctx = prepare_context(context, model.k, model.vocab_size)
    return lm_logits_batch(model, ctx[None, :])[0]


def lm_logits_batch(model: TinyLM, contexts: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Float64 copy of the float32 logits for an (n, k) array of windows."""
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.size and (contexts.min() < 0 or contexts.max() >= model.vocab_size):
        raise ValueError(f"context contains ids outside [0, {model.vocab_size})")
    out = np.empty((contexts.shape[0], model.vocab_size), dtype=np.float64)
    model.eval()
    with torch.no_grad():
        for start in range(0, contexts.shape[0], chunk):
            x = torch.from_numpy(contexts[start : start + chunk])
            out[start : start + chunk] = model(x).numpy()
    return out


# ---------------------------------------------------------------- family


@dataclass
class ModelFamily:
    members: list[TinyLM]
    vocab: Vocabulary
    manifest: dict

    def __post_init__(self):
        sizes = [m.param_count for m in self.members]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"family member sizes must be strictly increasing, got {sizes}")
        if any(m.vocab_size != len(self.vocab) for m in self.members):
            raise ValueError("all members must share the family vocabulary")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def alm(self) -> TinyLM:
        return self.members[0]

    @property
    def elm(self) -> TinyLM:
        return self.members[-1]

    @property
    def k(self) -> int:
        return self.members[0].k

    @property
    def log_sizes(self) -> np.ndarray:
        return np.array([m.log_size for m in self.members])

    @property
    def hash(self) -> str:
        h = hashlib.sha256(self.vocab.hash.encode())
        for m in self.members:
            h.update(m.digest().encode())
        return h.hexdigest()


def _heldout_ce(model: TinyLM, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    logits = torch.from_numpy(lm_logits_batch(model, x))
    return float(nn.functional.cross_entropy(logits, torch.from_numpy(y)).item())


def train_member(model: TinyLM, x: np.ndarray, y: np.ndarray, *, member: int, seed: int,
                 epochs: int, lr: float, batch_size: int, optimizer: str = "adamw",
                 weight_decay: float = 0.01, momentum: float = 0.9) -> list[float]:
    """Train one model in place; the permutation stream depends only on ``seed``."""
    if optimizer == "adamw":
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum,
                              weight_decay=weight_decay)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    order_rng = np.random.default_rng(seed)
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    losses = []
    model.train()
    for epoch in range(epochs):
        perm = torch.from_numpy(order_rng.permutation(len(y)))
        total = 0.0
        for step, start in enumerate(range(0, len(y), batch_size)):
            idx = perm[start : start + batch_size]
            loss = nn.functional.cross_entropy(model(xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(member, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / max(len(y), 1))
    model.eval()
    return losses


def train_family(corpus: Corpus, size_specs: Sequence, seed: int, *, k: int = 3,
                 epochs: int = 5, lr: float = 1e-3, batch_size: int = 128,
                 optimizer: str = "adamw", weight_decay: float = 0.01) -> ModelFamily:
    specs = [SizeSpec.coerce(s) for s in size_specs]
    if len(specs) < 3:
        raise ValueError("a family needs at least 3 size specs")
    V = len(corpus.vocab)
    counts = [s.param_count(V, k) for s in specs]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError(f"size specs must give strictly increasing parameter counts, got {counts}")

    x_tr, y_tr = make_contexts(corpus.train_lines, k)
    x_va, y_va = make_contexts(corpus.valid_lines, k)
    hyper = {"epochs": epochs, "lr": lr, "batch_size": batch_size,
             "optimizer": optimizer, "weight_decay": weight_decay}
    members, entries = [], []
    for i, spec in enumerate(specs):
        model = TinyLM(V, k, spec, corpus.vocab.hash)
        gen = torch.Generator().manual_seed(seed * 1000 + i)
        model.reset_parameters(gen)
        losses = train_member(model, x_tr, y_tr, member=i, seed=seed, **hyper)
        ce = _heldout_ce(model, x_va, y_va)
        log.info("member %d: %d params, train %.4f, held-out %.4f", i, model.param_count,
                 losses[-1] if losses else float("nan"), ce)
        members.append(model)
        entries.append({"index": i, "embed": spec.embed, "hidden": list(spec.hidden),
                        "param_count": model.param_count, "log_size": model.log_size,
                        "train_ce": losses[-1] if losses else None,
                        "heldout_ce": ce, "train": dict(hyper)})
    manifest = {"format_version": 1, "corpus_hash": corpus.text_hash,
                "vocab_hash": corpus.vocab.hash, "data_order_seed": seed, "k": k,
                "n_train_contexts": int(len(y_tr)), "n_valid_contexts": int(len(y_va)),
                "members": entries}
    return ModelFamily(members, corpus.vocab, manifest)


# ---------------------------------------------------------------- persistence


def save_model(model: TinyLM, path) -> None:
    header = {"kind": "tiny_lm", "vocab_hash": model.vocab_hash, "k": model.k,
              "vocab_size": model.vocab_size, "embed": model.spec.embed,
              "hidden": list(model.spec.hidden)}
    tensors = [(n, t.detach().cpu().numpy()) for n, t in model.state_dict().items()]
    write_container(path, header, tensors)


def load_model(path, expected_vocab_hash: str | None = None) -> TinyLM:
    header, tensors = read_container(path)
    if header.get("kind") != "tiny_lm":
        raise ModelFormatError(f"{path}: expected a tiny_lm container, got {header.get('kind')!r}")
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise ModelFormatError(f"{path}: vocabulary hash mismatch")
    spec = SizeSpec(header["embed"], tuple(header["hidden"]))
    model = TinyLM(header["vocab_size"], header["k"], spec, header["vocab_hash"])
    state = model.state_dict()
    if set(state) != set(tensors):
        raise ModelFormatError(f"{path}: tensor names do not match the architecture")
    for name, ref in state.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise ModelFormatError(f"{path}: tensor {name} has shape {tensors[name].shape}")
    model.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    model.eval()
    return model


def save_family(family: ModelFamily, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(family.members):
        name = f"member_{i}.bin"
        save_model(m, path / name)
        files.append(name)
    manifest = dict(family.manifest)
    manifest["vocab"] = family.vocab.to_dict()
    manifest["files"] = files
    manifest["family_hash"] = family.hash
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_family(path, expected_vocab_hash: str | None = None) -> ModelFamily:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable family manifest ({exc})") from exc
    if manifest.get("format_version") != 1:
        raise ModelFormatError(f"{path}: unsupported manifest version {manifest.get('format_version')!r}")
    vocab = Vocabulary.from_dict(manifest.pop("vocab"))
    if vocab.hash != manifest["vocab_hash"]:
        raise ModelFormatError(f"{path}: manifest vocabulary does not match its hash")
    if expected_vocab_hash is not None and expected_vocab_hash != vocab.hash:
        raise ModelFormatError(f"{path}: vocabulary hash mismatch")
    members = [load_model(path / f, vocab.hash) for f in manifest.pop("files")]
    stored = manifest.pop("family_hash", None)
    family = ModelFamily(members, vocab, manifest)
    if stored is not None and stored != family.hash:
        raise ModelFormatError(f"{path}: weights do not match the recorded family hash")
    return family
