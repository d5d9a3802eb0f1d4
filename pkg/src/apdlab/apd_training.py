"""Joint fine-tuning of the amateur (ALM') and the energy MLP that scores asymptotes.

For every candidate token the fine-tuned amateur proposes an asymptotic probability
(AP = softmax(L_elm - L_alm') over the candidate set).  The MLP looks at that AP and the
observed per-model probabilities and emits a decay curve through the AP; the losses
reward curves that pass near the observations, never overshoot the expert, and keep the
amateur's logits close to where they started.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .containers import ContainerError, read_container, write_container
from .curves import FAMILIES, SQRT_EPS
from .traces import TraceFile

log = logging.getLogger(__name__)


class TraceMismatchError(ValueError):
    """Traces were not produced by the supplied amateur/family."""


class TrainingAbortedError(FloatingPointError):
    def __init__(self, step: int, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (step {step})")
        self.step, self.epoch, self.batch = step, epoch, batch


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    lambda2: float = 10.0
    lambda3: float = 0.8
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 64
    warmup: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    hidden: int = 100
    dropout: float = 0.5
    curve: str = "exp"
    fracpoly_k: int = 1

    def __post_init__(self):
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup < 0 or self.lr < 0:
            raise ValueError("epochs and batch_size must be >= 1, warmup and lr >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.curve not in FAMILIES:
            raise ValueError(f"unknown curve family {self.curve!r}")
        if self.fracpoly_k < 1:
            raise ValueError("fracpoly_k must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    l2: torch.Tensor
    l3: torch.Tensor
    total: torch.Tensor
    z: float

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "l2", "l3", "total")}


# ---------------------------------------------------------------- energy network


def n_curve_outputs(curve: str, fracpoly_k: int = 1) -> int:
    # (a, b, d) plus, for fractional polynomials, d_0.5 and d_1..d_K
    return 3 + (fracpoly_k + 1 if curve == "fracpoly" else 0)


class EnergyMLP(nn.Module):
    """Four affine layers, GELU in between, exponentiated outputs; final layer starts at 0."""

    def __init__(self, n_models: int, hidden: int = 100, dropout: float = 0.5,
                 curve: str = "exp", fracpoly_k: int = 1, generator: torch.Generator | None = None):
        super().__init__()
        if n_models < 3:
            raise ValueError("the energy network needs at least 3 models")
        self.n_models, self.hidden, self.dropout = n_models, hidden, dropout
        self.curve, self.fracpoly_k = curve, fracpoly_k
        n_out = n_curve_outputs(curve, fracpoly_k)
        self.layers = nn.ModuleList([nn.Linear(n_models + 1, hidden), nn.Linear(hidden, hidden),
                                     nn.Linear(hidden, hidden), nn.Linear(hidden, n_out)])
        self.act = nn.GELU()
        # input columns: 0 = AP, 1..N = models; droppable are models 3..N-1 (1-based)
        drop = torch.zeros(n_models + 1, dtype=torch.bool)
        drop[3:n_models] = True
        self.register_buffer("droppable", drop, persistent=False)
        self.reset_parameters(generator or torch.Generator().manual_seed(0))

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for lin in self.layers[:-1]:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """x: (..., N+1) = (AP', p'_1..p'_N).  Dropout applies when ``generator`` is given."""
        if generator is not None and self.dropout > 0:
            keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= self.dropout
            keep = keep | ~self.droppable
            scale = torch.where(self.droppable, 1.0 / (1.0 - self.dropout), 1.0).to(x.dtype)
            x = x * keep.to(x.dtype) * scale
        h = x
        for lin in self.layers[:-1]:
            h = self.act(lin(h))
        return torch.exp(self.layers[-1](h))


def mlp_forward(mlp: EnergyMLP, ap: float, probs: Sequence[float],
                dropout_seed: int | None = None) -> np.ndarray:
    """Curve parameters for one token; the first three entries are (a, b, d)."""
    x = np.concatenate([[ap], np.asarray(probs, dtype=np.float64)])
    if x.size != mlp.n_models + 1:
        raise ValueError(f"expected {mlp.n_models} model probabilities, got {x.size - 1}")
    if not np.all(np.isfinite(x)):
        raise ValueError("energy network inputs must be finite")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("energy network inputs must lie in [0, 1]")
    dtype = next(mlp.parameters()).dtype
    gen = None if dropout_seed is None else torch.Generator().manual_seed(dropout_seed)
    with torch.no_grad():
        return mlp(torch.as_tensor(x, dtype=dtype), gen).numpy().astype(np.float64)


# ---------------------------------------------------------------- curves and losses


def curve_values(curve: str, ap: torch.Tensor, params: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Evaluate decay curves; ap (...,), params (..., P), s (N,) -> (..., N)."""
    a, b, d = params[..., 0:1], params[..., 1:2], params[..., 2:3]
    u = b * (s - d)
    ap = ap.unsqueeze(-1)
    if curve == "exp":
        return ap + a * torch.exp(-torch.where(u > 0, u, torch.zeros_like(u)))
    if curve == "logistic":
        return ap + a / (1.0 + torch.exp(torch.where(u > 0, u, torch.zeros_like(u))))
    x = torch.where(u > 1, u, torch.ones_like(u))
    coeffs = params[..., 3:]
    total = coeffs[..., 0:1] / torch.sqrt(x)
    for k in range(1, coeffs.shape[-1]):
        total = total + coeffs[..., k : k + 1] / x**k
    return ap + a * total


def predict_ap(elm_logits, alm_prime_logits, mask=None) -> torch.Tensor:
    """softmax(L_elm - L_alm') over each candidate set (last axis); masked slots get 0."""
    elm = torch.as_tensor(elm_logits)
    almp = torch.as_tensor(alm_prime_logits, dtype=elm.dtype)
    if elm.shape[-1] == 0:
        raise ValueError("empty candidate set")
    z = elm - almp
    if mask is not None:
        z = z.masked_fill(~torch.as_tensor(mask, dtype=torch.bool), float("-inf"))
    return torch.softmax(z, dim=-1)


def _mask_z(ref: torch.Tensor, mask) -> tuple[torch.Tensor, torch.Tensor]:
    if mask is None:
        m = torch.ones(ref.shape, dtype=ref.dtype)
    else:
        m = torch.as_tensor(mask).to(ref.dtype)
    return m, m.sum()


def loss_l1(pred, obs, mask=None) -> torch.Tensor:
    """Root mean squared residual over models 1..N-1; pred/obs (..., N), mask (...)."""
    pred, obs = torch.as_tensor(pred), torch.as_tensor(obs)
    obs = obs.to(pred.dtype)
    m, z = _mask_z(pred[..., 0], mask)
    n1 = pred.shape[-1] - 1
    sq = ((obs[..., :-1] - pred[..., :-1]) ** 2).sum(-1)
    return torch.sqrt((m * sq).sum() / (z * n1) + SQRT_EPS)


def loss_l2(pred_last, obs_last, mask=None) -> torch.Tensor:
    """Root mean hinge overshoot of the curve above the largest model's observation."""
    pred_last = torch.as_tensor(pred_last)
    obs_last = torch.as_tensor(obs_last).to(pred_last.dtype)
    m, z = _mask_z(pred_last, mask)
    over = torch.relu(pred_last - obs_last)
    return torch.sqrt((m * over).sum() / z + SQRT_EPS)


def loss_l3(alm_prime_logits, alm_logits, mask=None) -> torch.Tensor:
    lp = torch.as_tensor(alm_prime_logits)
    la = torch.as_tensor(alm_logits).to(lp.dtype)
    m, z = _mask_z(lp, mask)
    return torch.sqrt((m * (lp - la) ** 2).sum() / z + SQRT_EPS)


def total_loss(l1, l2, l3, lambda2: float = 10.0, lambda3: float = 0.8, z: float = float("nan")) -> LossBreakdown:
    # plain floats stay double precision
    l1, l2, l3 = (v if torch.is_tensor(v) else torch.tensor(v, dtype=torch.float64) for v in (l1, l2, l3))
    return LossBreakdown(l1, l2, l3, l1 + lambda2 * l2 + lambda3 * l3, z)


# ---------------------------------------------------------------- batched trace tensors


@dataclass
class TraceTensors:
    """Records padded to a common candidate count; ``mask`` marks real candidates."""

    ctx: torch.Tensor       # (R, k) int64
    cands: torch.Tensor     # (R, C) int64
    mask: torch.Tensor      # (R, C) bool
    probs: torch.Tensor     # (R, C, N)
    l_alm: torch.Tensor     # (R, C)
    l_elm: torch.Tensor     # (R, C)
    flipped: torch.Tensor   # (R, C) bool, fixed by the observations alone
    s: torch.Tensor         # (N,) log sizes relative to the smallest model

    def __len__(self) -> int:
        return self.ctx.shape[0]

    def take(self, idx) -> "TraceTensors":
        return TraceTensors(self.ctx[idx], self.cands[idx], self.mask[idx], self.probs[idx],
                            self.l_alm[idx], self.l_elm[idx], self.flipped[idx], self.s)

    @classmethod
    def from_traces(cls, traces: TraceFile, dtype=torch.float32) -> "TraceTensors":
        recs = traces.records
        if not recs:
            raise ValueError("no trace records")
        R, N = len(recs), traces.n_models
        if N < 3:
            raise ValueError("training needs traces from at least 3 models")
        C = max(len(r.cands) for r in recs)
        k = len(recs[0].ctx)
        ctx = np.zeros((R, k), dtype=np.int64)
        cands = np.zeros((R, C), dtype=np.int64)
        mask = np.zeros((R, C), dtype=bool)
        probs = np.zeros((R, C, N), dtype=np.float64)
        l_alm = np.zeros((R, C))
        l_elm = np.zeros((R, C))
        for j, r in enumerate(recs):
            c = len(r.cands)
            ctx[j] = r.ctx
            cands[j, :c] = r.cands
            mask[j, :c] = True
            probs[j, :c] = np.asarray(r.probs, dtype=np.float64).T
            l_alm[j, :c] = r.l_alm
            l_elm[j, :c] = r.l_elm
        flipped = probs[..., 0] < probs[..., -1]
        s = traces.log_sizes - traces.log_sizes[0]
        t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
        return cls(torch.from_numpy(ctx), torch.from_numpy(cands), torch.from_numpy(mask),
                   t(probs), t(l_alm), t(l_elm), torch.from_numpy(flipped), t(s))


def batch_loss(mlp: EnergyMLP, alm_prime_cand_logits: torch.Tensor, batch: TraceTensors,
               lambda2: float, lambda3: float, generator: torch.Generator | None = None,
               return_curves: bool = False):
    """All three losses for one batch given ALM' logits gathered on the candidates."""
    ap = predict_ap(batch.l_elm, alm_prime_cand_logits, batch.mask)
    fl = batch.flipped
    ap_f = torch.where(fl, 1.0 - ap, ap)
    obs_f = torch.where(fl.unsqueeze(-1), 1.0 - batch.probs, batch.probs)
    params = mlp(torch.cat([ap_f.unsqueeze(-1), obs_f], dim=-1), generator)
    pred = curve_values(mlp.curve, ap_f, params, batch.s)
    m = batch.mask
    l1 = loss_l1(pred, obs_f, m)
    l2 = loss_l2(pred[..., -1], obs_f[..., -1], m)
    l3 = loss_l3(alm_prime_cand_logits, batch.l_alm, m)
    out = total_loss(l1, l2, l3, lambda2, lambda3, float(m.sum()))
    return (out, ap_f, params, pred) if return_curves else out


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    alm_prime: nn.Module
    mlp: EnergyMLP
    history: list[dict] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for row in self.history:
            out.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def _gather(model: nn.Module, batch: TraceTensors) -> torch.Tensor:
    return model(batch.ctx).gather(1, batch.cands)


def check_alm_matches(alm: nn.Module, data: TraceTensors, atol: float = 1e-4, n_check: int = 256) -> None:
    idx = torch.arange(min(len(data), n_check))
    sub = data.take(idx)
    with torch.no_grad():
        live = _gather(alm, sub).to(sub.l_alm.dtype)
    err = ((live - sub.l_alm).abs() * sub.mask).max().item()
    scale = max(1.0, sub.l_alm.abs().max().item())
    if err > atol * scale:
        raise TraceMismatchError(f"stored amateur logits differ from the supplied amateur by {err:.3g}")


def warmup_factor(step: int, warmup: int) -> float:
    # linear ramp: step t (0-based) trains at lr * (t + 1) / warmup until the ramp ends
    return 1.0 if warmup == 0 else min(1.0, (step + 1) / warmup)


def train_alm_prime(traces: TraceFile, alm: nn.Module, config: TrainConfig,
                    family_hash: str | None = None, log_path=None) -> TrainResult:
    """Fine-tune a copy of ``alm`` and a fresh energy MLP on ``traces``."""
    if family_hash is not None and family_hash != traces.header["family_hash"]:
        raise TraceMismatchError("traces were collected with a different family")
    data = TraceTensors.from_traces(traces)
    check_alm_matches(alm, data)
    n_batches = math.ceil(len(data) / config.batch_size)
    total_steps = n_batches * config.epochs
    if config.warmup > total_steps:
        raise ValueError(f"warmup ({config.warmup}) exceeds the total step count ({total_steps})")

    gen = torch.Generator().manual_seed(config.seed)
    alm_prime = alm.clone()
    mlp = EnergyMLP(traces.n_models, config.hidden, config.dropout, config.curve,
                    config.fracpoly_k, generator=gen)
    params = list(alm_prime.parameters()) + list(mlp.parameters())
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: warmup_factor(t, config.warmup))
    order = np.random.default_rng(config.seed)

    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L1", "L2", "L3", "total", "lr"])
    history = []
    step = 0
    alm_prime.train()
    mlp.train()
    try:
        for epoch in range(config.epochs):
            perm = torch.from_numpy(order.permutation(len(data)))
            for b in range(n_batches):
                batch = data.take(perm[b * config.batch_size : (b + 1) * config.batch_size])
                lr_now = opt.param_groups[0]["lr"]
                out = batch_loss(mlp, _gather(alm_prime, batch), batch,
                                 config.lambda2, config.lambda3, gen)
                if not torch.isfinite(out.total):
                    raise TrainingAbortedError(step, epoch, b)
                opt.zero_grad(set_to_none=True)
                out.total.backward()
                opt.step()
                sched.step()
                row = {"step": step, "epoch": epoch, "lr": lr_now, **out.floats()}
                history.append(row)
                if writer is not None:
                    writer.writerow([step, row["l1"], row["l2"], row["l3"], row["total"], lr_now])
                step += 1
            log.info("epoch %d: mean total %.5f", epoch,
                     np.mean([h["total"] for h in history if h["epoch"] == epoch]))
    finally:
        if fh is not None:
            fh.close()
    alm_prime.eval()
    mlp.eval()
    return TrainResult(alm_prime, mlp, history)


# ---------------------------------------------------------------- gradient check


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_smooth_instance(seed: int, n_models: int = 5, n_cands: int = 6, batch: int = 3,
                           curve: str = "exp", hidden: int = 10):
    """Float64 instance whose clamps and hinges sit away from their kinks."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    mlp = EnergyMLP(n_models, hidden, 0.0, curve, generator=gen).double()
    with torch.no_grad():
        last = mlp.layers[-1]
        last.weight.copy_(torch.from_numpy(rng.normal(0, 0.3, last.weight.shape)))
        last.bias.copy_(torch.from_numpy(rng.normal(0, 0.3, last.bias.shape)))
    # curve params stay near 1, so sizes well past d = 1 (+ 1/b for fracpoly) keep every clamp open
    s = torch.from_numpy(np.sort(rng.uniform(3.0, 8.0, n_models)))
    probs = rng.dirichlet(np.ones(n_cands), size=(batch, n_models)).transpose(0, 2, 1)
    l_alm = rng.normal(0, 1, (batch, n_cands))
    data = TraceTensors(
        ctx=torch.zeros((batch, 1), dtype=torch.int64),
        cands=torch.zeros((batch, n_cands), dtype=torch.int64),
        mask=torch.ones((batch, n_cands), dtype=torch.bool),
        probs=torch.from_numpy(probs), l_alm=torch.from_numpy(l_alm),
        l_elm=torch.from_numpy(rng.normal(0, 1, (batch, n_cands))),
        flipped=torch.from_numpy(probs[..., 0] < probs[..., -1]), s=s)
    alm_prime = torch.from_numpy(l_alm + rng.normal(0, 0.3, l_alm.shape))
    return mlp, alm_prime, data


def _hinge_margin(mlp, almp, data) -> float:
    with torch.no_grad():
        _, _, _, pred = batch_loss(mlp, almp, data, 1.0, 1.0, return_curves=True)
        obs_f = torch.where(data.flipped, 1.0 - data.probs[..., -1], data.probs[..., -1])
        return float((pred[..., -1] - obs_f).abs().min())


def gradient_check(seed: int = 0, eps: float = 1e-5, lambda2: float = 10.0, lambda3: float = 0.8,
                   curve: str = "exp", **instance_kwargs) -> dict:
    """Max relative error of autograd against central differences on a smooth instance.

    Covers every MLP parameter, the ALM' candidate logits, and the curve parameters
    (AP', a, b, d) of the curve losses.
    """
    for attempt in range(100):
        mlp, almp, data = random_smooth_instance(seed * 100 + attempt, curve=curve, **instance_kwargs)
        if _hinge_margin(mlp, almp, data) > 100 * eps:
            break

    def f_full() -> torch.Tensor:
        return batch_loss(mlp, almp, data, lambda2, lambda3).total

    tensors = [("alm_prime_logits", almp)] + [(f"mlp.{n}", p) for n, p in mlp.named_parameters()]
    errors = {}
    for name, t in tensors:
        errors[name] = _tensor_check(f_full, t, eps)

    # curve parameters, taken at the MLP's output and perturbed directly
    with torch.no_grad():
        _, ap_f, params, _ = batch_loss(mlp, almp, data, lambda2, lambda3, return_curves=True)
    obs_f = torch.where(data.flipped.unsqueeze(-1), 1.0 - data.probs, data.probs)
    theta = torch.cat([ap_f.unsqueeze(-1), params], dim=-1).clone()

    def f_curve() -> torch.Tensor:
        pred = curve_values(curve, theta[..., 0], theta[..., 1:], data.s)
        return (loss_l1(pred, obs_f, data.mask)
                + lambda2 * loss_l2(pred[..., -1], obs_f[..., -1], data.mask))

    errors["curve_params"] = _tensor_check(f_curve, theta, eps)
    return {"max_rel_error": max(errors.values()), "per_tensor": errors}


def _tensor_check(f, t: torch.Tensor, eps: float) -> float:
    t.requires_grad_(True)
    t.grad = None
    f().backward()
    analytic = t.grad.detach().numpy().copy()
    t.requires_grad_(False)
    numeric = np.zeros_like(analytic)
    flat = t.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    t.grad = None
    return _rel_err(analytic, numeric)


# ---------------------------------------------------------------- checkpoints


def save_mlp(mlp: EnergyMLP, path) -> None:
    header = {"kind": "energy_mlp", "n_models": mlp.n_models, "hidden": mlp.hidden,
              "dropout": mlp.dropout, "curve": mlp.curve, "fracpoly_k": mlp.fracpoly_k}
    write_container(path, header, [(n, t.detach().cpu().numpy()) for n, t in mlp.state_dict().items()])


def load_mlp(path) -> EnergyMLP:
    header, tensors = read_container(path)
    if header.get("kind") != "energy_mlp":
        raise ContainerError(f"{path}: expected an energy_mlp container, got {header.get('kind')!r}")
    mlp = EnergyMLP(header["n_models"], header["hidden"], header["dropout"], header["curve"],
                    header["fracpoly_k"])
    state = mlp.state_dict()
    if set(state) != set(tensors) or any(tuple(state[n].shape) != tensors[n].shape for n in state):
        raise ContainerError(f"{path}: tensors do not match the energy network architecture")
    mlp.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    mlp.eval()
    return mlp


def write_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(config), indent=2, sort_keys=True))
