"""Probability decay curves across model sizes and the per-token on-the-fly fitter.

Curves are functions of log model size ``s``.  Fitting routines measure ``s`` from an
origin (the smallest model's log size by default) so the kink location ``d`` is a
distance past the amateur, which keeps the positivity constraint on ``d`` meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FAMILIES = ("exp", "logistic", "fracpoly")
SQRT_EPS = 1e-12
ONFLY_MIX_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class CurveParams:
    family: str
    ap: float
    a: float
    b: float
    d: float
    coeffs: tuple[float, ...] = ()  # fracpoly only: (d_0.5, d_1, ..., d_K)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown curve family {self.family!r}")
        if min(self.a, self.b, self.d) < 0:
            raise ValueError("curve parameters a, b, d must be non-negative")
        if not 0.0 <= self.ap <= 1.0:
            raise ValueError(f"asymptote must lie in [0, 1], got {self.ap}")
        if self.family == "fracpoly":
            if len(self.coeffs) < 2:
                raise ValueError("fracpoly needs d_0.5 and at least one integer-power coefficient")
            if min(self.coeffs) < 0:
                raise ValueError("fracpoly coefficients must be non-negative")
        elif self.coeffs:
            raise ValueError(f"{self.family} curves take no extra coefficients")


def exp_decay(ap, a, b, d, s):
    return ap + a * np.exp(-np.maximum(0.0, b * (s - d)))


def logistic_decay(ap, a, b, d, s):
    # a / (1 + e^u) written to stay finite for large u
    return ap + a * np.exp(-np.logaddexp(0.0, np.maximum(0.0, b * (s - d))))


def fracpoly_decay(ap, a, b, d, coeffs, s):
    x = np.maximum(1.0, b * (s - d))
    total = coeffs[0] / np.sqrt(x)
    for k, c in enumerate(coeffs[1:], start=1):
        total = total + c / x**k
    return ap + a * total


def _require(params: CurveParams, family: str) -> None:
    if params.family != family:
        raise ValueError(f"expected a {family} curve, got {params.family}")


def exp_decay_eval(params: CurveParams, s):
    _require(params, "exp")
    return exp_decay(params.ap, params.a, params.b, params.d, np.asarray(s, dtype=np.float64))


def logistic_eval(params: CurveParams, s):
    _require(params, "logistic")
    return logistic_decay(params.ap, params.a, params.b, params.d, np.asarray(s, dtype=np.float64))


def fracpoly_eval(params: CurveParams, s):
    _require(params, "fracpoly")
    return fracpoly_decay(params.ap, params.a, params.b, params.d, params.coeffs,
                          np.asarray(s, dtype=np.float64))


def curve_eval(params: CurveParams, s):
    return {"exp": exp_decay_eval, "logistic": logistic_eval,
            "fracpoly": fracpoly_eval}[params.family](params, s)


# ---------------------------------------------------------------- flip


@dataclass(frozen=True)
class FlipResult:
    flipped: bool
    ap: float
    probs: np.ndarray


def flip(ap_candidate: float, probs_by_model: Sequence[float]) -> FlipResult:
    """Complement everything when the probability rises from the smallest to the largest model."""
    p = np.asarray(probs_by_model, dtype=np.float64)
    if p.size < 2:
        raise ValueError("need probabilities from at least two models")
    if not (0.0 <= ap_candidate <= 1.0) or p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("flip inputs must lie in [0, 1]")
    if p[0] >= p[-1]:
        return FlipResult(False, float(ap_candidate), p.copy())
    return FlipResult(True, 1.0 - float(ap_candidate), 1.0 - p)


def unflip(result: FlipResult) -> tuple[float, np.ndarray]:
    if result.flipped:
        return 1.0 - result.ap, 1.0 - result.probs
    return result.ap, result.probs.copy()


# ---------------------------------------------------------------- fitting


def curve_loss_and_grad(theta: np.ndarray, s: np.ndarray, y: np.ndarray,
                        lambda2: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-token L1 + lambda2 * L2 for exponential decays, with its gradient.

    theta: (n, 4) columns (ap, a, b, d); s: (N,) log sizes; y: (n, N) flipped observations.
    L1 is the root-mean-square residual over all models but the largest, L2 the root of
    the overshoot at the largest model.  Both clamps take subgradient 0 on the flat side.
    """
    ap, a, b, d = (theta[:, j : j + 1] for j in range(4))
    u = b * (s[None, :] - d)
    active = u > 0
    e = np.exp(-np.where(active, u, 0.0))
    pred = ap + a * e
    dp = np.stack(
        [np.ones_like(pred), e, np.where(active, -a * e * (s[None, :] - d), 0.0),
         np.where(active, a * e * b, 0.0)], axis=-1)  # (n, N, 4)

    n_fit = y.shape[1] - 1
    r = pred[:, :-1] - y[:, :-1]
    l1 = np.sqrt((r**2).sum(1) / n_fit + SQRT_EPS)
    g1 = (r[:, :, None] * dp[:, :-1, :]).sum(1) / (n_fit * l1[:, None])

    over = pred[:, -1] - y[:, -1]
    hinge = np.maximum(0.0, over)
    l2 = np.sqrt(hinge + SQRT_EPS)
    g2 = np.where(over > 0, 0.5 / l2, 0.0)[:, None] * dp[:, -1, :]
    return l1 + lambda2 * l2, g1 + lambda2 * g2


@dataclass
class CurveFit:
    ap: np.ndarray          # unflipped asymptote, clamped to [0, 1]
    ap_flipped: np.ndarray  # asymptote in the fitted (decaying) orientation
    a: np.ndarray
    b: np.ndarray
    d: np.ndarray
    flipped: np.ndarray
    loss: np.ndarray
    lr_used: np.ndarray
    origin: float = 0.0

    def params(self, i: int) -> CurveParams:
        return CurveParams("exp", float(np.clip(self.ap_flipped[i], 0.0, 1.0)),
                           float(self.a[i]), float(self.b[i]), float(self.d[i]))


def initial_theta(y: np.ndarray, s: np.ndarray, n_rate: int = 100, n_kink: int = 30,
                  chunk: int = 128) -> np.ndarray:
    """Warm start: least-squares (ap, a) on a grid of (b, d), keeping the lowest-SSE cell.

    For fixed (b, d) the curve is linear in (ap, a), so each cell is a closed-form
    two-parameter regression over all observed models.
    """
    span = max(float(s[-1] - s[0]), 1e-6)
    rates = np.geomspace(0.1, 20.0, n_rate) / span
    kinks = np.linspace(s[0], s[-2], n_kink)
    bb, dd = (g.ravel() for g in np.meshgrid(rates, kinks, indexing="ij"))
    E = np.exp(-np.maximum(0.0, bb[:, None] * (s[None, :] - dd[:, None])))  # (G, N)
    e_mean = E.mean(1)
    e_var = ((E - e_mean[:, None]) ** 2).mean(1)
    safe_var = np.maximum(e_var, 1e-15)
    out = np.empty((len(y), 4))
    for start in range(0, len(y), chunk):
        yc = y[start : start + chunk]
        y_mean = yc.mean(1)
        cov = (yc @ E.T) / yc.shape[1] - y_mean[:, None] * e_mean[None, :]  # (n, G)
        a = np.maximum(np.where(e_var > 1e-15, cov / safe_var, 0.0), 0.0)
        ap = np.clip(y_mean[:, None] - a * e_mean[None, :], 0.0, 1.0)
        sse = ((ap[:, :, None] + a[:, :, None] * E[None] - yc[:, None, :]) ** 2).sum(-1)
        j = sse.argmin(1)
        rows = np.arange(len(yc))
        out[start : start + chunk] = np.stack([ap[rows, j], a[rows, j], bb[j], dd[j]], axis=1)
    return out


def _adam_fit(theta, s, y, lambda2, iterations, lr, betas, eps):
    """Projected Adam; returns the lowest-loss iterate seen, the start included.

    Rows whose trajectory turns non-finite come back with a NaN loss.
    """
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = betas
    best = theta.copy()
    with np.errstate(all="ignore"):
        best_loss, _ = curve_loss_and_grad(theta, s, y, lambda2)
        for t in range(1, iterations + 1):
            _, g = curve_loss_and_grad(theta, s, y, lambda2)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
            theta = np.maximum(theta, 0.0)  # negative parameters are clamped to 0
            loss, _ = curve_loss_and_grad(theta, s, y, lambda2)
            better = loss < best_loss
            best[better] = theta[better]
            best_loss[better] = loss[better]
    diverged = ~np.all(np.isfinite(theta), axis=1)
    best_loss[diverged] = np.nan
    return best, best_loss


def fit_curves(observations, log_sizes, *, origin: float | None = None, lambda2: float = 10.0,
               iterations: int = 400, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8,
               max_halvings: int = 30) -> CurveFit:
    """Fit one exponential decay per row of ``observations`` (n tokens x N models) with Adam."""
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    s_abs = np.asarray(log_sizes, dtype=np.float64)
    if obs.shape[1] < 3 or obs.shape[1] != s_abs.size:
        raise ValueError("need observations from at least 3 models matching log_sizes")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observations must be finite")
    origin = float(s_abs[0]) if origin is None else float(origin)
    s = s_abs - origin
    flipped = obs[:, 0] < obs[:, -1]
    y = np.where(flipped[:, None], 1.0 - obs, obs)

    theta = initial_theta(y, s)
    lr_used = np.full(len(y), lr)
    loss = np.empty(len(y))
    todo = np.arange(len(y))
    rate = lr
    for _ in range(max_halvings + 1):
        th, ls = _adam_fit(theta[todo], s, y[todo], lambda2, iterations, rate, betas, eps)
        ok = np.all(np.isfinite(th), axis=1) & np.isfinite(ls)
        theta[todo[ok]] = th[ok]
        loss[todo[ok]] = ls[ok]
        lr_used[todo[ok]] = rate
        todo = todo[~ok]
        if todo.size == 0:
            break
        rate /= 2.0
    else:
        raise FloatingPointError(f"{todo.size} curve fits still non-finite after {max_halvings} halvings")

    ap_f = theta[:, 0]
    ap = np.clip(np.where(flipped, 1.0 - ap_f, ap_f), 0.0, 1.0)
    return CurveFit(ap, ap_f, theta[:, 1], theta[:, 2], theta[:, 3], flipped, loss, lr_used, origin)


def fit_on_the_fly(trace, log_sizes=None, mix_weight: float = 1.0, *, n_top: int = 20,
                   return_fit: bool = False, **fit_kwargs):
    """Mix the expert's candidate distribution with normalized top-token asymptotes.

    Returns (1 - w) * p_ELM + w * p_ac over the trace's candidate set, where p_ac holds the
    fitted asymptotes of the top tokens renormalized to 1 (0 for sampled tokens).
    """
    if not 0.0 <= mix_weight <= 1.0:
        raise ValueError(f"mix weight 1/T must lie in [0, 1], got {mix_weight}")
    probs = np.asarray(trace.probs, dtype=np.float64)  # (N, C)
    if probs.shape[0] < 3:
        raise ValueError("on-the-fly fitting needs at least 3 models")
    if log_sizes is None:
        log_sizes = trace.log_sizes
    fit = fit_curves(probs.T, log_sizes, **fit_kwargs)
    p_elm = probs[-1]
    top = _top_mask(trace, n_top)
    p_ac = np.zeros_like(p_elm)
    mass = fit.ap[top].sum()
    if mass > 0:
        p_ac[top] = fit.ap[top] / mass
    else:
        p_ac[top] = p_elm[top] / p_elm[top].sum()
    out = (1.0 - mix_weight) * p_elm + mix_weight * p_ac
    return (out, fit) if return_fit else out


def _top_mask(trace, n_top: int) -> np.ndarray:
    prov = getattr(trace, "prov", None)
    C = np.asarray(trace.probs).shape[1]
    if prov is not None:
        return np.array([p == "top" for p in prov])
    mask = np.zeros(C, dtype=bool)
    mask[: min(n_top, C)] = True
    return mask


def select_mix_weight(objective: Callable[[float], float],
                      grid: Iterable[float] = ONFLY_MIX_GRID) -> tuple[float, dict[float, float]]:
    """Pick the global 1/T minimizing a caller-supplied validation objective."""
    scores = {w: float(objective(w)) for w in grid}
    best = min(scores, key=lambda w: (scores[w], w))
    return best, scores


# ---------------------------------------------------------------- synthetic oracle traces


@dataclass
class SyntheticTrace:
    params: CurveParams
    log_sizes: np.ndarray
    observations: np.ndarray
    sigma: float = 0.0
    flipped: bool = False
    clean: np.ndarray = field(default=None, repr=False)


def synthesize_trace(params: CurveParams, log_sizes, sigma: float = 0.0, seed: int = 0,
                     flipped: bool = False, origin: float | None = None) -> SyntheticTrace:
    """Observations on the curve (complemented when ``flipped``) plus optional Gaussian noise."""
    s = np.asarray(log_sizes, dtype=np.float64)
    origin = float(s[0]) if origin is None else origin
    clean = curve_eval(params, s - origin)
    if flipped:
        clean = 1.0 - clean
    obs = clean.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        obs = np.clip(obs + rng.normal(0.0, sigma, size=obs.shape), 0.0, 1.0)
    return SyntheticTrace(params, s, obs, sigma, flipped, clean)


def random_exp_params(rng: np.random.Generator, span: float) -> CurveParams:
    """Ground-truth decays whose bend is visible inside a log-size window of width ``span``."""
    ap = rng.uniform(0.02, 0.6)
    a = rng.uniform(0.05, min(0.4, 0.98 - ap))
    b = rng.uniform(1.5, 4.0) / span
    d = rng.uniform(0.0, 0.3) * span
    return CurveParams("exp", ap, a, b, d)


def write_curve_dump(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            n += 1
    return n


def curve_dump_rows(ctx_id: int, tokens: Sequence[int], fit: CurveFit) -> list[dict]:
    return [
        {"ctx_id": int(ctx_id), "token": int(tok), "family": "exp", "AP": float(fit.ap[i]),
         "a": float(fit.a[i]), "b": float(fit.b[i]), "d": float(fit.d[i]),
         "flipped": bool(fit.flipped[i]), "final_loss": float(fit.loss[i])}
        for i, tok in enumerate(tokens)
    ]
