"""Read-only measurements on trained models and round histories."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import local_grad
from .protocol import evaluate_accuracy

__all__ = [
    "LGDEstimate",
    "RateFit",
    "BoundCheck",
    "global_grad_norm_sq",
    "lgd_points",
    "estimate_BH",
    "check_precoding_bound",
    "check_zeroth_order_bound",
    "lambda_condition",
    "fit_rate",
    "evaluate_accuracy",
    "diagnostics_report",
]


@dataclass(frozen=True)
class LGDEstimate:
    """Envelope ``y <= B_hat^2 x + H_hat^2`` over the sampled points."""

    B_hat: float
    H_hat: float
    n_points: int
    max_violation: float

    @property
    def B2(self) -> float:
        return self.B_hat ** 2

    @property
    def H2(self) -> float:
        return self.H_hat ** 2


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    window: int
    n_filtered: int = 0


@dataclass(frozen=True)
class BoundCheck:
    fraction: float
    n_rounds: int
    violations: tuple = field(default_factory=tuple)


def global_grad_norm_sq(theta, shards, spec) -> float:
    """``||grad F||^2`` where ``F`` is the unweighted mean of the client losses."""
    g = np.mean([local_grad(theta, s, spec) for s in shards], axis=0)
    return float(g @ g)


def lgd_points(records):
    """``(x, y) = (||grad F||^2, E_k ||grad f_k||^2)`` pairs, one per evaluated model."""
    x = np.array([r.grad_norm_sq for r in records], dtype=np.float64)
    y = np.array([r.local_grad_sq for r in records], dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    return x[ok], y[ok]


def _envelope_height(b, x, y):
    return np.maximum(0.0, np.max(y[None, :] - np.outer(b, x), axis=1))


def estimate_BH(x, y) -> LGDEstimate:
    """Tightest linear upper envelope of the points ``(x_i, y_i)``.

    Among all ``(b, h) >= 0`` with ``y_i <= b x_i + h`` for every point, pick
    the one minimising the area under ``b x + h`` over ``[min x, max x]``,
    i.e. ``b * mid(x) + h``; ties go to the smaller ``b``. Returns
    ``B_hat = sqrt(b)`` and ``H_hat = sqrt(h)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size == 0:
        raise ValueError("need matching, non-empty x and y")
    if np.any(x < 0):
        raise ValueError("x values are squared norms and must be non-negative")
    if np.ptp(x) == 0:
        h = float(max(y.max(), 0.0))
        return LGDEstimate(0.0, math.sqrt(h), x.size, float(np.max(y - h)))

    mid = 0.5 * (x.min() + x.max())
    hull = _upper_hull(x, y)
    hx, hy = x[hull], y[hull]
    cands = [0.0]
    cands += [s for s in np.diff(hy) / np.diff(hx) if s > 0] if hull.size > 1 else []
    cands += [v for v in hy / np.where(hx > 0, hx, np.nan) if np.isfinite(v) and v > 0]
    cands = np.unique(np.asarray(cands, dtype=np.float64))
    h = _envelope_height(cands, x, y)
    obj = cands * mid + h
    best = np.flatnonzero(obj <= obj.min() * (1 + 1e-12) + 1e-15)[0]
    b, h = float(cands[best]), float(h[best])
    return LGDEstimate(math.sqrt(b), math.sqrt(h), x.size, float(np.max(y - (b * x + h))))


def _upper_hull(x, y):
    order = np.lexsort((y, x))
    hull = []
    for i in order:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        if hull and x[hull[-1]] == x[i]:
            hull.pop()
        hull.append(i)
    return np.asarray(hull, dtype=np.int64)


def _bound_rounds(records):
    for r in records:
        if r.skipped or not math.isfinite(r.p_t) or not math.isfinite(r.ref_grad_norm_sq):
            continue
        yield r


def check_precoding_bound(records, B_hat, H_hat, P) -> BoundCheck:
    """Share of rounds with ``1/p_t <= (B^2 ||grad F(theta_prev)||^2 + H^2) / P``."""
    rounds = list(_bound_rounds(records))
    bad = tuple(r.t for r in rounds
                if 1.0 / r.p_t > (B_hat ** 2 * r.ref_grad_norm_sq + H_hat ** 2) / P)
    n = len(rounds)
    return BoundCheck(1.0 - len(bad) / n if n else 1.0, n, bad)


def check_zeroth_order_bound(records, G_hat, P) -> BoundCheck:
    """Share of rounds with ``1/p_t <= G^2 / P`` (soft check with an observed ``G``)."""
    rounds = list(_bound_rounds(records))
    bad = tuple(r.t for r in rounds if 1.0 / r.p_t > G_hat ** 2 / P)
    n = len(rounds)
    return BoundCheck(1.0 - len(bad) / n if n else 1.0, n, bad)


def lambda_condition(lam, gamma, L, K, tau) -> bool:
    """Whether ``lam > gamma L / (K sqrt(tau))``; the threshold is zero on a noiseless channel."""
    threshold = 0.0 if math.isinf(tau) else gamma * L / (K * math.sqrt(tau))
    return lam > threshold


def fit_rate(records, metric="grad_norm_sq", running_mean=True, start=1) -> RateFit:
    """Least-squares slope of ``log(metric)`` against ``log(t)``.

    ``records`` is a sequence of round records or of raw per-round values
    (taken as ``t = 1, 2, ...``). By default the running mean of the metric
    is fitted; ``running_mean=False`` fits the values themselves. Rounds
    before ``start`` are left out of the regression but still feed the
    running mean. Non-positive values are dropped and counted.
    """
    if len(records) and hasattr(records[0], "t"):
        t = np.array([r.t for r in records], dtype=np.float64)
        if metric == "grad_norm_sq":
            vals = np.array([r.grad_norm_sq for r in records], dtype=np.float64)
        elif metric == "loss_gap":
            loss = np.array([r.global_loss for r in records], dtype=np.float64)
            vals = loss - np.nanmin(loss)
        else:
            vals = np.array([getattr(r, metric) for r in records], dtype=np.float64)
    else:
        vals = np.asarray(records, dtype=np.float64)
        t = np.arange(1, vals.size + 1, dtype=np.float64)
    if vals.size < 10:
        raise ValueError("need at least 10 rounds to fit a rate")
    keep = np.isfinite(vals) & (vals > 0)
    n_filtered = int((~keep).sum())
    if running_mean:
        clean = np.where(keep, vals, 0.0)
        vals = np.cumsum(clean) / np.maximum(np.cumsum(keep), 1)
    sel = keep & (t >= start)
    lt, lv = np.log(t[sel]), np.log(vals[sel])
    if lt.size < 10:
        raise ValueError("fewer than 10 usable rounds after filtering")
    slope, intercept = np.polyfit(lt, lv, 1)
    resid = lv - (slope * lt + intercept)
    ss_tot = float(((lv - lv.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2, int(lt.size), n_filtered)


def diagnostics_report(result, P=None) -> dict:
    """JSON-ready summary of a finished run."""
    records = list(result.records)
    x, y = lgd_points([result.initial] + records)
    out = {"B_hat": None, "H_hat": None, "bound_satisfaction": None, "rate_slope": None, "r2": None}
    if x.size >= 2 and np.ptp(x) > 0:
        est = estimate_BH(x, y)
        P = result.config.channel.P if P is None else P
        out.update(B_hat=est.B_hat, H_hat=est.H_hat,
                   bound_satisfaction=check_precoding_bound(records, est.B_hat, est.H_hat, P).fraction)
    if len(records) >= 10:
        fit = fit_rate(records)
        out.update(rate_slope=fit.slope, r2=fit.r2)
    return out
