"""Classifier losses, the proximal surrogate and the local SGD solver.

Parameters are a flat float64 vector. Layers are stored in order, each as a
row-major ``(fan_in, fan_out)`` weight block followed by its bias. The
multiclass logistic model is the zero-hidden-layer case.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import DivergenceError, OracleFailedError

__all__ = [
    "ModelSpec",
    "ProxConfig",
    "InexactnessReport",
    "init_params",
    "predict_logits",
    "loss_and_grad",
    "local_loss",
    "local_grad",
    "prox_objective",
    "prox_grad",
    "local_solve_sgd",
    "solve_prox_full_batch",
    "measure_gamma",
    "measure_zeta",
    "lipschitz_bound",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    m: int
    C: int
    hidden: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.m < 1 or self.C < 2:
            raise ValueError("need m >= 1 and C >= 2")
        hidden = tuple(int(h) for h in self.hidden)
        if self.kind == "logistic" and hidden:
            raise ValueError("logistic model takes no hidden layers")
        if self.kind == "mlp" and (not hidden or min(hidden) < 1):
            raise ValueError("mlp needs at least one positive hidden size")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        object.__setattr__(self, "hidden", hidden)

    @property
    def layer_sizes(self):
        return (self.m, *self.hidden, self.C)

    @property
    def d(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    @property
    def convex(self) -> bool:
        return self.kind == "logistic"

    def to_dict(self):
        return {"kind": self.kind, "m": self.m, "C": self.C,
                "hidden": list(self.hidden), "activation": self.activation, "d": self.d}


@dataclass(frozen=True)
class ProxConfig:
    lam: float
    eta: float
    E: int
    batch: int

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.E < 1:
            raise ValueError("E must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass(frozen=True)
class InexactnessReport:
    gamma_hat: float
    residual_grad_norm: float
    ref_grad_norm: float
    zeta_hat: Optional[float] = None
    stationary_reference: bool = False


def _data(shard):
    ds = getattr(shard, "dataset", shard)
    return ds.features, ds.labels


def _check_dim(theta, spec):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.d,):
        raise ValueError(f"parameter vector has shape {theta.shape}, model expects ({spec.d},)")
    return theta


def _layers(theta, spec):
    out, pos = [], 0
    s = spec.layer_sizes
    for a, b in zip(s[:-1], s[1:]):
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((W, theta[pos:pos + b]))
        pos += b
    return out


def init_params(spec: ModelSpec, seed=0) -> np.ndarray:
    """Zeros for the logistic model; Glorot-uniform weights and zero biases for the MLP."""
    if spec.kind == "logistic":
        return np.zeros(spec.d)
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.d)
    s = spec.layer_sizes
    pos = 0
    for a, b in zip(s[:-1], s[1:]):
        lim = np.sqrt(6.0 / (a + b))
        theta[pos:pos + a * b] = rng.uniform(-lim, lim, a * b)
        pos += a * b + b
    return theta


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_prime(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def predict_logits(theta, X, spec: ModelSpec) -> np.ndarray:
    theta = _check_dim(theta, spec)
    a = np.asarray(X, dtype=np.float64)
    layers = _layers(theta, spec)
    for W, b in layers[:-1]:
        a = _act(a @ W + b, spec.activation)
    W, b = layers[-1]
    return a @ W + b


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(theta, X, y, spec: ModelSpec, need_grad=True):
    """Mean cross-entropy over ``(X, y)`` and its exact gradient."""
    theta = _check_dim(theta, spec)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.m:
        raise ValueError(f"features have shape {X.shape}, model expects (*, {spec.m})")
    n = X.shape[0]
    layers = _layers(theta, spec)
    acts, pre = [X], []
    a = X
    for W, b in layers[:-1]:
        z = a @ W + b
        a = _act(z, spec.activation)
        pre.append(z)
        acts.append(a)
    W, b = layers[-1]
    logp = _log_softmax(a @ W + b)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    if not need_grad:
        return loss, None

    grad = np.empty(spec.d)
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    pos = spec.d
    for li in range(len(layers) - 1, -1, -1):
        W, b = layers[li]
        a_in = acts[li]
        nb = b.size
        grad[pos - nb:pos] = dz.sum(axis=0)
        pos -= nb
        grad[pos - W.size:pos] = (a_in.T @ dz).ravel()
        pos -= W.size
        if li:
            dz = (dz @ W.T) * _act_prime(pre[li - 1], acts[li], spec.activation)
    return loss, grad


def local_loss(theta, shard, spec: ModelSpec) -> float:
    X, y = _data(shard)
    return float(loss_and_grad(theta, X, y, spec, need_grad=False)[0])


def local_grad(theta, shard, spec: ModelSpec) -> np.ndarray:
    X, y = _data(shard)
    return loss_and_grad(theta, X, y, spec)[1]


def prox_objective(theta, theta_ref, lam, shard, spec: ModelSpec) -> float:
    """``f_k(theta) + lam/2 * ||theta - theta_ref||^2``."""
    theta = _check_dim(theta, spec)
    diff = theta - _check_dim(theta_ref, spec)
    return local_loss(theta, shard, spec) + 0.5 * lam * float(diff @ diff)


def prox_grad(theta, theta_ref, lam, shard, spec: ModelSpec) -> np.ndarray:
    theta = _check_dim(theta, spec)
    return local_grad(theta, shard, spec) + lam * (theta - _check_dim(theta_ref, spec))


def _prox_value_grad(theta, theta_ref, lam, X, y, spec):
    f, g = loss_and_grad(theta, X, y, spec)
    diff = theta - theta_ref
    return f + 0.5 * lam * float(diff @ diff), g + lam * diff


def local_solve_sgd(shard, theta_init, cfg: ProxConfig, E_k, rng, spec: ModelSpec) -> np.ndarray:
    """Run ``E_k`` epochs of mini-batch SGD on the proximal surrogate anchored at ``theta_init``.

    ``rng`` is a ``numpy.random.Generator`` or a seed; each epoch visits the
    shard in a fresh shuffled order. A batch size at least the shard size
    means full-batch gradient descent in natural sample order.
    """
    if E_k < 1:
        raise ValueError("E_k must be >= 1")
    if E_k > cfg.E:
        raise ValueError(f"E_k={E_k} exceeds the epoch cap E={cfg.E}")
    rng = np.random.default_rng(rng)
    X, y = _data(shard)
    n = X.shape[0]
    anchor = _check_dim(theta_init, spec).copy()
    theta = anchor.copy()
    lam, eta = cfg.lam, cfg.eta
    full = cfg.batch >= n
    for epoch in range(1, E_k + 1):
        if full:
            batches = (slice(None),)
        else:
            order = rng.permutation(n)
            batches = [order[s:s + cfg.batch] for s in range(0, n, cfg.batch)]
        for idx in batches:
            g = loss_and_grad(theta, X[idx], y[idx], spec)[1]
            if lam:
                g = g + lam * (theta - anchor)
            theta = theta - eta * g
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"local solve diverged in epoch {epoch}", epoch=epoch)
    return theta


def solve_prox_full_batch(theta_ref, lam, shard, spec: ModelSpec, max_iter=2000, tol=1e-8,
                          theta0=None):
    """Minimise the proximal surrogate by gradient descent with backtracking.

    Returns ``(theta, grad_norm, iterations)``.
    """
    X, y = _data(shard)
    ref = _check_dim(theta_ref, spec)
    theta = ref.copy() if theta0 is None else _check_dim(theta0, spec).copy()
    h, g = _prox_value_grad(theta, ref, lam, X, y, spec)
    gn = float(np.linalg.norm(g))
    step = 1.0
    it = 0
    while it < max_iter and gn > tol:
        it += 1
        while True:
            cand = theta - step * g
            h_new, g_new = _prox_value_grad(cand, ref, lam, X, y, spec)
            if h_new <= h - 0.5 * step * gn * gn or step < 1e-12:
                break
            step *= 0.5
        if h_new > h:
            # no descent even at the smallest step: numerically converged
            break
        theta, h, g = cand, h_new, g_new
        gn = float(np.linalg.norm(g))
        step = min(step * 2.0, 1e3)
    return theta, gn, it


def measure_gamma(theta_out, theta_ref, lam, shard, spec: ModelSpec, ref_grad=None) -> InexactnessReport:
    """First-order inexactness ratio ``||grad h(theta_out)|| / ||grad f(theta_ref)||``.

    When the reference is stationary (norm below 1e-12) the ratio is
    undefined; ``gamma_hat`` is then ``nan`` and ``stationary_reference`` set.
    """
    if ref_grad is None:
        ref_grad = local_grad(theta_ref, shard, spec)
    ref_norm = float(np.linalg.norm(ref_grad))
    resid = float(np.linalg.norm(prox_grad(theta_out, theta_ref, lam, shard, spec)))
    if ref_norm < 1e-12:
        return InexactnessReport(float("nan"), resid, ref_norm, stationary_reference=True)
    return InexactnessReport(resid / ref_norm, resid, ref_norm)


def measure_zeta(theta_out, theta_ref, lam, shard, spec: ModelSpec, oracle_budget=2000) -> float:
    """Objective gap ``h(theta_out) - min h`` against a full-batch oracle solve."""
    theta_star, gn, _ = solve_prox_full_batch(theta_ref, lam, shard, spec, max_iter=oracle_budget)
    if gn > 1e-5:
        raise OracleFailedError(
            f"oracle stopped with gradient norm {gn:.3e} after {oracle_budget} iterations"
        )
    h_star = prox_objective(theta_star, theta_ref, lam, shard, spec)
    gap = prox_objective(theta_out, theta_ref, lam, shard, spec) - h_star
    if gap < -1e-8:
        raise OracleFailedError(f"candidate beats the oracle by {-gap:.3e}")
    return max(gap, 0.0)


def lipschitz_bound(shard) -> float:
    """Smoothness constant bound for the softmax cross-entropy of the logistic model.

    The per-sample Hessian is ``(diag(p) - p p^T) (x) x~ x~^T`` with
    ``x~ = (x, 1)``, and the first factor has spectral norm at most 1/2.
    """
    X, _ = _data(shard)
    Xt = np.hstack([X, np.ones((X.shape[0], 1))])
    second = Xt.T @ Xt / X.shape[0]
    return 0.5 * float(np.linalg.eigvalsh(second)[-1])


def save_checkpoint(theta, spec: ModelSpec, path):
    """Write ``theta`` as little-endian float64 plus a ``.json`` sidecar."""
    path = Path(path)
    theta = _check_dim(theta, spec)
    path.write_bytes(theta.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_checkpoint(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = ModelSpec(meta["kind"], meta["m"], meta["C"], tuple(meta.get("hidden", ())),
                     meta.get("activation", "tanh"))
    theta = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if theta.size != spec.d or meta.get("d", spec.d) != spec.d:
        raise ValueError(f"{path}: checkpoint has {theta.size} values, sidecar implies {spec.d}")
    return theta, spec
