"""Round orchestration for noise-robust over-the-air federated learning.

Every baseline is a configuration of the same round loop: local proximal
SGD, precoding, analog superposition on the MAC and server-side decoding.
All randomness is drawn from independent streams keyed by
``(master_seed, purpose, round, client)``, so two configurations that differ
only in their variant label produce bitwise-identical trajectories.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import channel as ch
from .datagen import (Dataset, PartitionSpec, gen_synthetic_classification, load_csv_dataset,
                      partition_heterogeneous, partition_manifest, split_train_test)
from .exceptions import ConfigError, DegenerateUpdateError, DivergenceError
from .model import (ModelSpec, ProxConfig, init_params, local_solve_sgd, loss_and_grad,
                    measure_gamma, measure_zeta, predict_logits)

__all__ = [
    "VARIANTS",
    "StragglerModel",
    "ModelConfig",
    "DataSource",
    "RunConfig",
    "RoundRecord",
    "RunResult",
    "FLData",
    "RoundState",
    "variant_config",
    "assign_stragglers",
    "select_participants",
    "prepare_data",
    "init_state",
    "run_round",
    "run_training",
    "evaluate_accuracy",
    "RECORD_COLUMNS",
    "record_row",
]

VARIANTS = ("NoROTA", "COTAF", "FedProx", "NoisyProx", "NoisyFedAvg", "RobustComm")
POLICIES = ("include", "drop")

# RNG stream tags
_DATA, _SPLIT, _PARTITION, _INIT = 1, 2, 3, 4
_STRAGGLERS, _STRAGGLER_SET, _PARTICIPANTS, _FADING, _NOISE, _SOLVE = 10, 11, 12, 13, 14, 15


def _seed_seq(master_seed, *key):
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))


def _stream(master_seed, *key):
    return np.random.default_rng(_seed_seq(master_seed, *key))


def _derived_seed(master_seed, *key) -> int:
    return int(_seed_seq(master_seed, *key).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class StragglerModel:
    """Stragglers run fewer local epochs.

    ``policy="include"`` aggregates their partial work; ``"drop"`` excludes
    any client with ``E_k < E`` from the round. With ``fixed=True`` the
    straggler set is drawn once per run instead of every round.
    """

    fraction: float = 0.0
    policy: str = "include"
    fixed: bool = False

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="straggler.fraction")
        if self.policy not in POLICIES:
            raise ConfigError(f"must be one of {POLICIES}", field="straggler.policy")

    def count(self, K) -> int:
        return int(math.floor(self.fraction * K + 0.5))


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic"
    hidden: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ConfigError(f"unknown model kind {self.kind!r}", field="model.kind")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def spec(self, m, C) -> ModelSpec:
        return ModelSpec(self.kind, m, C, self.hidden, self.activation)


@dataclass(frozen=True)
class DataSource:
    source: str = "synthetic"
    n: int = 3000
    m: int = 10
    C: int = 10
    separation: float = 3.0
    seed: Optional[int] = None
    path: Optional[str] = None
    label_column: str = "label"
    features: Optional[tuple] = None
    normalize: bool = False
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError("must be 'synthetic' or 'csv'", field="data.source")
        if self.source == "csv" and not self.path:
            raise ConfigError("csv source needs a path", field="data.path")
        if self.source == "synthetic":
            for name in ("n", "m", "C"):
                if getattr(self, name) < 1:
                    raise ConfigError("must be positive", field=f"data.{name}")
            if self.separation < 0:
                raise ConfigError("must be >= 0", field="data.separation")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("must lie in (0, 1)", field="data.test_fraction")

    def load(self, master_seed) -> Dataset:
        if self.source == "csv":
            feats = list(self.features) if self.features else None
            return load_csv_dataset(self.path, self.label_column, feats, self.normalize)
        seed = self.seed if self.seed is not None else _derived_seed(master_seed, _DATA)
        return gen_synthetic_classification(self.n, self.m, self.C, self.separation, seed)


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one simulated training run.

    ``channel`` holds the effective noise variance; :func:`with_snr_db`
    converts a dB figure using the model dimension. ``eta=None`` picks 0.05
    for the logistic model and 0.01 for the MLP.
    """

    variant: str = "NoROTA"
    K: int = 30
    K_hat: Optional[int] = None
    E: int = 3
    T: int = 100
    lam: float = 0.4
    eta: Optional[float] = None
    batch: int = 64
    pi: float = 0.5
    straggler: StragglerModel = field(default_factory=StragglerModel)
    channel: ch.ChannelConfig = field(default_factory=ch.ChannelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSource = field(default_factory=DataSource)
    master_seed: int = 0
    snr_db: Optional[float] = None
    eval_every: int = 1
    track_gamma: bool = True
    track_zeta: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}",
                              field="variant")
        if self.K < 1:
            raise ConfigError("must be >= 1", field="K")
        if self.K_hat is not None:
            if not 1 <= self.K_hat <= self.K:
                raise ConfigError(f"must lie in [1, K={self.K}], got {self.K_hat}", field="K_hat")
            if self.channel.fading:
                raise ConfigError("random-subset participation cannot be combined with fading",
                                  field="K_hat")
        if self.E < 1:
            raise ConfigError("must be >= 1", field="E")
        if self.T < 0:
            raise ConfigError("must be >= 0", field="T")
        if self.lam < 0:
            raise ConfigError("must be >= 0", field="lambda")
        if self.eta is not None and not self.eta > 0:
            raise ConfigError("must be > 0", field="eta")
        if self.batch < 1:
            raise ConfigError("must be >= 1", field="batch")
        if not 0.0 <= self.pi <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="pi")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1", field="eval_every")

    @property
    def learning_rate(self) -> float:
        if self.eta is not None:
            return self.eta
        return 0.05 if self.model.kind == "logistic" else 0.01

    @property
    def participation(self) -> str:
        if self.channel.fading:
            return "fading"
        return "random" if self.K_hat is not None else "full"

    def data_dims(self):
        if self.data.source == "synthetic":
            return self.data.m, self.data.C
        ds = self.data.load(self.master_seed)
        return ds.m, ds.n_classes

    def model_spec(self, m=None, C=None) -> ModelSpec:
        if m is None or C is None:
            m, C = self.data_dims()
        return self.model.spec(m, C)

    def with_snr_db(self, snr_db_value, d=None) -> "RunConfig":
        """Set the channel noise so that ``P / (d sigma2)`` equals the given SNR."""
        if d is None:
            d = self.model_spec().d
        sigma2 = ch.sigma2_from_snr_db(snr_db_value, self.channel.P, d)
        return replace(self, snr_db=float(snr_db_value),
                       channel=replace(self.channel, sigma2=sigma2))

    def to_dict(self) -> dict:
        from dataclasses import asdict
        out = asdict(self)
        out["eta_effective"] = self.learning_rate
        return out


def variant_config(v: str, base: RunConfig) -> RunConfig:
    """Effective configuration of a baseline, derived from a NoROTA base config.

    FedProx is noiseless with unit precoding; COTAF has no proximal term and
    drops stragglers; NoisyProx uses unit precoding; NoisyFedAvg combines
    COTAF with unit precoding; RobustComm sets the proximal weight to the
    noise variance.
    """
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {v!r}", field="variant")
    if base.variant not in ("NoROTA", v):
        raise ConfigError(f"cannot derive {v} from a config already resolved as {base.variant}",
                          field="variant")
    cfg = replace(base, variant=v)
    unit = replace(cfg.channel, precoding_mode="unit")
    drop = replace(cfg.straggler, policy="drop")
    if v == "FedProx":
        return replace(cfg, channel=replace(unit, sigma2=0.0), snr_db=None)
    if v == "COTAF":
        return replace(cfg, lam=0.0, straggler=drop)
    if v == "NoisyProx":
        return replace(cfg, channel=unit)
    if v == "NoisyFedAvg":
        return replace(cfg, lam=0.0, channel=unit, straggler=drop)
    if v == "RobustComm":
        return replace(cfg, lam=cfg.channel.sigma2)
    return cfg


def assign_stragglers(K, model: StragglerModel, E, round, rng, fixed_set=None) -> np.ndarray:
    """Per-client epoch budgets for one round.

    ``round(fraction * K)`` clients are stragglers with ``E_k`` uniform on
    ``{1, ..., E-1}``; the rest run ``E`` epochs.
    """
    rng = np.random.default_rng(rng)
    E_k = np.full(K, E, dtype=np.int64)
    n = model.count(K)
    if n == 0:
        return E_k
    if E == 1:
        warnings.warn("E=1 leaves no room for partial work; stragglers run 1 epoch",
                      RuntimeWarning, stacklevel=2)
        return E_k
    who = np.asarray(fixed_set) if fixed_set is not None else rng.choice(K, size=n, replace=False)
    E_k[who] = rng.integers(1, E, size=len(who))
    return E_k


def select_participants(mode, K, K_hat, fading_draws, r_hat, straggler_policy, E_k, E, rng) -> tuple:
    """Sorted ids of the clients that transmit this round (may be empty)."""
    if mode == "full":
        ids = np.arange(K)
    elif mode == "random":
        if K_hat is None or not 1 <= K_hat <= K:
            raise ConfigError("random participation needs 1 <= K_hat <= K", field="K_hat")
        ids = np.sort(np.random.default_rng(rng).choice(K, size=K_hat, replace=False))
    elif mode == "fading":
        ids = np.array([k for k, dr in enumerate(fading_draws) if dr.r > r_hat], dtype=np.int64)
    else:
        raise ConfigError(f"unknown participation mode {mode!r}")
    if straggler_policy == "drop":
        E_k = np.asarray(E_k)
        ids = ids[E_k[ids] >= E]
    return tuple(int(k) for k in ids)


@dataclass
class FLData:
    shards: list
    train: Dataset
    test: Optional[Dataset]
    spec: ModelSpec
    manifest: list

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.shards])


def prepare_data(cfg: RunConfig) -> FLData:
    ds = cfg.data.load(cfg.master_seed)
    train, test = split_train_test(ds, cfg.data.test_fraction, _derived_seed(cfg.master_seed, _SPLIT))
    shards = partition_heterogeneous(
        train, PartitionSpec(cfg.K, cfg.pi, _derived_seed(cfg.master_seed, _PARTITION)))
    return FLData(shards, train, test, cfg.model_spec(ds.m, ds.n_classes), partition_manifest(shards))


@dataclass(frozen=True)
class RoundRecord:
    t: int
    global_loss: float
    grad_norm_sq: float
    local_grad_sq: float
    test_accuracy: float
    p_t: float = math.nan
    participants: tuple = ()
    E_k: tuple = ()
    gamma_hat: tuple = ()
    zeta_hat: tuple = ()
    update_sq: float = math.nan
    transmit_power: float = math.nan
    ref_grad_norm_sq: float = math.nan
    ref_local_grad_sq: float = math.nan
    noise_seed: Optional[int] = None
    skipped: bool = False
    wall_ms: float = 0.0

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    @property
    def mean_E_k(self) -> float:
        if not self.participants:
            return math.nan
        return float(np.mean([self.E_k[k] for k in self.participants]))

    @property
    def mean_gamma_hat(self) -> float:
        vals = [g for g in self.gamma_hat if math.isfinite(g)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def max_gamma_hat(self) -> float:
        vals = [g for g in self.gamma_hat if math.isfinite(g)]
        return float(max(vals)) if vals else math.nan


RECORD_COLUMNS = ("t", "loss", "grad_norm_sq", "accuracy", "p_t", "n_participants",
                  "mean_E_k", "mean_gamma_hat")


def record_row(rec: RoundRecord) -> list:
    return [rec.t, rec.global_loss, rec.grad_norm_sq, rec.test_accuracy, rec.p_t,
            rec.n_participants, rec.mean_E_k, rec.mean_gamma_hat]


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    initial: RoundRecord
    records: tuple
    theta: np.ndarray
    trajectory: Optional[tuple] = None
    diverged: bool = False
    diverged_round: Optional[int] = None
    partition: tuple = ()

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else self.initial.test_accuracy


@dataclass
class RoundState:
    cfg: RunConfig
    data: FLData
    theta: np.ndarray
    client_grads: np.ndarray = None
    p_prev: Optional[float] = None
    update_sq_prev: Optional[float] = None
    fixed_stragglers: Optional[np.ndarray] = None
    last: Optional[RoundRecord] = None


def evaluate_accuracy(theta, test: Dataset, spec: ModelSpec) -> float:
    """Fraction of correct argmax predictions; ties go to the lowest class index."""
    if test is None or test.n == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(predict_logits(theta, test.features, spec), axis=1)
    return float(np.mean(pred == test.labels))


def _global_metrics(theta, data: FLData):
    losses, grads = [], []
    for s in data.shards:
        f, g = loss_and_grad(theta, s.dataset.features, s.dataset.labels, data.spec)
        losses.append(f)
        grads.append(g)
    grads = np.asarray(grads)
    gF = grads.mean(axis=0)
    local_sq = float(data.weights @ np.einsum("ij,ij->i", grads, grads))
    return float(np.mean(losses)), float(gF @ gF), local_sq, grads


def _evaluate(state: RoundState, theta, t):
    loss, gsq, lsq, grads = _global_metrics(theta, state.data)
    acc = math.nan
    if t % state.cfg.eval_every == 0 or t == state.cfg.T:
        eval_set = state.data.test if state.data.test is not None else state.data.train
        acc = evaluate_accuracy(theta, eval_set, state.data.spec)
    return loss, gsq, lsq, grads, acc


def init_state(cfg: RunConfig, data: Optional[FLData] = None, theta0=None) -> RoundState:
    data = prepare_data(cfg) if data is None else data
    if len(data.shards) != cfg.K:
        raise ConfigError(f"data has {len(data.shards)} shards but K={cfg.K}", field="K")
    if theta0 is None:
        theta0 = init_params(data.spec, _derived_seed(cfg.master_seed, _INIT))
    state = RoundState(cfg, data, np.asarray(theta0, dtype=np.float64).copy())
    loss, gsq, lsq, grads, acc = _evaluate(state, state.theta, 0)
    state.client_grads = grads
    state.last = RoundRecord(0, loss, gsq, lsq, acc)
    if cfg.straggler.fixed:
        n = cfg.straggler.count(cfg.K)
        state.fixed_stragglers = _stream(cfg.master_seed, _STRAGGLER_SET).choice(cfg.K, n, replace=False)
    return state


def _precoding(state: RoundState, norms_sq, q):
    ccfg = state.cfg.channel
    mode = ccfg.precoding_mode
    if mode == "unit":
        return 1.0
    if mode == "delayed":
        ref = state.update_sq_prev
        if ref is None:
            # first round: size of one full-gradient step from the initial model
            g2 = np.einsum("ij,ij->i", state.client_grads, state.client_grads)
            ref = state.cfg.learning_rate ** 2 * float(state.data.weights @ g2)
        if ref > 0:
            return ccfg.P / ref
        return state.p_prev if state.p_prev is not None else ccfg.P
    try:
        return ch.compute_precoding_factor(norms_sq, q, ccfg.P)
    except DegenerateUpdateError:
        return state.p_prev if state.p_prev is not None else ccfg.P


def run_round(state: RoundState, t: int):
    """Execute round ``t`` and return ``(theta_t, record)``; ``state`` is advanced in place."""
    tic = time.perf_counter()
    cfg, data = state.cfg, state.data
    ccfg, K, seed = cfg.channel, cfg.K, cfg.master_seed
    theta_prev = state.theta
    prev = state.last

    E_k = assign_stragglers(K, cfg.straggler, cfg.E, t, _stream(seed, _STRAGGLERS, t),
                            fixed_set=state.fixed_stragglers)
    draws = ch.draw_fading(K, _stream(seed, _FADING, t)) if ccfg.fading else None
    participants = select_participants(cfg.participation, K, cfg.K_hat, draws, ccfg.r_hat,
                                       cfg.straggler.policy, E_k, cfg.E,
                                       _stream(seed, _PARTICIPANTS, t))
    ref = dict(ref_grad_norm_sq=prev.grad_norm_sq, ref_local_grad_sq=prev.local_grad_sq)

    if not participants:
        # nobody transmits: the global model is left untouched
        rec = replace(prev, t=t, p_t=math.nan, participants=(), E_k=tuple(int(e) for e in E_k),
                      gamma_hat=(), zeta_hat=(), update_sq=math.nan, transmit_power=math.nan,
                      noise_seed=None, skipped=True, **ref,
                      wall_ms=1e3 * (time.perf_counter() - tic))
        if t % cfg.eval_every != 0 and t != cfg.T:
            rec = replace(rec, test_accuracy=math.nan)
        state.last = rec
        return theta_prev, rec

    prox = ProxConfig(cfg.lam, cfg.learning_rate, cfg.E, cfg.batch)
    local, deltas = {}, {}
    for k in participants:
        try:
            local[k] = local_solve_sgd(data.shards[k], theta_prev, prox, int(E_k[k]),
                                       _stream(seed, _SOLVE, t, k), data.spec)
        except DivergenceError as exc:
            raise DivergenceError(f"client {k} diverged in round {t}: {exc}",
                                  epoch=exc.epoch, round=t) from exc
        deltas[k] = local[k] - theta_prev

    q_all = data.weights
    q = np.array([q_all[k] for k in participants])
    q = q / q.sum()
    with np.errstate(over="ignore"):
        norms_sq = np.array([float(deltas[k] @ deltas[k]) for k in participants])
    if not np.all(np.isfinite(norms_sq)):
        raise DivergenceError(f"local update norm overflowed in round {t}", round=t)
    p_t = _precoding(state, norms_sq, q)
    if not (p_t > 0 and math.isfinite(p_t)):
        raise DivergenceError(f"precoding factor {p_t!r} unusable in round {t}", round=t)

    if ccfg.fading:
        r_hat = ccfg.r_hat
        by_id = {k: draws[k] for k in participants}
        if ccfg.baseband == "complex":
            inputs = [np.real(ch.apply_fading(
                ch.encode_fading(local[k], theta_prev, p_t, by_id[k], r_hat), by_id[k]))
                for k in participants]
        else:
            scale = r_hat * math.sqrt(p_t)
            inputs = [scale * deltas[k] for k in participants]
        tx_sq = np.array([(r_hat ** 2 * p_t / by_id[k].r ** 2) * norms_sq[i]
                          for i, k in enumerate(participants)])
    else:
        inputs = [ch.encode(local[k], theta_prev, p_t) for k in participants]
        tx_sq = np.array([float(x @ x) for x in inputs])

    noise_seed = _derived_seed(seed, _NOISE, t)
    y = ch.mac_superpose(inputs, ccfg.sigma2, noise_seed)
    if ccfg.fading:
        theta_new = ch.decode_fading(y, ccfg.r_hat, len(participants), p_t, theta_prev)
    elif len(participants) == K:
        theta_new = ch.decode_full(y, K, p_t, theta_prev)
    else:
        theta_new = ch.decode_partial(y, len(participants), p_t, theta_prev)
    if not np.all(np.isfinite(theta_new)):
        raise DivergenceError(f"global model became non-finite in round {t}", round=t)

    gammas, zetas = (), ()
    if cfg.track_gamma:
        gammas = tuple(measure_gamma(local[k], theta_prev, cfg.lam, data.shards[k], data.spec,
                                     ref_grad=state.client_grads[k]).gamma_hat
                       for k in participants)
    if cfg.track_zeta:
        zetas = tuple(measure_zeta(local[k], theta_prev, cfg.lam, data.shards[k], data.spec)
                      for k in participants)

    loss, gsq, lsq, grads, acc = _evaluate(state, theta_new, t)
    rec = RoundRecord(
        t=t, global_loss=loss, grad_norm_sq=gsq, local_grad_sq=lsq, test_accuracy=acc,
        p_t=float(p_t), participants=participants, E_k=tuple(int(e) for e in E_k),
        gamma_hat=gammas, zeta_hat=zetas, update_sq=float(q @ norms_sq),
        transmit_power=float(q @ tx_sq), noise_seed=noise_seed, **ref,
        wall_ms=1e3 * (time.perf_counter() - tic),
    )
    state.theta = theta_new
    state.client_grads = grads
    state.p_prev = float(p_t)
    state.update_sq_prev = float(q @ norms_sq)
    state.last = rec
    return theta_new, rec


def run_training(cfg: RunConfig, data: Optional[FLData] = None, theta0=None,
                 keep_trajectory=False, callback=None) -> RunResult:
    """Run ``cfg.T`` rounds. A divergence truncates the result and sets ``diverged``."""
    state = init_state(cfg, data, theta0)
    initial = state.last
    records, traj = [], [state.theta.copy()] if keep_trajectory else None
    diverged_at = None
    for t in range(1, cfg.T + 1):
        try:
            theta, rec = run_round(state, t)
        except DivergenceError:
            diverged_at = t
            break
        records.append(rec)
        if keep_trajectory:
            traj.append(theta.copy())
        if callback is not None:
            callback(rec)
    return RunResult(
        config=cfg, initial=initial, records=tuple(records), theta=state.theta.copy(),
        trajectory=tuple(traj) if keep_trajectory else None,
        diverged=diverged_at is not None, diverged_round=diverged_at,
        partition=tuple(state.data.manifest),
    )
