"""scikit-learn estimator wrapping a simulated over-the-air federated training run."""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .channel import ChannelConfig, r_hat_for_participation
from .datagen import Dataset, PartitionSpec, partition_heterogeneous, partition_manifest
from .model import predict_logits
from .protocol import FLData, ModelConfig, RunConfig, StragglerModel, run_training, variant_config


class OTAFederatedClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by federated rounds over a noisy analog uplink.

    ``fit`` splits the training set across ``n_clients`` simulated clients
    with label skew ``pi``, then runs ``rounds`` rounds of the chosen
    protocol variant. The fitted global model is in ``coef_flat_`` and the
    per-round history in ``history_``.

    Parameters
    ----------
    variant : str
        One of NoROTA, COTAF, FedProx, NoisyProx, NoisyFedAvg, RobustComm.
    snr_db : float or None
        Uplink SNR; ``None`` means a noiseless channel.
    fading_participation : float or None
        Enables Rayleigh block fading with the threshold set so that each
        client transmits with this probability.
    """

    def __init__(self, variant="NoROTA", n_clients=30, local_epochs=3, rounds=50, lam=0.4,
                 eta=None, batch_size=64, pi=1.0, straggler_fraction=0.0, snr_db=0.0,
                 transmit_power=1.0, fading_participation=None, precoding="oracle",
                 clients_per_round=None, model="logistic", hidden=(), activation="tanh",
                 random_state=0):
        self.variant = variant
        self.n_clients = n_clients
        self.local_epochs = local_epochs
        self.rounds = rounds
        self.lam = lam
        self.eta = eta
        self.batch_size = batch_size
        self.pi = pi
        self.straggler_fraction = straggler_fraction
        self.snr_db = snr_db
        self.transmit_power = transmit_power
        self.fading_participation = fading_participation
        self.precoding = precoding
        self.clients_per_round = clients_per_round
        self.model = model
        self.hidden = hidden
        self.activation = activation
        self.random_state = random_state

    def _run_config(self, m, C):
        fading = self.fading_participation is not None
        chan = ChannelConfig(
            P=self.transmit_power, sigma2=0.0, fading=fading,
            r_hat=r_hat_for_participation(self.fading_participation) if fading else 0.0,
            precoding_mode=self.precoding,
        )
        cfg = RunConfig(
            K=self.n_clients, K_hat=self.clients_per_round, E=self.local_epochs, T=self.rounds,
            lam=self.lam, eta=self.eta, batch=self.batch_size, pi=self.pi,
            straggler=StragglerModel(self.straggler_fraction), channel=chan,
            model=ModelConfig(self.model, tuple(self.hidden), self.activation),
            master_seed=0 if self.random_state is None else int(self.random_state),
        )
        if self.snr_db is not None:
            cfg = cfg.with_snr_db(self.snr_db, cfg.model.spec(m, C).d)
        return variant_config(self.variant, cfg)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        ds = Dataset(X, y_enc, self.classes_.size)
        cfg = self._run_config(X.shape[1], self.classes_.size)
        shards = partition_heterogeneous(ds, PartitionSpec(cfg.K, cfg.pi, cfg.master_seed))
        data = FLData(shards, ds, None, cfg.model_spec(X.shape[1], self.classes_.size),
                      partition_manifest(shards))
        result = run_training(cfg, data)
        if result.diverged:
            warnings.warn(f"training diverged in round {result.diverged_round}", RuntimeWarning)
        self.config_ = cfg
        self.model_spec_ = data.spec
        self.coef_flat_ = result.theta
        self.history_ = result.records
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_flat_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_logits(self.coef_flat_, X, self.model_spec_)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
