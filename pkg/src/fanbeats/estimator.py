"""scikit-learn style wrappers around the multi-domain trainer and the linear baselines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numcore as nc
from .align import AlignmentConfig, SinkhornConfig, normalize
from .data import DataConfigError, DomainDataset
from .model import build_model, init_linear_params, linear_baseline_forward, model_forward_full, predict
from .train import TrainConfig, fit_linear_baseline, train_loop


def _check_Y(y, n: int, beta: int | None = None) -> np.ndarray:
    Y = check_array(y, ensure_2d=False, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise ValueError(f"X has {n} rows but y has {Y.shape[0]}")
    if beta is not None and Y.shape[1] != beta:
        raise ValueError(f"y has {Y.shape[1]} columns, expected horizon {beta}")
    return Y


def _domain_datasets(X: np.ndarray, Y: np.ndarray, domains) -> list[DomainDataset]:
    """One training-only dataset per domain label, in order of first appearance."""
    labels = np.asarray(domains)
    if labels.shape != (len(X),):
        raise ValueError(f"domains must hold one label per row ({len(X)}), got shape {labels.shape}")
    _, first = np.unique(labels, return_index=True)
    out = []
    for lab in labels[np.sort(first)]:
        idx = np.flatnonzero(labels == lab)
        empty = np.zeros(0, dtype=np.int64)
        origin = np.stack([np.zeros(len(idx), dtype=np.int64), np.arange(len(idx))], axis=1)
        out.append(DomainDataset(str(lab), "", X[idx], Y[idx], np.arange(len(idx)), empty, empty, origin))
    return out


class FeatureAlignedNBeats(RegressorMixin, BaseEstimator):
    """N-BEATS trained on several source domains with stack-wise feature alignment.

    ``fit`` takes lookback windows ``X`` (n, alpha), horizons ``y`` (n, beta)
    and a ``domains`` label per row; at least two distinct labels are needed.
    ``transform`` returns the normalized feature taps, stacks side by side.
    """

    def __init__(
        self,
        variant="generic",
        n_stacks=3,
        n_blocks=4,
        width=64,
        lam=1.0,
        divergence="sinkhorn",
        normalizer="softmax",
        granularity="stack_wise",
        epsilon=2.5e-3,
        batch_size=64,
        iterations=300,
        base_lr=3e-4,
        max_lr=3e-3,
        random_state=0,
    ):
        self.variant = variant
        self.n_stacks = n_stacks
        self.n_blocks = n_blocks
        self.width = width
        self.lam = lam
        self.divergence = divergence
        self.normalizer = normalizer
        self.granularity = granularity
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.iterations = iterations
        self.base_lr = base_lr
        self.max_lr = max_lr
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            iterations=self.iterations,
            lam=self.lam,
            base_lr=self.base_lr,
            max_lr=self.max_lr,
            seed=self.random_state,
            alignment=AlignmentConfig(self.normalizer, self.divergence, self.granularity),
            sinkhorn=SinkhornConfig(epsilon=self.epsilon, unroll_grad=False),
            val_every=0,
        )

    def fit(self, X, y, domains=None):
        X = check_array(X, dtype=np.float64)
        Y = _check_Y(y, len(X))
        if domains is None:
            raise DataConfigError("fit needs a domain label per row")
        datasets = _domain_datasets(X, Y, domains)
        cfg = self._train_config()
        self.model_ = build_model(
            X.shape[1], Y.shape[1], self.width, M=self.n_stacks, L=self.n_blocks, variant=self.variant,
            seed=self.random_state,
        )
        self.model_, self.history_ = train_loop(datasets, self.model_, cfg)
        self.domains_ = [d.domain_id for d in datasets]
        self.n_features_in_ = X.shape[1]
        self.horizon_ = Y.shape[1]
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, the model was fitted with {self.n_features_in_}")
        return X

    def predict(self, X):
        X = self._check(X)
        return predict(self.model_, X)

    def transform(self, X):
        X = self._check(X)
        with nc.no_grad():
            res = model_forward_full(nc.Tensor(X), self.model_)
            return np.hstack([normalize(t, self.normalizer).data for t in res.taps])

    def score(self, X, y, sample_weight=None):
        """Negative SMAPE, so larger is better as sklearn expects."""
        from .evaluation import smape_metric

        X = self._check(X)
        return -smape_metric(self.predict(X), _check_Y(y, len(X), self.horizon_))


class LinearForecaster(RegressorMixin, BaseEstimator):
    """NLinear or DLinear trained on pooled windows with the SMAPE loss."""

    def __init__(self, kind="nlinear", window=25, batch_size=64, iterations=300, base_lr=1e-3, max_lr=1e-2, random_state=0):
        self.kind = kind
        self.window = window
        self.batch_size = batch_size
        self.iterations = iterations
        self.base_lr = base_lr
        self.max_lr = max_lr
        self.random_state = random_state

    def fit(self, X, y, domains=None):
        X = check_array(X, dtype=np.float64)
        Y = _check_Y(y, len(X))
        labels = np.zeros(len(X), dtype=int) if domains is None else domains
        datasets = _domain_datasets(X, Y, labels)
        cfg = TrainConfig(
            batch_size=self.batch_size, iterations=self.iterations, lam=0.0, base_lr=self.base_lr,
            max_lr=self.max_lr, seed=self.random_state, val_every=0,
        )
        self.params_ = init_linear_params(X.shape[1], Y.shape[1], self.kind, self.window, self.random_state)
        self.history_ = fit_linear_baseline(self.params_, datasets, cfg)
        self.n_features_in_ = X.shape[1]
        self.horizon_ = Y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, the model was fitted with {self.n_features_in_}")
        with nc.no_grad():
            return linear_baseline_forward(nc.Tensor(X), self.kind, self.params_).data

    def score(self, X, y, sample_weight=None):
        from .evaluation import smape_metric

        return -smape_metric(self.predict(X), _check_Y(y, len(np.asarray(X)), self.horizon_))
