"""scikit-learn style wrapper around model construction and training."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Bag, holdout_split
from .model import MILModel, ModelConfig, forward
from .training import TrainConfig, fit_holdout
from .validation import make_bags


class MILClassifier(ClassifierMixin, BaseEstimator):
    """Bag classifier; ``X`` is a sequence of K x D instance matrices.

    A stratified ``validation_fraction`` of the training bags drives early
    stopping and the CFSD threshold schedule.
    """

    def __init__(
        self,
        kind="clamsb",
        pe="none",
        sigma=100.0,
        embed_dim=512,
        attn_dim=256,
        heads=8,
        lr=2e-4,
        weight_decay=1e-2,
        accumulation=32,
        max_epochs=150,
        patience=15,
        cfsd="off",
        warmup=5,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.kind = kind
        self.pe = pe
        self.sigma = sigma
        self.embed_dim = embed_dim
        self.attn_dim = attn_dim
        self.heads = heads
        self.lr = lr
        self.weight_decay = weight_decay
        self.accumulation = accumulation
        self.max_epochs = max_epochs
        self.patience = patience
        self.cfsd = cfsd
        self.warmup = warmup
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, coords=None, instance_truth=None):
        """``instance_truth`` (optional) holds per-instance class indices into ``classes_``."""
        y = np.asarray(y).reshape(-1)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        bags = make_bags(X, encoded, coords, instance_truth)
        self.n_features_in_ = bags[0].features.shape[1]
        config = ModelConfig(
            kind=self.kind,
            num_classes=max(len(self.classes_), 2),
            feature_dim=self.n_features_in_,
            pe=self.pe,
            sigma=self.sigma,
            heads=self.heads,
            embed_dim=self.embed_dim,
            attn_dim=self.attn_dim,
        )
        train_cfg = TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            accumulation=self.accumulation,
            max_epochs=self.max_epochs,
            patience=self.patience,
            cfsd=self.cfsd,
            warmup=self.warmup,
            seed=self.random_state,
        )
        tr, va = holdout_split(bags, 1 - self.validation_fraction, seed=self.random_state).splits()[0]
        model = MILModel.init(config, seed=self.random_state)
        result = fit_holdout(model, [bags[i] for i in tr], [bags[i] for i in va], train_cfg)
        self.model_ = result.model
        self.history_ = [r.row() for r in result.history]
        self.validation_report_ = result.report
        return self

    def _outputs(self, X, coords):
        check_is_fitted(self, "model_")
        bags: list[Bag] = make_bags(X, coords=coords)
        if bags[0].features.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {bags[0].features.shape[1]} features, model expects {self.n_features_in_}")
        return [forward(self.model_, b.features, b.coords) for b in bags]

    def predict_proba(self, X, coords=None) -> np.ndarray:
        probs = np.array([softmax(o.logits.data.astype(np.float64)) for o in self._outputs(X, coords)])
        return probs[:, : len(self.classes_)]

    def predict(self, X, coords=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X, coords).argmax(axis=1)]

    def instance_scores(self, X, coords=None) -> list[np.ndarray]:
        """Per-instance class probabilities (K x C) for each bag."""
        return [expit(self._require_scores(o).s.data.astype(np.float64)) for o in self._outputs(X, coords)]

    def attention(self, X, coords=None) -> list[np.ndarray]:
        """Per-class attention weights over instances (K x C) for each bag."""
        return [self._require_scores(o).alpha.data.astype(np.float64) for o in self._outputs(X, coords)]

    def _require_scores(self, out):
        if out.scores is None:
            raise ValueError(f"{self.kind} has no attention network")
        return out.scores
