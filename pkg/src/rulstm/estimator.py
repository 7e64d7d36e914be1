"""Scikit-learn style estimator wrapping the anticipation model.

``RUAnticipator`` runs the full training protocol inside ``fit`` and predicts
action classes from the fused scores, so the model slots into the usual
sklearn tooling (
``get_params``/``set_params``/``clone``, pipelines over precomputed feature
dicts, cross-validation drivers that accept custom inputs).

X is either a single array of shape (n_samples, n_steps, dim) or a dict
mapping modality names to such arrays; n_steps must equal s_enc + s_ant.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .linalg import softmax
from .timeline import TimelineSpec
from .train import TrainConfig, TrainData, run_protocol
from .validation import check_feature_dict, check_is_fitted, check_labels, check_seed


class RUAnticipator(BaseEstimator, ClassifierMixin):
    """Multi-modal action anticipation classifier.

    Parameters mirror the training protocol: per-branch sequence-completion
    pre-training, per-branch fine-tuning, then a joint pass through the
    fusion layer (for attention fusion).  ``predict`` reports the class with
    the highest fused score at ``anticipation_time`` (default: the latest
    prediction step, i.e. the most informed one).

    With five or fewer classes the default top-5 early-stopping metric
    saturates immediately (every epoch ties at 100%, so the earliest-epoch
    tie-break keeps the first one); pass
    ``early_stop_metric="avg_top1_action"`` on such problems.
    """

    def __init__(self, hidden_size=32, fusion="matt", alpha=0.25, s_enc=6,
                 s_ant=8, dropout=0.8, resample_dropout=True,
                 learning_rate=0.01, momentum=0.9, clip_norm=5.0,
                 batch_size=32, use_scp=True, scp_epochs=20, branch_epochs=20,
                 fusion_epochs=20, early_stop_metric="top5_action", seed=0):
        self.hidden_size = hidden_size
        self.fusion = fusion
        self.alpha = alpha
        self.s_enc = s_enc
        self.s_ant = s_ant
        self.dropout = dropout
        self.resample_dropout = resample_dropout
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.use_scp = use_scp
        self.scp_epochs = scp_epochs
        self.branch_epochs = branch_epochs
        self.fusion_epochs = fusion_epochs
        self.early_stop_metric = early_stop_metric
        self.seed = seed

    def _config(self, modalities) -> TrainConfig:
        return TrainConfig(
            seed=check_seed(self.seed),
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            clip_norm=self.clip_norm,
            hidden_size=self.hidden_size,
            dropout_p=self.dropout,
            resample_dropout_per_step=self.resample_dropout,
            timeline=TimelineSpec(self.alpha, self.s_enc, self.s_ant),
            modalities=modalities,
            fusion=self.fusion,
            use_scp=self.use_scp,
            scp_epochs=self.scp_epochs,
            branch_epochs=self.branch_epochs,
            fusion_epochs=self.fusion_epochs,
            early_stop_metric=self.early_stop_metric,
        )

    def fit(self, X, y, validation_data=None):
        """Train on (X, y); optional validation_data=(Xv, yv) drives early
        stopping (otherwise the final epoch is kept)."""
        spec = TimelineSpec(self.alpha, self.s_enc, self.s_ant)
        features = check_feature_dict(X, n_steps=spec.total_steps)
        modalities = list(features)
        n = next(iter(features.values())).shape[0]
        y = check_labels(y, n)
        self.classes_, encoded = np.unique(y, return_inverse=True)

        if validation_data is not None:
            xv, yv = validation_data
            val_features = check_feature_dict(
                xv, n_steps=spec.total_steps, modalities=modalities)
            yv = check_labels(yv, next(iter(val_features.values())).shape[0])
            lookup = {c: i for i, c in enumerate(self.classes_)}
            try:
                val_encoded = np.asarray([lookup[v] for v in yv])
            except KeyError as exc:
                raise ValueError(f"validation label {exc} never seen in y") from None
        else:
            val_features = {m: arr[:0] for m, arr in features.items()}
            val_encoded = np.asarray([], dtype=int)

        data = TrainData(
            features=features, labels=encoded,
            val_features=val_features, val_labels=val_encoded,
            spec=spec, num_actions=len(self.classes_),
        )
        result = run_protocol(data, self._config(modalities))
        self.model_ = result.model
        self.logs_ = result.logs
        self.modalities_ = modalities
        return self

    def _timeline_scores(self, X) -> np.ndarray:
        check_is_fitted(self)
        features = check_feature_dict(
            X, n_steps=self.model_.spec.total_steps, modalities=self.modalities_,
            dims=self.model_.input_dims)
        return self.model_.forward(features, train=False).fused

    def _step_index(self, anticipation_time) -> int:
        taus = self.model_.spec.anticipation_times()
        if anticipation_time is None:
            return len(taus) - 1
        return min(range(len(taus)),
                   key=lambda i: (abs(taus[i] - anticipation_time), i))

    def predict_timeline(self, X) -> np.ndarray:
        """Fused scores for every anticipation step: (n, s_ant, n_classes)."""
        return self._timeline_scores(X)

    def predict_proba(self, X, anticipation_time=None) -> np.ndarray:
        scores = self._timeline_scores(X)
        return softmax(scores[:, self._step_index(anticipation_time)])

    def decision_function(self, X, anticipation_time=None) -> np.ndarray:
        scores = self._timeline_scores(X)
        return scores[:, self._step_index(anticipation_time)]

    def predict(self, X, anticipation_time=None) -> np.ndarray:
        scores = self.decision_function(X, anticipation_time)
        return self.classes_[np.argmax(scores, axis=1)]
