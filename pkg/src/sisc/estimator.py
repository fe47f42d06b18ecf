"""Scikit-learn facade over the sequencer: fit/predict/predict_proba plus
per-image critical response maps, so the model drops into sklearn tooling
(pipelines, cross_val_score, grid search over get_params)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .crm import generate_crm
from .errors import DataError
from .sequencer import (
    CellConfig,
    FinalCellConfig,
    SequencerConfig,
    TrainSchedule,
    build_sequencer,
    forward,
    train,
)
from .tensor import gap
from .validation import as_image_batch, encode_labels

_PREDICT_CHUNK = 128


class SiscClassifier(ClassifierMixin, BaseEstimator):
    """Stacked-cell CNN classifier with interpretable response maps.

    Parameters mirror the trainer defaults; pass smaller `cells` /
    `final_channels` and a larger `lr` for desk-scale experiments. Labels
    may be anything np.unique can order; the second class in sorted order
    is treated as the positive (malignant-like) one by `critical_response`
    callers that rely on class index 1.
    """

    def __init__(self, cells=(16, 32, 64), conv_count=3, final_channels=128,
                 kernel=3, dropout_rate=0.25, bn_momentum=0.99,
                 input_size=96, epochs=30, batch_size=128, lr=1e-5,
                 val_fraction=0.1, random_state=0):
        self.cells = cells
        self.conv_count = conv_count
        self.final_channels = final_channels
        self.kernel = kernel
        self.dropout_rate = dropout_rate
        self.bn_momentum = bn_momentum
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _config(self) -> SequencerConfig:
        cells = tuple(
            CellConfig(channels=int(c), conv_count=self.conv_count,
                       kernel=self.kernel, dropout_rate=self.dropout_rate,
                       bn_momentum=self.bn_momentum)
            for c in self.cells)
        final = FinalCellConfig(channels=self.final_channels,
                                kernel=self.kernel,
                                dropout_rate=self.dropout_rate,
                                bn_momentum=self.bn_momentum)
        return SequencerConfig(cells=cells, final_cell=final,
                               input_size=self.input_size)

    def fit(self, X, y):
        X = as_image_batch(X, self.input_size)
        self.classes_, indices = encode_labels(y)
        if len(indices) != len(X):
            raise DataError(f"{len(X)} images but {len(indices)} labels")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DataError(f"val_fraction must be in [0, 1), got "
                            f"{self.val_fraction}")
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(X))
        n_val = int(round(self.val_fraction * len(X)))
        if self.val_fraction > 0:
            n_val = max(n_val, 1)
        if n_val >= len(X):
            raise DataError("validation fraction leaves no training samples")
        val_idx, train_idx = order[:n_val], order[n_val:]
        train_set = (X[train_idx], indices[train_idx])
        # with no held-out fraction, validation tracks the training set
        val_set = (X[val_idx], indices[val_idx]) if n_val else train_set
        model = build_sequencer(self._config(), rng)
        schedule = TrainSchedule(epochs=self.epochs,
                                 batch_size=self.batch_size, lr=self.lr,
                                 seed=self.random_state)
        self.model_, result = train(model, train_set, val_set, schedule)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_accuracy_ = result.best_val_accuracy
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this SiscClassifier instance is not "
                                 "fitted yet; call fit first")

    def _forward_chunks(self, X) -> list:
        traces = []
        for start in range(0, len(X), _PREDICT_CHUNK):
            _, trace = forward(self.model_, X[start:start + _PREDICT_CHUNK],
                               "infer")
            traces.append(trace)
        return traces

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = as_image_batch(X, self.input_size)
        probs = [t.probs.reshape(t.probs.shape[0], -1)
                 for t in self._forward_chunks(X)]
        return np.concatenate(probs, axis=0)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Pooled activations of the last feature layer, one row per image."""
        self._require_fitted()
        X = as_image_batch(X, self.input_size)
        features = []
        for trace in self._forward_chunks(X):
            # the record before the class head is the final cell's relu
            features.append(gap(trace.records[-2].output)[:, :, 0, 0])
        return np.concatenate(features, axis=0)

    def critical_response(self, X, class_id: int | None = None,
                          variant: str = "guided") -> np.ndarray:
        """Input-space evidence maps, stacked (n, s, s).

        By default each image is explained for its own predicted class;
        pass class_id to force one class for the whole batch.
        """
        self._require_fitted()
        X = as_image_batch(X, self.input_size)
        if class_id is None:
            targets = np.argmax(self.predict_proba(X), axis=1)
        else:
            targets = np.full(len(X), class_id, dtype=int)
        maps = [generate_crm(self.model_, X[i], int(targets[i]), variant).map
                for i in range(len(X))]
        return np.stack([m[0, 0] for m in maps])
