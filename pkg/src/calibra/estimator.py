"""scikit-learn style wrappers: a source classifier and a data calibrator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import DomainDataset
from .nets import (
    CalibratorConfig,
    ParameterSet,
    build_calibrator,
    build_classifier,
    calibrate,
    desk_classifier_spec,
    logits,
)
from .train import TrainConfig, make_discriminators, predict, train_calibrator, train_source


def check_images(X, image_shape=None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 N x C x H x W array in [-1, 1].

    A 3-D input is read as single-channel N x H x W.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be N x C x H x W (or N x H x W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if X.min() < -1.0 or X.max() > 1.0:
        raise ValueError(f"{name} pixels must lie in [-1, 1]; use calibra.data.normalize on [0, 1] images")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"{name} images have shape {X.shape[1:]}, expected {tuple(image_shape)}")
    return np.ascontiguousarray(X)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be a 1-D array of length {n}, got shape {y.shape}")
    return y


class SourceClassifier(ClassifierMixin, BaseEstimator):
    """Small conv net trained on labeled source images, frozen after ``fit``."""

    def __init__(self, widths=(8, 16), hidden=512, lr=1e-3, epochs=8, batch_size=32, random_state=0):
        self.widths = widths
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        spec = desk_classifier_spec(X.shape[1:], len(self.classes_), tuple(self.widths), self.hidden)
        params = build_classifier(spec, seed=self.random_state)
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state)
        params, self.log_ = train_source(params, DomainDataset(X, encoded, "source"), cfg)
        self.params_ = params.freeze()
        self.image_shape_ = X.shape[1:]
        return self

    @classmethod
    def from_params(cls, params: ParameterSet, classes=None) -> "SourceClassifier":
        """Wrap an already trained classifier (e.g. a loaded checkpoint)."""
        est = cls()
        est.params_ = params.freeze()
        est.image_shape_ = params.spec.input_shape
        est.classes_ = np.arange(params.spec.n_classes) if classes is None else np.asarray(classes)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_shape_)
        return np.concatenate([T.softmax(logits(self.params_, X[i:i + 256])).data
                               for i in range(0, len(X), 256)])

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_shape_)
        return self.classes_[predict(self.params_, X)]


class DataCalibrator(TransformerMixin, BaseEstimator):
    """Input-space calibrator adapting target images to a frozen source classifier.

    ``fit`` runs the adversarial loop on source and (unlabeled) target images;
    ``transform`` returns calibrated images with ``|out - x| <= epsilon``.
    """

    def __init__(self, classifier=None, epsilon=0.05, width=8, depth=1, blocks=1, lr=3e-3,
                 beta1=0.5, ema=0.98, epochs=6, batch_size=32, patch_size=8, disc_hidden=64,
                 select_tolerance=0.01, random_state=0):
        self.classifier = classifier
        self.epsilon = epsilon
        self.width = width
        self.depth = depth
        self.blocks = blocks
        self.lr = lr
        self.beta1 = beta1
        self.ema = ema
        self.epochs = epochs
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.disc_hidden = disc_hidden
        self.select_tolerance = select_tolerance
        self.random_state = random_state

    def _classifier_params(self) -> ParameterSet:
        clf = self.classifier
        if isinstance(clf, SourceClassifier):
            check_is_fitted(clf, "params_")
            return clf.params_
        if isinstance(clf, ParameterSet):
            return clf.freeze()
        raise ValueError("classifier must be a fitted SourceClassifier or a classifier ParameterSet")

    def fit(self, X, y=None, X_target=None):
        """Fit on source images ``X`` and target images ``X_target``.

        Source labels ``y`` are optional; when given, they gate snapshot
        selection so that source accuracy is preserved.
        """
        clf = self._classifier_params()
        X = check_images(X, clf.spec.input_shape)
        if X_target is None:
            raise ValueError("X_target is required")
        Xt = check_images(X_target, clf.spec.input_shape, "X_target")
        source_val = None
        if y is not None:
            y = check_labels(y, len(X))
            classes = getattr(self.classifier, "classes_", np.arange(clf.spec.n_classes))
            if not np.all(np.isin(y, classes)):
                raise ValueError("y holds labels the classifier was not trained on")
            source_val = DomainDataset(X, np.searchsorted(classes, y), "source")
        source = DomainDataset(X, None, "source", labels_visible=False)
        target = DomainDataset(Xt, None, "target", labels_visible=False)
        cfg = TrainConfig(lr=self.lr, beta1=self.beta1, ema=self.ema, epochs=self.epochs,
                          batch_size=self.batch_size, epsilon=self.epsilon, patch_size=self.patch_size,
                          disc_hidden=self.disc_hidden, select_tolerance=self.select_tolerance,
                          seed=self.random_state, log_every=10)
        cal = build_calibrator(CalibratorConfig(self.epsilon, self.width, self.depth, self.blocks),
                               X.shape[1:], seed=self.random_state)
        d_pixel, d_feat = make_discriminators(clf, X.shape[1:], cfg)
        self.calibrator_, self.log_ = train_calibrator(clf, cal, d_pixel, d_feat, source, target, cfg,
                                                       source_val=source_val)
        return self

    def transform(self, X):
        check_is_fitted(self, "calibrator_")
        X = check_images(X, self.calibrator_.spec.input_shape)
        return np.concatenate([calibrate(self.calibrator_, X[i:i + 256], self.epsilon).data
                               for i in range(0, len(X), 256)])
