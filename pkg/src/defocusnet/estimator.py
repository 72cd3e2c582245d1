"""scikit-learn style wrappers around stack building and the classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_label_maps, check_stacks
from .deconv import HypothesisStack, build_stack, canonical_slice_labels
from .evaluate import decode, metrics
from .net3d import forward
from .optics import ApertureMask, build_kernel_bank, label_set, sample_mask
from .pipeline import TrainConfig, fit_samples


def _resolve_mask(mask):
    if isinstance(mask, ApertureMask):
        return mask
    if isinstance(mask, str):
        return sample_mask(mask)
    return ApertureMask(np.asarray(mask, dtype=np.float64))


class HypothesisStackBuilder(TransformerMixin, BaseEstimator):
    """Turn defocused images into depth-24 hypothesis stacks.

    ``transform`` returns an array ``[N, H, W, 24, C]``; slice order is
    ``slice_labels_``.
    """

    def __init__(self, mask="asym_a", max_blur=4, algo="cg", nsr=1e-3, reg=1e-3,
                 tol=1e-6, max_iter=500, dtype=np.float32):
        self.mask = mask
        self.max_blur = max_blur
        self.algo = algo
        self.nsr = nsr
        self.reg = reg
        self.tol = tol
        self.max_iter = max_iter
        self.dtype = dtype

    def fit(self, X=None, y=None):
        self.bank_ = build_kernel_bank(_resolve_mask(self.mask), self.max_blur)
        self.slice_labels_ = canonical_slice_labels(self.max_blur)
        return self

    def _params(self):
        if self.algo == "wiener":
            return {"nsr": self.nsr}
        return {"reg": self.reg, "tol": self.tol, "max_iter": self.max_iter}

    def transform(self, X):
        check_is_fitted(self, "bank_")
        X = check_images(X)
        stacks = [build_stack(img, self.bank_, self.algo, **self._params()).data for img in X]
        return np.stack(stacks).astype(self.dtype)


class BlurKernelClassifier(ClassifierMixin, BaseEstimator):
    """Per-pixel blur label classifier over hypothesis stacks.

    ``fit(X, y)`` takes stacks ``[N, H, W, 24, C]`` in canonical slice order
    and signed label maps ``[N, H, W]``; ``predict`` returns label maps.
    ``score`` is the N-1 accuracy as a fraction.
    """

    def __init__(self, max_blur=4, lr=0.01, smooth_weight=0.1, temperature=0.5,
                 steps=2000, seed=0, val_every=200):
        self.max_blur = max_blur
        self.lr = lr
        self.smooth_weight = smooth_weight
        self.temperature = temperature
        self.steps = steps
        self.seed = seed
        self.val_every = val_every

    def _samples(self, X, y):
        slice_labels = canonical_slice_labels(self.max_blur)
        n = 2 * self.max_blur - 2
        return [(i, HypothesisStack(X[i], slice_labels, n), y[i]) for i in range(len(X))]

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_stacks(X)
        self.classes_ = np.array(label_set(self.max_blur))
        y = check_label_maps(y, X.shape[0], X.shape[1:3], self.classes_)
        val = ()
        if X_val is not None:
            X_val = check_stacks(X_val)
            y_val = check_label_maps(y_val, X_val.shape[0], X_val.shape[1:3], self.classes_)
            val = self._samples(X_val, y_val)
        config = TrainConfig(lr=self.lr, smooth_weight=self.smooth_weight,
                             temperature=self.temperature, steps=self.steps, seed=self.seed,
                             val_every=self.val_every)
        _, best, (best_n3, best_step) = fit_samples(self._samples(X, y), config, val,
                                                    self.max_blur)
        self.params_ = best
        self.best_val_n3_ = best_n3
        self.best_step_ = best_step
        return self

    def predict_logits(self, X):
        check_is_fitted(self, "params_")
        X = check_stacks(X)
        return np.stack([forward(x, self.params_)[0] for x in X])

    def predict(self, X):
        logits = self.predict_logits(X)
        slice_labels = canonical_slice_labels(self.max_blur)
        return np.stack([decode(lg, slice_labels).labels for lg in logits])

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        report = metrics(pred.reshape(1, -1), np.asarray(y).reshape(1, -1), self.classes_)
        return report.n1 / 100.0
