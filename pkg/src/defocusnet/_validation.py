"""Input checks shared by the estimator wrappers."""
import numpy as np

from .deconv import STACK_DEPTH
from .errors import DataError


def check_images(X):
    """Return a float64 batch ``[N, H, W]`` or ``[N, H, W, C]``; a single
    2-D image becomes a batch of one."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim not in (3, 4):
        raise DataError(f"expected images [N, H, W(, C)], got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("images contain non-finite values")
    return X


def check_stacks(X, dtype=np.float32):
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[3] != STACK_DEPTH:
        raise DataError(f"expected stacks [N, H, W, {STACK_DEPTH}, C], got shape {X.shape}")
    if X.shape[1] % 8 or X.shape[2] % 8:
        raise DataError(f"stack height and width must be multiples of 8, got {X.shape[1:3]}")
    return X


def check_label_maps(y, n_samples, shape, labels):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (n_samples,) + tuple(shape):
        raise DataError(f"label maps {y.shape} do not match stacks {(n_samples,) + tuple(shape)}")
    if not np.isin(y, labels).all():
        raise DataError("label maps hold labels outside the label set")
    return y.astype(np.int64)
