"""Deblurring under PSF hypotheses and fixed-depth stack assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DefocusError, SingularInverseError, SolverFailureError
from .optics import KernelBank

STACK_DEPTH = 24
DI_SENTINEL = 127
PAD_SENTINEL = -128
CLAMP_RANGE = (-0.25, 1.25)

__all__ = [
    "STACK_DEPTH",
    "DI_SENTINEL",
    "PAD_SENTINEL",
    "HypothesisStack",
    "CGInfo",
    "canonical_slice_labels",
    "labels_to_indices",
    "wiener_deblur",
    "cg_deblur",
    "build_stack",
]


def _per_channel(func, image, *args, **kwargs):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise DataError(f"expected a 2-D or 3-D raster, got {image.ndim}-D")
    if image.size == 0:
        raise DataError("image is empty")
    if image.ndim == 2:
        return func(image, *args, **kwargs)
    return np.stack([func(image[..., c], *args, **kwargs) for c in range(image.shape[-1])], axis=-1)


def _check_psf(psf):
    psf = np.asarray(psf, dtype=np.float64)
    if psf.ndim != 2 or psf.size == 0:
        raise DataError("psf must be a non-empty 2-D array")
    if abs(psf.sum() - 1.0) > 1e-6:
        raise DataError(f"psf must sum to 1, sums to {psf.sum():.6g}")
    return psf


def _otf(psf, shape):
    ky, kx = psf.shape
    arr = np.zeros(shape)
    arr[:ky, :kx] = psf
    arr = np.roll(arr, (-(ky // 2), -(kx // 2)), axis=(0, 1))
    return np.fft.rfft2(arr)


def _wiener_2d(image, psf, nsr, periodic, pad):
    h, w = image.shape
    if not periodic:
        image = np.pad(image, pad, mode="edge")
    otf = _otf(psf, image.shape)
    if nsr == 0 and np.min(np.abs(otf)) < 1e-12:
        raise SingularInverseError("transfer function vanishes and nsr = 0")
    filt = np.conj(otf) / (np.abs(otf) ** 2 + nsr)
    out = np.fft.irfft2(np.fft.rfft2(image) * filt, s=image.shape)
    if not periodic:
        out = out[pad:pad + h, pad:pad + w]
    return out


def wiener_deblur(image, psf, nsr: float = 1e-3, periodic: bool = False, pad=None):
    """Wiener deconvolution ``conj(H) Y / (|H|^2 + nsr)``.

    Outside ``periodic`` mode the image is edge-padded by ``pad`` pixels per
    side (default ``max(32, 4 * psf side)``) before the FFT and cropped afterwards.
    """
    psf = _check_psf(psf)
    if nsr < 0:
        raise ConfigError("nsr must be non-negative")
    if pad is None:
        pad = max(32, 4 * max(psf.shape))
    return _per_channel(_wiener_2d, image, psf, float(nsr), periodic, int(pad))


def _blur_valid(x, k):
    # "valid" convolution: x carries a kernel-sized margin beyond the data
    ky, kx = k.shape
    h, w = x.shape[0] - ky + 1, x.shape[1] - kx + 1
    out = np.zeros((h, w))
    for u in range(ky):
        for v in range(kx):
            out += k[u, v] * x[ky - 1 - u:ky - 1 - u + h, kx - 1 - v:kx - 1 - v + w]
    return out


def _blur_valid_adjoint(r, k):
    ky, kx = k.shape
    h, w = r.shape
    out = np.zeros((h + ky - 1, w + kx - 1))
    for u in range(ky):
        for v in range(kx):
            out[ky - 1 - u:ky - 1 - u + h, kx - 1 - v:kx - 1 - v + w] += k[u, v] * r
    return out


def _grad_normal(x):
    # (D_h^T D_h + D_v^T D_v) x with forward differences inside the domain
    out = np.zeros_like(x)
    dh = x[:, 1:] - x[:, :-1]
    out[:, 1:] += dh
    out[:, :-1] -= dh
    dv = x[1:, :] - x[:-1, :]
    out[1:, :] += dv
    out[:-1, :] -= dv
    return out


def _objective(x, y, k, reg):
    resid = _blur_valid(x, k) - y
    value = np.sum(resid * resid)
    if reg:
        value += reg * (np.sum(np.diff(x, axis=0) ** 2) + np.sum(np.diff(x, axis=1) ** 2))
    return float(value)


@dataclass
class CGInfo:
    iterations: int = 0
    converged: bool = False
    residuals: list = field(default_factory=list)
    objectives: list = field(default_factory=list)


def _cg_2d(y, k, reg, tol, max_iter, pad, info):
    h, w = y.shape
    y = np.pad(y, pad, mode="edge")
    ky, kx = k.shape
    top, left = ky - 1 - ky // 2, kx - 1 - kx // 2

    def apply(v):
        out = _blur_valid_adjoint(_blur_valid(v, k), k)
        if reg:
            out += reg * _grad_normal(v)
        return out

    b = _blur_valid_adjoint(y, k)
    b_norm = np.linalg.norm(b)
    x = np.pad(y, ((top, ky // 2), (left, kx // 2)), mode="edge")
    if b_norm == 0:
        info.converged = True
        return np.zeros((h, w))
    r = b - apply(x)
    p = r.copy()
    rho = float(np.dot(r.ravel(), r.ravel()))
    f = _objective(x, y, k, reg)
    info.residuals.append(np.sqrt(rho) / b_norm)
    info.objectives.append(f)
    it = 0
    while info.residuals[-1] > tol and it < max_iter:
        q = apply(p)
        alpha = rho / float(np.dot(p.ravel(), q.ravel()))
        x += alpha * p
        r -= alpha * q
        rho_new = float(np.dot(r.ravel(), r.ravel()))
        p = r + (rho_new / rho) * p
        rho = rho_new
        it += 1
        f_new = _objective(x, y, k, reg)
        if f_new > f + 1e-9 * max(1.0, abs(f)):
            raise SolverFailureError(
                f"objective increased from {f:.12g} to {f_new:.12g} at iteration {it}"
            )
        f = f_new
        info.residuals.append(np.sqrt(rho) / b_norm)
        info.objectives.append(f)
    info.iterations = max(info.iterations, it)
    info.converged = info.residuals[-1] <= tol
    return x[top + pad:top + pad + h, left + pad:left + pad + w]


def cg_deblur(image, psf, reg: float = 1e-3, tol: float = 1e-6, max_iter: int = 500,
              pad=None, return_info: bool = False):
    """Deblur by conjugate gradients on the normal equations of
    ``||K x - y||^2 + reg * (||D_h x||^2 + ||D_v x||^2)``.

    The image is edge-padded by ``pad`` pixels and ``x`` extends past it by a
    kernel-sized free margin, so ``K`` is a "valid" convolution and makes no
    assumption about pixels outside the frame. The solver starts from the
    blurred image and stops once ``||b - A x|| / ||b|| <= tol``. With
    ``return_info`` the per-iteration residuals and objective values are
    returned too (the last channel's, for multi-channel input).
    """
    psf = _check_psf(psf)
    if reg < 0:
        raise ConfigError("reg must be non-negative")
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    if pad is None:
        pad = max(psf.shape)
    image = np.asarray(image, dtype=np.float64)
    info = CGInfo()

    def run(channel):
        info.residuals.clear()
        info.objectives.clear()
        return _cg_2d(channel, psf, float(reg), float(tol), int(max_iter), int(pad), info)

    out = _per_channel(run, image)
    return (out, info) if return_info else out


def canonical_slice_labels(max_blur: int) -> np.ndarray:
    """Slice labels before shuffling: nonzero labels ascending, the defocused
    image, then padding."""
    m = int(max_blur)
    nonzero = [lab for lab in range(-m, m + 1) if abs(lab) >= 2]
    n = len(nonzero)
    if n + 1 > STACK_DEPTH:
        raise ConfigError(f"max_blur {m} needs {n + 1} slices, more than {STACK_DEPTH}")
    labels = np.full(STACK_DEPTH, PAD_SENTINEL, dtype=np.int64)
    labels[:n] = nonzero
    labels[n] = DI_SENTINEL
    return labels


@dataclass(frozen=True)
class HypothesisStack:
    """``data`` is ``[H, W, 24, C]``; ``slice_labels[k]`` is the signed label of
    slice ``k``, or ``DI_SENTINEL`` / ``PAD_SENTINEL``."""

    data: np.ndarray
    slice_labels: np.ndarray
    n: int

    def __post_init__(self):
        data = np.asarray(self.data)
        labels = np.asarray(self.slice_labels, dtype=np.int64)
        if data.ndim != 4 or data.shape[2] != STACK_DEPTH:
            raise DataError(f"stack data must be [H, W, {STACK_DEPTH}, C], got {data.shape}")
        if labels.shape != (STACK_DEPTH,):
            raise DataError("slice_labels must have one entry per slice")
        if np.count_nonzero(labels == DI_SENTINEL) != 1:
            raise DataError("stack must hold exactly one defocused-image slice")
        if np.count_nonzero(labels == PAD_SENTINEL) != STACK_DEPTH - 1 - self.n:
            raise DataError("padding slice count does not match n")
        if np.any(data[:, :, labels == PAD_SENTINEL] != 0):
            raise DataError("padding slices must be all zero")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "slice_labels", labels)

    @property
    def valid(self) -> np.ndarray:
        return self.slice_labels != PAD_SENTINEL

    @property
    def signed_labels(self) -> np.ndarray:
        """Blur label of every slice with the defocused image as 0 (padding kept)."""
        return np.where(self.slice_labels == DI_SENTINEL, 0, self.slice_labels)


def labels_to_indices(label_map, slice_labels) -> np.ndarray:
    """Map signed ground-truth labels to the depth index of their slice."""
    slice_labels = np.asarray(slice_labels)
    lookup = {}
    for k, lab in enumerate(slice_labels):
        if lab == DI_SENTINEL:
            lookup[0] = k
        elif lab != PAD_SENTINEL:
            lookup[int(lab)] = k
    label_map = np.asarray(label_map)
    keys = np.array(sorted(lookup))
    pos = np.searchsorted(keys, label_map)
    pos = np.clip(pos, 0, len(keys) - 1)
    if np.any(keys[pos] != label_map):
        raise DataError("label map holds labels that no stack slice carries")
    return np.array([lookup[k] for k in keys])[pos]


def build_stack(image, bank: KernelBank, algo: str = "wiener", clamp=CLAMP_RANGE,
                **algo_params) -> HypothesisStack:
    """Deblur ``image`` under every nonzero bank label and pad to depth 24.

    ``algo`` is ``"wiener"`` (params ``nsr``, ``pad``) or ``"cg"`` (``reg``,
    ``tol``, ``max_iter``, ``pad``). Deblurred slices are clipped to ``clamp``.
    """
    deblur = {"wiener": wiener_deblur, "cg": cg_deblur}.get(algo)
    if deblur is None:
        raise ConfigError(f"unknown deblurring algorithm {algo!r}")
    image = np.asarray(image, dtype=np.float64)
    channels = image[..., None] if image.ndim == 2 else image
    if channels.ndim != 3:
        raise DataError(f"expected a 2-D or 3-D raster, got {image.ndim}-D")
    slice_labels = canonical_slice_labels(bank.max_blur)
    n = int(np.count_nonzero((slice_labels != DI_SENTINEL) & (slice_labels != PAD_SENTINEL)))
    h, w, c = channels.shape
    data = np.zeros((h, w, STACK_DEPTH, c))
    for k in range(n):
        label = int(slice_labels[k])
        try:
            out = deblur(channels, bank.kernel(label), **algo_params)
        except DefocusError as exc:
            raise type(exc)(f"label {label:+d}: {exc}") from exc
        data[:, :, k] = np.clip(out, *clamp) if clamp is not None else out
    data[:, :, n] = channels
    return HypothesisStack(data, slice_labels, n)
