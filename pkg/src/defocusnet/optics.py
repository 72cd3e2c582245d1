"""Thin-lens defocus, coded-aperture PSF banks and defocus rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DegenerateKernelError, InvalidDepthError

__all__ = [
    "ThinLensConfig",
    "ApertureMask",
    "KernelBank",
    "Scene",
    "DefocusedSample",
    "label_set",
    "coc_diameter",
    "quantize_coc",
    "build_kernel_bank",
    "convolve_edge",
    "render_defocus",
    "synth_scene",
    "sample_mask",
    "SAMPLE_MASKS",
]


@dataclass(frozen=True)
class ThinLensConfig:
    """Focal geometry of a thin lens.

    ``s1`` is the object-space focal distance, ``f1`` the image-space focal
    distance and ``d`` the aperture diameter, all in scene depth units.
    ``pixel_scale`` converts the physical blur-circle diameter to pixels, so
    ``alpha`` (the asymptotic blur for far objects) is already in pixels.
    """

    s1: float
    f1: float
    d: float
    pixel_scale: float = 1.0

    def __post_init__(self):
        for name in ("s1", "f1", "d", "pixel_scale"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be positive and finite, got {value!r}")

    @property
    def alpha(self) -> float:
        return self.f1 / self.s1 * self.d * self.pixel_scale

    @classmethod
    def from_focal_length(cls, s1, focal_length, d, pixel_scale=1.0):
        """Lens focused at ``s1``; ``f1`` follows from 1/F = 1/s1 + 1/f1."""
        if s1 <= focal_length:
            raise ConfigError(
                f"focus distance {s1} must exceed the focal length {focal_length}"
            )
        f1 = focal_length * s1 / (s1 - focal_length)
        return cls(s1=float(s1), f1=float(f1), d=float(d), pixel_scale=float(pixel_scale))


def label_set(max_blur: int) -> tuple[int, ...]:
    """Signed blur labels ``-m..-2, 0, +2..+m`` in ascending order."""
    m = int(max_blur)
    if m < 2:
        raise ConfigError(f"max_blur must be >= 2, got {max_blur}")
    return tuple(range(-m, -1)) + (0,) + tuple(range(2, m + 1))


def coc_diameter(x, lens: ThinLensConfig):
    """Signed circle-of-confusion diameter in pixels for scene depth ``x``.

    Negative values lie in front of the focal plane, positive ones behind it.
    Accepts scalars or arrays; ``x = inf`` gives ``lens.alpha``.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(~(x_arr > 0)):
        raise InvalidDepthError("scene depth must be strictly positive")
    # 1 - s1/x is algebraically (x - s1)/x but stays finite at x = inf
    c = lens.alpha * (1.0 - lens.s1 / x_arr)
    return float(c) if c.ndim == 0 else c


def quantize_coc(c, max_blur: int):
    """Round a signed COC to its blur label.

    Rounds half away from zero, collapses ``{-1, 0, +1}`` to 0 (such a PSF is
    the delta whatever its orientation) and clamps to ``[-m, m]``.
    """
    m = int(max_blur)
    if m < 2:
        raise ConfigError(f"max_blur must be >= 2, got {max_blur}")
    c_arr = np.asarray(c, dtype=np.float64)
    r = np.sign(c_arr) * np.floor(np.abs(c_arr) + 0.5)
    r = np.where(np.abs(r) <= 1, 0.0, r)
    r = np.clip(r, -m, m).astype(np.int64)
    return int(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class ApertureMask:
    values: np.ndarray
    name: str = "mask"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DataError(f"aperture mask must be square 2-D, got shape {v.shape}")
        if v.shape[0] < 3 or v.shape[0] % 2 == 0:
            raise DataError(f"aperture side must be odd and >= 3, got {v.shape[0]}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DataError("aperture mask must be finite and non-negative")
        if not np.any(v > 0):
            raise DegenerateKernelError(f"aperture mask {self.name!r} is all zero")
        object.__setattr__(self, "values", v)

    @property
    def is_symmetric(self) -> bool:
        """Point-symmetric masks cannot tell the two sides of the focal plane apart."""
        return bool(np.allclose(self.values, self.values[::-1, ::-1]))


@dataclass(frozen=True)
class KernelBank:
    max_blur: int
    labels: tuple[int, ...]
    kernels: dict = field(repr=False)
    aperture: str = "mask"

    def kernel(self, label: int) -> np.ndarray:
        try:
            return self.kernels[int(label)]
        except KeyError:
            raise DataError(f"label {label} is not in the bank {self.labels}") from None

    @property
    def nonzero_labels(self) -> tuple[int, ...]:
        return tuple(lab for lab in self.labels if lab != 0)

    def index_of(self, label) -> np.ndarray:
        """Position of each label in ``labels``; raises on foreign labels."""
        lab = np.asarray(label)
        lookup = {v: i for i, v in enumerate(self.labels)}
        flat = [lookup.get(int(v), -1) for v in lab.ravel()]
        out = np.asarray(flat, dtype=np.int64).reshape(lab.shape)
        if np.any(out < 0):
            raise DataError("label outside the kernel bank label set")
        return out


def _resize_mass(values: np.ndarray, size: int, supersample: int = 8) -> np.ndarray:
    # Each output cell integrates the bilinear surface of the mask over its
    # footprint, so total mass is preserved up to interpolation error.
    src = values.shape[0]
    step = src / size
    offs = (np.arange(supersample) + 0.5) / supersample
    coords = ((np.arange(size)[:, None] + offs[None, :]) * step).ravel() - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    samples = ndimage.map_coordinates(values, [yy, xx], order=1, mode="nearest")
    samples = samples.reshape(size, supersample, size, supersample)
    return samples.mean(axis=(1, 3)) * step * step


def build_kernel_bank(mask: ApertureMask, max_blur: int) -> KernelBank:
    """Resize, flip and normalize ``mask`` into one PSF per blur label.

    Positive label ``l`` is the mask resized to ``l x l``; ``-l`` is that
    kernel rotated by 180 degrees; label 0 is the 1x1 delta.
    """
    labels = label_set(max_blur)
    kernels = {0: np.ones((1, 1))}
    for size in range(2, int(max_blur) + 1):
        k = np.clip(_resize_mass(mask.values, size), 0.0, None)
        total = k.sum()
        if not total > 0:
            raise DegenerateKernelError(
                f"mask {mask.name!r} resized to {size}x{size} has no mass"
            )
        k = k / total
        kernels[size] = k
        kernels[-size] = k[::-1, ::-1].copy()
    return KernelBank(int(max_blur), labels, kernels, aperture=mask.name)


def convolve_edge(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D convolution with edge replication, output the size of ``image``.

    ``out[y, x] = sum_{u,v} k[u, v] * img[y - u + a, x - v + a]`` with the
    anchor ``a = size // 2``.
    """
    k = np.asarray(kernel, dtype=np.float64)
    ky, kx = k.shape
    ay, ax = ky // 2, kx // 2
    h, w = image.shape
    padded = np.pad(image, ((ky - 1 - ay, ay), (kx - 1 - ax, ax)), mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for u in range(ky):
        for v in range(kx):
            oy, ox = ky - 1 - u, kx - 1 - v
            out += k[u, v] * padded[oy:oy + h, ox:ox + w]
    return out


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    depth: np.ndarray
    scene_id: str = "scene"

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if image.ndim not in (2, 3):
            raise DataError(f"scene image must be 2-D or 3-D, got {image.ndim}-D")
        if depth.shape != image.shape[:2]:
            raise DataError(f"depth {depth.shape} does not match image {image.shape[:2]}")
        if np.any(~(depth > 0)):
            raise InvalidDepthError("scene depth must be strictly positive")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class DefocusedSample:
    image: np.ndarray
    label_map: np.ndarray
    lens: ThinLensConfig
    scene_id: str = "scene"
    focal_index: int = 0


def render_defocus(scene: Scene, lens: ThinLensConfig, bank: KernelBank,
                   noise_sigma: float = 0.0, noise_seed=None) -> DefocusedSample:
    """Blur every pixel of ``scene`` with the PSF of its own depth.

    Each output pixel gathers its neighbourhood through the kernel of its
    quantized COC label; borders are edge-replicated. Multi-channel images
    are blurred channel by channel.
    """
    labels = quantize_coc(coc_diameter(scene.depth, lens), bank.max_blur)
    image = scene.image
    channels = image[..., None] if image.ndim == 2 else image
    out = np.empty_like(channels)
    for label in np.unique(labels):
        where = labels == label
        kernel = bank.kernel(label)
        for c in range(channels.shape[-1]):
            blurred = convolve_edge(channels[..., c], kernel)
            out[..., c][where] = blurred[where]
    if noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    if image.ndim == 2:
        out = out[..., 0]
    return DefocusedSample(out, labels.astype(np.int64), lens, scene.scene_id)


def _texture(rng, height, width):
    layers = []
    for sigma in (0.7, 1.3, 2.5, 5.0):
        noise = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma)
        layers.append(rng.uniform(0.3, 1.0) * noise / (noise.std() + 1e-12))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.08, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        layers.append(rng.uniform(0.2, 0.8) * wave)
    tex = np.sum(layers, axis=0)
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(2, max(height, width) / 5)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        tex = np.where(blob, tex + rng.uniform(-2, 2), tex)
    lo, hi = np.percentile(tex, [1, 99])
    return np.clip((tex - lo) / (hi - lo), 0.0, 1.0)


def _depth_field(rng, height, width, depth_range):
    lo, hi = depth_range
    n_regions = int(rng.integers(3, 6))
    seeds = rng.uniform([0, 0], [height, width], size=(n_regions, 2))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dist = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    region = np.argmin(dist, axis=-1)
    # Regions are planes in inverse depth, which is linear in blur size.
    # Base values are stratified so near and far regions always coexist.
    inv_lo, inv_hi = 1.0 / hi, 1.0 / lo
    strata = (np.arange(n_regions) + rng.uniform(0.1, 0.9, n_regions)) / n_regions
    base = rng.permutation(inv_lo + (inv_hi - inv_lo) * strata)
    slope = rng.uniform(-1, 1, size=(n_regions, 2)) * (inv_hi - inv_lo) / (2 * max(height, width))
    inv = base[region] + slope[region, 0] * (yy - height / 2) + slope[region, 1] * (xx - width / 2)
    return 1.0 / np.clip(inv, inv_lo, inv_hi)


def synth_scene(seed: int, height: int = 64, width: int = 64,
                depth_range=(1.0, 4.0)) -> Scene:
    """Deterministic textured scene over a piecewise-planar depth field."""
    if height < 16 or width < 16:
        raise ConfigError("scenes must be at least 16x16")
    if not 0 < depth_range[0] < depth_range[1]:
        raise ConfigError(f"invalid depth range {depth_range}")
    rng = np.random.default_rng(seed)
    image = _texture(rng, height, width)
    depth = _depth_field(rng, height, width, depth_range)
    return Scene(image, depth, scene_id=f"scene{seed:05d}")


def sample_mask(name: str) -> ApertureMask:
    """One of the two asymmetric coded apertures bundled with the package."""
    if name not in SAMPLE_MASKS:
        raise ConfigError(f"unknown sample mask {name!r}; choose from {sorted(SAMPLE_MASKS)}")
    from .formats import read_mask

    with resources.as_file(resources.files("defocusnet") / "masks" / f"{name}.png") as path:
        return read_mask(path, name=name)


SAMPLE_MASKS = ("asym_a", "asym_b")
