"""Dataset generation with scene-disjoint splits, training and checkpoints."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats
from .deconv import STACK_DEPTH, build_stack, labels_to_indices
from .errors import ConfigError, DataError, TrainingAbortError
from .evaluate import MetricsReport, decode, metrics
from .net3d import NetParams, backward, forward, init_params, sgd_step
from .objective import DepthPermutation, random_shuffle, total_loss
from .optics import (ApertureMask, ThinLensConfig, build_kernel_bank, label_set,
                     render_defocus, synth_scene)

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.78, 0.09)
SPLITS = ("train", "val", "eval")
MANIFEST_VERSION = 1
DEFAULT_ALGO_PARAMS = {"wiener": {"nsr": 1e-3}, "cg": {"reg": 1e-3, "tol": 1e-6, "max_iter": 500}}

__all__ = [
    "LensSweep",
    "ManifestEntry",
    "DatasetManifest",
    "TrainConfig",
    "TrainResult",
    "split_counts",
    "assign_splits",
    "generate_dataset",
    "load_split",
    "fit_samples",
    "train",
    "predict_labels",
    "evaluate_samples",
    "evaluate_split",
    "save_checkpoint",
    "load_checkpoint",
]


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class LensSweep:
    """Focus positions for the defocus variants of every scene.

    Without explicit ``focus_distances`` the focal plane is placed at
    ``count`` equally spaced quantiles of the scene depth distribution, taken
    as uniform in inverse depth over ``depth_range``.
    """

    count: int = 12
    depth_range: tuple = (1.0, 4.0)
    focal_length: float = 0.05
    aperture: float = 0.025
    pixel_scale: float = 8000.0
    focus_distances: tuple = ()

    def distances(self) -> tuple:
        lo, hi = self.depth_range
        if self.focus_distances:
            dists = tuple(float(s) for s in self.focus_distances)
            if len(dists) != self.count:
                raise ConfigError("focus_distances must hold `count` values")
        else:
            # quantiles of a depth distribution uniform in inverse depth, which
            # is how synthetic scenes are drawn
            qs = (np.arange(self.count) + 1) / (self.count + 1)
            dists = tuple(float(1.0 / (1.0 / hi + (1.0 / lo - 1.0 / hi) * q)) for q in qs[::-1])
        if any(not lo <= s <= hi for s in dists):
            raise ConfigError(f"focus distances {dists} leave the depth range {self.depth_range}")
        if len(set(dists)) != len(dists):
            raise ConfigError("focus distances must be distinct")
        return dists

    def lenses(self) -> list[ThinLensConfig]:
        return [ThinLensConfig.from_focal_length(s1, self.focal_length, self.aperture,
                                                 self.pixel_scale)
                for s1 in self.distances()]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch: int = 1
    smooth_weight: float = 0.1
    temperature: float = 0.5
    steps: int = 2000
    seed: int = 0
    algo: str | None = None
    max_blur: int | None = None
    val_every: int = 200

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported")
        if self.steps < 0 or self.val_every < 1:
            raise ConfigError("steps must be >= 0 and val_every >= 1")
        if self.smooth_weight < 0:
            raise ConfigError("smooth_weight must be non-negative")


# -- manifest ------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    focal_index: int
    split: str
    image: str
    label: str
    stack: str
    max_blur: int
    aperture: str
    algo: str
    lens: ThinLensConfig

    @property
    def sample_id(self) -> str:
        return f"{self.scene_id}_f{self.focal_index:02d}"


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    max_blur: int = 4
    aperture: str = "mask"
    algo: str = "cg"
    algo_params: dict = field(default_factory=dict)
    mask_file: str = "aperture.png"

    COLUMNS = ("scene_id", "focal_index", "split", "image", "label", "stack",
               "max_blur", "aperture", "algo", "s1", "f1", "d", "pixel_scale")

    def split_of(self) -> dict:
        return {e.scene_id: e.split for e in self.entries}

    def select(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def mask(self) -> ApertureMask:
        return formats.read_mask(self.root / self.mask_file, name=self.aperture)

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.tsv"
        params = ",".join(f"{k}={v!r}" for k, v in sorted(self.algo_params.items()))
        lines = [
            f"# defocusnet manifest v{MANIFEST_VERSION}",
            f"# max_blur={self.max_blur}",
            f"# aperture={self.aperture}",
            f"# mask={self.mask_file}",
            f"# algo={self.algo}",
            f"# algo_params={params}",
            "\t".join(self.COLUMNS),
        ]
        for e in self.entries:
            lens = e.lens
            lines.append("\t".join([
                e.scene_id, str(e.focal_index), e.split, e.image, e.label, e.stack,
                str(e.max_blur), e.aperture, e.algo,
                repr(lens.s1), repr(lens.f1), repr(lens.d), repr(lens.pixel_scale),
            ]))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        meta, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip():
                rows.append(line.split("\t"))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise DataError(f"{path}: missing or malformed manifest header")
        algo_params = {}
        for item in filter(None, meta.get("algo_params", "").split(",")):
            key, _, value = item.partition("=")
            algo_params[key] = float(value) if any(c in value for c in ".e") else int(value)
        entries = []
        for row in rows[1:]:
            if len(row) != len(cls.COLUMNS):
                raise DataError(f"{path}: manifest row has {len(row)} fields")
            rec = dict(zip(cls.COLUMNS, row))
            lens = ThinLensConfig(float(rec["s1"]), float(rec["f1"]), float(rec["d"]),
                                  float(rec["pixel_scale"]))
            entries.append(ManifestEntry(rec["scene_id"], int(rec["focal_index"]), rec["split"],
                                         rec["image"], rec["label"], rec["stack"],
                                         int(rec["max_blur"]), rec["aperture"], rec["algo"], lens))
        manifest = cls(path.parent, entries, int(meta.get("max_blur", entries[0].max_blur if entries else 4)),
                       meta.get("aperture", "mask"), meta.get("algo", "cg"), algo_params,
                       meta.get("mask", "aperture.png"))
        manifest.validate()
        return manifest

    def validate(self):
        owner = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r} for {e.sample_id}")
            if owner.setdefault(e.scene_id, e.split) != e.split:
                raise DataError(f"scene {e.scene_id} appears in several splits")


def split_counts(num_scenes: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    """Scenes per split: rounded train and val shares, the rest for eval."""
    n_train = int(np.floor(num_scenes * ratios[0] + 0.5))
    n_val = int(np.floor(num_scenes * ratios[1] + 0.5))
    n_train = min(n_train, num_scenes)
    n_val = min(n_val, num_scenes - n_train)
    return n_train, n_val, num_scenes - n_train - n_val


def assign_splits(scene_ids, seed: int = 0, ratios=SPLIT_RATIOS) -> dict:
    """Scene-disjoint split assignment from a seeded shuffle of scene ids."""
    scene_ids = list(scene_ids)
    n_train, n_val, _ = split_counts(len(scene_ids), ratios)
    order = np.random.default_rng([seed, 1]).permutation(len(scene_ids))
    out = {}
    for rank, i in enumerate(order):
        out[scene_ids[i]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "eval")
    return out


# -- generation ------------------------------------------------------------------

def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(num_scenes: int, sweep: LensSweep, mask: ApertureMask, max_blur: int,
                     out_dir, seed: int = 0, algo: str = "cg", algo_params=None,
                     size=(64, 64), noise_sigma: float = 0.0) -> DatasetManifest:
    """Render ``num_scenes x sweep.count`` defocused samples with their label
    maps and precomputed hypothesis stacks, and write ``manifest.tsv``."""
    if num_scenes < 1:
        raise ConfigError("num_scenes must be >= 1")
    if algo not in DEFAULT_ALGO_PARAMS:
        raise ConfigError(f"unknown deblurring algorithm {algo!r}")
    params = dict(DEFAULT_ALGO_PARAMS[algo], **(algo_params or {}))
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(exist_ok=True)
    lenses = sweep.lenses()
    bank = build_kernel_bank(mask, max_blur)
    formats.write_image(out / "aperture.png", mask.values / mask.values.max(), bits=16)
    scene_ids = [f"s{i:04d}" for i in range(num_scenes)]
    splits = assign_splits(scene_ids, seed)
    manifest = DatasetManifest(out, [], int(max_blur), mask.name, algo, params)
    h, w = size
    for i, scene_id in enumerate(scene_ids):
        scene = replace(synth_scene(_scene_seed(seed, i), h, w, sweep.depth_range),
                        scene_id=scene_id)
        formats.write_image(out / "scenes" / f"{scene_id}.png", scene.image, bits=16)
        formats.write_depth(out / "scenes" / f"{scene_id}.dpth", scene.depth)
        for f, lens in enumerate(lenses):
            sample = render_defocus(scene, lens, bank, noise_sigma,
                                    noise_seed=[seed, i, f] if noise_sigma > 0 else None)
            stem = f"samples/{scene_id}_f{f:02d}"
            formats.write_image(out / f"{stem}.png", sample.image, bits=16)
            formats.write_labels(out / f"{stem}.lbls", sample.label_map, max_blur)
            # stacks come from the stored (quantized) image, as a reader would see it
            stack = build_stack(formats.read_image(out / f"{stem}.png"), bank, algo, **params)
            formats.write_stack(out / f"{stem}.hstk", stack)
            manifest.entries.append(ManifestEntry(
                scene_id, f, splits[scene_id], f"{stem}.png", f"{stem}.lbls", f"{stem}.hstk",
                int(max_blur), mask.name, algo, lens))
        log.info("rendered scene %s (%d/%d)", scene_id, i + 1, num_scenes)
    manifest.write()
    return manifest


def _crop8(arr):
    h, w = arr.shape[:2]
    return arr[:h - h % 8, :w - w % 8]


def load_split(manifest: DatasetManifest, split: str, algo: str | None = None,
               algo_params=None):
    """``[(entry, stack, label_map)]`` for one split, cropped to multiples of 8.

    With an ``algo`` other than the manifest's, stacks are rebuilt from the
    stored defocused images.
    """
    entries = manifest.select(split)
    rebuild = algo is not None and algo != manifest.algo
    if rebuild:
        params = dict(DEFAULT_ALGO_PARAMS[algo], **(algo_params or {}))
        bank = build_kernel_bank(manifest.mask(), manifest.max_blur)
    samples = []
    for e in entries:
        labels, _ = formats.read_labels(manifest.root / e.label)
        if rebuild:
            stack = build_stack(formats.read_image(manifest.root / e.image), bank, algo, **params)
        else:
            stack = formats.read_stack(manifest.root / e.stack)
        if stack.data.shape[:2] != labels.shape:
            raise DataError(f"{e.sample_id}: stack and label map sizes differ")
        stack = type(stack)(_crop8(stack.data).astype(np.float32), stack.slice_labels, stack.n)
        samples.append((e, stack, _crop8(labels)))
    return samples


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: NetParams) -> Path:
    formats.write_checkpoint(path, params)
    return Path(path)


def load_checkpoint(path, reference: NetParams | None = None) -> NetParams:
    """Read a checkpoint; with ``reference`` every tensor shape must match."""
    tensors = formats.read_checkpoint(path)
    if reference is not None:
        if set(tensors) != set(reference):
            raise formats.FormatError(f"{path}: tensor names do not match the network")
        for name, value in reference.items():
            if tensors[name].shape != value.shape:
                raise formats.FormatError(
                    f"{path}: {name} has shape {tensors[name].shape}, expected {value.shape}")
        tensors = {k: tensors[k] for k in reference}
    return NetParams(tensors)


# -- training and evaluation -----------------------------------------------------

def predict_labels(params: NetParams, stack):
    logits, _ = forward(stack, params)
    return decode(logits, stack.slice_labels)


def evaluate_samples(params: NetParams, samples, max_blur: int, border=None) -> MetricsReport:
    border = max_blur if border is None else border
    preds, gts = [], []
    for _, stack, labels in samples:
        h, w = labels.shape
        preds.append(predict_labels(params, stack).labels[border:h - border, border:w - border])
        gts.append(labels[border:h - border, border:w - border])
    pred = np.concatenate([p.ravel() for p in preds])[None, :]
    gt = np.concatenate([g.ravel() for g in gts])[None, :]
    report = metrics(pred, gt, label_set(max_blur))
    report.border = border
    return report


def evaluate_split(params: NetParams, manifest: DatasetManifest, split: str = "eval",
                   algo: str | None = None, border=None) -> MetricsReport:
    samples = load_split(manifest, split, algo)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    return evaluate_samples(params, samples, manifest.max_blur, border)


@dataclass
class TrainResult:
    params: NetParams
    checkpoint: Path
    log_path: Path
    best_val_n3: float | None
    best_step: int | None
    final_params: NetParams | None = None


def fit_samples(samples, config: TrainConfig, val_samples=(), max_blur: int = 4,
                log_file=None, on_val=None):
    """SGD over ``[(id, stack, label_map)]`` samples; returns final and best params.

    Every step draws a fresh depth permutation and Gumbel noise from
    ``(seed, step)``. After every validation pass
    ``on_val(params, step, report, improved)`` is called, where ``improved``
    flags a new best validation N-3.
    """
    if not samples:
        raise ConfigError("training split is empty")
    in_channels = samples[0][1].data.shape[3]
    params = init_params(config.seed, in_channels)
    best_params = params.copy()
    best = (None, None)
    epoch_order = []
    for step in range(config.steps):
        if not epoch_order:
            epoch = step // len(samples)
            epoch_order = list(np.random.default_rng([config.seed, 2, epoch]).permutation(len(samples)))
        sample_id, stack, labels = samples[epoch_order.pop(0)]
        gt = labels_to_indices(labels, stack.slice_labels)
        rng = np.random.default_rng([config.seed, 3, step])
        perm = DepthPermutation(rng.permutation(STACK_DEPTH))
        shuffled, gt_shuffled = random_shuffle(stack, gt, perm)
        logits, cache = forward(shuffled, params)
        report, grad = total_loss(logits, gt_shuffled, config.temperature, config.smooth_weight,
                                  noise_seed=int(rng.integers(2 ** 63)))
        if not np.isfinite(report.total):
            raise TrainingAbortError(f"non-finite loss at step {step} on sample {_sid(sample_id)}")
        grads = backward(grad.astype(logits.dtype), cache)
        try:
            sgd_step(params, grads, config.lr)
        except TrainingAbortError as exc:
            raise TrainingAbortError(f"step {step}, sample {_sid(sample_id)}: {exc}") from exc
        if log_file is not None:
            log_file.write(f"{step}\t{report.ce:.9g}\t{report.smooth:.9g}\t{report.total:.9g}\n")
        done = step + 1
        if val_samples and (done % config.val_every == 0 or done == config.steps):
            val = evaluate_samples(params, val_samples, max_blur)
            log.info("step %d: val N-1 %.2f%% N-3 %.2f%%", done, val.n1, val.n3)
            improved = best[0] is None or val.n3 > best[0]
            if improved:
                best = (val.n3, done)
                best_params = params.copy()
            if on_val is not None:
                on_val(params, done, val, improved)
    if not val_samples:
        best_params = params.copy()
    return params, best_params, best


def _sid(sample_id):
    return getattr(sample_id, "sample_id", sample_id)


def train(config: TrainConfig, manifest: DatasetManifest, out_dir) -> TrainResult:
    """Train on the manifest's train split and keep the best-validation model.

    Writes ``train.log`` (``step<TAB>ce<TAB>smooth<TAB>total``), ``val.log``
    (``step<TAB>n1<TAB>n3<TAB>best``), ``checkpoint.net3`` with the
    best-validation weights and ``final.net3`` with the last step's. With
    zero steps both hold the initialization.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.max_blur is not None and config.max_blur != manifest.max_blur:
        raise ConfigError(f"config max_blur {config.max_blur} != manifest {manifest.max_blur}")
    train_samples = load_split(manifest, "train", config.algo)
    val_samples = load_split(manifest, "val", config.algo)
    ckpt = out / "checkpoint.net3"
    log_path = out / "train.log"
    with open(log_path, "w", buffering=1) as log_file, open(out / "val.log", "w") as val_log:
        def on_val(params, step, report, improved):
            val_log.write(f"{step}\t{report.n1:.6f}\t{report.n3:.6f}\t{int(improved)}\n")
            val_log.flush()
            if improved:
                save_checkpoint(ckpt, params)

        try:
            final, best_params, (best_n3, best_step) = fit_samples(
                train_samples, config, val_samples, manifest.max_blur, log_file, on_val)
        except TrainingAbortError as exc:
            (out / "abort.txt").write_text(str(exc) + "\n")
            raise
    if best_step is None:
        save_checkpoint(ckpt, best_params)
    save_checkpoint(out / "final.net3", final)
    (out / "config.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in asdict(config).items()))
    return TrainResult(best_params, ckpt, log_path, best_n3, best_step, final)

