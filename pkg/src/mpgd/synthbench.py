"""Seeded synthetic regression tasks and their on-disk format.

The spike task mimics dense physical-design maps: a smooth, easy field that
covers almost every pixel plus a handful of sharp, clipped peaks that a model
trained on plain MSE tends to under-predict.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import load_tensor, save_tensor

TRAIN_FRACTION = 0.8
SPIKE_MARGIN = 2
SPIKE_MIN_SEPARATION = 6
MAX_REDRAWS = 1000


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str
    seed: int
    split: str
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if len(self.inputs) == 0 or len(self.inputs) != len(self.targets):
            raise ConfigError(
                f"dataset needs matching nonempty inputs/targets, got {len(self.inputs)}/{len(self.targets)}"
            )
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.index is None:
            self.index = np.arange(len(self.inputs))
        self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.inputs.shape[1:]

    @property
    def target_shape(self) -> Tuple[int, ...]:
        return self.targets.shape[1:]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.name == other.name
            and self.seed == other.seed
            and self.split == other.split
            and np.array_equal(self.index, other.index)
            and self.inputs.shape == other.inputs.shape
            and self.targets.shape == other.targets.shape
            and self.inputs.tobytes() == other.inputs.tobytes()
            and self.targets.tobytes() == other.targets.tobytes()
        )


def _split(name: str, seed: int, inputs, targets) -> Tuple[Dataset, Dataset]:
    n = len(inputs)
    n_train = int(round(TRAIN_FRACTION * n))
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"{n} samples cannot form a nonempty 80/20 split")
    idx = np.arange(n)
    train = Dataset(inputs[:n_train], targets[:n_train], name, seed, "train", idx[:n_train])
    test = Dataset(inputs[n_train:], targets[n_train:], name, seed, "test", idx[n_train:])
    return train, test


@dataclass(frozen=True)
class SpikeTaskConfig:
    """Parameters of the spike task.

    ``smooth_scale`` bounds the low-frequency field, ``spike_amp`` is both the
    peak height and the target maximum, ``spike_width`` is the Gaussian sigma of
    each peak in pixels.
    """

    grid: Tuple[int, int] = (32, 32)
    n_samples: int = 500
    smooth_scale: float = 0.3
    n_spikes: int = 3
    spike_amp: float = 1.0
    spike_width: float = 1.0
    blur_radius: int = 1
    n_waves: int = 3
    seed: int = 0

    def __post_init__(self):
        h, w = self.grid
        if self.n_samples < 2:
            raise ConfigError("n_samples must be at least 2")
        if self.n_spikes < 1:
            raise ConfigError("n_spikes must be >= 1")
        if not self.spike_amp > self.smooth_scale >= 0:
            raise ConfigError("need spike_amp > smooth_scale >= 0")
        if self.blur_radius < 0:
            raise ConfigError("blur_radius must be >= 0")
        if min(h, w) < 2 * SPIKE_MARGIN + 1:
            raise ConfigError(f"grid {self.grid} too small for spikes")


def box_blur(field: np.ndarray, radius: int) -> np.ndarray:
    """Zero-padded (2r+1)^2 box average, i.e. an exact same-padded convolution."""
    if radius == 0:
        return field.copy()
    size = 2 * radius + 1
    padded = np.pad(field, radius)
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    return win.sum(axis=(-2, -1)) / (size * size)


def _smooth_field(rng: np.random.Generator, cfg: SpikeTaskConfig) -> np.ndarray:
    h, w = cfg.grid
    ii, jj = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((h, w))
    for _ in range(cfg.n_waves):
        fx, fy = rng.uniform(0.0, 2.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        field += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * ii + fy * jj) + phase)
    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
    return cfg.smooth_scale * field


def _spike_sites(rng: np.random.Generator, cfg: SpikeTaskConfig) -> np.ndarray:
    h, w = cfg.grid
    for _ in range(MAX_REDRAWS):
        rows = rng.integers(0, h, size=cfg.n_spikes)
        cols = rng.integers(0, w, size=cfg.n_spikes)
        inside = (
            (rows >= SPIKE_MARGIN) & (rows < h - SPIKE_MARGIN)
            & (cols >= SPIKE_MARGIN) & (cols < w - SPIKE_MARGIN)
        )
        if not inside.all():
            continue
        sites = np.stack([rows, cols], axis=1)
        gap = np.abs(sites[:, None, :] - sites[None, :, :]).max(axis=-1)
        np.fill_diagonal(gap, SPIKE_MIN_SEPARATION)
        if gap.min() >= SPIKE_MIN_SEPARATION:
            return sites
    raise ConfigError(f"could not place {cfg.n_spikes} separated spikes on grid {cfg.grid}")


def spike_sample(rng: np.random.Generator, cfg: SpikeTaskConfig) -> Tuple[np.ndarray, np.ndarray]:
    h, w = cfg.grid
    field = _smooth_field(rng, cfg)
    sites = _spike_sites(rng, cfg)
    markers = np.zeros((h, w))
    markers[sites[:, 0], sites[:, 1]] = 1.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    target = box_blur(field, cfg.blur_radius)
    for r, c in sites:
        dist2 = (ii - r) ** 2 + (jj - c) ** 2
        target = target + cfg.spike_amp * np.exp(-dist2 / (2.0 * cfg.spike_width ** 2))
    target = np.clip(target, 0.0, cfg.spike_amp)
    return np.stack([field, markers]), target[None]


def gen_spike_task(cfg: SpikeTaskConfig) -> Tuple[Dataset, Dataset]:
    """Inputs are ``2 x h x w`` (field, spike markers); targets ``1 x h x w``."""
    rng = np.random.default_rng(cfg.seed)
    pairs = [spike_sample(rng, cfg) for _ in range(cfg.n_samples)]
    inputs = np.stack([p[0] for p in pairs])
    targets = np.stack([p[1] for p in pairs])
    return _split("spike", cfg.seed, inputs, targets)


def gen_scalar_task(
    n_samples: int,
    dim: int,
    outlier_fraction: float,
    seed: int,
    w_star: Optional[Sequence[float]] = None,
    noise_scale: float = 1.0,
) -> Tuple[Dataset, Dataset]:
    """Linear targets ``w* . x`` with Student-t noise on an outlier subset."""
    if not 0.0 <= outlier_fraction < 0.5:
        raise ConfigError("outlier_fraction must lie in [0, 0.5)")
    if dim < 1 or n_samples < 2:
        raise ConfigError("need dim >= 1 and n_samples >= 2")
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim) if w_star is None else np.asarray(w_star, dtype=np.float64)
    if w.shape != (dim,):
        raise ConfigError(f"w_star must have {dim} entries")
    x = rng.uniform(-1.0, 1.0, size=(n_samples, dim))
    y = x @ w
    n_out = int(round(outlier_fraction * n_samples))
    if n_out:
        which = rng.choice(n_samples, size=n_out, replace=False)
        y[which] += noise_scale * rng.standard_t(2.0, size=n_out)
    return _split("scalar", seed, x, y[:, None])


def save_dataset(d: Dataset, path) -> None:
    if len(d) == 0:
        raise ConfigError("refusing to save an empty dataset")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": d.name,
        "seed": int(d.seed),
        "split": d.split,
        "count": len(d),
        "input_shape": list(d.input_shape),
        "target_shape": list(d.target_shape),
        "index": [int(i) for i in d.index],
    }
    (p / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    save_tensor(p / "inputs.mpgt", d.inputs)
    save_tensor(p / "targets.mpgt", d.targets)


def load_dataset(path) -> Dataset:
    p = Path(path)
    try:
        manifest = json.loads((p / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{p}: unreadable manifest ({exc})") from exc
    inputs = load_tensor(p / "inputs.mpgt")
    targets = load_tensor(p / "targets.mpgt")
    count = manifest.get("count")
    if len(inputs) != count or len(targets) != count:
        raise FormatError(f"{p}: manifest count {count} does not match tensors")
    if list(inputs.shape[1:]) != manifest["input_shape"] or list(targets.shape[1:]) != manifest["target_shape"]:
        raise FormatError(f"{p}: tensor shapes disagree with manifest")
    return Dataset(inputs, targets, manifest["name"], manifest["seed"], manifest["split"],
                   np.asarray(manifest["index"], dtype=np.int64))


def save_split(train: Dataset, test: Dataset, path) -> None:
    save_dataset(train, Path(path) / "train")
    save_dataset(test, Path(path) / "test")


def load_split(path) -> Tuple[Dataset, Dataset]:
    return load_dataset(Path(path) / "train"), load_dataset(Path(path) / "test")
