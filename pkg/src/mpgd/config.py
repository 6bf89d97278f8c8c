"""Flat ``section.key = value`` experiment configuration.

Example::

    # spike task, MPGD
    model.kind = fcn
    model.widths = 2, 8, 8, 1
    loss.kind = amse
    loss.lambda = 0.007
    train.steps = 2000
    run.seeds = 0, 1, 2

Later sources win: file < overrides.  List values are comma separated, except
``compare.variants`` which uses ``;`` because loss labels contain commas.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ConfigError
from .losses import LossSpec
from .models import ModelConfig
from .trainer import TrainConfig

DEFAULT_VARIANTS = "mse; shrinkage(a=10,c=0.2); biased(a=20,c=0.4); amse(lambda=0.007)"
DEFAULT_OUT = "mpgd_out"
ENV_OUT = "MPGD_OUT"

KNOWN_KEYS = {
    "task.kind", "task.grid", "task.samples", "task.seed", "task.smooth_scale", "task.n_spikes",
    "task.spike_amp", "task.spike_width", "task.blur_radius", "task.dim", "task.outlier_fraction",
    "data.path",
    "model.kind", "model.widths", "model.kernel", "model.activation", "model.output_activation",
    "model.bias",
    "train.batch_size", "train.steps", "train.lr", "train.momentum", "train.log_eta",
    "loss.kind", "loss.lambda", "loss.a", "loss.c",
    "run.seeds", "run.output_dir", "run.metrics", "run.jobs",
    "compare.variants",
}


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().lower()
        if not sep or "." not in key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw!r}")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        items[key] = value.strip()
    return items


def load_config(path) -> Dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def dump_config(items: Dict[str, str]) -> str:
    return "".join(f"{k} = {items[k]}\n" for k in sorted(items))


def int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _num(items, key, default, cast=float):
    raw = items.get(key)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def model_config(items: Dict[str, str], input_shape: Sequence[int], target_shape: Sequence[int],
                 seed: int) -> ModelConfig:
    """Model from config keys, filling widths from the dataset shapes when absent."""
    image = len(input_shape) == 3
    kind = items.get("model.kind", "fcn" if image else "mlp")
    if "model.widths" in items:
        widths = tuple(int_list(items["model.widths"]))
    elif kind == "fcn":
        widths = (input_shape[0], 8, 8, target_shape[0])
    else:
        widths = (input_shape[-1], 16, target_shape[-1])
    if widths[0] != input_shape[0 if kind == "fcn" else -1]:
        raise ConfigError(f"model.widths {widths} do not match input shape {tuple(input_shape)}")
    return ModelConfig(
        kind=kind,
        widths=widths,
        kernel=_num(items, "model.kernel", 3, int),
        activation=items.get("model.activation", "relu"),
        output_activation=items.get("model.output_activation", "identity"),
        seed=seed,
        bias=_bool(items.get("model.bias", "true")),
    )


def loss_spec(items: Dict[str, str]) -> LossSpec:
    if "loss.kind" not in items:
        return LossSpec.amse()
    kind = items["loss.kind"].strip().lower()
    if kind == "amse" and not items.get("loss.lambda"):
        items = {**items, "loss.lambda": "0.007"}
    return LossSpec.from_items(items)


def train_config(items: Dict[str, str], loss: LossSpec, seed: int) -> TrainConfig:
    return TrainConfig(
        loss=loss,
        batch_size=_num(items, "train.batch_size", 8, int),
        steps=_num(items, "train.steps", 2000, int),
        learning_rate=_num(items, "train.lr", 0.05),
        momentum=_num(items, "train.momentum", 0.9),
        seed=seed,
        log_eta=_bool(items.get("train.log_eta", "false")),
    )


def seeds(items: Dict[str, str]) -> List[int]:
    out = int_list(items.get("run.seeds", "0"))
    if not out:
        raise ConfigError("run.seeds must list at least one seed")
    return out


def variants(items: Dict[str, str]) -> List[LossSpec]:
    text = items.get("compare.variants", DEFAULT_VARIANTS)
    return [LossSpec.parse(v) for v in text.split(";") if v.strip()]


def output_dir(items: Dict[str, str], flag: Optional[str] = None) -> Path:
    """Resolve the output directory: flag, then $MPGD_OUT, then config, then default."""
    for candidate in (flag, os.environ.get(ENV_OUT), items.get("run.output_dir")):
        if candidate:
            return Path(candidate)
    return Path(DEFAULT_OUT)


@dataclass
class ExperimentConfig:
    """Everything needed to run one loss variant over several seeds.

    ``model`` and ``train`` are templates; :meth:`for_seed` stamps the seed
    into both so that initialisation and batch order vary together.
    """

    task: str
    model: ModelConfig
    train: TrainConfig
    output_dir: Path
    seeds: List[int]
    metrics: List[str] = field(default_factory=lambda: ["ssim", "nrmse", "peak_nrmse", "me", "r2"])

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")

    def for_seed(self, seed: int) -> Tuple[ModelConfig, TrainConfig]:
        return replace(self.model, seed=seed), replace(self.train, seed=seed)

    @classmethod
    def from_items(cls, items: Dict[str, str], input_shape, target_shape,
                   out_flag: Optional[str] = None, loss: Optional[LossSpec] = None) -> "ExperimentConfig":
        seed_list = seeds(items)
        task = "spike" if len(input_shape) == 3 else "scalar"
        metrics = [m.strip() for m in items.get("run.metrics", "ssim,nrmse,peak_nrmse,me,r2").split(",") if m.strip()]
        return cls(
            task=task,
            model=model_config(items, input_shape, target_shape, seed_list[0]),
            train=train_config(items, loss or loss_spec(items), seed_list[0]),
            output_dir=output_dir(items, out_flag),
            seeds=seed_list,
            metrics=metrics,
        )
