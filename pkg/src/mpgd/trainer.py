"""Mini pixel batch gradient descent and its baseline losses.

One optimisation step: forward the batch, pick per-instance critical entries
(AMSE only), average the per-instance losses, backpropagate and apply a
heavy-ball momentum update ``v <- m v + g``, ``w <- w - lr v``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError, NonFiniteError
from .losses import LossSpec, compute_loss, mse
from .metrics import evaluate
from .models import Model, ModelConfig
from .synthbench import Dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "step", "loss", "grad_norm_sq", "topk_grad_norm_sq", "eta", "mean_crit_fraction", "fallback_count",
)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec
    batch_size: int = 8
    steps: int = 2000
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    log_eta: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_items()
        return d


@dataclass
class StepLog:
    """Diagnostics of one step.

    ``grad_norm_sq`` is the squared norm of the gradient that drove the update,
    except when eta logging is on for AMSE: then it holds the full-MSE gradient
    norm and ``topk_grad_norm_sq`` the AMSE one.
    """

    step: int
    loss: float
    grad_norm_sq: float
    topk_grad_norm_sq: Optional[float] = None
    eta: Optional[float] = None
    mean_crit_fraction: float = 1.0
    fallback_count: int = 0


@dataclass
class RunRecord:
    config: TrainConfig
    steps: List[StepLog]
    final_metrics: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    model_config: Optional[ModelConfig] = None

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in self.steps:
            writer.writerow([_fmt(getattr(s, col)) for col in CSV_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        d = {
            "train": self.config.to_dict(),
            "metrics": self.final_metrics,
            "wall_time": self.wall_time,
            "n_steps": len(self.steps),
        }
        if self.model_config is not None:
            d["model"] = json.loads(self.model_config.to_json())
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _batch_loss(model: Model, nodes, xs, ys, spec: LossSpec):
    y = model.forward(xs, nodes)
    n = len(ys)
    total = None
    crits = []
    for i in range(n):
        li, crit = compute_loss(spec, ad.take(y, i), ys[i])
        crits.append(crit)
        total = li if total is None else ad.add(total, li)
    return ad.mul(total, 1.0 / n), y, crits


def train_step(
    model: Model,
    batch: Tuple[np.ndarray, np.ndarray],
    spec: LossSpec,
    lr: float,
    momentum: float,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    step: int = 0,
    log_eta: bool = False,
) -> Tuple[StepLog, Dict[str, np.ndarray]]:
    """Run one update in place on ``model.params`` and return the new velocity."""
    xs, ys = batch
    if len(xs) == 0:
        raise ConfigError("empty batch")
    nodes = model.param_nodes()
    try:
        # overflow surfaces as NonFiniteError below, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            loss, y, crits = _batch_loss(model, nodes, xs, ys, spec)
            leaf_grads = ad.backward(loss)
    except NonFiniteError as exc:
        raise DivergenceError(f"step {step}: non-finite value during training ({exc})") from exc
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise DivergenceError(f"step {step}: loss is {loss_val}")
    grads = {name: leaf_grads.get(node, np.zeros(node.shape)) for name, node in nodes.items()}
    with np.errstate(over="ignore"):
        gsq = ad.grad_norm_sq(grads.values())
    if not math.isfinite(gsq):
        raise DivergenceError(f"step {step}: gradient norm overflowed")

    topk = eta = None
    if log_eta and spec.kind == "amse":
        # second pass: full MSE gradient on the same forward graph
        full = None
        for i in range(len(ys)):
            li = mse(ad.take(y, i), ys[i])
            full = li if full is None else ad.add(full, li)
        full_grads = ad.backward(ad.mul(full, 1.0 / len(ys)))
        full_sq = ad.grad_norm_sq(full_grads.get(node, np.zeros(node.shape)) for node in nodes.values())
        topk, gsq = gsq, full_sq
        eta = topk / full_sq if full_sq > 0 else None

    if velocity is None:
        velocity = {name: np.zeros_like(p) for name, p in model.params.items()}
    new_velocity = {}
    for name, g in grads.items():
        v = momentum * velocity[name] + g
        new_velocity[name] = v
        model.params[name] = model.params[name] - lr * v

    if spec.kind == "amse":
        frac = float(np.mean([c.fraction for c in crits]))
        fallbacks = sum(c.fallback_all for c in crits)
    else:
        frac, fallbacks = 1.0, 0
    entry = StepLog(step, loss_val, gsq, topk, eta, frac, int(fallbacks))
    return entry, new_velocity


def batch_indices(n_items: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless epoch-shuffled batches without replacement; short tails are dropped."""
    if batch_size > n_items:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n_items}")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n_items)
        for start in range(0, n_items - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def predict(model: Model, inputs: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([model.predict(inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)])


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    test: Optional[Dataset] = None,
) -> RunRecord:
    """Train ``model`` in place for ``config.steps`` steps.

    Final metrics are computed on ``test`` when given.
    """
    start = time.perf_counter()
    batches = batch_indices(len(dataset), config.batch_size, config.seed)
    velocity = None
    logs = []
    for t in range(config.steps):
        idx = next(batches)
        entry, velocity = train_step(
            model, (dataset.inputs[idx], dataset.targets[idx]), config.loss,
            config.learning_rate, config.momentum, velocity, step=t, log_eta=config.log_eta,
        )
        logs.append(entry)
        if t % 500 == 0:
            log.debug("step %d loss %.6g crit %.3f", t, entry.loss, entry.mean_crit_fraction)
    metrics = {}
    if test is not None:
        metrics = evaluate(predict(model, test.inputs), test.targets).to_dict()
    return RunRecord(config, logs, metrics, time.perf_counter() - start, model.config)
