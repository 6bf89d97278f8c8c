"""Regression cost functions and in-data active sampling of critical entries.

Losses take a prediction :class:`Node` and a fixed target array and return a
scalar node.  ``ias_sample`` works on detached arrays; the resulting index set
is treated as a constant by :func:`amse`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, ShapeError

LOSS_KINDS = ("mse", "amse", "max_error", "shrinkage", "biased")
DEFAULT_LAMBDA = 0.007
EXP_CLAMP = 500.0
TARGET_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    kind: str
    lam: Optional[float] = None
    a: Optional[float] = None
    c: Optional[float] = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if self.kind == "amse":
            if self.lam is None or not 0.0 < self.lam < 1.0:
                raise ConfigError(f"amse needs lambda in (0, 1), got {self.lam}")
        elif self.lam is not None:
            raise ConfigError(f"lambda only applies to amse, not {self.kind}")
        if self.kind in ("shrinkage", "biased"):
            if self.a is None or self.c is None or self.a <= 0 or self.c <= 0:
                raise ConfigError(f"{self.kind} needs a > 0 and c > 0, got a={self.a} c={self.c}")
        elif self.a is not None or self.c is not None:
            raise ConfigError(f"a/c only apply to shrinkage and biased, not {self.kind}")

    @classmethod
    def mse(cls) -> "LossSpec":
        return cls("mse")

    @classmethod
    def amse(cls, lam: float = DEFAULT_LAMBDA) -> "LossSpec":
        return cls("amse", lam=lam)

    @classmethod
    def max_error(cls) -> "LossSpec":
        return cls("max_error")

    @classmethod
    def shrinkage(cls, a: float, c: float) -> "LossSpec":
        return cls("shrinkage", a=a, c=c)

    @classmethod
    def biased(cls, a: float, c: float) -> "LossSpec":
        return cls("biased", a=a, c=c)

    @property
    def label(self) -> str:
        if self.kind == "amse":
            return f"amse(lambda={self.lam:g})"
        if self.kind in ("shrinkage", "biased"):
            return f"{self.kind}(a={self.a:g},c={self.c:g})"
        return self.kind

    def to_items(self) -> dict:
        items = {"loss.kind": self.kind}
        for key, val in (("lambda", self.lam), ("a", self.a), ("c", self.c)):
            if val is not None:
                items[f"loss.{key}"] = repr(float(val))
        return items

    @classmethod
    def from_items(cls, items: dict) -> "LossSpec":
        def num(key):
            raw = items.get(f"loss.{key}")
            return None if raw in (None, "") else float(raw)

        return cls(str(items["loss.kind"]).strip().lower(), lam=num("lambda"), a=num("a"), c=num("c"))

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        """Parse labels such as ``mse``, ``amse(lambda=0.007)`` or ``biased(a=20,c=0.4)``."""
        text = text.strip().lower()
        kind, _, rest = text.partition("(")
        kwargs = {}
        if rest:
            if not rest.endswith(")"):
                raise ConfigError(f"malformed loss label {text!r}")
            for part in filter(None, rest[:-1].split(",")):
                key, _, val = part.partition("=")
                key = key.strip()
                key = "lam" if key in ("lambda", "lam") else key
                if key not in ("lam", "a", "c"):
                    raise ConfigError(f"unknown loss parameter {key!r}")
                kwargs[key] = float(val)
        kind = kind.strip().replace("-", "_")
        if kind == "amse" and "lam" not in kwargs:
            kwargs["lam"] = DEFAULT_LAMBDA
        return cls(kind, **kwargs)


@dataclass(frozen=True)
class CriticalSet:
    """Sorted flat indices of critical entries for one instance."""

    indices: np.ndarray
    fallback_all: bool
    n_entries: int

    def __post_init__(self):
        if self.indices.size == 0:
            raise ShapeError("critical set cannot be empty")

    @property
    def k(self) -> int:
        return int(self.indices.size)

    @property
    def fraction(self) -> float:
        return self.k / self.n_entries


def _check_pair(y: Node, y_star: np.ndarray, name: str) -> np.ndarray:
    y_star = np.asarray(y_star, dtype=np.float64)
    if y.shape != y_star.shape:
        raise ShapeError(f"{name}: prediction {y.shape} vs target {y_star.shape}")
    return y_star


def mse(y: Node, y_star) -> Node:
    y_star = _check_pair(y, y_star, "mse")
    return ad.mean(ad.square(ad.sub(y, y_star)))


def max_error_loss(y: Node, y_star) -> Node:
    y_star = _check_pair(y, y_star, "max_error_loss")
    return ad.max_(ad.absolute(ad.sub(y, y_star)))


def _clamped(z: Node) -> Node:
    return ad.minimum(ad.maximum(z, -EXP_CLAMP), EXP_CLAMP)


def shrinkage_loss(y: Node, y_star, a: float, c: float) -> Node:
    """Mean over entries of ``l^2 / (1 + exp(a (c - l)))`` with ``l = |y - y*|``."""
    y_star = _check_pair(y, y_star, "shrinkage_loss")
    if a <= 0 or c <= 0:
        raise ConfigError("shrinkage_loss needs a > 0 and c > 0")
    err = ad.absolute(ad.sub(y, y_star))
    expo = _clamped(ad.add(ad.mul(err, -a), a * c))
    return ad.mean(ad.div(ad.square(err), ad.add(ad.exp(expo), 1.0)))


def biased_loss(y: Node, y_star, a: float, c: float) -> Node:
    """Squared error reweighted by the target's instance-wide maximum."""
    y_star = _check_pair(y, y_star, "biased_loss")
    if a <= 0 or c <= 0:
        raise ConfigError("biased_loss needs a > 0 and c > 0")
    expo = float(np.clip(a * (c - y_star.max()), -EXP_CLAMP, EXP_CLAMP))
    weight = 1.0 / (1.0 + np.exp(expo))
    err = ad.absolute(ad.sub(y, y_star))
    return ad.mean(ad.mul(ad.square(err), weight))


def normalized_abs_error(y, y_star) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    return np.abs(y - y_star) / max(float(y_star.max()), TARGET_FLOOR)


def ias_sample(y, y_star, lam: float) -> CriticalSet:
    """Select entries whose normalized absolute error exceeds ``lam``.

    Falls back to every entry when nothing is selected.
    """
    y = y.value if isinstance(y, Node) else np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    if y.shape != y_star.shape:
        raise ShapeError(f"ias_sample: prediction {y.shape} vs target {y_star.shape}")
    if not 0.0 < lam < 1.0:
        raise ConfigError(f"lambda must lie in (0, 1), got {lam}")
    d_ae = normalized_abs_error(y, y_star).reshape(-1)
    idx = np.flatnonzero(d_ae > lam)
    if idx.size == 0:
        return CriticalSet(np.arange(d_ae.size), True, d_ae.size)
    return CriticalSet(idx, False, d_ae.size)


def amse(y: Node, y_star, crit: CriticalSet) -> Node:
    """Mean squared error over the critical entries only."""
    y_star = _check_pair(y, y_star, "amse")
    return ad.gather_mean(ad.square(ad.sub(y, y_star)), crit.indices)


def compute_loss(spec: LossSpec, y: Node, y_star) -> Tuple[Node, Optional[CriticalSet]]:
    if spec.kind == "mse":
        return mse(y, y_star), None
    if spec.kind == "amse":
        crit = ias_sample(y.value, y_star, spec.lam)
        return amse(y, y_star, crit), crit
    if spec.kind == "max_error":
        return max_error_loss(y, y_star), None
    if spec.kind == "shrinkage":
        return shrinkage_loss(y, y_star, spec.a, spec.c), None
    return biased_loss(y, y_star, spec.a, spec.c), None
