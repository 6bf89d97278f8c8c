"""Evaluation metrics for dense and scalar regression.

In every function ``x`` is the prediction and ``y`` the ground truth.  Range
and denominator degeneracies never raise; the ``*_flagged`` variants report
them alongside the value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ShapeError

FLOOR = 1e-12
PEAK_FRACTIONS = (0.005, 0.01, 0.02, 0.05)
METRIC_NAMES = ("ssim", "nrmse", "peak_nrmse", "me", "r2", "mse")


def _pair(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"metric inputs differ in size: {x.size} vs {y.size}")
    if x.size == 0:
        raise ShapeError("metric inputs are empty")
    return x, y


def ssim(x, y, data_range: Optional[float] = None) -> float:
    """Whole-image SSIM with population statistics.

    ``data_range`` defaults to the range of ``y`` (floored at 1e-12).
    """
    x, y = _pair(x, y)
    if data_range is None:
        data_range = max(float(y.max() - y.min()), FLOOR)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    cov = np.mean(dx * dy)
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


def mse(x, y) -> float:
    x, y = _pair(x, y)
    d = x - y
    return float(np.mean(d * d))


def nrmse_flagged(x, y) -> Tuple[float, bool]:
    """NRMSE and whether the ground-truth range was degenerate.

    A degenerate range (<= 1e-12) leaves the RMSE unnormalized.
    """
    x, y = _pair(x, y)
    rmse = math.sqrt(mse(x, y))
    rng = float(y.max() - y.min())
    if rng <= FLOOR:
        return rmse, True
    return rmse / rng, False


def nrmse(x, y) -> float:
    return nrmse_flagged(x, y)[0]


def top_k_indices(y, fraction: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = max(1, int(math.floor(fraction * y.size)))
    # stable sort keeps lower flat index first among ties
    return np.argsort(-y, kind="stable")[:k]


def peak_nrmse_flagged(x, y, fraction: float) -> Tuple[float, bool]:
    """NRMSE over the entries holding the largest ground-truth values."""
    x, y = _pair(x, y)
    idx = top_k_indices(y, fraction)
    return nrmse_flagged(x[idx], y[idx])


def peak_nrmse(x, y, fraction: float) -> float:
    return peak_nrmse_flagged(x, y, fraction)[0]


def max_error(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.abs(x - y).max() / max(float(y.max()), FLOOR))


def r_squared_flagged(x, y) -> Tuple[float, bool]:
    x, y = _pair(x, y)
    num = float(np.sum((x - y) ** 2))
    den = float(np.sum((y - y.mean()) ** 2))
    if den <= FLOOR:
        return 1.0 - num / FLOOR, True
    return 1.0 - num / den, False


def r_squared(x, y) -> float:
    return r_squared_flagged(x, y)[0]


@dataclass
class MetricReport:
    ssim: float
    nrmse: float
    me: float
    r2: float
    mse: float
    peak_nrmse: Dict[float, float]
    degenerate: List[str] = field(default_factory=list)

    @property
    def peak_nrmse_avg(self) -> float:
        vals = [self.peak_nrmse[f] for f in PEAK_FRACTIONS]
        return sum(vals) / len(vals)

    def columns(self) -> Dict[str, float]:
        """Flat ordered mapping, the column layout of comparison tables."""
        cols = {"ssim": self.ssim, "nrmse": self.nrmse}
        for f in PEAK_FRACTIONS:
            cols[peak_column(f)] = self.peak_nrmse[f]
        cols["peak_nrmse_avg"] = self.peak_nrmse_avg
        cols.update(me=self.me, r2=self.r2, mse=self.mse)
        return cols

    def to_dict(self) -> dict:
        d = self.columns()
        d["degenerate"] = list(self.degenerate)
        return d


def peak_column(fraction: float) -> str:
    return f"peak_nrmse_{fraction * 100:g}pct"


def report(x, y) -> MetricReport:
    """All metrics for a single prediction/target pair."""
    flags = []
    n, dn = nrmse_flagged(x, y)
    r2, dr = r_squared_flagged(x, y)
    if dn:
        flags.append("nrmse")
    if dr:
        flags.append("r2")
    peaks = {}
    for f in PEAK_FRACTIONS:
        peaks[f], dp = peak_nrmse_flagged(x, y, f)
        if dp:
            flags.append(peak_column(f))
    return MetricReport(ssim(x, y), n, max_error(x, y), r2, mse(x, y), peaks, flags)


def evaluate(preds: np.ndarray, targets: np.ndarray) -> MetricReport:
    """Aggregate metrics over a test set.

    Dense targets are scored per instance and averaged.  Single-entry targets
    (scalar regression) are pooled into one vector first.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeError(f"predictions {preds.shape} vs targets {targets.shape}")
    if targets[0].size == 1:
        return report(preds.reshape(-1), targets.reshape(-1))
    reports = [report(p, t) for p, t in zip(preds, targets)]

    def avg(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    peaks = {f: float(np.mean([r.peak_nrmse[f] for r in reports])) for f in PEAK_FRACTIONS}
    flags = sorted({flag for r in reports for flag in r.degenerate})
    return MetricReport(avg("ssim"), avg("nrmse"), avg("me"), avg("r2"), avg("mse"), peaks, flags)
