"""Numerical checks of gradient-descent convergence guarantees.

The test bed is the least-squares loss ``l(w) = (1/m) ||A w - b||^2`` whose
gradient ``(2/m) A^T (A w - b)`` is Lipschitz with ``L = 2 lambda_max(A^T A) / m``
and whose minimum ``l*`` is available from the least-squares residual.

The top-k variant keeps, at every iterate, the ``k`` entries with the largest
squared residual and averages only those, the entry-wise analogue of AMSE.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import seqsum
from .errors import ConfigError, TheoryAssertionError

REL_SLACK = 1e-9
POWER_TOL = 1e-10
POWER_MAX_ITER = 100_000
DEFAULT_EPSILON = 1e-8


def power_iteration(M: np.ndarray, seed: int = 0, tol: float = POWER_TOL,
                    max_iter: int = POWER_MAX_ITER) -> float:
    """Largest eigenvalue of the symmetric PSD matrix ``M``."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=M.shape[0])
    v /= np.linalg.norm(v)
    lam = float(v @ M @ v)
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ M @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    raise ArithmeticError(f"power iteration did not converge in {max_iter} iterations")


@dataclass
class QuadraticProblem:
    A: np.ndarray
    b: np.ndarray
    L: float
    l_star: float
    w0: np.ndarray

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigError("Lipschitz constant must be positive")
        if self.l_star < 0:
            raise ConfigError("l_star must be nonnegative")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def n_entries(self) -> int:
        return self.m

    def residual(self, w: np.ndarray) -> np.ndarray:
        return self.A @ w - self.b

    def loss(self, w: np.ndarray) -> float:
        r = self.residual(w)
        return seqsum(r * r) / self.m

    def grad(self, w: np.ndarray) -> np.ndarray:
        return (2.0 / self.m) * (self.A.T @ self.residual(w))

    def topk_indices(self, w: np.ndarray, k: int) -> np.ndarray:
        r = self.residual(w)
        if k >= self.m:
            return np.arange(self.m)
        order = np.argsort(-(r * r), kind="stable")[:k]
        return np.sort(order)

    def topk_loss_grad(self, w: np.ndarray, k: int) -> Tuple[float, np.ndarray]:
        if k >= self.m:
            return self.loss(w), self.grad(w)
        idx = self.topk_indices(w, k)
        rk = self.residual(w)[idx]
        return seqsum(rk * rk) / k, (2.0 / k) * (self.A[idx].T @ rk)

    def topk_lipschitz(self, k: int) -> float:
        """Upper bound on the gradient Lipschitz constant of the top-k loss.

        Any k-row submatrix satisfies ``lambda_max(A_S^T A_S) <= min(sum of the
        k largest squared row norms, lambda_max(A^T A))``; at ``k = m`` this
        is exactly ``L``.
        """
        if k >= self.m:
            return self.L
        rows = np.sort(np.einsum("ij,ij->i", self.A, self.A))[::-1][:k]
        return 2.0 * min(float(rows.sum()), self.L * self.m / 2.0) / k

    @classmethod
    def from_arrays(cls, A, b, w0=None, seed: int = 0) -> "QuadraticProblem":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        m = A.shape[0]
        L = 2.0 * power_iteration(A.T @ A, seed=seed) / m
        w_ls = np.linalg.lstsq(A, b, rcond=None)[0]
        r = A @ w_ls - b
        l_star = seqsum(r * r) / m
        w0 = np.zeros(A.shape[1]) if w0 is None else np.asarray(w0, dtype=np.float64)
        return cls(A, b, L, l_star, w0)


def make_quadratic(d: int, m: int, cond: float, consistent: bool, seed: int) -> QuadraticProblem:
    """Random least-squares problem with singular values spread over ``[1, cond]``."""
    if not m >= d >= 1:
        raise ConfigError(f"need m >= d >= 1, got m={m}, d={d}")
    if cond < 1:
        raise ConfigError("cond must be >= 1")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.normal(size=(m, d)))
    V, _ = np.linalg.qr(rng.normal(size=(d, d)))
    s = np.geomspace(cond, 1.0, d) if d > 1 else np.ones(1)
    A = (U * s) @ V.T
    w_true = rng.normal(size=d)
    if consistent:
        b = A @ w_true
        l_star = 0.0
    else:
        b = A @ w_true + rng.normal(size=m)
        w_ls = np.linalg.lstsq(A, b, rcond=None)[0]
        r = A @ w_ls - b
        l_star = seqsum(r * r) / m
    L = 2.0 * power_iteration(A.T @ A, seed=seed) / m
    return QuadraticProblem(A, b, L, l_star, np.zeros(d))


def problem_grid(n: int = 20, m: int = 100, consistent: Optional[bool] = None,
                 base_seed: int = 0) -> List[QuadraticProblem]:
    conds = (1.0, 3.0, 10.0, 30.0, 100.0)
    out = []
    for i in range(n):
        cons = (i % 2 == 0) if consistent is None else consistent
        out.append(make_quadratic(2 + i % 7, m, conds[i % len(conds)], cons, base_seed + i))
    return out


@dataclass
class Trace:
    """Iterates of plain or top-k gradient descent.

    Arrays are indexed by step ``t = 0..T``; ``topk_loss`` and ``topk_grad_sq``
    equal ``loss`` and ``grad_sq`` for plain descent.
    """

    loss: np.ndarray
    grad_sq: np.ndarray
    topk_loss: np.ndarray
    topk_grad_sq: np.ndarray
    w: np.ndarray

    @property
    def eta(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.grad_sq > 0, self.topk_grad_sq / self.grad_sq, np.nan)


def gradient_descent(p: QuadraticProblem, steps: int, step_size: float,
                     k: Optional[int] = None) -> Trace:
    """Run ``steps`` updates; ``k`` switches to the top-k loss."""
    w = p.w0.copy()
    k = p.m if k is None else k
    rows = []
    ws = [w.copy()]
    for t in range(steps + 1):
        full_g = p.grad(w)
        full_l = p.loss(w)
        tk_l, tk_g = p.topk_loss_grad(w, k)
        rows.append((full_l, float(full_g @ full_g), tk_l, float(tk_g @ tk_g)))
        if t == steps:
            break
        w = w - step_size * tk_g
        ws.append(w.copy())
    arr = np.array(rows)
    return Trace(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], np.array(ws))


@dataclass
class DescentReport:
    holds: List[bool]
    lipschitz: float
    step_size: float

    @property
    def violations(self) -> List[int]:
        return [t + 1 for t, ok in enumerate(self.holds) if not ok]

    @property
    def ok(self) -> bool:
        return all(self.holds)

    def assert_ok(self) -> None:
        if not self.ok:
            raise TheoryAssertionError(f"descent inequality violated at steps {self.violations}")


def check_descent_lemma(p: QuadraticProblem, steps: int, step_scale: float = 1.0,
                        lipschitz: Optional[float] = None) -> DescentReport:
    """Check ``l_t <= l_{t-1} - ||grad l_{t-1}||^2 / (2L)`` along GD with step ``step_scale / L``.

    ``lipschitz`` overrides ``p.L`` (any upper bound on the true constant is
    admissible).
    """
    L = p.L if lipschitz is None else lipschitz
    step = step_scale / L
    tr = gradient_descent(p, steps, step)
    holds = []
    for t in range(1, steps + 1):
        prev = tr.loss[t - 1]
        rhs = prev - tr.grad_sq[t - 1] / (2.0 * L)
        holds.append(bool(tr.loss[t] <= rhs + REL_SLACK * max(1.0, prev)))
    return DescentReport(holds, L, step)


@dataclass
class Theorem1Result:
    min_grad_sq: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.min_grad_sq <= self.bound * (1.0 + REL_SLACK)


def theorem1_curve(p: QuadraticProblem, T_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """Prefix minima ``min_{t<T} ||grad l_t||^2`` and bounds ``2L(l_0 - l*)/T`` for T = 1..T_max."""
    tr = gradient_descent(p, T_max, 1.0 / p.L)
    mins = np.minimum.accumulate(tr.grad_sq[:T_max])
    Ts = np.arange(1, T_max + 1)
    bounds = 2.0 * p.L * (tr.loss[0] - p.l_star) / Ts
    return mins, bounds


def check_theorem1(p: QuadraticProblem, T: int) -> Theorem1Result:
    mins, bounds = theorem1_curve(p, T)
    res = Theorem1Result(float(mins[-1]), float(bounds[-1]))
    if not res.holds:
        raise TheoryAssertionError(
            f"min grad norm^2 {res.min_grad_sq:.6g} exceeds bound {res.bound:.6g} at T={T}"
        )
    return res


@dataclass
class TheoryRun:
    """Top-k descent trace with its empirical rate bound.

    ``l_star_topk`` is estimated as the smallest top-k loss seen during a
    reference run ``ref_factor`` times longer than ``T``.
    """

    problem: QuadraticProblem
    trace: Trace
    lipschitz: float
    k: int
    k_fraction: float
    T: int
    l_star_topk: float
    ref_steps: int
    epsilon: float = DEFAULT_EPSILON

    @property
    def eta(self) -> np.ndarray:
        return self.trace.eta[: self.T]

    @property
    def eta_max(self) -> float:
        eta = self.eta
        return float(np.nanmax(eta)) if np.isfinite(eta).any() else 1.0

    @property
    def l0(self) -> float:
        return float(self.trace.loss[0])

    @property
    def l0_topk(self) -> float:
        return float(self.trace.topk_loss[0])

    @property
    def min_topk_grad_sq(self) -> float:
        return float(self.trace.topk_grad_sq[: self.T].min())

    @property
    def bound(self) -> float:
        return 2.0 * self.eta_max * self.lipschitz * (self.l0 - self.l_star_topk) / self.T

    @property
    def holds(self) -> bool:
        return self.min_topk_grad_sq <= self.bound * (1.0 + REL_SLACK)

    @property
    def monotone(self) -> bool:
        tl = self.trace.topk_loss[: self.T + 1]
        return bool(np.all(tl[1:] <= tl[:-1] + REL_SLACK * np.maximum(1.0, tl[:-1])))

    @property
    def T_bound_mse(self) -> float:
        """Steps that guarantee ``||grad l||^2 < epsilon`` for plain GD."""
        return 2.0 * self.problem.L * (self.l0 - self.problem.l_star) / self.epsilon

    @property
    def T_bound_mpgd(self) -> float:
        return 2.0 * self.eta_max * self.lipschitz * (self.l0 - self.l_star_topk) / self.epsilon

    def verdict(self) -> dict:
        return {
            "k": self.k,
            "k_fraction": self.k_fraction,
            "T": self.T,
            "L": self.problem.L,
            "L_topk": self.lipschitz,
            "topk_loss_monotone": self.monotone,
            "l0": self.l0,
            "l0_topk": self.l0_topk,
            "l0_topk_over_l0": self.l0_topk / self.l0 if self.l0 > 0 else None,
            "l_star": self.problem.l_star,
            "l_star_topk": self.l_star_topk,
            "l_star_topk_source": f"min over {self.ref_steps}-step reference run",
            "eta_max": self.eta_max,
            "min_topk_grad_norm_sq": self.min_topk_grad_sq,
            "bound": self.bound,
            "holds": self.holds,
            "epsilon": self.epsilon,
            "T_bound_mse": self.T_bound_mse,
            "T_bound_mpgd": self.T_bound_mpgd,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("t", "l_t", "grad_norm_sq", "topk_grad_norm_sq", "eta"))
        tr = self.trace
        for t in range(self.T + 1):
            wr.writerow((t, repr(float(tr.loss[t])), repr(float(tr.grad_sq[t])),
                         repr(float(tr.topk_grad_sq[t])), repr(float(tr.eta[t]))))
        return buf.getvalue()


def check_theorem2(p: QuadraticProblem, k_fraction: float, T: int, ref_factor: int = 10,
                   epsilon: float = DEFAULT_EPSILON) -> TheoryRun:
    """Top-k descent with step ``1/L_k``; reports rather than asserts the bound.

    ``L_k`` is :meth:`QuadraticProblem.topk_lipschitz`, which reduces to ``L``
    when every entry is kept, so ``k_fraction = 1`` replays plain descent.
    """
    if not 0.0 < k_fraction <= 1.0:
        raise ConfigError("k_fraction must lie in (0, 1]")
    k = max(1, min(p.m, math.ceil(k_fraction * p.m - 1e-9)))
    Lk = p.topk_lipschitz(k)
    ref = gradient_descent(p, ref_factor * T, 1.0 / Lk, k=k)
    trace = Trace(*(arr[: T + 1] for arr in (ref.loss, ref.grad_sq, ref.topk_loss, ref.topk_grad_sq, ref.w)))
    l_star_topk = float(ref.topk_loss.min())
    return TheoryRun(p, trace, Lk, k, k_fraction, T, l_star_topk, ref_factor * T, epsilon)


@dataclass
class EtaSummary:
    min: float
    median: float
    max: float
    frac_ge_1: float
    count: int

    def to_dict(self) -> dict:
        return {"min": self.min, "median": self.median, "max": self.max,
                "frac_ge_1": self.frac_ge_1, "count": self.count}


def measure_eta(run) -> EtaSummary:
    """Descriptive statistics of logged eta values.

    Accepts a :class:`TheoryRun`, a training ``RunRecord`` or a plain sequence.
    """
    if isinstance(run, TheoryRun):
        vals = run.eta
    elif hasattr(run, "steps"):
        vals = [s.eta for s in run.steps if s.eta is not None]
    else:
        vals = run
    vals = np.asarray([v for v in np.asarray(vals, dtype=np.float64) if np.isfinite(v)])
    if vals.size == 0:
        raise ValueError("no eta values logged")
    return EtaSummary(float(vals.min()), float(np.median(vals)), float(vals.max()),
                      float(np.mean(vals >= 1.0)), int(vals.size))
