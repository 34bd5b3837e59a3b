"""Numeric checks of the margin and gradient-norm analysis of fused logits.

Three families of checks:

* margin: with ``g = s+ - alpha * s-`` the fused margin of the true class
  over class ``i`` equals the positive margin minus ``alpha (s-_y - s-_i)``,
  so a negative path that scores every wrong class at least ``delta`` above
  the true one widens every margin by at least ``alpha * delta``;
* Jacobian: the softmax Jacobian, and its two-class entry
  ``f_y f_i / tau <= exp(-margin / tau) / tau``;
* input sensitivity: finite-difference gradients of the probabilities with
  respect to the raw input, an empirical Lipschitz estimate for the margin
  map, and the second-order decay of the linearization residual.

All Lipschitz constants here are empirical maxima over sampled inputs, not
certified bounds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from .errors import InvalidInput, InvalidParameter, NumericFailure
from .numkernel import DTYPE, softmax, softmax_jacobian

IDENTITY_TOL = 1e-12


@dataclass
class MarginReport:
    y: int
    alpha: float
    classes: list[int]  # the incorrect classes, in order
    delta_plus: np.ndarray
    delta_combined: np.ndarray
    neg_gap: np.ndarray  # s-_i - s-_y
    delta_constraint: float  # min neg_gap, or the supplied delta
    premise: bool  # neg_gap >= delta_constraint for every incorrect class
    bound_satisfied: bool
    identity_error: float

    @property
    def identity_holds(self) -> bool:
        return self.identity_error <= IDENTITY_TOL


def margin_report(s_pos, s_neg, y: int, alpha: float, delta: float | None = None) -> MarginReport:
    """Positive, fused and negative margins of class ``y`` over the others.

    ``delta_combined`` is computed from the fused logits directly, so
    ``identity_error`` measures the rearrangement rather than restating it.
    ``delta`` defaults to the measured minimum negative gap; when given
    explicitly, ``bound_satisfied`` is the implication "premise => bound"
    (vacuously true if some gap falls short of it).
    """
    sp = np.asarray(s_pos, dtype=np.float64)
    sn = np.asarray(s_neg, dtype=np.float64)
    if sp.ndim != 1 or sp.shape != sn.shape:
        raise InvalidInput("s_pos and s_neg must be vectors of equal length")
    K = len(sp)
    if K < 2:
        raise InvalidInput(f"need at least two classes, got {K}")
    if not 0 <= y < K:
        raise InvalidInput(f"class {y} outside [0, {K})")
    if alpha < 0:
        raise InvalidParameter("alpha must be nonnegative")

    others = [i for i in range(K) if i != y]
    g = sp - alpha * sn
    d_plus = sp[y] - sp[others]
    d_comb = g[y] - g[others]
    gap = sn[others] - sn[y]
    rearranged = d_plus - alpha * (sn[y] - sn[others])
    scale = max(1.0, float(np.abs(sp).max()), float(np.abs(alpha * sn).max()))
    err = float(np.abs(d_comb - rearranged).max()) / scale

    dc = float(gap.min()) if delta is None else float(delta)
    premise = bool((gap >= dc).all())
    slack = IDENTITY_TOL * scale
    bound = bool((d_comb >= d_plus + alpha * dc - slack).all())
    return MarginReport(y, alpha, others, d_plus, d_comb, gap, dc, premise,
                        bound if premise else True, err)


@dataclass
class JacobianReport:
    delta: float
    tau: float
    analytic_norm: float
    fd_norm: float
    bound: float
    lipschitz_bound: float = math.nan
    L_estimate: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        """analytic norm under the decay bound (and FD norm under the
        Lipschitz bound when one was estimated)."""
        ok = self.analytic_norm <= self.bound * (1 + 1e-12)
        if not math.isnan(self.lipschitz_bound):
            ok = ok and self.fd_norm <= self.lipschitz_bound * (1 + 1e-9)
        return ok


def _binary_probs(delta: float, tau: float) -> tuple[float, float]:
    # f_i = 1 / (1 + exp(delta / tau)), written to avoid overflow
    z = delta / tau
    f_i = math.exp(-z) / (1 + math.exp(-z)) if z >= 0 else 1 / (1 + math.exp(z))
    return 1.0 - f_i, f_i


def binary_jacobian_bound_check(delta: float, tau: float, epsilon: float = 1e-6) -> JacobianReport:
    """Two-class case: |d f_y / d g_i| = f_y f_i / tau against exp(-delta/tau) / tau.

    ``fd_norm`` differentiates the two-logit softmax at ``(delta, 0)``
    numerically with respect to the second logit.
    """
    if not tau > 0:
        raise InvalidParameter("tau must be positive")
    f_y, f_i = _binary_probs(delta, tau)
    analytic = f_y * f_i / tau
    bound = math.exp(-delta / tau) / tau

    def fy(gi):
        return float(softmax(torch.tensor([delta, gi], dtype=DTYPE), tau)[0])

    fd = abs(fy(epsilon) - fy(-epsilon)) / (2 * epsilon)
    return JacobianReport(delta, tau, analytic, fd, bound, extra={"f_y": f_y, "f_i": f_i})


def softmax_jacobian_error(logits, tau: float, epsilon: float = 1e-6) -> float:
    """Max abs difference between the closed-form softmax Jacobian and
    central differences of ``softmax(g / tau)``."""
    g = torch.as_tensor(logits, dtype=DTYPE)
    J = softmax_jacobian(softmax(g, tau), tau)
    fd = torch.empty_like(J)
    for j in range(len(g)):
        e = torch.zeros_like(g)
        e[j] = epsilon
        fd[:, j] = (softmax(g + e, tau) - softmax(g - e, tau)) / (2 * epsilon)
    return float((J - fd).abs().max())


# --------------------------------------------------------------------------
# input sensitivity of a trained pipeline


Pipeline = Callable[[torch.Tensor], torch.Tensor]  # (d_raw,) -> (K,) fused logits


def fd_gradient(fn: Callable[[torch.Tensor], float], x: torch.Tensor, epsilon: float) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    out = torch.empty_like(x)
    with torch.no_grad():
        for k in range(len(x)):
            e = torch.zeros_like(x)
            e[k] = epsilon
            out[k] = (fn(x + e) - fn(x - e)) / (2 * epsilon)
    if not bool(torch.isfinite(out).all()):
        raise NumericFailure("non-finite finite-difference gradient")
    return out


def fd_jacobian(pipeline: Pipeline, x, epsilon: float = 1e-5) -> torch.Tensor:
    """(K, d_raw) central-difference Jacobian of the logits."""
    x = torch.as_tensor(x, dtype=DTYPE)
    cols = []
    with torch.no_grad():
        for k in range(len(x)):
            e = torch.zeros_like(x)
            e[k] = epsilon
            cols.append((pipeline(x + e) - pipeline(x - e)) / (2 * epsilon))
    J = torch.stack(cols, dim=1)
    if not bool(torch.isfinite(J).all()):
        raise NumericFailure("non-finite finite-difference Jacobian")
    return J


def margin_gradient_norm(J: torch.Tensor, y: int, i: int) -> float:
    """Norm of the input gradient of the margin g_y - g_i from a logit Jacobian."""
    return float(torch.linalg.vector_norm(J[y] - J[i]))


def input_jacobian_report(pipeline: Pipeline, x, y: int, i: int, tau: float, alpha: float,
                          samples: Sequence | None = None, epsilon: float = 1e-5,
                          sample_jacobians: Sequence[torch.Tensor] | None = None) -> JacobianReport:
    """Sensitivity of the two-class probability f_y to the raw input.

    On the subproblem of classes ``y`` and ``i``, f_y depends on the input
    only through the margin g_y - g_i, so ``|grad f_y| = f_y f_i / tau *
    |grad margin|``. ``L_estimate`` is the largest FD margin-gradient norm
    over ``samples`` and ``x`` (pass ``sample_jacobians`` to reuse logit
    Jacobians across calls). ``alpha`` is recorded for bookkeeping; it is
    already folded into ``pipeline``.
    """
    if not tau > 0:
        raise InvalidParameter("tau must be positive")
    x = torch.as_tensor(x, dtype=DTYPE)
    with torch.no_grad():
        g = pipeline(x)
    if not bool(torch.isfinite(g).all()):
        raise NumericFailure("pipeline produced non-finite logits")
    delta = float(g[y] - g[i])

    def f_y(z):
        gz = pipeline(z)
        return softmax(torch.stack([gz[y], gz[i]]), tau)[0]

    fd = float(torch.linalg.vector_norm(fd_gradient(f_y, x, epsilon)))
    J = fd_jacobian(pipeline, x, epsilon)
    grad_m = margin_gradient_norm(J, y, i)
    if sample_jacobians is None:
        sample_jacobians = [fd_jacobian(pipeline, s, epsilon) for s in (samples or [])]
    L = max([grad_m] + [margin_gradient_norm(Js, y, i) for Js in sample_jacobians])
    fy, fi = _binary_probs(delta, tau)
    bound = math.exp(-delta / tau) / tau
    return JacobianReport(delta, tau, fy * fi / tau * grad_m, fd, bound,
                          lipschitz_bound=L * bound, L_estimate=L,
                          extra={"alpha": alpha, "margin_grad_norm": grad_m, "empirical": True})


def linearization_residual(prob_fn: Pipeline, x, direction, h: float) -> float:
    """``|f(x + h d) - f(x) - J h d|`` with J from autograd."""
    x = torch.as_tensor(x, dtype=DTYPE)
    d = torch.as_tensor(direction, dtype=DTYPE)
    if h == 0:
        return 0.0
    _, jvp = torch.autograd.functional.jvp(prob_fn, x, h * d)
    with torch.no_grad():
        r = prob_fn(x + h * d) - prob_fn(x) - jvp
    return float(torch.linalg.vector_norm(r))


def linearization_ratios(prob_fn: Pipeline, xs, h: float = 1e-2, seed: int = 0) -> np.ndarray:
    """Residual at step h over residual at h/2, one seeded unit direction per input.

    Second-order decay gives ratios near 4.
    """
    rng = np.random.default_rng(seed)
    out = []
    for x in xs:
        x = torch.as_tensor(x, dtype=DTYPE)
        d = torch.as_tensor(rng.standard_normal(len(x)))
        d = d / torch.linalg.vector_norm(d)
        r1 = linearization_residual(prob_fn, x, d, h)
        r2 = linearization_residual(prob_fn, x, d, h / 2)
        if r2 == 0 or not math.isfinite(r1 / r2):
            raise NumericFailure("linearization residual vanished or overflowed")
        out.append(r1 / r2)
    return np.asarray(out)


def margin_sensitivity_correlation(margins, fd_norms) -> float:
    """Spearman rank correlation; negative when sensitivity falls as the margin grows."""
    return float(spearmanr(np.asarray(margins), np.asarray(fd_norms)).statistic)


# --------------------------------------------------------------------------
# export


@dataclass
class CheckRow:
    check: str
    params: str
    lhs: float
    rhs: float
    passed: bool


def checks_csv(rows: list[CheckRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "params", "lhs", "rhs", "pass"])
    for r in rows:
        w.writerow([r.check, r.params, repr(float(r.lhs)), repr(float(r.rhs)), "true" if r.passed else "false"])
    return buf.getvalue()
