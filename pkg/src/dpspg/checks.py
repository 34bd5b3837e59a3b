"""Verification batteries: loss gradients, softmax Jacobian, margin and
gradient-norm bounds, and input sensitivity of a trained pipeline.

Every battery returns :class:`~dpspg.theory.CheckRow` lists that export as
``check,params,lhs,rhs,pass`` CSV.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .encoders import EncoderConfig, MiniVLM, build_vocabulary
from .generators import GeneratorModel, generator_loss
from .inference import PromptModels, fusion_logits
from .numkernel import DTYPE, ParamStore, generator_for, grad_check, softmax
from .promptlabels import negative_label_loss, positive_label_loss
from .theory import (
    CheckRow,
    binary_jacobian_bound_check,
    fd_jacobian,
    input_jacobian_report,
    linearization_ratios,
    margin_report,
    margin_sensitivity_correlation,
    softmax_jacobian_error,
)

GRAD_TOL = 1e-4
JACOBIAN_TOL = 1e-6
RATIO_RANGE = (3.5, 4.5)


def _unit_rows(n: int, d: int, gen: torch.Generator) -> torch.Tensor:
    z = torch.randn(n, d, generator=gen, dtype=DTYPE)
    return z / z.norm(dim=1, keepdim=True)


def gradient_rows(n_configs: int = 3, epsilon: float = 1e-5, seed: int = 0) -> list[CheckRow]:
    """Autograd vs central differences for the positive-label, negative-label
    and generator losses on seeded random configurations."""
    rows = []
    taus = (0.1, 0.5, 1.0)
    for c in range(n_configs):
        s = seed + c
        K = 3 + c
        tau = taus[c % len(taus)]
        vlm = MiniVLM(EncoderConfig(seed=s))
        vocab = build_vocabulary(K, vlm.cfg.d_tok, s)
        gen = generator_for(1000 + s)
        emb = _unit_rows(12, vlm.cfg.d_feat, gen)
        labels = torch.randint(0, K, (12,), generator=gen)
        params = f"K={K};tau={tau};seed={s}"

        ps = ParamStore()
        ps.add("v", vocab.positive_template + 0.1 * torch.randn(4, vlm.cfg.d_tok, generator=gen, dtype=DTYPE))
        err = grad_check(lambda p: positive_label_loss(emb, labels, p["v"], vocab, vlm, tau), ps, epsilon, seed=s)
        rows.append(CheckRow("grad_positive_label_loss", params, err, GRAD_TOL, err <= GRAD_TOL))

        ps = ParamStore()
        ps.add("v", vocab.negative_template + 0.1 * torch.randn(4, vlm.cfg.d_tok, generator=gen, dtype=DTYPE))
        err = grad_check(lambda p: negative_label_loss(emb, labels, p["v"], vocab, vlm, tau), ps, epsilon, seed=s)
        rows.append(CheckRow("grad_negative_label_loss", params, err, GRAD_TOL, err <= GRAD_TOL))

        d_feat, d_tok, M = 8, 8, 4
        gp = GeneratorModel("positive", M, d_tok, d_feat, n_heads=2, d_ff=8, seed=2 * s + 1)
        gn = GeneratorModel("negative", M, d_tok, d_feat, n_heads=2, d_ff=8, seed=2 * s + 2)
        e = _unit_rows(10, d_feat, gen)
        doms = torch.tensor([0, 1] * 5)
        lp = torch.randn(10, M, d_tok, generator=gen, dtype=DTYPE)
        ln = torch.randn(10, M, d_tok, generator=gen, dtype=DTYPE)
        alpha = (0.2, 0.5, 1.0)[c % 3]
        both = ParamStore.union({"pos.": gp.params, "neg.": gn.params})
        err = grad_check(lambda p: generator_loss(gp(e), gn(e), lp, ln, alpha, doms), both, epsilon,
                         n_coords=96, seed=s)
        rows.append(CheckRow("grad_generator_loss", f"alpha={alpha};seed={s}", err, GRAD_TOL, err <= GRAD_TOL))
    return rows


def softmax_jacobian_rows(n: int = 100, seed: int = 0, epsilon: float = 1e-6) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        K = int(rng.integers(2, 11))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        g = rng.normal(0.0, 1.0, K)
        err = softmax_jacobian_error(g, tau, epsilon)
        rows.append(CheckRow("softmax_jacobian", f"K={K};tau={tau}", err, JACOBIAN_TOL, err <= JACOBIAN_TOL))
    return rows


def margin_rows(n: int = 1000, seed: int = 0) -> list[CheckRow]:
    """Identity row and bound-implication row per random score tuple."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        K = int(rng.integers(2, 11))
        sp = rng.uniform(-1, 1, K)
        sn = rng.uniform(-1, 1, K)
        y = int(rng.integers(K))
        alpha = float(rng.uniform(0, 2))
        # half the draws test the implication at a delta the gaps may miss
        delta = None if rng.uniform() < 0.5 else float(rng.uniform(-1, 1))
        rep = margin_report(sp, sn, y, alpha, delta)
        p = f"K={K};y={y};alpha={alpha!r}"
        rows.append(CheckRow("margin_identity", p, rep.identity_error, 1e-12, rep.identity_holds))
        lhs = float((rep.delta_combined - rep.delta_plus - alpha * rep.delta_constraint).min())
        rows.append(CheckRow("margin_bound", p + f";delta={rep.delta_constraint!r};premise={rep.premise}",
                             lhs, 0.0, rep.bound_satisfied))
    return rows


def binary_bound_rows(n: int = 1000, seed: int = 0) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        delta = float(rng.uniform(0, 10))
        tau = float(rng.uniform(0.05, 2))
        rep = binary_jacobian_bound_check(delta, tau)
        rows.append(CheckRow("binary_jacobian_bound", f"delta={delta!r};tau={tau!r}",
                             rep.analytic_norm, rep.bound, rep.holds))
    return rows


def pipeline_rows(models: PromptModels, xs, labels, alpha: float, tau: float, h: float = 1e-3,
                  seed: int = 0) -> list[CheckRow]:
    """Input-sensitivity checks on a trained pipeline at raw samples ``xs``.

    * linearization: residual ratio when halving the step (median in range);
    * input_jacobian: FD norm of the two-class probability against the
      empirical Lipschitz bound (L estimated over the same samples);
    * margin_sensitivity: rank correlation of FD norm and margin (< 0).
    """
    xs = [torch.as_tensor(x, dtype=DTYPE) for x in xs]
    labels = [int(y) for y in labels]
    pipe = lambda x: fusion_logits(models, x, alpha)  # noqa: E731
    probs = lambda x: softmax(pipe(x), tau)  # noqa: E731
    rows = []

    ratios = linearization_ratios(probs, xs, h=h, seed=seed)
    lo, hi = RATIO_RANGE
    for r in ratios:
        rows.append(CheckRow("linearization_ratio", f"h={h!r}", float(r), 4.0, lo <= r <= hi))
    med = float(np.median(ratios))
    rows.append(CheckRow("linearization_ratio_median", f"h={h!r};n={len(ratios)}", med, 4.0, lo <= med <= hi))

    jacs = [fd_jacobian(pipe, x) for x in xs]
    margins, norms = [], []
    for x, y in zip(xs, labels):
        with torch.no_grad():
            g = pipe(x)
        # runner-up class: the tightest two-class subproblem
        others = g.clone()
        others[y] = -math.inf
        i = int(others.argmax())
        rep = input_jacobian_report(pipe, x, y, i, tau, alpha, sample_jacobians=jacs)
        margins.append(rep.delta)
        norms.append(rep.fd_norm)
        rows.append(CheckRow("input_jacobian_bound", f"y={y};i={i};margin={rep.delta!r};L={rep.L_estimate!r}",
                             rep.fd_norm, rep.lipschitz_bound, rep.holds))
        rows.append(CheckRow("input_jacobian_fd", f"y={y};i={i}", abs(rep.fd_norm - rep.analytic_norm), 1e-5,
                             abs(rep.fd_norm - rep.analytic_norm) <= 1e-5))
    rho = margin_sensitivity_correlation(margins, norms)
    rows.append(CheckRow("margin_sensitivity_rank_correlation", f"n={len(xs)}", rho, 0.0, rho < 0))
    return rows


def analytic_rows(seed: int = 0) -> list[CheckRow]:
    return gradient_rows(seed=seed) + softmax_jacobian_rows(seed=seed) + margin_rows(seed=seed) + binary_bound_rows(seed=seed)
