"""Dual-path fusion classification and leave-one-domain-out evaluation.

For every test image the generators emit a positive and a negative prompt;
class ``i`` then scores ``g_i = s+_i - alpha * s-_i`` and the class
distribution is ``softmax(g / tau)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

from .datagen import DomainDataset, leave_one_out_split
from .encoders import ClassVocabulary, MiniVLM
from .errors import ContaminationError, InvalidParameter, InvalidState
from .generators import GeneratorModel
from .numkernel import DTYPE, generator_for, softmax

MODES = ("full", "positive_only", "fixed_prompt")


@dataclass
class PromptModels:
    """Everything needed to classify target images, plus where it came from.

    ``provenance`` lists the domains whose data trained the models;
    ``oracle`` marks artifacts fitted on a held-out domain for diagnostics.
    """

    vlm: MiniVLM
    vocab: ClassVocabulary
    g_pos: GeneratorModel | None = None
    g_neg: GeneratorModel | None = None
    fixed_prompt: torch.Tensor | None = None
    provenance: tuple[int, ...] = ()
    oracle: bool = False
    noise_seed: int | None = None


@dataclass
class FusionScores:
    s_pos: torch.Tensor  # (..., K)
    s_neg: torch.Tensor
    g: torch.Tensor
    probs: torch.Tensor
    predicted: torch.Tensor
    alpha: float
    tau: float


def fuse(s_pos, s_neg, alpha: float, tau: float) -> FusionScores:
    """Combine per-class similarity scores; pure arithmetic."""
    if alpha < 0:
        raise InvalidParameter("alpha must be nonnegative")
    if not tau > 0:
        raise InvalidParameter("tau must be positive")
    s_pos = torch.as_tensor(s_pos, dtype=DTYPE)
    s_neg = torch.as_tensor(s_neg, dtype=DTYPE)
    g = s_pos - alpha * s_neg
    probs = softmax(g, tau)
    return FusionScores(s_pos, s_neg, g, probs, probs.argmax(dim=-1), alpha, tau)


@torch.no_grad()
def generated_prompts(models: PromptModels, emb: torch.Tensor, polarity: str = "positive") -> torch.Tensor:
    G = models.g_pos if polarity == "positive" else models.g_neg
    if G is None:
        raise InvalidState(f"no {polarity} generator configured")
    noise = generator_for(models.noise_seed) if models.noise_seed is not None else None
    return G(emb, noise)


@torch.no_grad()
def class_scores(models: PromptModels, emb: torch.Tensor, polarity: str) -> torch.Tensor:
    """(N, K) cosine similarities with per-image generated prompts."""
    template = models.vocab.positive_template if polarity == "positive" else models.vocab.negative_template
    prompts = generated_prompts(models, emb, polarity)
    t = models.vlm.encode_text(prompts, template, models.vocab.class_embeddings)
    return torch.einsum("nf,nkf->nk", emb, t)


@torch.no_grad()
def fuse_embeddings(emb, models: PromptModels, alpha: float, tau: float, mode: str = "full") -> FusionScores:
    """Fusion scores for a batch of image embeddings (N, d_feat)."""
    if mode not in MODES:
        raise InvalidParameter(f"mode must be one of {MODES}")
    emb = torch.as_tensor(emb, dtype=DTYPE).reshape(-1, models.vlm.cfg.d_feat)
    if mode == "fixed_prompt":
        if models.fixed_prompt is None:
            raise InvalidState("fixed_prompt mode needs a trained fixed prompt")
        t = models.vlm.encode_text(models.fixed_prompt, models.vocab.positive_template,
                                   models.vocab.class_embeddings)
        s_pos = emb @ t.T
        return fuse(s_pos, torch.zeros_like(s_pos), 0.0, tau)
    if models.g_pos is None:
        raise InvalidState("no positive generator configured")
    if mode == "positive_only":
        alpha = 0.0
    s_pos = class_scores(models, emb, "positive")
    s_neg = class_scores(models, emb, "negative") if models.g_neg is not None else torch.zeros_like(s_pos)
    if models.g_neg is None and alpha != 0:
        raise InvalidState("alpha > 0 needs a negative generator")
    return fuse(s_pos, s_neg, alpha, tau)


def fusion_logits(models: PromptModels, x, alpha: float) -> torch.Tensor:
    """Differentiable map from one raw sample (d_raw,) to fused logits (K,).

    Same arithmetic as the ``full`` mode without generator noise; used for
    input-sensitivity analysis.
    """
    if models.g_pos is None:
        raise InvalidState("no positive generator configured")
    e = models.vlm.encode_image(x)

    def scores(G, template):
        t = models.vlm.encode_text(G(e), template, models.vocab.class_embeddings)
        return t @ e

    g = scores(models.g_pos, models.vocab.positive_template)
    if alpha != 0:
        if models.g_neg is None:
            raise InvalidState("alpha > 0 needs a negative generator")
        g = g - alpha * scores(models.g_neg, models.vocab.negative_template)
    return g


def fuse_and_classify(x, models: PromptModels, alpha: float = 0.2, tau: float = 0.1, mode: str = "full") -> FusionScores:
    """Classify one raw sample (or a batch of them)."""
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.ndim == 1
    out = fuse_embeddings(models.vlm.encode_image(x.reshape(-1, x.shape[-1])), models, alpha, tau, mode)
    if single:
        out = FusionScores(out.s_pos[0], out.s_neg[0], out.g[0], out.probs[0], out.predicted[0], out.alpha, out.tau)
    return out


@dataclass
class EvalReport:
    target_domain: int
    accuracy: float
    per_class_accuracy: list[float]
    n_test: int
    mode: str
    alpha: float
    tau: float
    seed: int = 0
    variant: str = "dual"

    def csv_row(self) -> list:
        return ([self.target_domain, self.variant, self.mode, repr(self.alpha), repr(self.tau), self.seed, repr(self.accuracy)]
                + [repr(a) for a in self.per_class_accuracy])


def check_provenance(models: PromptModels, target: int) -> None:
    if models.oracle:
        raise ContaminationError("oracle artifacts cannot be evaluated as models")
    if target in models.provenance:
        raise ContaminationError(f"target domain {target} was used to train these models")


def accuracy_report(pred, labels, K: int, target: int, mode: str, alpha: float, tau: float, seed: int = 0,
                    variant: str = "dual") -> EvalReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    correct = pred == labels
    per_class = [float(correct[labels == c].mean()) if (labels == c).any() else float("nan") for c in range(K)]
    return EvalReport(target, float(correct.mean()), per_class, len(labels), mode, alpha, tau, seed, variant)


def evaluate_lodo(ds: DomainDataset, target: int, models: PromptModels, mode: str = "full",
                  alpha: float = 0.2, tau: float = 0.1, seed: int = 0, emb=None,
                  variant: str = "dual") -> EvalReport:
    """Accuracy on every sample of the held-out ``target`` domain.

    ``emb`` may carry precomputed image embeddings of the whole dataset.
    """
    check_provenance(models, target)
    _, test = leave_one_out_split(ds, target)
    e = models.vlm.encode_image(test.x) if emb is None else torch.as_tensor(emb)[test.indices]
    scores = fuse_embeddings(e, models, alpha, tau, mode)
    used_alpha = alpha if mode == "full" else 0.0
    return accuracy_report(scores.predicted.numpy(), test.labels, ds.K, target, mode, used_alpha, tau, seed, variant)


def reports_csv(reports: list[EvalReport]) -> str:
    K = max(len(r.per_class_accuracy) for r in reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "variant", "mode", "alpha", "tau", "seed", "accuracy"] + [f"class{c}" for c in range(K)])
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()
