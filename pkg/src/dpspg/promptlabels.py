"""Stage 1: per-domain positive and negative prompt labels.

The positive label is trained with softmax cross-entropy over cosine
similarities, the negative label with a per-class sigmoid BCE against the
complement of the one-hot target ("a photo without a <class>" is true for
every class except the true one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from . import binio
from .encoders import ClassVocabulary, MiniVLM
from .errors import InvalidInput, InvalidParameter, TrainingFailure
from .numkernel import DTYPE, ParamStore, generator_for, optimizer_step, sgd

MAGIC = b"DPL1"
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 70
    lr: float = 0.3
    momentum: float = 0.9
    batch_size: int = 32
    tau: float = 0.1
    tau_bce: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidParameter("epochs and batch_size must be positive")
        if self.lr <= 0 or self.tau <= 0 or self.tau_bce <= 0:
            raise InvalidParameter("lr, tau and tau_bce must be positive")


@dataclass
class DomainPromptLabelPair:
    domain: int
    positive: torch.Tensor  # (M, d_tok)
    negative: torch.Tensor  # (M, d_tok)
    val_accuracy: float
    val_bce: float
    epoch_selected: int  # positive path
    epoch_selected_neg: int
    history: dict = field(default_factory=dict)
    provenance: tuple[int, ...] = ()
    oracle: bool = False


# --------------------------------------------------------------------------
# losses


def negative_target(label: int, K: int) -> torch.Tensor:
    if not 0 <= label < K:
        raise InvalidParameter(f"label {label} outside [0, {K})")
    bits = torch.ones(K, dtype=DTYPE)
    bits[label] = 0.0
    return bits


def negative_targets(labels: torch.Tensor, K: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) and (labels.min() < 0 or labels.max() >= K):
        raise InvalidParameter(f"labels outside [0, {K})")
    return 1.0 - torch.nn.functional.one_hot(labels, K).to(DTYPE)


def _check_batch(emb, labels):
    if len(labels) == 0:
        raise InvalidInput("empty batch")
    if emb.shape[0] != len(labels):
        raise InvalidInput("embedding and label counts differ")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[label]."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = logits.gather(-1, labels[:, None])[:, 0]
    return (torch.logsumexp(logits, dim=-1) - picked).mean()


def binary_cross_entropy(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over classes, then over the batch, of the clamped BCE."""
    p = p.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def positive_label_loss(emb, labels, v_pos, vocab: ClassVocabulary, vlm: MiniVLM, tau: float) -> torch.Tensor:
    """Cross-entropy of softmax(<t+_i, phi(x)> / tau) with t+_i = psi([v_pos, v+, c_i]).

    ``emb`` holds precomputed image embeddings phi(x) of one domain's batch.
    """
    _check_batch(emb, labels)
    t = vlm.encode_text(v_pos, vocab.positive_template, vocab.class_embeddings)
    return cross_entropy(emb @ t.T / tau, labels)


def negative_probabilities(s_neg: torch.Tensor, tau_bce: float, centered: bool = True) -> torch.Tensor:
    """Per-class probability that "a photo without a <class>" holds.

    ``sigmoid((s_i - mean_j s_j) / tau_bce)`` when ``centered``, else
    ``sigmoid(s_i / tau_bce)``.
    """
    if centered:
        s_neg = s_neg - s_neg.mean(dim=-1, keepdim=True)
    return torch.sigmoid(s_neg / tau_bce)


def negative_label_loss(emb, labels, v_neg, vocab: ClassVocabulary, vlm: MiniVLM, tau_bce: float,
                        centered: bool = True) -> torch.Tensor:
    _check_batch(emb, labels)
    t = vlm.encode_text(v_neg, vocab.negative_template, vocab.class_embeddings)
    p = negative_probabilities(emb @ t.T, tau_bce, centered)
    return binary_cross_entropy(p, negative_targets(labels, vocab.K))


@torch.no_grad()
def label_scores(emb, prompt, template, vocab: ClassVocabulary, vlm: MiniVLM) -> torch.Tensor:
    """Cosine similarities (N, K) of image embeddings against one prompt."""
    return emb @ vlm.encode_text(prompt, template, vocab.class_embeddings).T


# --------------------------------------------------------------------------
# training


def _epoch_batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    return [perm[b:b + batch_size] for b in range(0, n, batch_size)]


def train_domain_labels(
    train_emb,
    train_labels,
    val_emb,
    val_labels,
    vocab: ClassVocabulary,
    vlm: MiniVLM,
    config: Stage1Config = Stage1Config(),
    domain: int = 0,
    seed: int = 0,
    negative: bool = True,
) -> DomainPromptLabelPair:
    """Fit v+ and v- for one domain with independent SGD loops.

    Both prompts start from their template tokens. After every epoch the
    validation split is scored; the positive label with the best accuracy
    (ties: lower val cross-entropy) and the negative label with the lowest
    val BCE are returned. ``negative=False`` skips the negative loop and
    returns the untouched template as the negative label.
    """
    train_emb = torch.as_tensor(train_emb, dtype=DTYPE)
    val_emb = torch.as_tensor(val_emb, dtype=DTYPE)
    ytr = torch.as_tensor(train_labels, dtype=torch.long)
    yva = torch.as_tensor(val_labels, dtype=torch.long)
    if len(ytr) == 0 or len(yva) == 0:
        raise InvalidInput(f"domain {domain}: empty train or val split")

    cfg = config
    n_batches = math.ceil(len(ytr) / cfg.batch_size)
    total = cfg.epochs * n_batches
    ps = ParamStore()
    ps.add("pos", vocab.positive_template)
    ps.add("neg", vocab.negative_template)
    opt_pos = sgd(cfg.lr, total, momentum=cfg.momentum)
    opt_neg = sgd(cfg.lr, total, momentum=cfg.momentum)
    pos_only, neg_only = ps.view(["pos"]), ps.view(["neg"])
    gen = generator_for(seed * 1000 + domain)

    hist = {"loss_pos": [], "loss_neg": [], "val_acc": [], "val_ce": [], "val_bce": [], "train_acc": []}
    best_pos = best_neg = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = [0.0, 0.0]
        for idx in _epoch_batches(len(ytr), cfg.batch_size, gen):
            e, y = train_emb[idx], ytr[idx]
            lp = positive_label_loss(e, y, pos_only["pos"], vocab, vlm, cfg.tau)
            ln = (negative_label_loss(e, y, neg_only["neg"], vocab, vlm, cfg.tau_bce)
                  if negative else torch.zeros((), dtype=DTYPE))
            if not (math.isfinite(lp.item()) and math.isfinite(ln.item())):
                raise TrainingFailure(f"domain {domain}: non-finite stage-1 loss", epoch)
            ps.zero_grad()
            (lp + ln).backward()
            # disjoint parameters: each SGD loop sees only its own gradient
            optimizer_step(pos_only, opt_pos, step)
            if negative:
                optimizer_step(neg_only, opt_neg, step)
            step += 1
            sums[0] += lp.item() * len(idx)
            sums[1] += ln.item() * len(idx)
        hist["loss_pos"].append(sums[0] / len(ytr))
        hist["loss_neg"].append(sums[1] / len(ytr))

        with torch.no_grad():
            s_val = label_scores(val_emb, ps["pos"], vocab.positive_template, vocab, vlm)
            acc = float((s_val.argmax(1) == yva).to(DTYPE).mean())
            ce = float(cross_entropy(s_val / cfg.tau, yva))
            bce = (float(negative_label_loss(val_emb, yva, ps["neg"], vocab, vlm, cfg.tau_bce))
                   if negative else math.nan)
            s_tr = label_scores(train_emb, ps["pos"], vocab.positive_template, vocab, vlm)
            hist["train_acc"].append(float((s_tr.argmax(1) == ytr).to(DTYPE).mean()))
        hist["val_acc"].append(acc)
        hist["val_ce"].append(ce)
        hist["val_bce"].append(bce)
        if best_pos is None or (acc, -ce) > (best_pos[0], -best_pos[1]):
            best_pos = (acc, ce, epoch, ps["pos"].detach().clone())
        if best_neg is None or bce < best_neg[0] or not negative:
            best_neg = (bce, epoch, ps["neg"].detach().clone())

    return DomainPromptLabelPair(
        domain=domain,
        positive=best_pos[3],
        negative=best_neg[2],
        val_accuracy=best_pos[0],
        val_bce=best_neg[0],
        epoch_selected=best_pos[2],
        epoch_selected_neg=best_neg[1],
        history=hist,
        provenance=(domain,),
    )


def accuracy(emb, labels, prompt, vocab: ClassVocabulary, vlm: MiniVLM) -> float:
    s = label_scores(torch.as_tensor(emb, dtype=DTYPE), prompt, vocab.positive_template, vocab, vlm)
    return float((s.argmax(1) == torch.as_tensor(labels)).to(DTYPE).mean())


def negative_gap(emb, labels, prompt, vocab: ClassVocabulary, vlm: MiniVLM) -> float:
    """Mean of s-_y - min_{i != y} s-_i; negative when the true class scores lowest."""
    s = label_scores(torch.as_tensor(emb, dtype=DTYPE), prompt, vocab.negative_template, vocab, vlm)
    y = torch.as_tensor(labels, dtype=torch.long)
    sy = s.gather(1, y[:, None])[:, 0]
    others = s.clone()
    others[torch.arange(len(y)), y] = math.inf
    return float((sy - others.min(1).values).mean())


# --------------------------------------------------------------------------
# checkpoint


def save_labels(path, pair: DomainPromptLabelPair, meta: dict | None = None) -> None:
    """DPL1 file: header (domain, M, d_tok, epoch_selected, epoch_selected_neg),
    tensors ``positive``, ``negative``, ``val_metrics`` = (val_accuracy, val_bce)."""
    M, d_tok = pair.positive.shape
    meta = dict(meta or {})
    meta.update(provenance=list(pair.provenance), oracle=pair.oracle)
    binio.write_checkpoint(
        path, MAGIC,
        [pair.domain, M, d_tok, pair.epoch_selected, pair.epoch_selected_neg],
        {"positive": pair.positive, "negative": pair.negative,
         "val_metrics": torch.tensor([pair.val_accuracy, pair.val_bce], dtype=DTYPE)},
        meta,
    )


def load_labels(path) -> tuple[DomainPromptLabelPair, dict]:
    header, t, meta = binio.read_checkpoint(path, MAGIC)
    domain, _M, _d, ep, ep_neg = header
    acc, bce = (float(v) for v in t["val_metrics"])
    pair = DomainPromptLabelPair(domain, t["positive"], t["negative"], acc, bce, ep, ep_neg,
                                 provenance=tuple(meta.get("provenance", [domain])),
                                 oracle=bool(meta.get("oracle", False)))
    return pair, meta

