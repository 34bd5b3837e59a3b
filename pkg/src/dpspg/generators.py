"""Stage 2: transformer prompt generators.

A generator maps one image embedding to an M x d_tok soft prompt: M
per-position linear projections of the embedding plus positional
embeddings form the input sequence, four pre-norm transformer layers mix
it, and a per-position linear head emits the prompt tokens. G+ and G- share
the architecture and are trained to regress onto the positive and negative
prompt labels of each sample's source domain.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import binio
from .errors import ContaminationError, InvalidParameter, InvalidShape, InvalidState, TrainingFailure
from .numkernel import (
    DTYPE,
    ParamStore,
    adamw,
    gaussian,
    generator_for,
    init_transformer_layer,
    layer_norm,
    optimizer_step,
    transformer_layer_forward,
)
from .promptlabels import DomainPromptLabelPair

MAGIC = b"DPG1"
N_LAYERS = 4
POLARITIES = ("positive", "negative")


@dataclass(frozen=True)
class Stage2Config:
    alpha_loss: float = 0.2
    epochs: int = 50
    lr: float = 2e-4
    warmup_epochs: int = 4
    warmup_lr: float = 1e-5
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    n_heads: int = 4
    d_ff: int = 64
    input_noise: float = 0.0
    use_negative: bool = True
    early_stopping: bool = False

    def __post_init__(self):
        if self.alpha_loss < 0:
            raise InvalidParameter("alpha_loss must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidParameter("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidParameter("lr must be positive and warmup_epochs < epochs")
        if self.input_noise < 0:
            raise InvalidParameter("input_noise must be nonnegative")


class GeneratorModel:
    """Image embedding -> (M, d_tok) prompt.

    ``input_noise`` > 0 adds isotropic Gaussian noise with per-coordinate
    standard deviation ``input_noise / sqrt(d_feat)`` to the embedding
    whenever a noise generator is supplied, emulating a stochastic
    generator.
    """

    def __init__(self, polarity: str, M: int, d_tok: int, d_feat: int, n_heads: int = 4,
                 d_ff: int = 64, seed: int = 0, input_noise: float = 0.0, params: ParamStore | None = None):
        if polarity not in POLARITIES:
            raise InvalidParameter(f"polarity must be one of {POLARITIES}")
        if d_tok % n_heads:
            raise InvalidParameter("d_tok must be divisible by n_heads")
        self.polarity = polarity
        self.M, self.d_tok, self.d_feat = M, d_tok, d_feat
        self.n_heads, self.d_ff = n_heads, d_ff
        self.seed = seed
        self.input_noise = input_noise
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed: int) -> ParamStore:
        gen = generator_for(seed)
        M, d, f = self.M, self.d_tok, self.d_feat
        p = ParamStore()
        p.add("in.w", gaussian((M, f, d), gen, 1 / math.sqrt(f)))
        p.add("in.b", torch.zeros(M, d, dtype=DTYPE))
        p.add("pos", gaussian((M, d), gen, 1 / math.sqrt(d)))
        for l in range(N_LAYERS):
            init_transformer_layer(p, f"l{l}.", d, self.d_ff, gen)
        p.add("lnf.g", torch.ones(d, dtype=DTYPE))
        p.add("lnf.b", torch.zeros(d, dtype=DTYPE))
        p.add("head.w", gaussian((M, d, d), gen, 1 / math.sqrt(d)))
        p.add("head.b", torch.zeros(M, d, dtype=DTYPE))
        return p

    def __call__(self, e: torch.Tensor, noise: torch.Generator | None = None) -> torch.Tensor:
        return generate_prompt(self, e, noise)


def generate_prompt(G: GeneratorModel, e, noise: torch.Generator | None = None) -> torch.Tensor:
    """(d_feat,) or (B, d_feat) embedding -> (M, d_tok) or (B, M, d_tok) prompt."""
    e = torch.as_tensor(e, dtype=DTYPE)
    if e.shape[-1] != G.d_feat:
        raise InvalidShape(f"embedding width {e.shape[-1]} != {G.d_feat}")
    single = e.ndim == 1
    e = e.reshape(-1, G.d_feat)
    if G.input_noise > 0 and noise is not None:
        e = e + gaussian(e.shape, noise, G.input_noise / math.sqrt(G.d_feat))
    p = G.params
    x = torch.einsum("bf,mfd->bmd", e, p["in.w"]) + p["in.b"] + p["pos"]
    for l in range(N_LAYERS):
        x = transformer_layer_forward(x, p, f"l{l}.", G.n_heads)
    x = layer_norm(x, p["lnf.g"], p["lnf.b"])
    out = torch.einsum("bmd,mde->bme", x, p["head.w"]) + p["head.b"]
    return out[0] if single else out


def _mse_by_domain(err2: torch.Tensor, domains) -> torch.Tensor:
    """Mean squared error averaged within each domain, then across domains."""
    per_sample = err2.reshape(err2.shape[0], -1).mean(dim=1)
    if domains is None:
        return per_sample.mean()
    domains = torch.as_tensor(domains)
    uniq = torch.unique(domains)
    return torch.stack([per_sample[domains == d].mean() for d in uniq]).mean()


def generator_loss(pred_pos, pred_neg, label_pos, label_neg, alpha: float, domains=None) -> torch.Tensor:
    """MSE(pred_pos, label_pos) + alpha * MSE(pred_neg, label_neg).

    Squared errors are averaged over the M * d_tok entries and over samples.
    With ``domains`` given, samples are averaged within each domain first
    and the domain means are then averaged, so every source domain weighs
    the same. ``pred_neg``/``label_neg`` may be ``None`` when alpha is 0.
    """
    if pred_pos.shape != label_pos.shape:
        raise InvalidShape(f"positive shapes differ: {tuple(pred_pos.shape)} vs {tuple(label_pos.shape)}")
    if pred_pos.ndim == 2:
        pred_pos, label_pos = pred_pos[None], label_pos[None]
        if pred_neg is not None:
            pred_neg, label_neg = pred_neg[None], label_neg[None]
    loss = _mse_by_domain((pred_pos - label_pos) ** 2, domains)
    if pred_neg is None:
        if alpha != 0:
            raise InvalidShape("negative prediction required when alpha != 0")
        return loss
    if pred_neg.shape != label_neg.shape or pred_neg.shape != pred_pos.shape:
        raise InvalidShape("negative prompt shapes do not match")
    return loss + alpha * _mse_by_domain((pred_neg - label_neg) ** 2, domains)


@dataclass
class GeneratorPair:
    g_pos: GeneratorModel
    g_neg: GeneratorModel | None
    provenance: tuple[int, ...]
    history: dict = field(default_factory=dict)


def label_targets(label_pairs: dict[int, DomainPromptLabelPair], domains) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.stack([label_pairs[int(d)].positive for d in domains])
    neg = torch.stack([label_pairs[int(d)].negative for d in domains])
    return pos, neg


def train_generators(
    train_emb,
    train_domains,
    val_emb,
    val_domains,
    label_pairs: dict[int, DomainPromptLabelPair],
    config: Stage2Config = Stage2Config(),
    seed: int = 0,
    on_epoch: Callable[[int, GeneratorPair], float] | None = None,
) -> GeneratorPair:
    """Train G+ (and G- unless ``config.use_negative`` is off) with AdamW.

    The learning rate ramps linearly from ``warmup_lr`` over the warm-up
    epochs, then follows cosine annealing. ``on_epoch`` (diagnostics only,
    e.g. target accuracy) is called after each epoch and its return value is
    recorded in ``history["eval_acc"]``.
    """
    train_emb = torch.as_tensor(train_emb, dtype=DTYPE)
    val_emb = torch.as_tensor(val_emb, dtype=DTYPE)
    dtr = np.asarray(train_domains)
    dva = np.asarray(val_domains)
    for d in np.unique(np.concatenate([dtr, dva])):
        if int(d) not in label_pairs:
            raise InvalidState(f"no prompt label pair for source domain {int(d)}")
    for pair in label_pairs.values():
        if pair.oracle:
            raise ContaminationError("oracle prompt labels cannot be used as training targets")
    cfg = config
    M, d_tok = next(iter(label_pairs.values())).positive.shape
    d_feat = train_emb.shape[1]
    alpha = cfg.alpha_loss if cfg.use_negative else 0.0

    def make(polarity, s):
        return GeneratorModel(polarity, M, d_tok, d_feat, cfg.n_heads, cfg.d_ff, s, cfg.input_noise)

    g_pos = make("positive", seed * 2 + 1)
    g_neg = make("negative", seed * 2 + 2) if cfg.use_negative else None
    provenance = tuple(sorted(int(d) for d in np.unique(dtr)))
    result = GeneratorPair(g_pos, g_neg, provenance)

    ps = ParamStore.union({"pos.": g_pos.params, **({"neg.": g_neg.params} if g_neg else {})})

    tgt_pos, tgt_neg = label_targets(label_pairs, dtr)
    val_pos, val_neg = label_targets(label_pairs, dva)
    n_batches = math.ceil(len(dtr) / cfg.batch_size)
    opt = adamw(cfg.lr, cfg.epochs * n_batches, betas=cfg.betas, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_epochs * n_batches, warmup_lr=cfg.warmup_lr)
    shuffle = generator_for(seed * 2 + 101)
    noise = generator_for(seed * 2 + 202) if cfg.input_noise > 0 else None

    def forward(e, noise_gen):
        pp = g_pos(e, noise_gen)
        pn = g_neg(e, noise_gen) if g_neg is not None else None
        return pp, pn

    hist = {"loss": [], "val_metric": [], "eval_acc": []}
    best = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(dtr), cfg.batch_size, shuffle):
            pp, pn = forward(train_emb[idx], noise)
            loss = generator_loss(pp, pn, tgt_pos[idx], tgt_neg[idx] if pn is not None else None,
                                  alpha, dtr[idx.numpy()])
            if not math.isfinite(loss.item()):
                raise TrainingFailure("non-finite generator loss", epoch)
            ps.zero_grad()
            loss.backward()
            optimizer_step(ps, opt, step)
            step += 1
            total += loss.item() * len(idx)
        hist["loss"].append(total / len(dtr))
        with torch.no_grad():
            pp, pn = forward(val_emb, None)
            hist["val_metric"].append(float(generator_loss(
                pp, pn, val_pos, val_neg if pn is not None else None, alpha, dva)))
        if on_epoch is not None:
            hist["eval_acc"].append(float(on_epoch(epoch, result)))
        if cfg.early_stopping and (best is None or hist["val_metric"][-1] < best[0]):
            best = (hist["val_metric"][-1], epoch, ps.snapshot())

    if cfg.early_stopping:
        ps.load(best[2])
        hist["epoch_selected"] = best[1]
    result.history = hist
    return result


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    return [perm[b:b + batch_size] for b in range(0, n, batch_size)]


# --------------------------------------------------------------------------
# checkpoints


def save_generator(path, G: GeneratorModel, meta: dict | None = None) -> None:
    """DPG1 file: header (polarity 0/1, M, d_tok, d_feat, n_layers, n_heads, d_ff),
    then parameters in creation order (in.w, in.b, pos, l0..l3, lnf, head)."""
    header = [POLARITIES.index(G.polarity), G.M, G.d_tok, G.d_feat, N_LAYERS, G.n_heads, G.d_ff]
    meta = dict(meta or {})
    meta.update(seed=G.seed, input_noise=G.input_noise)
    binio.write_checkpoint(path, MAGIC, header, dict(G.params.items()), meta)


def load_generator(path) -> tuple[GeneratorModel, dict]:
    header, tensors, meta = binio.read_checkpoint(path, MAGIC)
    pol, M, d_tok, d_feat, n_layers, n_heads, d_ff = header
    if n_layers != N_LAYERS:
        raise InvalidShape(f"expected {N_LAYERS} layers, checkpoint has {n_layers}")
    p = ParamStore()
    for n, t in tensors.items():
        p.add(n, t)
    G = GeneratorModel(POLARITIES[pol], M, d_tok, d_feat, n_heads, d_ff, meta["seed"],
                       meta.get("input_noise", 0.0), params=p)
    return G, meta


def history_csv(history: dict) -> str:
    """``epoch,loss,val_metric`` rows (plus ``eval_acc`` when recorded)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_acc = bool(history.get("eval_acc"))
    w.writerow(["epoch", "loss", "val_metric"] + (["eval_acc"] if has_acc else []))
    for i, (l, v) in enumerate(zip(history["loss"], history["val_metric"])):
        row = [i + 1, repr(l), repr(v)]
        if has_acc:
            row.append(repr(history["eval_acc"][i]))
        w.writerow(row)
    return buf.getvalue()
