"""Frozen mini vision-language encoder pair.

The image encoder is a 2-layer tanh MLP followed by L2 normalization. The
text encoder reads the token sequence ``[prompt | template | class]`` plus
positional embeddings, runs it through two frozen transformer layers,
mean-pools the context positions, projects to the feature width and
L2-normalizes. Weights are drawn from a seeded Gaussian scaled by
1/sqrt(fan_in). :func:`align_image_encoder` then plays the role of
contrastive pre-training: it refits the image output layer once so that
canonical class samples land near their "a photo of a" text feature and
away from the class-specific part of their "a photo without a" feature,
giving the encoder pair some grasp of negation. After that nothing is ever
trained again.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from . import binio
from .errors import InvalidParameter, InvalidShape
from .numkernel import (
    DTYPE,
    ParamStore,
    gaussian,
    generator_for,
    init_transformer_layer,
    layer_norm,
    transformer_layer_forward,
)

TEMPLATE_LEN = 4
MAGIC = b"DPV1"


@dataclass(frozen=True)
class ClassVocabulary:
    class_embeddings: torch.Tensor  # (K, d_tok)
    positive_template: torch.Tensor  # (4, d_tok)  "a photo of a"
    negative_template: torch.Tensor  # (4, d_tok)  "a photo without a"
    seed: int

    @property
    def K(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def d_tok(self) -> int:
        return self.class_embeddings.shape[1]


def build_vocabulary(K: int, d_tok: int, seed: int) -> ClassVocabulary:
    """Seeded token embeddings for K class names and the two templates.

    The negative template shares tokens 0, 1 and 3 with the positive one
    and differs in the third slot, like "of" vs "without".
    """
    if K < 2:
        raise InvalidParameter(f"need K >= 2 classes, got {K}")
    if d_tok < 4:
        raise InvalidParameter(f"need d_tok >= 4, got {d_tok}")
    gen = generator_for(seed)
    s = 1.0 / math.sqrt(d_tok)
    classes = gaussian((K, d_tok), gen, s)
    pos = gaussian((TEMPLATE_LEN, d_tok), gen, s)
    neg = pos.clone()
    neg[2] = gaussian((d_tok,), gen, s)
    return ClassVocabulary(classes, pos, neg, seed)


@dataclass(frozen=True)
class EncoderConfig:
    d_raw: int = 16
    d_tok: int = 32
    d_feat: int = 64
    d_hidden: int = 64
    context_length: int = 4
    text_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    pool: str = "context"
    seed: int = 0

    def __post_init__(self):
        if self.pool not in ("context", "all"):
            raise InvalidParameter("pool must be 'context' or 'all'")
        for k, v in asdict(self).items():
            if k not in ("seed", "pool") and v < 1:
                raise InvalidParameter(f"{k} must be positive")
        if self.d_tok % self.n_heads:
            raise InvalidParameter("d_tok must be divisible by n_heads")


@dataclass(frozen=True)
class AlignmentConfig:
    """Settings of the one-off pre-training refit (see align_image_encoder)."""

    ridge: float = 0.1
    negation: float = 4.0
    n_per_class: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.ridge <= 0:
            raise InvalidParameter("ridge must be positive")
        if self.negation < 0:
            raise InvalidParameter("negation must be nonnegative")
        if self.n_per_class < 1:
            raise InvalidParameter("n_per_class must be positive")


def _normalize(z: torch.Tensor) -> torch.Tensor:
    return z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)


class MiniVLM:
    """Image encoder ``encode_image`` and text encoder ``encode_text``.

    All parameters are frozen; gradients flow through ``encode_text`` into
    the prompt tokens only.
    """

    def __init__(self, cfg: EncoderConfig, params: ParamStore | None = None):
        self.cfg = cfg
        if params is None:
            params = self._init_params(cfg)
        params.freeze()
        self.params = params

    @staticmethod
    def _init_params(cfg: EncoderConfig) -> ParamStore:
        gen = generator_for(cfg.seed)
        p = ParamStore()
        p.add("img.w1", gaussian((cfg.d_raw, cfg.d_hidden), gen, 1 / math.sqrt(cfg.d_raw)))
        p.add("img.b1", gaussian((cfg.d_hidden,), gen, 0.1))
        p.add("img.w2", gaussian((cfg.d_hidden, cfg.d_feat), gen, 1 / math.sqrt(cfg.d_hidden)))
        p.add("img.b2", gaussian((cfg.d_feat,), gen, 0.1))
        seq = cfg.context_length + TEMPLATE_LEN + 1
        p.add("txt.pos", gaussian((seq, cfg.d_tok), gen, 1 / math.sqrt(cfg.d_tok)))
        for l in range(cfg.text_layers):
            init_transformer_layer(p, f"txt.l{l}.", cfg.d_tok, cfg.d_ff, gen)
        p.add("txt.lnf.g", torch.ones(cfg.d_tok, dtype=DTYPE))
        p.add("txt.lnf.b", torch.zeros(cfg.d_tok, dtype=DTYPE))
        p.add("txt.proj", gaussian((cfg.d_tok, cfg.d_feat), gen, 1 / math.sqrt(cfg.d_tok)))
        return p

    def encode_image(self, x) -> torch.Tensor:
        """(..., d_raw) raw samples -> (..., d_feat) unit vectors."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.cfg.d_raw:
            raise InvalidShape(f"raw dimension {x.shape[-1]} != {self.cfg.d_raw}")
        p = self.params
        h = torch.tanh(x @ p["img.w1"] + p["img.b1"])
        return _normalize(h @ p["img.w2"] + p["img.b2"])

    def encode_text(self, prompt: torch.Tensor, template: torch.Tensor, class_embed: torch.Tensor) -> torch.Tensor:
        """Text features for every (prompt, class) pair.

        ``prompt`` is (M, d_tok) or batched (B, M, d_tok); ``class_embed`` is
        (d_tok,) or (K, d_tok). Output drops the axes the inputs did not
        have: (d_feat,), (K, d_feat), (B, d_feat) or (B, K, d_feat).
        """
        cfg = self.cfg
        prompt = torch.as_tensor(prompt, dtype=DTYPE)
        if prompt.shape[-2:] != (cfg.context_length, cfg.d_tok):
            raise InvalidShape(
                f"prompt must be (..., {cfg.context_length}, {cfg.d_tok}), got {tuple(prompt.shape)}"
            )
        if template.shape != (TEMPLATE_LEN, cfg.d_tok):
            raise InvalidShape(f"template must be ({TEMPLATE_LEN}, {cfg.d_tok})")
        single_class = class_embed.ndim == 1
        single_prompt = prompt.ndim == 2
        c = class_embed.reshape(-1, cfg.d_tok)
        P = prompt.reshape(-1, cfg.context_length, cfg.d_tok)
        B, K = P.shape[0], c.shape[0]

        seq = torch.cat(
            [
                P[:, None].expand(B, K, cfg.context_length, cfg.d_tok),
                template.expand(B, K, TEMPLATE_LEN, cfg.d_tok),
                c[None, :, None].expand(B, K, 1, cfg.d_tok),
            ],
            dim=-2,
        ) + self.params["txt.pos"]
        for l in range(cfg.text_layers):
            seq = transformer_layer_forward(seq, self.params, f"txt.l{l}.", cfg.n_heads)
        seq = layer_norm(seq, self.params["txt.lnf.g"], self.params["txt.lnf.b"])
        if cfg.pool == "context":
            # class token reaches the feature only through attention
            seq = seq[..., :-1, :]
        out = _normalize(seq.mean(dim=-2) @ self.params["txt.proj"])
        if single_class:
            out = out[:, 0]
        if single_prompt:
            out = out[0]
        return out

    def text_features(self, prompt, template, vocab: ClassVocabulary) -> torch.Tensor:
        return self.encode_text(prompt, template, vocab.class_embeddings)

    def save(self, path, vocab: ClassVocabulary, meta: dict | None = None) -> None:
        """DPV1 file: header (d_raw, d_tok, d_feat, K, M, n_heads, text_layers),
        then the vocabulary tensors, then encoder tensors in creation order."""
        cfg = self.cfg
        tensors = {
            "vocab.classes": vocab.class_embeddings,
            "vocab.positive": vocab.positive_template,
            "vocab.negative": vocab.negative_template,
        }
        tensors.update(dict(self.params.items()))
        meta = dict(meta or {})
        meta.update(encoder_seed=cfg.seed, vocab_seed=vocab.seed)
        header = [cfg.d_raw, cfg.d_tok, cfg.d_feat, vocab.K, cfg.context_length, cfg.n_heads, cfg.text_layers]
        binio.write_checkpoint(path, MAGIC, header, tensors, meta)

    @classmethod
    def load(cls, path):
        """Inverse of :meth:`save`; returns ``(vlm, vocab, meta)``."""
        header, tensors, meta = binio.read_checkpoint(path, MAGIC)
        d_raw, d_tok, d_feat, _K, M, n_heads, text_layers = header
        vocab = ClassVocabulary(
            tensors.pop("vocab.classes"),
            tensors.pop("vocab.positive"),
            tensors.pop("vocab.negative"),
            meta["vocab_seed"],
        )
        cfg = EncoderConfig(
            d_raw=d_raw, d_tok=d_tok, d_feat=d_feat,
            d_hidden=tensors["img.w1"].shape[1], context_length=M,
            text_layers=text_layers, n_heads=n_heads,
            d_ff=tensors["txt.l0.ff.w1"].shape[1], seed=meta["encoder_seed"],
        )
        p = ParamStore()
        for name, t in tensors.items():
            p.add(name, t, frozen=True)
        return cls(cfg, p), vocab, meta


def align_image_encoder(
    vlm: MiniVLM,
    vocab: ClassVocabulary,
    prototypes,
    noise_sigma: float,
    n_per_class: int = 200,
    ridge: float = 0.1,
    negation: float = 4.0,
    seed: int = 0,
) -> MiniVLM:
    """Ridge-refit the image output layer towards zero-shot text features.

    Anchor samples ``mu_c + eps`` come from the canonical, untransformed
    class prototypes (no domain's data is used). The new output layer
    minimizes ``||H W - s T||^2 + ridge * N * ||W - W0||^2`` where ``W0`` is
    the random layer and ``s`` matches the mean pre-normalization output
    norm. Row ``c`` of ``T`` is the positive zero-shot feature
    psi([v+, v+, c]) minus ``negation`` times the class-specific part of the
    negative feature psi([v-, v-, c]), after projecting out the span of the
    class-centered positive features so that positive score differences
    are not disturbed. Small ``ridge`` aligns tightly; large ``ridge`` keeps
    the random layer. Returns a new frozen encoder; ``vlm`` is unchanged.
    """
    proto = torch.as_tensor(prototypes, dtype=DTYPE)
    K, d_raw = proto.shape
    if K != vocab.K or d_raw != vlm.cfg.d_raw:
        raise InvalidShape("prototype shape does not match vocabulary/encoder")
    gen = generator_for(seed)
    y = torch.arange(K).repeat_interleave(n_per_class)
    x = proto[y] + gaussian((K * n_per_class, d_raw), gen, noise_sigma)
    p = vlm.params
    with torch.no_grad():
        h = torch.tanh(x @ p["img.w1"] + p["img.b1"])
        h1 = torch.cat([h, torch.ones(len(h), 1, dtype=DTYPE)], dim=1)
        w0 = torch.cat([p["img.w2"], p["img.b2"][None]], dim=0)
        scale = float((h1 @ w0).norm(dim=1).mean())
        t_pos = vlm.encode_text(vocab.positive_template, vocab.positive_template, vocab.class_embeddings)
        t_neg = vlm.encode_text(vocab.negative_template, vocab.negative_template, vocab.class_embeddings)
        # class-specific part of the negative features, minus anything that
        # would move positive score differences
        cp = t_pos - t_pos.mean(dim=0)
        cn = t_neg - t_neg.mean(dim=0)
        q, _ = torch.linalg.qr(cp.T)
        cn = cn - (cn @ q) @ q.T
        cn = cn / cn.norm(dim=1).mean()
        t = _normalize(t_pos - negation * cp.norm(dim=1).mean() * cn)
        target = scale * t[y]
        lam = ridge * len(h1)
        A = h1.T @ h1 + lam * torch.eye(h1.shape[1], dtype=DTYPE)
        w = torch.linalg.solve(A, h1.T @ target + lam * w0)
    q = ParamStore()
    for name, t in p.items():
        q.add(name, t, frozen=True)
    q.set_value("img.w2", w[:-1])
    q.set_value("img.b2", w[-1])
    return MiniVLM(vlm.cfg, q)
