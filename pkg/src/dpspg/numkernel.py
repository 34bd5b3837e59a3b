"""Dense float64 numeric core.

Tensors are ``torch.float64`` CPU tensors; reverse-mode gradients come from
torch autograd and are cross-checked by :func:`grad_check`, a central
finite-difference oracle that never touches autograd. Optimizers and
learning-rate schedules are implemented here rather than taken from
``torch.optim`` so the exact update rules are pinned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from .errors import InvalidInput, InvalidParameter, InvalidShape, InvalidState, NumericFailure

DTYPE = torch.float64

# bitwise reproducibility on CPU; intra-op threading can reorder reductions
torch.set_num_threads(1)


def as_tensor(values, shape=None) -> torch.Tensor:
    t = torch.as_tensor(values, dtype=DTYPE)
    if shape is not None and tuple(t.shape) != tuple(shape):
        raise InvalidShape(f"expected shape {tuple(shape)}, got {tuple(t.shape)}")
    if not bool(torch.isfinite(t).all()):
        raise NumericFailure("non-finite tensor entries")
    return t


def generator_for(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def gaussian(shape, gen: torch.Generator, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=DTYPE) * scale


class ParamStore:
    """Named tensors with a frozen flag.

    Unfrozen entries are leaf tensors with ``requires_grad`` so their
    gradient lives in ``tensor.grad``. Insertion order is the serialization
    order.
    """

    def __init__(self):
        self._values: dict[str, torch.Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        if name in self._values:
            raise InvalidParameter(f"duplicate parameter {name!r}")
        t = as_tensor(value).detach().clone()
        if not frozen:
            t.requires_grad_(True)
        else:
            self._frozen.add(name)
        self._values[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def items(self):
        return self._values.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> list[str]:
        return [n for n in self._values if n not in self._frozen]

    def grad(self, name: str) -> torch.Tensor | None:
        return self._values[name].grad

    def zero_grad(self) -> None:
        for t in self._values.values():
            t.grad = None

    def freeze(self) -> None:
        for name, t in self._values.items():
            t.requires_grad_(False)
            t.grad = None
            self._frozen.add(name)

    def set_value(self, name: str, value) -> None:
        t = self._values[name]
        v = as_tensor(value, shape=t.shape)
        with torch.no_grad():
            t.copy_(v)

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: t.detach().clone() for n, t in self._values.items()}

    def load(self, snap: dict[str, torch.Tensor]) -> None:
        for n, v in snap.items():
            self.set_value(n, v)

    def view(self, names) -> "ParamStore":
        """A store sharing the listed tensors (no copies)."""
        v = ParamStore()
        for n in names:
            v._values[n] = self._values[n]
            if n in self._frozen:
                v._frozen.add(n)
        return v

    @classmethod
    def union(cls, stores: dict[str, "ParamStore"]) -> "ParamStore":
        """One store sharing the tensors of several, names prefixed by key."""
        u = cls()
        for prefix, store in stores.items():
            for n, t in store.items():
                u._values[prefix + n] = t
                if store.is_frozen(n):
                    u._frozen.add(prefix + n)
        return u

    def num_parameters(self, trainable_only: bool = False) -> int:
        names = self.trainable() if trainable_only else list(self._values)
        return sum(self._values[n].numel() for n in names)


# --------------------------------------------------------------------------
# softmax


def softmax(logits, tau: float = 1.0) -> torch.Tensor:
    """Temperature softmax over the last axis, max-subtracted."""
    if not tau > 0:
        raise InvalidParameter(f"tau must be positive, got {tau}")
    z = torch.as_tensor(logits, dtype=DTYPE)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise InvalidShape("softmax needs at least one logit")
    z = z / tau
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def softmax_jacobian(probs, tau: float = 1.0) -> torch.Tensor:
    """d f_i / d g_j = f_i (delta_ij - f_j) / tau for f = softmax(g / tau)."""
    if not tau > 0:
        raise InvalidParameter(f"tau must be positive, got {tau}")
    f = torch.as_tensor(probs, dtype=DTYPE)
    if f.ndim != 1 or f.numel() == 0:
        raise InvalidShape("probs must be a non-empty vector")
    if bool((f < 0).any()) or abs(float(f.sum()) - 1.0) > 1e-8:
        raise InvalidInput("probs is not a normalized probability vector")
    return (torch.diag(f) - torch.outer(f, f)) / tau


# --------------------------------------------------------------------------
# transformer layer


def init_transformer_layer(
    params: ParamStore,
    prefix: str,
    d: int,
    d_ff: int,
    gen: torch.Generator,
    frozen: bool = False,
) -> None:
    """Register pre-norm attention + feed-forward weights under ``prefix``."""
    s = 1.0 / math.sqrt(d)
    params.add(f"{prefix}ln1.g", torch.ones(d, dtype=DTYPE), frozen)
    params.add(f"{prefix}ln1.b", torch.zeros(d, dtype=DTYPE), frozen)
    for w in ("q", "k", "v", "o"):
        params.add(f"{prefix}attn.w{w}", gaussian((d, d), gen, s), frozen)
        params.add(f"{prefix}attn.b{w}", torch.zeros(d, dtype=DTYPE), frozen)
    params.add(f"{prefix}ln2.g", torch.ones(d, dtype=DTYPE), frozen)
    params.add(f"{prefix}ln2.b", torch.zeros(d, dtype=DTYPE), frozen)
    params.add(f"{prefix}ff.w1", gaussian((d, d_ff), gen, s), frozen)
    params.add(f"{prefix}ff.b1", torch.zeros(d_ff, dtype=DTYPE), frozen)
    params.add(f"{prefix}ff.w2", gaussian((d_ff, d), gen, 1.0 / math.sqrt(d_ff)), frozen)
    params.add(f"{prefix}ff.b2", torch.zeros(d, dtype=DTYPE), frozen)


def layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def transformer_layer_forward(
    x: torch.Tensor, params: ParamStore, prefix: str = "", n_heads: int = 4
) -> torch.Tensor:
    """One pre-norm encoder layer on ``x`` of shape (..., S, d)."""
    d = params[f"{prefix}ln1.g"].shape[0]
    if x.ndim < 2 or x.shape[-1] != d:
        raise InvalidShape(f"expected (..., S, {d}) input, got {tuple(x.shape)}")
    if d % n_heads:
        raise InvalidShape(f"width {d} not divisible by {n_heads} heads")
    p = lambda n: params[f"{prefix}{n}"]  # noqa: E731
    dh = d // n_heads
    lead, S = x.shape[:-2], x.shape[-2]

    h = layer_norm(x, p("ln1.g"), p("ln1.b"))
    q = (h @ p("attn.wq") + p("attn.bq")).reshape(*lead, S, n_heads, dh).transpose(-3, -2)
    k = (h @ p("attn.wk") + p("attn.bk")).reshape(*lead, S, n_heads, dh).transpose(-3, -2)
    v = (h @ p("attn.wv") + p("attn.bv")).reshape(*lead, S, n_heads, dh).transpose(-3, -2)
    att = softmax(q @ k.transpose(-1, -2), tau=math.sqrt(dh))
    o = (att @ v).transpose(-3, -2).reshape(*lead, S, d)
    x = x + o @ p("attn.wo") + p("attn.bo")

    h = layer_norm(x, p("ln2.g"), p("ln2.b"))
    h = torch.nn.functional.gelu(h @ p("ff.w1") + p("ff.b1"))
    return x + h @ p("ff.w2") + p("ff.b2")


# --------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    epsilon: float = 1e-5,
    n_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Error per coordinate is ``|a - fd| / max(1, |a|, |fd|)``. At most
    ``n_coords`` coordinates are sampled (all of them when ``None``).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise InvalidParameter(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    names = params.trainable()
    if not names:
        raise InvalidState("no trainable parameters to check")

    params.zero_grad()
    loss = loss_fn(params)
    if not math.isfinite(loss.item()):
        raise NumericFailure("loss is not finite")
    loss.backward()
    analytic = {}
    for n in names:
        g = params.grad(n)
        analytic[n] = torch.zeros_like(params[n]) if g is None else g.detach().clone()
    params.zero_grad()

    coords = [(n, i) for n in names for i in range(params[n].numel())]
    if n_coords is not None and len(coords) > n_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    worst = 0.0
    with torch.no_grad():
        for n, i in coords:
            flat = params[n].view(-1)
            orig = float(flat[i])
            flat[i] = orig + epsilon
            fp = float(loss_fn(params))
            flat[i] = orig - epsilon
            fm = float(loss_fn(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericFailure(f"non-finite loss while perturbing {n}[{i}]")
            fd = (fp - fm) / (2 * epsilon)
            a = float(analytic[n].view(-1)[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


# --------------------------------------------------------------------------
# optimizers


@dataclass
class CosineSchedule:
    """Cosine annealing to ``min_lr`` after an optional linear warm-up.

    During the first ``warmup_steps`` the rate ramps linearly from
    ``warmup_lr`` towards ``base_lr``; the cosine phase spans the remaining
    steps.
    """

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    warmup_lr: float = 0.0
    min_lr: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidParameter("base_lr must be positive")
        if self.total_steps < 1 or not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidParameter("need total_steps >= 1 and 0 <= warmup_steps < total_steps")

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * step / self.warmup_steps
        t = min(step - self.warmup_steps, self.total_steps - self.warmup_steps)
        T = self.total_steps - self.warmup_steps
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1 + math.cos(math.pi * t / T))


@dataclass
class OptimizerState:
    kind: str  # "sgd" or "adamw"
    schedule: CosineSchedule
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    momentum: float = 0.0
    eps: float = 1e-8
    moments: dict = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise InvalidParameter(f"unknown optimizer kind {self.kind!r}")
        if not all(0 < b < 1 for b in self.betas):
            raise InvalidParameter("betas must lie in (0, 1)")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise InvalidParameter("weight_decay >= 0 and momentum in [0, 1) required")

    @property
    def learning_rate(self) -> float:
        return self.schedule.base_lr


def sgd(base_lr, total_steps, momentum=0.0, weight_decay=0.0, **sched) -> OptimizerState:
    return OptimizerState("sgd", CosineSchedule(base_lr, total_steps, **sched),
                          momentum=momentum, weight_decay=weight_decay)


def adamw(base_lr, total_steps, betas=(0.9, 0.999), weight_decay=1e-3, **sched) -> OptimizerState:
    return OptimizerState("adamw", CosineSchedule(base_lr, total_steps, **sched),
                          betas=betas, weight_decay=weight_decay)


def optimizer_step(params: ParamStore, state: OptimizerState, step_index: int) -> ParamStore:
    """Apply one update in place using the scheduled rate at ``step_index``."""
    names = params.trainable()
    for n in names:
        if params.grad(n) is None:
            raise InvalidState(f"missing gradient for unfrozen parameter {n!r}")
    lr = state.schedule(step_index)
    state.t += 1
    b1, b2 = state.betas
    with torch.no_grad():
        for n in names:
            p, g = params[n], params.grad(n)
            if state.kind == "sgd":
                if state.weight_decay:
                    g = g + state.weight_decay * p
                if state.momentum:
                    buf = state.moments.get(n)
                    buf = g.clone() if buf is None else buf.mul_(state.momentum).add_(g)
                    state.moments[n] = buf
                    g = buf
                p.sub_(lr * g)
            else:
                m, v = state.moments.get(n, (torch.zeros_like(p), torch.zeros_like(p)))
                p.mul_(1 - lr * state.weight_decay)
                m.mul_(b1).add_((1 - b1) * g)
                v.mul_(b2).add_((1 - b2) * g * g)
                state.moments[n] = (m, v)
                m_hat = m / (1 - b1 ** state.t)
                v_hat = v / (1 - b2 ** state.t)
                p.sub_(lr * m_hat / (torch.sqrt(v_hat) + state.eps))
    return params
