"""Run configuration and the per-seed pipeline shared by the CLI and sweeps.

A run is fixed by a :class:`RunConfig`. The synthetic data and the frozen
encoder pair depend only on the config; everything trained is re-seeded
per run seed. Two generator variants are trained per held-out target:

* ``dual``: positive and negative generators, fused at inference;
* ``single``: the positive generator alone with Gaussian noise injected
  into its input, a stand-in for a stochastic single-path generator.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datagen import DatasetSpec, DomainDataset, generate_dataset
from .encoders import AlignmentConfig, ClassVocabulary, EncoderConfig, MiniVLM, align_image_encoder, build_vocabulary
from .errors import DPSPGError, ValidationError
from .generators import GeneratorPair, Stage2Config, train_generators
from .inference import EvalReport, PromptModels, evaluate_lodo, fuse_embeddings
from .promptlabels import DomainPromptLabelPair, Stage1Config, train_domain_labels

VARIANTS = ("dual", "single")
# fields that choose which runs happen or where files go, not what they contain
UNHASHED = ("seeds", "targets", "output_dir")


@dataclass(frozen=True)
class Stage1Section:
    epochs: int = 70
    lr: float = 0.3
    momentum: float = 0.9
    batch_size: int = 32


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    vocab_seed: int = 0
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Config = field(default_factory=lambda: Stage2Config(lr=1e-3))
    alpha_fuse: float = 0.2
    tau: float = 0.1
    tau_bce: float = 0.1
    single_path_noise: float = 1.0
    alpha_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    targets: tuple[int, ...] | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        if self.alpha_fuse < 0:
            raise ValidationError("alpha_fuse must be nonnegative", field="alpha_fuse")
        if any(a < 0 for a in self.alpha_grid):
            raise ValidationError("alpha_grid values must be nonnegative", field="alpha_grid")
        for k in ("tau", "tau_bce"):
            if not getattr(self, k) > 0:
                raise ValidationError(f"{k} must be positive", field=k)
        if self.single_path_noise < 0:
            raise ValidationError("single_path_noise must be nonnegative", field="single_path_noise")
        if not self.seeds:
            raise ValidationError("need at least one seed", field="seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be distinct", field="seeds")
        if self.encoder.d_raw != self.data.d_raw:
            raise ValidationError("encoder.d_raw must equal data.d_raw", field="encoder.d_raw")
        for t in self.target_list:
            if not 0 <= t < self.data.S_total:
                raise ValidationError(f"target {t} outside [0, {self.data.S_total})", field="targets")

    @property
    def target_list(self) -> list[int]:
        return list(range(self.data.S_total)) if self.targets is None else list(self.targets)

    def stage1_config(self) -> Stage1Config:
        s = self.stage1
        return Stage1Config(epochs=s.epochs, lr=s.lr, momentum=s.momentum, batch_size=s.batch_size,
                            tau=self.tau, tau_bce=self.tau_bce)

    def stage2_config(self, variant: str) -> Stage2Config:
        if variant == "dual":
            return self.stage2
        if variant == "single":
            return dataclasses.replace(self.stage2, use_negative=False, input_noise=self.single_path_noise)
        raise ValidationError(f"unknown variant {variant!r}", field="variant")

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("alpha_grid", "seeds", "targets"):
            if d[k] is not None:
                d[k] = list(d[k])
        d["stage2"]["betas"] = list(d["stage2"]["betas"])
        return d

    def hash(self) -> str:
        d = self.to_dict()
        for k in UNHASHED:
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Build from a (possibly partial) nested dict; unknown or ill-typed
        fields raise :class:`ValidationError` naming the field."""
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object", field="<root>")
        kw = {}
        defaults = cls()
        for name, value in doc.items():
            if name not in _FIELDS:
                raise ValidationError("unknown config field", field=name)
            default = getattr(defaults, name)
            if dataclasses.is_dataclass(default):
                kw[name] = _section(type(default), default, value, name)
            else:
                kw[name] = _coerce(value, default, _FIELDS[name], name)
        try:
            return cls(**kw)
        except ValidationError:
            raise
        except DPSPGError as e:
            raise ValidationError(str(e), field="<root>") from e


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(value, default, annotation: str, name: str):
    if value is None and "None" in str(annotation):
        return None
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ValidationError(f"{name} must be true or false", field=name)
        return value
    if isinstance(default, int) or annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{name} must be an integer", field=name)
        return value
    if isinstance(default, float) or annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be a number", field=name)
        return float(value)
    if isinstance(default, str) or annotation == "str":
        if not isinstance(value, str):
            raise ValidationError(f"{name} must be a string", field=name)
        return value
    if isinstance(default, tuple) or "tuple" in str(annotation):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{name} must be a list", field=name)
        elem = default[0] if default else (0 if "int" in str(annotation) else 0.0)
        return tuple(_coerce(v, elem, type(elem).__name__, name) for v in value)
    raise ValidationError(f"cannot interpret {name}", field=name)


def _section(cls, default, value, prefix: str):
    if not isinstance(value, dict):
        raise ValidationError(f"{prefix} must be an object", field=prefix)
    kw = {}
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    for k, v in value.items():
        if k not in types:
            raise ValidationError("unknown config field", field=f"{prefix}.{k}")
        kw[k] = _coerce(v, getattr(default, k), types[k], f"{prefix}.{k}")
    try:
        return dataclasses.replace(default, **kw)
    except DPSPGError as e:
        raise ValidationError(str(e), field=_guess_field(prefix, str(e), kw)) from e


def _guess_field(prefix: str, message: str, kw: dict) -> str:
    for k in sorted(kw, key=len, reverse=True):
        if k in message:
            return f"{prefix}.{k}"
    return prefix


def parse_override(cfg_dict: dict, assignment: str) -> None:
    """Apply ``section.field=value`` (value parsed as JSON, else kept as a string)."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} is not KEY=VALUE", field=assignment)
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = cfg_dict
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"{key}: {p} is not a section", field=key)
    node[parts[-1]] = value


# --------------------------------------------------------------------------
# world: data + frozen encoders


@dataclass
class World:
    ds: DomainDataset
    vocab: ClassVocabulary
    vlm: MiniVLM
    emb: torch.Tensor  # image embeddings of every sample


def build_encoders(cfg: RunConfig, ds: DomainDataset) -> tuple[ClassVocabulary, MiniVLM]:
    vocab = build_vocabulary(cfg.data.K, cfg.encoder.d_tok, cfg.vocab_seed)
    a = cfg.alignment
    vlm = align_image_encoder(MiniVLM(cfg.encoder), vocab, ds.prototypes, cfg.data.noise_sigma,
                              n_per_class=a.n_per_class, ridge=a.ridge, negation=a.negation, seed=a.seed)
    return vocab, vlm


def make_world(ds: DomainDataset, vocab: ClassVocabulary, vlm: MiniVLM) -> World:
    with torch.no_grad():
        emb = vlm.encode_image(ds.x)
    return World(ds, vocab, vlm, emb)


def build_world(cfg: RunConfig) -> World:
    ds = generate_dataset(cfg.data)
    return make_world(ds, *build_encoders(cfg, ds))


# --------------------------------------------------------------------------
# stages


def train_labels(world: World, cfg: RunConfig, seed: int, domains=None) -> dict[int, DomainPromptLabelPair]:
    """Stage 1 for every requested domain; each uses only its own train/val split."""
    ds, E = world.ds, world.emb
    out = {}
    for d in (range(ds.S_total) if domains is None else domains):
        tr, va = ds.indices(d, "train"), ds.indices(d, "val")
        out[d] = train_domain_labels(E[tr], ds.labels[tr], E[va], ds.labels[va], world.vocab, world.vlm,
                                     cfg.stage1_config(), domain=d, seed=seed)
    return out


def source_indices(ds: DomainDataset, target: int, part: str) -> np.ndarray:
    return np.concatenate([ds.indices(d, part) for d in range(ds.S_total) if d != target])


def eval_noise_seed(seed: int, epoch: int = 0) -> int:
    return 100_000 + 1000 * seed + epoch


def prompt_models(world: World, gp: GeneratorPair, variant: str, seed: int, epoch: int = 0) -> PromptModels:
    return PromptModels(world.vlm, world.vocab, gp.g_pos, gp.g_neg, provenance=gp.provenance,
                        noise_seed=eval_noise_seed(seed, epoch) if variant == "single" else None)


def variant_mode(variant: str) -> str:
    return "full" if variant == "dual" else "positive_only"


def train_lodo(world: World, cfg: RunConfig, labels: dict[int, DomainPromptLabelPair], target: int,
               seed: int, variant: str, track: bool = True) -> GeneratorPair:
    """Stage 2 with ``target`` held out. ``track`` records target accuracy
    after every epoch (reporting only; training never reads it)."""
    ds, E = world.ds, world.emb
    tr, va = source_indices(ds, target, "train"), source_indices(ds, target, "val")
    src_labels = {d: p for d, p in labels.items() if d != target}
    on_epoch = None
    if track:
        def on_epoch(epoch, gp):
            m = prompt_models(world, gp, variant, seed, epoch)
            return evaluate_lodo(ds, target, m, variant_mode(variant), cfg.alpha_fuse, cfg.tau,
                                 seed, emb=E, variant=variant).accuracy
    return train_generators(E[tr], ds.domains[tr], E[va], ds.domains[va], src_labels,
                            cfg.stage2_config(variant), seed=seed, on_epoch=on_epoch)


def evaluate_variant(world: World, cfg: RunConfig, gp: GeneratorPair, target: int, seed: int,
                     variant: str) -> list[EvalReport]:
    """Dual: fused at ``alpha_fuse`` and positive-only. Single: positive-only."""
    m = prompt_models(world, gp, variant, seed)
    modes = [("full", cfg.alpha_fuse), ("positive_only", 0.0)] if variant == "dual" else [("positive_only", 0.0)]
    return [evaluate_lodo(world.ds, target, m, mode, a, cfg.tau, seed, emb=world.emb, variant=variant)
            for mode, a in modes]


def alpha_sweep(world: World, cfg: RunConfig, gp: GeneratorPair, target: int, seed: int) -> list[EvalReport]:
    m = prompt_models(world, gp, "dual", seed)
    return [evaluate_lodo(world.ds, target, m, "full", a, cfg.tau, seed, emb=world.emb, variant="dual")
            for a in cfg.alpha_grid]


@torch.no_grad()
def generated_prompts_by_domain(world: World, gp: GeneratorPair, variant: str, seed: int,
                                part: str = "test") -> dict[int, torch.Tensor]:
    """Positive-path prompts for each domain's ``part`` samples, (n, M, d_tok)."""
    m = prompt_models(world, gp, variant, seed)
    from .inference import generated_prompts
    return {d: generated_prompts(m, world.emb[world.ds.indices(d, part)], "positive")
            for d in range(world.ds.S_total)}


def fused_accuracy(world: World, models: PromptModels, idx, alpha: float, tau: float) -> float:
    s = fuse_embeddings(world.emb[idx], models, alpha, tau)
    return float((s.predicted.numpy() == world.ds.labels[idx]).mean())
