"""Synthetic multi-domain classification data and leave-one-domain-out splits.

Class ``c`` in domain ``d`` is sampled as ``A_d (mu_c + eps) + b_d`` where
``A_d`` is a scaled composition of seeded Givens rotations and ``b_d`` a
seeded offset, so every domain shift preserves labels.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, InvalidParameter


@dataclass(frozen=True)
class DatasetSpec:
    K: int = 5
    S_total: int = 4
    n_per_class_per_domain: int = 40
    d_raw: int = 16
    prototype_separation: float = 10.0
    domain_rotation_angle: float = 0.5
    domain_shift_scale: float = 1.5
    domain_scale_jitter: float = 0.1
    noise_sigma: float = 1.0
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise InvalidParameter("K must be >= 2")
        if self.S_total < 3:
            raise InvalidParameter("S_total must be >= 3 (two sources and one target)")
        if self.n_per_class_per_domain < 3:
            raise InvalidParameter("n_per_class_per_domain must be >= 3")
        if self.d_raw < 2:
            raise InvalidParameter("d_raw must be >= 2")
        if self.prototype_separation <= 0:
            raise InvalidParameter("prototype_separation must be positive")
        for k in ("domain_rotation_angle", "domain_shift_scale", "domain_scale_jitter", "noise_sigma"):
            if getattr(self, k) < 0:
                raise InvalidParameter(f"{k} must be nonnegative")
        if not (0 < self.val_fraction and 0 < self.test_fraction and self.val_fraction + self.test_fraction < 1):
            raise InvalidParameter("val/test fractions must be positive and sum below 1")


@dataclass
class Domain:
    transform: np.ndarray  # (d_raw, d_raw)
    shift: np.ndarray  # (d_raw,)
    noise_sigma: float


@dataclass
class DomainDataset:
    spec: DatasetSpec
    x: np.ndarray  # (N, d_raw)
    labels: np.ndarray  # (N,)
    domains: np.ndarray  # (N,)
    prototypes: np.ndarray  # (K, d_raw)
    domain_info: list[Domain]
    split: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def S_total(self) -> int:
        return self.spec.S_total

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, domain: int, part: str | None = None) -> np.ndarray:
        if part is None:
            return np.flatnonzero(self.domains == domain)
        return self.split[domain][part]


def _givens_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    R = np.eye(d)
    for _ in range(d):
        i, j = rng.choice(d, size=2, replace=False)
        theta = angle * rng.uniform(0.5, 1.5) * rng.choice((-1.0, 1.0))
        G = np.eye(d)
        c, s = np.cos(theta), np.sin(theta)
        G[i, i] = G[j, j] = c
        G[i, j], G[j, i] = -s, s
        R = G @ R
    return R


def stratified_split(labels: np.ndarray, domains: np.ndarray, spec: DatasetSpec) -> dict:
    """Per-domain train/val/test index lists, stratified by class."""
    rng = np.random.default_rng([spec.seed, 1])
    out = {}
    for d in range(spec.S_total):
        parts = {"train": [], "val": [], "test": []}
        for c in range(spec.K):
            idx = np.flatnonzero((domains == d) & (labels == c))
            idx = idx[rng.permutation(len(idx))]
            n_val = max(1, int(round(spec.val_fraction * len(idx))))
            n_test = max(1, int(round(spec.test_fraction * len(idx))))
            parts["val"].append(idx[:n_val])
            parts["test"].append(idx[n_val:n_val + n_test])
            parts["train"].append(idx[n_val + n_test:])
        out[d] = {k: np.sort(np.concatenate(v)) for k, v in parts.items()}
    return out


def generate_dataset(spec: DatasetSpec) -> DomainDataset:
    rng = np.random.default_rng([spec.seed, 0])
    K, S, n, d = spec.K, spec.S_total, spec.n_per_class_per_domain, spec.d_raw

    u = rng.standard_normal((K, d))
    prototypes = spec.prototype_separation / np.sqrt(2) * u / np.linalg.norm(u, axis=1, keepdims=True)

    domain_info = []
    for _ in range(S):
        R = _givens_rotation(d, spec.domain_rotation_angle, rng)
        scale = 1.0 + spec.domain_scale_jitter * rng.uniform(-1, 1)
        shift = spec.domain_shift_scale * rng.standard_normal(d)
        domain_info.append(Domain(scale * R, shift, spec.noise_sigma))

    xs, ys, ds = [], [], []
    for di, dom in enumerate(domain_info):
        for c in range(K):
            eps = spec.noise_sigma * rng.standard_normal((n, d))
            xs.append((prototypes[c] + eps) @ dom.transform.T + dom.shift)
            ys.append(np.full(n, c))
            ds.append(np.full(n, di))
    x = np.concatenate(xs)
    labels = np.concatenate(ys)
    domains = np.concatenate(ds)
    return DomainDataset(spec, x, labels, domains, prototypes, domain_info,
                         stratified_split(labels, domains, spec))


@dataclass
class SampleSet:
    """A subset of a dataset by index, carrying which domains it came from."""

    x: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    indices: np.ndarray

    @property
    def domain_ids(self) -> tuple[int, ...]:
        return tuple(int(d) for d in np.unique(self.domains))

    def __len__(self) -> int:
        return len(self.labels)


def subset(ds: DomainDataset, idx) -> SampleSet:
    idx = np.asarray(idx, dtype=np.int64)
    return SampleSet(ds.x[idx], ds.labels[idx], ds.domains[idx], idx)


def leave_one_out_split(ds: DomainDataset, target_domain: int) -> tuple[SampleSet, SampleSet]:
    """Sources: every sample of every other domain. Target: all target samples.

    Training only reads the train/val parts of the source side; the source
    test parts stay in the set so the two outputs partition the dataset.
    """
    if not 0 <= target_domain < ds.S_total:
        raise InvalidParameter(f"target domain {target_domain} outside [0, {ds.S_total})")
    source = np.flatnonzero(ds.domains != target_domain)
    return subset(ds, source), subset(ds, ds.indices(target_domain))


def nearest_centroid_accuracy(train: SampleSet, test: SampleSet) -> float:
    """Oracle used to confirm separability of generated data."""
    K = int(max(train.labels.max(), test.labels.max())) + 1
    cents = np.stack([train.x[train.labels == c].mean(axis=0) for c in range(K)])
    d2 = ((test.x[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d2.argmin(axis=1) == test.labels).mean())


# --------------------------------------------------------------------------
# file I/O


def dataset_csv(ds: DomainDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "label"] + [f"x{j}" for j in range(ds.spec.d_raw)])
    for xi, yi, di in zip(ds.x, ds.labels, ds.domains):
        w.writerow([int(di), int(yi)] + [repr(float(v)) for v in xi])
    return buf.getvalue()


def save_dataset(ds: DomainDataset, csv_path, meta: dict | None = None) -> Path:
    """Write the CSV and its sidecar ``<name>.json``; returns the sidecar path."""
    csv_path = Path(csv_path)
    csv_path.write_text(dataset_csv(ds))
    side = csv_path.with_suffix(".json")
    doc = {"spec": asdict(ds.spec), "n_samples": len(ds)}
    doc.update(meta or {})
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return side


def load_dataset(csv_path) -> DomainDataset:
    """Read the CSV (``#`` lines are comments); domain descriptors and splits
    are rebuilt from the sidecar spec."""
    csv_path = Path(csv_path)
    doc = json.loads(csv_path.with_suffix(".json").read_text())
    spec = DatasetSpec(**doc["spec"])
    with csv_path.open() as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    head, body = rows[0], rows[1:]
    if head[:2] != ["domain", "label"] or len(head) != 2 + spec.d_raw:
        raise InvalidInput(f"{csv_path}: unexpected header")
    arr = np.array([[float(v) for v in r] for r in body])
    domains = arr[:, 0].astype(np.int64)
    labels = arr[:, 1].astype(np.int64)
    ref = generate_dataset(spec)
    return DomainDataset(spec, arr[:, 2:], labels, domains, ref.prototypes, ref.domain_info,
                         stratified_split(labels, domains, spec))
