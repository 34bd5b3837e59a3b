"""Report figures. Every function writes one PNG and returns its path.

Inputs are plain rows/arrays (as read back from the CSV outputs), so the
figures can be regenerated from disk without re-running anything.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings: reruns give identical bytes
PNG_META = {"Software": None}
VARIANT_COLORS = {"dual": "tab:blue", "single": "tab:orange"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_META)
    plt.close(fig)
    return path


def accuracy_by_target(rows: list[dict], path) -> Path:
    """Grouped bars of mean target accuracy per (variant, mode) with std whiskers.

    ``rows`` carry ``target``, ``variant``, ``mode``, ``alpha``, ``accuracy``.
    """
    groups = defaultdict(list)
    for r in rows:
        groups[(r["variant"], r["mode"], float(r["alpha"]), int(r["target"]))].append(float(r["accuracy"]))
    series = sorted({k[:3] for k in groups})
    targets = sorted({k[3] for k in groups})
    width = 0.8 / max(1, len(series))
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, (variant, mode, alpha) in enumerate(series):
        vals = [groups.get((variant, mode, alpha, t), [np.nan]) for t in targets]
        x = np.arange(len(targets)) + (j - (len(series) - 1) / 2) * width
        ax.bar(x, [np.mean(v) for v in vals], width, yerr=[np.std(v) for v in vals], capsize=3,
               label=f"{variant} {mode}" + (f" a={alpha:g}" if mode == "full" else ""))
    ax.set_xticks(np.arange(len(targets)), [f"target {t}" for t in targets])
    ax.set_ylabel("held-out domain accuracy")
    ax.set_ylim(0, 1.2)
    ax.legend(fontsize=8, loc="upper center", ncol=2)
    return _save(fig, path)


def alpha_curve(rows: list[dict], path) -> Path:
    """Accuracy against the fusion weight, one line per target plus the mean."""
    by = defaultdict(list)
    for r in rows:
        by[(int(r["target"]), float(r["alpha"]))].append(float(r["accuracy"]))
    targets = sorted({t for t, _ in by})
    alphas = sorted({a for _, a in by})
    fig, ax = plt.subplots(figsize=(5, 4))
    for t in targets:
        ax.plot(alphas, [np.mean(by[(t, a)]) for a in alphas], marker="o", lw=1, alpha=0.6, label=f"target {t}")
    ax.plot(alphas, [np.mean([np.mean(by[(t, a)]) for t in targets]) for a in alphas],
            color="k", lw=2, marker="s", label="mean")
    ax.set_xlabel("alpha (fusion weight)")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    return _save(fig, path)


def accuracy_histories(histories: dict[str, list[list[float]]], path, title: str = "") -> Path:
    """Per-epoch target accuracy: mean line and min-max band per variant.

    ``histories`` maps variant -> list of per-run accuracy sequences.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, runs in sorted(histories.items()):
        A = np.asarray(runs, dtype=float)
        ep = np.arange(1, A.shape[1] + 1)
        c = VARIANT_COLORS.get(variant)
        ax.plot(ep, A.mean(axis=0), color=c, label=f"{variant} (n={len(A)})")
        ax.fill_between(ep, A.min(axis=0), A.max(axis=0), color=c, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("target accuracy")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def prompt_cloud(panels: dict[str, list[dict]], path, title: str = "") -> Path:
    """Side-by-side 2-D prompt projections, coloured by domain.

    ``panels`` maps variant -> rows with ``domain``, ``seed``, ``x``, ``y``;
    rows whose domain is ``oracle`` are drawn as stars.
    """
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4.5), squeeze=False)
    for ax, (variant, rows) in zip(axes[0], sorted(panels.items())):
        doms = sorted({r["domain"] for r in rows if r["domain"] != "oracle"}, key=int)
        for k, d in enumerate(doms):
            pts = np.array([[float(r["x"]), float(r["y"])] for r in rows if r["domain"] == d])
            ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.5, color=f"C{k}", label=f"domain {d}")
        orc = np.array([[float(r["x"]), float(r["y"])] for r in rows if r["domain"] == "oracle"])
        if len(orc):
            ax.scatter(orc[:, 0], orc[:, 1], marker="*", s=120, color="k", label="oracle")
        ax.set_title(f"{variant} {title}".strip())
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
        ax.legend(fontsize=7)
    return _save(fig, path)


def lambda_bars(rows: list[dict], path) -> Path:
    """Per-seed lambda of each variant, one group per target."""
    by = defaultdict(list)
    for r in rows:
        by[(r["variant"], int(r["target"]))].append(float(r["lambda"]))
    variants = sorted({v for v, _ in by})
    targets = sorted({t for _, t in by})
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / len(variants)
    for j, v in enumerate(variants):
        x = np.arange(len(targets)) + (j - (len(variants) - 1) / 2) * width
        vals = [by[(v, t)] for t in targets]
        ax.bar(x, [np.mean(a) for a in vals], width, yerr=[np.std(a) for a in vals], capsize=3,
               color=VARIANT_COLORS.get(v), label=v)
    ax.set_xticks(np.arange(len(targets)), [f"target {t}" for t in targets])
    ax.set_ylabel("lambda = R / D")
    ax.legend()
    return _save(fig, path)
