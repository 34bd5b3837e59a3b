"""Prompt variability, training stability, oracle prompts and seed sweeps.

Variability of generated prompts is measured as ``lambda = R / D``: ``R_d``
is the mean pairwise Euclidean distance among the flattened prompts of
domain ``d`` (pooled over seeds) and ``D`` the mean pairwise distance
between the per-domain prompt centroids. Lower is better: prompts that
barely move across seeds yet stay apart across domains.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import pdist

from .errors import InvalidInput
from .generators import GeneratorPair
from .inference import EvalReport, reports_csv
from .promptlabels import DomainPromptLabelPair, Stage1Config, accuracy, train_domain_labels

R_DEFINITION = "mean pairwise Euclidean distance among flattened prompts of one domain, pooled over seeds"
D_DEFINITION = "mean pairwise Euclidean distance between per-domain prompt centroids"


@dataclass
class VariabilityReport:
    R: dict[int, float]
    D: float
    lambdas: dict[int, float]
    target: int | None = None

    @property
    def lam(self) -> float:
        """lambda of the target domain, or the mean over domains without one."""
        if self.target is not None:
            return self.lambdas[self.target]
        return float(np.mean(list(self.lambdas.values())))


def _flat(prompts) -> np.ndarray:
    arr = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in prompts])
    return arr


def variability(prompt_sets: dict, target: int | None = None) -> VariabilityReport:
    """``prompt_sets`` maps domain -> list of prompts (any shape; flattened)."""
    if len(prompt_sets) < 2:
        raise InvalidInput("variability needs at least two domains")
    R, cents = {}, []
    for d in sorted(prompt_sets):
        P = _flat(prompt_sets[d])
        if len(P) < 2:
            raise InvalidInput(f"domain {d} has fewer than two prompts")
        R[d] = float(pdist(P).mean())
        cents.append(P.mean(axis=0))
    D = float(pdist(np.stack(cents)).mean())
    if D == 0:
        raise InvalidInput("all domain centroids coincide; lambda undefined")
    if target is not None and target not in R:
        raise InvalidInput(f"target domain {target} has no prompts")
    return VariabilityReport(R, D, {d: r / D for d, r in R.items()}, target)


@dataclass
class StabilityReport:
    accuracy_history: list[float]
    std_last_10: float
    final_accuracy: float


def training_stability(history) -> StabilityReport:
    h = [float(a) for a in history]
    if len(h) < 10:
        raise InvalidInput(f"need at least 10 recorded epochs, got {len(h)}")
    return StabilityReport(h, float(np.std(h[-10:])), h[-1])


def oracle_prompt(world, target: int, config: Stage1Config, seed: int = 0) -> DomainPromptLabelPair:
    """Stage 1 fitted on the held-out domain itself; tagged oracle so it can
    never train or stand in for an evaluation model."""
    ds, E = world.ds, world.emb
    tr, va = ds.indices(target, "train"), ds.indices(target, "val")
    pair = train_domain_labels(E[tr], ds.labels[tr], E[va], ds.labels[va], world.vocab, world.vlm,
                               config, domain=target, seed=seed, negative=False)
    pair.oracle = True
    return pair


@dataclass
class Projection:
    coords: np.ndarray  # (n, 2)
    mean: np.ndarray
    components: np.ndarray  # (2, dim)
    rank_deficient: bool
    explained_variance: np.ndarray

    def transform(self, prompts) -> np.ndarray:
        return (_flat(prompts) - self.mean) @ self.components.T


def project_2d(prompts) -> Projection:
    """Top-2 principal component coordinates.

    Each component is signed so that its first non-negligible loading is
    positive. With fewer than two varying directions the second coordinate
    is zeroed and ``rank_deficient`` set.
    """
    X = _flat(prompts)
    if len(X) < 3:
        raise InvalidInput("projection needs at least three prompts")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    tol = 1e-10 * max(1.0, float(s[0]) if len(s) else 0.0)
    rank = int((s > tol).sum())
    for k in range(min(2, rank)):
        v = vt[k]
        lead = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())[0]
        comps[k] = v if v[lead] >= 0 else -v
    coords = Xc @ comps.T
    var = np.zeros(2)
    var[:min(2, len(s))] = (s[:2] ** 2) / len(X)
    return Projection(coords, mean, comps, rank < 2, var)


# --------------------------------------------------------------------------
# seed sweep


@dataclass
class TargetRun:
    target: int
    reports: list[EvalReport]  # dual full/positive_only, single positive_only
    alpha_sweep: list[EvalReport]
    histories: dict[str, dict]  # variant -> generator history
    prompts: dict[str, dict[int, np.ndarray]]  # variant -> domain -> (n, M, d_tok)
    oracle_positive: np.ndarray
    oracle_accuracy: float
    generators: dict[str, GeneratorPair] = field(default_factory=dict)


@dataclass
class SeedRun:
    seed: int
    labels: dict[int, DomainPromptLabelPair]
    targets: dict[int, TargetRun]


@dataclass
class SweepResult:
    seeds: list[int]
    runs: dict[int, SeedRun]
    failures: list[dict]

    def reports(self) -> list[EvalReport]:
        return [r for s in self.seeds if s in self.runs for t in sorted(self.runs[s].targets)
                for r in self.runs[s].targets[t].reports]


def run_seed(world, cfg, seed: int, keep_generators: bool = False) -> SeedRun:
    from . import pipeline as pl

    labels = pl.train_labels(world, cfg, seed)
    out = {}
    for t in cfg.target_list:
        reports, hists, prompts, gens = [], {}, {}, {}
        sweep = []
        for variant in pl.VARIANTS:
            gp = pl.train_lodo(world, cfg, labels, t, seed, variant)
            reports += pl.evaluate_variant(world, cfg, gp, t, seed, variant)
            if variant == "dual":
                sweep = pl.alpha_sweep(world, cfg, gp, t, seed)
            hists[variant] = gp.history
            prompts[variant] = {d: p.numpy() for d, p in pl.generated_prompts_by_domain(world, gp, variant, seed).items()}
            if keep_generators:
                gens[variant] = gp
        orc = oracle_prompt(world, t, cfg.stage1_config(), seed)
        te = world.ds.indices(t, "test")
        oacc = accuracy(world.emb[te], world.ds.labels[te], orc.positive, world.vocab, world.vlm)
        out[t] = TargetRun(t, reports, sweep, hists, prompts, orc.positive.numpy(), oacc, gens)
    return SeedRun(seed, labels, out)


def _seed_job(args):
    cfg_dict, seed = args
    from .pipeline import RunConfig, build_world

    torch.set_num_threads(1)
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        return seed, run_seed(build_world(cfg), cfg, seed), None
    except Exception as e:  # recorded in the failure manifest
        return seed, None, _failure(seed, e)


def _failure(seed: int, e: Exception) -> dict:
    return {"seed": seed, "error": type(e).__name__, "message": str(e),
            "exit_code": getattr(e, "exit_code", 1),
            "trace": traceback.format_exception_only(type(e), e)[-1].strip()}


def seed_sweep(cfg, seeds=None, jobs: int = 1, world=None, keep_generators: bool = False) -> SweepResult:
    """Full pipeline per seed (data and encoders fixed, training re-seeded).

    Runs that raise are recorded in ``failures`` and skipped by the
    aggregates. ``jobs > 1`` runs seeds in separate processes; results do
    not depend on ``jobs``.
    """
    from .pipeline import build_world

    seeds = list(cfg.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise InvalidInput("a sweep needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise InvalidInput("sweep seeds must be distinct")
    runs, failures = {}, []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for seed, run, fail in pool.map(_seed_job, [(cfg.to_dict(), s) for s in seeds]):
                if fail:
                    failures.append(fail)
                else:
                    runs[seed] = run
    else:
        world = world if world is not None else build_world(cfg)
        for s in seeds:
            try:
                runs[s] = run_seed(world, cfg, s, keep_generators)
            except Exception as e:
                failures.append(_failure(s, e))
    return SweepResult(seeds, runs, failures)


# --------------------------------------------------------------------------
# aggregation


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def pooled_variability(sweep: SweepResult, variant: str, target: int) -> VariabilityReport:
    ok = [s for s in sweep.seeds if s in sweep.runs]
    domains = sorted(sweep.runs[ok[0]].targets[target].prompts[variant])
    sets = {d: [p for s in ok for p in sweep.runs[s].targets[target].prompts[variant][d]] for d in domains}
    return variability(sets, target)


def per_seed_variability(sweep: SweepResult, variant: str, target: int, seed: int) -> VariabilityReport:
    return variability(dict(sweep.runs[seed].targets[target].prompts[variant]), target)


def _targets(sweep: SweepResult) -> list[int]:
    ok = [s for s in sweep.seeds if s in sweep.runs]
    return sorted(sweep.runs[ok[0]].targets) if ok else []


def _ok_seeds(sweep):
    return [s for s in sweep.seeds if s in sweep.runs]


def mean_lambda(sweep: SweepResult, variant: str) -> float:
    return float(np.mean([pooled_variability(sweep, variant, t).lam for t in _targets(sweep)]))


def mean_std_last_10(sweep: SweepResult, variant: str) -> float:
    vals = [training_stability(sweep.runs[s].targets[t].histories[variant]["eval_acc"]).std_last_10
            for s in _ok_seeds(sweep) for t in _targets(sweep)]
    return float(np.mean(vals))


def mean_accuracy(sweep: SweepResult, variant: str, mode: str) -> float:
    vals = [r.accuracy for r in sweep.reports() if r.variant == variant and r.mode == mode]
    return float(np.mean(vals))


def oracle_distances(sweep: SweepResult, seed: int, target: int) -> dict[str, float]:
    tr = sweep.runs[seed].targets[target]
    o = tr.oracle_positive.reshape(-1)
    return {v: float(np.linalg.norm(tr.prompts[v][target].reshape(len(tr.prompts[v][target]), -1) - o, axis=1).mean())
            for v in tr.prompts}


def sweep_tables(sweep: SweepResult) -> dict[str, str]:
    """Every aggregate as CSV text, keyed by file name. Pure function of the sweep."""
    seeds, targets = _ok_seeds(sweep), _targets(sweep)
    files = {}
    files["accuracy.csv"] = reports_csv(sweep.reports()) if seeds else "target,variant,mode,alpha,tau,seed,accuracy\n"

    summary = []
    keys = sorted({(r.variant, r.mode, r.alpha) for r in sweep.reports()})
    for variant, mode, alpha in keys:
        for t in targets + ["all"]:
            acc = [r.accuracy for r in sweep.reports()
                   if (r.variant, r.mode, r.alpha) == (variant, mode, alpha) and (t == "all" or r.target_domain == t)]
            summary.append([variant, mode, alpha, t, float(np.mean(acc)), float(np.std(acc)), len(acc)])
    files["accuracy_summary.csv"] = _csv(["variant", "mode", "alpha", "target", "mean", "std", "n"], summary)

    rows = [r.csv_row() for s in seeds for t in targets for r in sweep.runs[s].targets[t].alpha_sweep]
    head = ["target", "variant", "mode", "alpha", "tau", "seed", "accuracy"]
    K = len(sweep.runs[seeds[0]].targets[targets[0]].reports[0].per_class_accuracy) if seeds else 0
    files["alpha_sweep.csv"] = _csv(head + [f"class{c}" for c in range(K)], rows)

    var_rows, seed_rows = [], []
    for variant in ("dual", "single"):
        for t in targets:
            rep = pooled_variability(sweep, variant, t)
            for d in sorted(rep.R):
                var_rows.append([variant, t, d, rep.R[d], rep.D, rep.lambdas[d]])
            for s in seeds:
                ps = per_seed_variability(sweep, variant, t, s)
                seed_rows.append([variant, t, s, ps.R[t], ps.D, ps.lam])
    files["variability.csv"] = _csv(["variant", "target", "domain", "R", "D", "lambda"], var_rows)
    files["variability_per_seed.csv"] = _csv(["variant", "target", "seed", "R", "D", "lambda"], seed_rows)

    stab, hist = [], []
    for variant in ("dual", "single"):
        for t in targets:
            for s in seeds:
                h = sweep.runs[s].targets[t].histories[variant]
                st = training_stability(h["eval_acc"])
                stab.append([variant, t, s, st.std_last_10, st.final_accuracy])
                for e, (loss, acc) in enumerate(zip(h["loss"], h["eval_acc"]), start=1):
                    hist.append([variant, t, s, e, loss, acc])
    files["stability.csv"] = _csv(["variant", "target", "seed", "std_last_10", "final_accuracy"], stab)
    files["history.csv"] = _csv(["variant", "target", "seed", "epoch", "loss", "eval_acc"], hist)

    orc = []
    for t in targets:
        for s in seeds:
            tr = sweep.runs[s].targets[t]
            dist = oracle_distances(sweep, s, t)
            acc = {(r.variant, r.mode): r.accuracy for r in tr.reports}
            orc.append([t, s, tr.oracle_accuracy, acc[("dual", "full")], acc[("single", "positive_only")],
                        dist["dual"], dist["single"]])
    files["oracle.csv"] = _csv(["target", "seed", "oracle_accuracy", "dual_accuracy", "single_accuracy",
                                "dual_distance", "single_distance"], orc)

    for variant in ("dual", "single"):
        for t in targets:
            files[f"projection_{variant}_target{t}.csv"] = projection_csv(sweep, variant, t)
    return files


def projection_csv(sweep: SweepResult, variant: str, target: int) -> str:
    """``domain,seed,x,y`` for every generated test prompt; oracle prompts are
    projected into the same plane with domain ``oracle``."""
    seeds = _ok_seeds(sweep)
    tags, pts = [], []
    for s in seeds:
        for d, P in sorted(sweep.runs[s].targets[target].prompts[variant].items()):
            tags += [(d, s)] * len(P)
            pts += list(P)
    proj = project_2d(pts)
    rows = [[d, s, float(x), float(y)] for (d, s), (x, y) in zip(tags, proj.coords)]
    oc = proj.transform([sweep.runs[s].targets[target].oracle_positive for s in seeds])
    rows += [["oracle", s, float(x), float(y)] for s, (x, y) in zip(seeds, oc)]
    return _csv(["domain", "seed", "x", "y"], rows)


def sweep_manifest(sweep: SweepResult, cfg, files: dict[str, str]) -> dict:
    seeds = _ok_seeds(sweep)
    doc = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seeds": list(sweep.seeds),
        "completed_seeds": seeds,
        "failed_seeds": [f["seed"] for f in sweep.failures],
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__},
        "definitions": {"R": R_DEFINITION, "D": D_DEFINITION, "lambda": "R of the held-out domain / D",
                        "std_last_10": "population std of the last 10 per-epoch target accuracies"},
        "files": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
    }
    if seeds:
        doc["summary"] = {
            "accuracy_dual_full": mean_accuracy(sweep, "dual", "full"),
            "accuracy_dual_positive_only": mean_accuracy(sweep, "dual", "positive_only"),
            "accuracy_single": mean_accuracy(sweep, "single", "positive_only"),
            "lambda_dual": mean_lambda(sweep, "dual"),
            "lambda_single": mean_lambda(sweep, "single"),
            "std_last_10_dual": mean_std_last_10(sweep, "dual"),
            "std_last_10_single": mean_std_last_10(sweep, "single"),
        }
    return doc


def failure_manifest(sweep: SweepResult) -> str:
    return json.dumps({"failures": sweep.failures}, indent=2, sort_keys=True) + "\n"


def first_failure_code(sweep: SweepResult) -> int:
    return sweep.failures[0]["exit_code"] if sweep.failures else 0

