"""``dpspg`` command line: data, both training stages, evaluation, sweeps,
theory verification and the figure report.

Every command reads one JSON config (``--config``), applies flag
overrides on top (flag > file > default) and writes under the output
root (``--output`` > ``$DPSPG_OUTPUT_ROOT`` > config ``output_dir``).
Outputs are byte-identical when a command is rerun with the same config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checks, plotting
from .datagen import dataset_csv, load_dataset
from .diagnostics import failure_manifest, seed_sweep, sweep_manifest, sweep_tables
from .encoders import MiniVLM
from .errors import DPSPGError, InvalidState, NumericFailure, StageOrderError, ValidationError
from .generators import GeneratorPair, history_csv, load_generator, save_generator
from .inference import MODES, PromptModels, check_provenance, evaluate_lodo, reports_csv
from .pipeline import (
    VARIANTS,
    RunConfig,
    World,
    alpha_sweep,
    build_encoders,
    evaluate_variant,
    make_world,
    parse_override,
    train_labels,
    train_lodo,
)
from .promptlabels import accuracy, load_labels, negative_gap, save_labels
from .theory import checks_csv

ENV_OUTPUT = "DPSPG_OUTPUT_ROOT"
DESCRIPTIVE_CHECKS = {"linearization_ratio", "margin_sensitivity_rank_correlation"}


# --------------------------------------------------------------------------
# output directory and manifest


class RunDir:
    """Output root plus its ``manifest.json`` (config hash, stage flags,
    artifact paths and the source domains behind each artifact)."""

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = cfg.hash()
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
            if self.manifest.get("config_hash") != self.hash:
                raise InvalidState(
                    f"{self.root} holds artifacts of config {self.manifest.get('config_hash')}, "
                    f"current config is {self.hash}; use a fresh output directory")
        else:
            self.manifest = {"config_hash": self.hash, "stages": {}, "artifacts": {}, "provenance": {}}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def mark(self, stage: str, key: str | None = None) -> None:
        st = self.manifest["stages"]
        if key is None:
            st[stage] = True
        else:
            st.setdefault(stage, {})[key] = True

    def done(self, stage: str, key: str | None = None) -> bool:
        st = self.manifest["stages"].get(stage)
        if key is None:
            return bool(st)
        return isinstance(st, dict) and bool(st.get(key))

    def record(self, name: str, rel: str, provenance=None) -> None:
        self.manifest["artifacts"][name] = rel
        if provenance is not None:
            self.manifest["provenance"][rel] = sorted(int(d) for d in provenance)

    def require(self, stage: str, key: str | None, rel: str) -> Path:
        p = self.path(rel)
        if not self.done(stage, key) or not p.exists():
            raise StageOrderError(f"run '{stage}' first", missing=str(p))
        return p

    def write_csv(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(f"# config_hash={self.hash}\n" + text)
        return p

    def write_json(self, rel: str, doc: dict) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({"config_hash": self.hash, **doc}, indent=2, sort_keys=True) + "\n")
        return p

    def check_meta(self, meta: dict, path) -> None:
        if meta.get("config_hash") != self.hash:
            raise InvalidState(f"{path} was written by config {meta.get('config_hash')}, not {self.hash}")


def read_csv_rows(path) -> list[dict]:
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


DATA_CSV = "data/dataset.csv"
ENCODER = "encoder/encoder.dpv"


def labels_rel(seed: int, d: int) -> str:
    return f"seed_{seed}/labels/domain_{d}.dpl"


def gen_rel(seed: int, target: int, variant: str, polarity: str) -> str:
    return f"seed_{seed}/target_{target}/{variant}/g_{polarity[:3]}.dpg"


def gen_key(seed: int, target: int, variant: str) -> str:
    return f"{seed}/{target}/{variant}"


def load_world(run: RunDir) -> World:
    p = run.require("gen-data", None, DATA_CSV)
    side = json.loads(p.with_suffix(".json").read_text())
    run.check_meta(side, p.with_suffix(".json"))
    ds = load_dataset(p)
    vlm, vocab, meta = MiniVLM.load(run.require("gen-data", None, ENCODER))
    run.check_meta(meta, run.path(ENCODER))
    return make_world(ds, vocab, vlm)


def load_label_set(run: RunDir, seed: int, n_domains: int) -> dict:
    out = {}
    for d in range(n_domains):
        rel = labels_rel(seed, d)
        pair, meta = load_labels(run.require("train-labels", str(seed), rel))
        run.check_meta(meta, rel)
        out[d] = pair
    return out


def load_generator_pair(run: RunDir, seed: int, target: int, variant: str) -> GeneratorPair:
    key = gen_key(seed, target, variant)
    g_pos, meta = load_generator(run.require("train-generators", key, gen_rel(seed, target, variant, "positive")))
    run.check_meta(meta, gen_rel(seed, target, variant, "positive"))
    g_neg = None
    if variant == "dual":
        g_neg, m2 = load_generator(run.require("train-generators", key, gen_rel(seed, target, variant, "negative")))
        run.check_meta(m2, gen_rel(seed, target, variant, "negative"))
    prov = tuple(run.manifest["provenance"].get(gen_rel(seed, target, variant, "positive"), meta["provenance"]))
    return GeneratorPair(g_pos, g_neg, prov)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, run: RunDir, args) -> None:
    from .datagen import generate_dataset

    ds = generate_dataset(cfg.data)
    p = run.path(DATA_CSV)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(f"# config_hash={run.hash}\n" + dataset_csv(ds))
    side = {"config_hash": run.hash, "spec": cfg.to_dict()["data"], "n_samples": len(ds)}
    p.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    vocab, vlm = build_encoders(cfg, ds)
    run.path(ENCODER).parent.mkdir(parents=True, exist_ok=True)
    vlm.save(run.path(ENCODER), vocab, {"config_hash": run.hash})
    run.record("dataset", DATA_CSV)
    run.record("encoder", ENCODER)
    run.mark("gen-data")
    print(f"wrote {p} ({len(ds)} samples) and {run.path(ENCODER)}")


def cmd_train_labels(cfg: RunConfig, run: RunDir, args) -> None:
    world = load_world(run)
    ds, E = world.ds, world.emb
    rows = []
    for seed in cfg.seeds:
        labels = train_labels(world, cfg, seed)
        for d, pair in labels.items():
            rel = labels_rel(seed, d)
            run.path(rel).parent.mkdir(parents=True, exist_ok=True)
            save_labels(run.path(rel), pair, {"config_hash": run.hash, "seed": seed})
            run.record(f"labels/{seed}/{d}", rel, pair.provenance)
            tr = ds.indices(d, "train")
            rows.append([seed, d, accuracy(E[tr], ds.labels[tr], pair.positive, world.vocab, world.vlm),
                         pair.val_accuracy, pair.val_bce,
                         negative_gap(E[tr], ds.labels[tr], pair.negative, world.vocab, world.vlm),
                         pair.epoch_selected, pair.epoch_selected_neg])
        run.mark("train-labels", str(seed))
        print(f"seed {seed}: labels for {len(labels)} domains")
    head = ["seed", "domain", "train_accuracy", "val_accuracy", "val_bce", "train_negative_gap",
            "epoch_selected", "epoch_selected_neg"]
    run.write_csv("labels_summary.csv", _csv(head, rows))


def cmd_train_generators(cfg: RunConfig, run: RunDir, args) -> None:
    world = load_world(run)
    for seed in cfg.seeds:
        labels = load_label_set(run, seed, world.ds.S_total)
        for t in cfg.target_list:
            for variant in VARIANTS:
                gp = train_lodo(world, cfg, labels, t, seed, variant)
                meta = {"config_hash": run.hash, "seed": seed, "target": t, "variant": variant,
                        "provenance": list(gp.provenance)}
                for polarity, G in (("positive", gp.g_pos), ("negative", gp.g_neg)):
                    if G is None:
                        continue
                    rel = gen_rel(seed, t, variant, polarity)
                    run.path(rel).parent.mkdir(parents=True, exist_ok=True)
                    save_generator(run.path(rel), G, meta)
                    run.record(f"generator/{seed}/{t}/{variant}/{polarity}", rel, gp.provenance)
                run.write_csv(f"seed_{seed}/target_{t}/{variant}/history.csv", history_csv(gp.history))
                run.mark("train-generators", gen_key(seed, t, variant))
                print(f"seed {seed} target {t} {variant}: final loss {gp.history['loss'][-1]:.4g}, "
                      f"target acc {gp.history['eval_acc'][-1]:.3f}")


def _fixed_prompt(labels: dict, target: int) -> torch.Tensor:
    # one shared prompt: the mean of the source domains' positive labels
    return torch.stack([p.positive for d, p in sorted(labels.items()) if d != target]).mean(dim=0)


def cmd_eval(cfg: RunConfig, run: RunDir, args) -> None:
    world = load_world(run)
    targets = [args.target] if args.target is not None else cfg.target_list
    modes = [args.mode] if args.mode else list(MODES)
    for t in targets:
        if t not in cfg.target_list:
            raise ValidationError(f"target {t} not in the configured targets", field="--target")
    reports, sweep = [], []
    for seed in cfg.seeds:
        for t in targets:
            dual = load_generator_pair(run, seed, t, "dual")
            single = load_generator_pair(run, seed, t, "single")
            for variant, gp in (("dual", dual), ("single", single)):
                if t in gp.provenance:
                    from .errors import ContaminationError
                    raise ContaminationError(f"generators for target {t} were trained on it")
                for r in evaluate_variant(world, cfg, gp, t, seed, variant):
                    if r.mode in modes:
                        reports.append(r)
            if "full" in modes:
                sweep += alpha_sweep(world, cfg, dual, t, seed)
            if "fixed_prompt" in modes:
                labels = load_label_set(run, seed, world.ds.S_total)
                m = PromptModels(world.vlm, world.vocab, fixed_prompt=_fixed_prompt(labels, t),
                                 provenance=dual.provenance)
                check_provenance(m, t)
                reports.append(evaluate_lodo(world.ds, t, m, "fixed_prompt", 0.0, cfg.tau, seed,
                                             emb=world.emb, variant="fixed"))
    suffix = (f"_target{args.target}" if args.target is not None else "") + (f"_{args.mode}" if args.mode else "")
    rel = f"eval/eval{suffix}.csv"
    run.write_csv(rel, reports_csv(reports))
    run.record(f"eval{suffix}", rel)
    if sweep:
        run.write_csv(f"eval/alpha_sweep{suffix}.csv", reports_csv(sweep))
    run.mark("eval", suffix or "all")
    for key, accs in _group_means(reports).items():
        print(f"{key}: mean accuracy {accs:.4f}")


def _group_means(reports) -> dict:
    groups = {}
    for r in reports:
        groups.setdefault(f"{r.variant}/{r.mode}/alpha={r.alpha:g}", []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def cmd_sweep(cfg: RunConfig, run: RunDir, args) -> int:
    sweep = seed_sweep(cfg, jobs=args.jobs)
    files = sweep_tables(sweep) if sweep.runs else {}
    for name, text in files.items():
        run.write_csv(f"sweep/{name}", text)
    man = sweep_manifest(sweep, cfg, files)
    run.write_json("sweep/manifest.json", man)
    run.path("sweep/failures.json").write_text(failure_manifest(sweep))
    run.record("sweep", "sweep/manifest.json")
    run.mark("sweep")
    for k, v in man.get("summary", {}).items():
        print(f"{k}: {v:.4f}")
    if sweep.failures:
        for f in sweep.failures:
            print(f"seed {f['seed']} failed: {f['error']}: {f['message']}", file=sys.stderr)
        return sweep.failures[0]["exit_code"]
    return 0


def cmd_verify(cfg: RunConfig, run: RunDir, args) -> int:
    rows = checks.analytic_rows(seed=cfg.seeds[0])
    if not args.analytic_only:
        world = load_world(run)
        seed, t = cfg.seeds[0], cfg.target_list[0]
        gp = load_generator_pair(run, seed, t, "dual")
        m = PromptModels(world.vlm, world.vocab, gp.g_pos, gp.g_neg, provenance=gp.provenance)
        idx = world.ds.indices(t, "test")[: args.samples]
        rows += checks.pipeline_rows(m, world.ds.x[idx], world.ds.labels[idx], cfg.alpha_fuse, cfg.tau, seed=seed)
    run.write_csv("verify/theory_checks.csv", checks_csv(rows))
    run.mark("verify")
    failed = [r for r in rows if not r.passed and r.check not in DESCRIPTIVE_CHECKS]
    by = {}
    for r in rows:
        n, k = by.get(r.check, (0, 0))
        by[r.check] = (n + 1, k + int(r.passed))
    for name, (n, k) in by.items():
        print(f"{name}: {k}/{n} pass" + (" (descriptive)" if name in DESCRIPTIVE_CHECKS else ""))
    if failed:
        raise NumericFailure(f"{len(failed)} verification checks failed")
    return 0


def cmd_report(cfg: RunConfig, run: RunDir, args) -> None:
    rel = "eval/eval.csv"
    evals = read_csv_rows(run.require("eval", "all", rel))
    out = []
    groups = {}
    for r in evals:
        groups.setdefault((r["variant"], r["mode"], r["alpha"]), []).append(float(r["accuracy"]))
    for (variant, mode, alpha), accs in sorted(groups.items()):
        out.append(["accuracy", f"{variant}/{mode}/alpha={alpha}", float(np.mean(accs)), len(accs)])
    figs = [plotting.accuracy_by_target(evals, run.path("report/accuracy_by_target.png"))]
    sweep_rel = run.path("eval/alpha_sweep.csv")
    if sweep_rel.exists():
        figs.append(plotting.alpha_curve(read_csv_rows(sweep_rel), run.path("report/alpha_curve.png")))

    for t in cfg.target_list:
        hists = {}
        for variant in VARIANTS:
            for seed in cfg.seeds:
                p = run.path(f"seed_{seed}/target_{t}/{variant}/history.csv")
                if p.exists():
                    rows = read_csv_rows(p)
                    if rows and "eval_acc" in rows[0]:
                        hists.setdefault(variant, []).append([float(r["eval_acc"]) for r in rows])
        if hists:
            figs.append(plotting.accuracy_histories(hists, run.path(f"report/history_target{t}.png"),
                                                    f"held-out domain {t}"))

    sw = run.path("sweep/manifest.json")
    if sw.exists():
        doc = json.loads(sw.read_text())
        for k, v in sorted(doc.get("summary", {}).items()):
            out.append(["sweep", k, v, len(doc.get("completed_seeds", []))])
        figs.append(plotting.lambda_bars(read_csv_rows(run.path("sweep/variability_per_seed.csv")),
                                         run.path("report/lambda.png")))
        for t in cfg.target_list:
            panels = {v: read_csv_rows(run.path(f"sweep/projection_{v}_target{t}.csv"))
                      for v in VARIANTS if run.path(f"sweep/projection_{v}_target{t}.csv").exists()}
            if panels:
                figs.append(plotting.prompt_cloud(panels, run.path(f"report/prompts_target{t}.png"),
                                                  f"(held-out {t})"))
    vp = run.path("verify/theory_checks.csv")
    if vp.exists():
        by = {}
        for r in read_csv_rows(vp):
            n, k = by.get(r["check"], (0, 0))
            by[r["check"]] = (n + 1, k + (r["pass"] == "true"))
        for name, (n, k) in sorted(by.items()):
            out.append(["verify", name, k / n, n])
    run.write_csv("report/summary.csv", _csv(["section", "key", "value", "n"], out))
    run.mark("report")
    for section, key, value, n in out:
        print(f"{section:9s} {key:45s} {value:.4f} (n={n})")
    print("figures: " + ", ".join(str(f.relative_to(run.root)) for f in figs))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset and the frozen encoders"),
    "train-labels": (cmd_train_labels, "stage 1: per-domain positive and negative prompt labels"),
    "train-generators": (cmd_train_generators, "stage 2: dual and noisy single-path generators per held-out domain"),
    "eval": (cmd_eval, "held-out domain accuracy per seed, target and mode"),
    "sweep": (cmd_sweep, "full pipeline over all seeds with variability/stability aggregates"),
    "verify": (cmd_verify, "numeric checks of the margin and gradient-norm analysis"),
    "report": (cmd_report, "summary CSV and figures from existing outputs"),
}


# --------------------------------------------------------------------------
# argument handling


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", type=Path, help="JSON config file (per-stage sections)")
    common.add_argument("--output", type=Path, help=f"output root (overrides ${ENV_OUTPUT} and output_dir)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. stage2.lr=1e-3 (repeatable)")
    common.add_argument("--seeds", type=_int_list, help="comma-separated run seeds")
    common.add_argument("--targets", type=_int_list, help="comma-separated held-out domains")
    common.add_argument("--alpha", type=float, help="fusion weight alpha_fuse")
    common.add_argument("--tau", type=float, help="softmax temperature")

    parser = argparse.ArgumentParser(prog="dpspg", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text, allow_abbrev=False)
        if name == "eval":
            sp.add_argument("--target", type=int, help="evaluate one held-out domain only")
            sp.add_argument("--mode", choices=MODES, help="evaluate one inference mode only")
        elif name == "sweep":
            sp.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
        elif name == "verify":
            sp.add_argument("--analytic-only", action="store_true",
                            help="skip the checks that need trained generators")
            sp.add_argument("--samples", type=int, default=20, help="target samples for input-sensitivity checks")
    return parser


def resolve_config(args) -> tuple[RunConfig, Path]:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {args.config} not found", field="--config")
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file is not valid JSON: {e}", field="--config")
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold a JSON object", field="--config")
    for a in args.overrides:
        parse_override(doc, a)
    for flag, key in (("seeds", "seeds"), ("targets", "targets"), ("alpha", "alpha_fuse"), ("tau", "tau")):
        v = getattr(args, flag)
        if v is not None:
            doc[key] = v
    if getattr(args, "jobs", 1) < 1:
        raise ValidationError("--jobs must be at least 1", field="--jobs")
    cfg = RunConfig.from_dict(doc)
    root = args.output or os.environ.get(ENV_OUTPUT) or cfg.output_dir
    return cfg, Path(root)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg, root = resolve_config(args)
        run = RunDir(root, cfg)
        fn = COMMANDS[args.command][0]
        code = fn(cfg, run, args) or 0
        run.save_manifest()
        return code
    except DPSPGError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
