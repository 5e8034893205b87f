"""Command line driver: every stage of a distillation run, plus sweeps.

Each subcommand reads its prerequisites from the run directory, writes its
artifacts there, records the resolved configuration as ``resolved.ini`` and
merges a machine-readable entry into ``summary.json``.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as D
from . import evalharness as ev
from . import matching, scheduler, scoring, trajectory
from .config import ConfigError, ExperimentConfig, preset_names, validate_config
from .nets import FlatParams, init_params
from .tensorio import save_tensor
from .training import sgd_train

# artifact -> subcommand that produces it
PRODUCERS = {
    "data": "gen-data",
    "scores.csv": "score",
    "plan.csv": "schedule",
    "buffer.ptb": "buffer",
    "synthetic": "distill",
}
STAGES = ("gen-data", "score", "schedule", "buffer", "distill", "evaluate")

# ablation axis -> (config key, first stage that must be rerun)
AXES = {
    "prune_ratio": ("prune.ratio", "schedule"),
    "mask_ratio": ("matcher.mask_ratio", "distill"),
    "mask_mode": ("matcher.mask_mode", "distill"),
    "removal_mode": ("scheduler.removal_mode", "schedule"),
}


class MissingArtifact(RuntimeError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class Run:
    """A configuration bound to an output directory."""

    def __init__(self, cfg: ExperimentConfig, out: str):
        self.cfg = cfg
        self.out = out
        os.makedirs(out, exist_ok=True)

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def need(self, artifact: str) -> str:
        p = self.path(artifact)
        if not os.path.exists(p):
            raise MissingArtifact(f"missing {p}; run the '{PRODUCERS[artifact]}' "
                                  f"subcommand first")
        return p

    def write_resolved(self) -> None:
        with open(self.path("resolved.ini"), "w") as fh:
            fh.write(self.cfg.to_text())

    def update_summary(self, stage: str, entry: dict) -> None:
        p = self.path("summary.json")
        summary = {}
        if os.path.exists(p):
            with open(p) as fh:
                summary = json.load(fh)
        summary[stage] = entry
        with open(p, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # ------------------------------------------------------------ loaders

    def train_set(self) -> D.LabeledDataset:
        return D.load_dataset(os.path.join(self.need("data"), "train"))

    def test_set(self) -> D.LabeledDataset:
        return D.load_dataset(os.path.join(self.need("data"), "test"))

    def scores(self) -> scoring.DifficultyScores:
        return scoring.load_scores(self.need("scores.csv"))

    def real_set(self) -> tuple[D.LabeledDataset, np.ndarray | None]:
        """Training data after the optional difficulty pruning, and its ranking."""
        ds = self.train_set()
        pr = self.cfg["prune"]
        sched = self.cfg.scheduler_config()
        needs_scores = pr["ratio"] > 0 or sched.initial_ratio < 1 or sched.removal_active
        if not needs_scores:
            return ds, None
        scores = self.scores()
        if len(scores.scores) != len(ds):
            raise ValueError(f"scores cover {len(scores.scores)} samples, dataset has {len(ds)}")
        if pr["ratio"] > 0:
            ds, keep = matching.fiex_prune_for_dc_dm(ds, scores, pr["regime"], pr["ratio"])
            return ds, scoring.rank(scores.scores[keep])
        return ds, scores.ranking


# ------------------------------------------------------------------ stages

def stage_gen_data(run: Run) -> dict:
    c = run.cfg["dataset"]
    if c["kind"] == "blobs":
        args = (c["classes"], c["per_class"], c["shape"], c["spread"], c["seed"], c["separation"])
        train = D.gen_blobs(*args, split="train")
        test = D.gen_blobs(c["classes"], c["test_per_class"], *args[2:], split="test")
    else:
        train, test = D.load_idx_images(c["path"]), D.load_idx_images(c["test_path"])
        if train.image_shape != tuple(c["shape"]):
            raise ValueError(f"{c['path']} holds images of shape {train.image_shape}, "
                             f"config says {tuple(c['shape'])}")
    if c["zca"]:
        train, stats = D.zca_fit_apply(train, c["zca_eps"])
        test = D.apply_zca(test, stats)
        for name in ("mean", "matrix", "inverse"):
            os.makedirs(run.path("data"), exist_ok=True)
            save_tensor(run.path("data", f"zca_{name}.f64"), getattr(stats, name))
    D.save_dataset(train, run.path("data", "train"), c["seed"])
    D.save_dataset(test, run.path("data", "test"), c["seed"])
    return {"train": len(train), "test": len(test), "classes": train.num_classes,
            "zca": c["zca"], "train_hash": train.hash}


def stage_score(run: Run) -> dict:
    ds = run.train_set()
    c = run.cfg["scorer"]
    spec = run.cfg.network_spec()
    seed = run.cfg["experiment"]["seed"]
    if c["kind"] == "el2n":
        scores = scoring.el2n(ds, spec, c["epochs"], c["models"], seed, c["lr"], c["batch"],
                              run.cfg["experiment"]["workers"])
    else:
        theta = sgd_train(spec, init_params(spec, seed).values, ds.images, ds.one_hot(),
                          c["epochs"], c["lr"], c["batch"], np.random.default_rng(seed))
        params = FlatParams(theta, init_params(spec, seed).offsets, spec.hash)
        fn = scoring.loss_score if c["kind"] == "loss" else scoring.uncertainty_score
        scores = fn(ds, params, spec)
    scoring.save_scores(scores, run.path("scores.csv"))
    return {"scorer": c["kind"], "n": len(ds), "mean": float(scores.scores.mean()),
            "min": float(scores.scores.min()), "max": float(scores.scores.max())}


def _plan(run: Run):
    ds, ranking = run.real_set()
    if ranking is None:
        ranking = np.arange(len(ds))
    return ds, scheduler.build_plan(ranking, run.cfg.scheduler_config())


def stage_schedule(run: Run) -> dict:
    ds, plan = _plan(run)
    table = plan.table()
    with open(run.path("plan.csv"), "w") as fh:
        fh.write(table)
    print(table, end="")
    sizes = [plan.set_size(e) for e in range(plan.epochs)]
    return {"n": plan.n, "epochs": plan.epochs, "first_size": sizes[0], "last_size": sizes[-1],
            "plan_hash": plan.hash}


def stage_buffer(run: Run) -> dict:
    ds, plan = _plan(run)
    b = run.cfg["buffer"]
    spec = run.cfg.network_spec()
    buf = trajectory.train_buffer(ds, plan, spec, b["experts"], b["epochs"], b["lr"], b["batch"],
                                  b["seed"], run.cfg["experiment"]["workers"])
    trajectory.save_buffer(buf, run.path("buffer.ptb"))
    accs = [float(t.train_acc[-1]) for t in buf.trajectories]
    return {"experts": len(buf), "epochs": buf.epochs, "n_train": len(ds),
            "final_train_acc_mean": float(np.mean(accs)), "plan_hash": plan.hash}


def stage_distill(run: Run) -> dict:
    cfg = run.cfg
    m = cfg["matcher"]
    seed = cfg["experiment"]["seed"]
    spec = cfg.network_spec()
    full = run.train_set()
    records_path = run.path("metrics.jsonl")
    out = open(records_path, "w")

    def log(rec):
        out.write(json.dumps({"type": "distill", **rec}) + "\n")

    try:
        if m["algorithm"] == "tm":
            buf = trajectory.load_buffer(run.need("buffer.ptb"), spec.hash)
            expert = None
            if m["label_init"] == "expert_soft":
                traj = buf.trajectories[0]
                expert = (spec, traj.params(traj.epochs, spec))
            syn0 = D.init_synthetic(full, m["ipc"], seed, m["label_init"], expert)
            syn, metrics = matching.distill_tm(syn0, buf, spec, cfg.tm_config(),
                                               cfg.mask_spec(), seed, log)
        else:
            real, _ = run.real_set()
            syn0 = D.init_synthetic(full, m["ipc"], seed)
            sc = cfg.surrogate_config()
            if m["algorithm"] == "dc":
                syn, metrics = matching.distill_dc(syn0, real, spec, sc, cfg.mask_spec(), seed,
                                                   log=log)
            else:
                layers = list(m["dm_layers"]) or matching.dm_layers_from_ratio(
                    spec, m["mask_ratio"])
                syn, metrics = matching.distill_dm(syn0, real, spec, sc, layers, seed, log=log)
    finally:
        out.close()
    D.save_synthetic(syn, run.path("synthetic"), cfg.to_text())
    losses = [r["loss"] for r in metrics]
    w = max(1, len(losses) // 10)
    return {"algorithm": m["algorithm"], "ipc": m["ipc"], "arch": spec.arch,
            "iterations": len(losses), "mask_ratio": m["mask_ratio"], "mask_mode": m["mask_mode"],
            "first_loss": float(np.mean(losses[:w])) if losses else None,
            "final_loss": float(np.mean(losses[-w:])) if losses else None,
            "synthetic_hash": syn.hash}


def stage_evaluate(run: Run) -> dict:
    cfg = run.cfg
    e = cfg["eval"]
    syn = D.load_synthetic(run.need("synthetic"))
    test = run.test_set()
    ecfg = cfg.eval_config()
    workers = cfg["experiment"]["workers"]
    reports = []
    for arch in e["archs"]:
        spec = cfg.network_spec(arch)
        reports.append(ev.evaluate(syn, test, spec, ecfg, e["seeds"], workers, "distilled"))
        if e["random_baseline"]:
            base = ev.random_coreset(run.train_set(), syn.ipc, cfg["experiment"]["seed"])
            reports.append(ev.evaluate(base, test, spec, ecfg, e["seeds"], workers, "random"))
    with open(run.path("metrics.jsonl"), "a") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record()) + "\n")
    for r in reports:
        print(f"{r.label:>9} {r.summary()}")
    m = cfg["matcher"]
    return {"algorithm": m["algorithm"], "ipc": m["ipc"], "mask_ratio": m["mask_ratio"],
            "mask_mode": m["mask_mode"], "prune_ratio": cfg["prune"]["ratio"],
            "initial_ratio": cfg["scheduler"]["initial_ratio"],
            "addition_end_epoch": cfg["scheduler"]["addition_end_epoch"],
            "removal_ratio": cfg["scheduler"]["removal_ratio"],
            "reports": [{"arch": r.arch, "label": r.label, "mean": r.mean, "std": r.std}
                        for r in reports]}


STAGE_FNS = {
    "gen-data": stage_gen_data,
    "score": stage_score,
    "schedule": stage_schedule,
    "buffer": stage_buffer,
    "distill": stage_distill,
    "evaluate": stage_evaluate,
}


def run_stage(run: Run, stage: str) -> dict:
    t0 = time.process_time()
    entry = STAGE_FNS[stage](run)
    run.write_resolved()
    run.update_summary(stage, entry)
    _log(f"[{stage}] done in {time.process_time() - t0:.1f} CPU-s")
    return entry


def run_pipeline(run: Run, stages=STAGES) -> None:
    for stage in stages:
        run_stage(run, stage)


# ---------------------------------------------------------------- ablation

def _ablate_point(args):
    text, overrides, src, out, first = args
    cfg, diags = ExperimentConfig.parse(text, "<ablate>", overrides)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise ConfigError(errors)
    run = Run(cfg, out)
    for artifact in ("data", "scores.csv", "plan.csv", "buffer.ptb"):
        stage = PRODUCERS[artifact]
        if STAGES.index(stage) >= STAGES.index(first):
            break
        source = os.path.join(src, artifact)
        if os.path.isdir(source):
            shutil.copytree(source, run.path(artifact), dirs_exist_ok=True)
        elif os.path.exists(source):
            shutil.copy2(source, run.path(artifact))
    run_pipeline(run, STAGES[STAGES.index(first):])
    with open(run.path("summary.json")) as fh:
        return json.load(fh)


def ablate(run: Run, axis: str, values: list[str], workers: int) -> list[dict]:
    key, first = AXES[axis]
    algorithm = run.cfg["matcher"]["algorithm"]
    if algorithm != "tm" and first == "schedule":
        first = "distill"  # surrogate matchers read the real set directly
    # shared prefix of the pipeline, run once in the parent directory
    for stage in STAGES[:STAGES.index(first)]:
        artifact = next((a for a, s in PRODUCERS.items() if s == stage), None)
        if artifact is None or not os.path.exists(run.path(artifact)):
            run_stage(run, stage)
    text = run.cfg.to_text()
    jobs = []
    for v in values:
        point = run.path("ablate", f"{axis}={v}")
        jobs.append((text, [f"{key}={v}", "experiment.workers=1", f"experiment.out={point}"],
                     run.out, point, first))
    if workers > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            summaries = list(pool.map(_ablate_point, jobs))
    else:
        summaries = [_ablate_point(j) for j in jobs]
    rows = []
    for v, s in zip(values, summaries):
        row = {"axis": axis, "value": v, "final_loss": s.get("distill", {}).get("final_loss")}
        for r in s.get("evaluate", {}).get("reports", []):
            row[f"{r['label']}_{r['arch']}"] = {"mean": r["mean"], "std": r["std"]}
        rows.append(row)
        print(json.dumps(row))
    with open(run.path(f"ablate_{axis}.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    return rows


# ------------------------------------------------------------------ report

def report(run_dir: str) -> int:
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {path}; run the 'distill' subcommand first")
    losses, evals = [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") == "distill":
                losses.append(rec["loss"])
            elif rec.get("type") == "eval":
                evals.append(rec)
    if losses:
        w = max(1, len(losses) // 10)
        print(f"distill: {len(losses)} iterations, loss {np.mean(losses[:w]):.4f} "
              f"(first 10%) -> {np.mean(losses[-w:]):.4f} (last 10%)")
    for r in evals:
        print(f"{r['label'] or 'eval':>9} {r['arch']}: {100 * r['mean']:.2f} ± "
              f"{100 * r['std']:.2f} over seeds {r['seeds']}")
    return 0


# --------------------------------------------------------------- arguments

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="padistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", default="blobs-ipc10" if needs_config else None,
                        help=f"config file or preset ({', '.join(preset_names())})")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--out", help="run directory (default: experiment.out)")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--workers", type=int, help="override experiment.workers")

    for name in STAGES:
        common(sub.add_parser(name, help=f"run the {name} stage"))
    common(sub.add_parser("pipeline", help="run every stage in order"))
    sp = sub.add_parser("ablate", help="sweep one axis over a list of values")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp = sub.add_parser("validate", help="check a config without running anything")
    common(sp)
    sp = sub.add_parser("report", help="summarise a run's metrics log")
    sp.add_argument("run_dir")
    return p


def _overrides(args) -> list[str]:
    out = list(args.set)
    if args.seed is not None:
        out.append(f"experiment.seed={args.seed}")
    if args.workers is not None:
        out.append(f"experiment.workers={args.workers}")
    if args.out is not None:
        out.append(f"experiment.out={args.out}")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return report(args.run_dir)
        overrides = _overrides(args)
        if args.command == "validate":
            diags = validate_config(args.config, overrides)
            for d in diags:
                print(d)
            errors = sum(d.severity == "error" for d in diags)
            print("ok" if not errors else f"{errors} error(s)")
            return 1 if errors else 0
        cfg = ExperimentConfig.load(args.config, overrides)
        run = Run(cfg, cfg["experiment"]["out"])
        if args.command == "pipeline":
            run_pipeline(run)
        elif args.command == "ablate":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            ablate(run, args.axis, values, cfg["experiment"]["workers"])
        else:
            run_stage(run, args.command)
    except (ConfigError, MissingArtifact, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
