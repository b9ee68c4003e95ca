"""Experiment driver: seeded multi-run campaigns, dataset generation,
activation export/reuse, and plot-ready CSV emission.

Exit codes: 0 ok, 2 config error, 3 training abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics as dg
from . import metalearn as ml
from . import nn
from . import tasks
from .metalearn import TrainingDiverged, TrainSchedule


class ConfigError(Exception):
    """Bad or missing experiment configuration."""


@dataclass
class ExperimentConfig:
    task: str
    seed: int
    n_seeds: int
    hidden_width: int
    activation_types: list
    variants: dict  # name -> list of type indices, interleaved over the layer
    schedule: dict
    data: dict = field(default_factory=dict)
    sizes: list = None
    diagnostics: dict = field(default_factory=dict)
    hist_bins: int = 20

    @property
    def net_task(self) -> str:
        return "classification" if self.task == "mnist1d" else "regression"


DIAG_DEFAULTS = {
    "hessian": False,
    "hutchinson_probes": 64,
    "lanczos_k": 32,
    "hessian_examples": 1000,
}


def _load_activation_entry(entry: dict, base_dir: str) -> nn.ActivationSpec:
    if entry.get("kind") == "tabulated" and "path" in entry:
        path = entry["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return nn.load_activation_json(path)
    return nn.spec_from_dict(entry)


def parse_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        roster = [_load_activation_entry(e, base_dir) for e in obj["activation_types"]]
        exp = ExperimentConfig(
            task=obj["task"],
            seed=int(obj.get("seed", 0)),
            n_seeds=int(obj.get("n_seeds", 1)),
            hidden_width=int(obj.get("hidden_width", 100)),
            activation_types=roster,
            variants={str(k): [int(i) for i in v] for k, v in obj["variants"].items()},
            schedule=dict(obj.get("schedule", {})),
            data=dict(obj.get("data", {})),
            sizes=[int(w) for w in obj["sizes"]] if "sizes" in obj else None,
            diagnostics={**DIAG_DEFAULTS, **obj.get("diagnostics", {})},
            hist_bins=int(obj.get("hist_bins", 20)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc!r}") from None

    if exp.task not in ("mnist1d", "vdp"):
        raise ConfigError(f"task must be mnist1d or vdp, got {exp.task!r}")
    if exp.n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    if not exp.activation_types:
        raise ConfigError("activation roster is empty")
    if not exp.variants:
        raise ConfigError("no variants declared")
    for name, types in exp.variants.items():
        if not types:
            raise ConfigError(f"variant {name!r} lists no activation types")
        for t in types:
            if not 0 <= t < len(exp.activation_types):
                raise ConfigError(f"variant {name!r} references undeclared type {t}")
    widths = exp.sizes if exp.sizes else [exp.hidden_width]
    if any(w < 1 for w in widths):
        raise ConfigError("hidden widths must be positive")
    try:
        TrainSchedule(**exp.schedule)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule: {exc}") from None
    return exp


# ---------------------------------------------------------------------------
# Data and run plumbing.

def build_datasets(exp: ExperimentConfig):
    data = exp.data
    if "train_path" in data or "val_path" in data:
        try:
            train = tasks.load_dataset(data["train_path"])
            val = tasks.load_dataset(data["val_path"])
        except KeyError as exc:
            raise ConfigError(f"data section needs both train_path and val_path ({exc})") from None
        return train, val
    data_seed = int(data.get("seed", exp.seed))
    if exp.task == "mnist1d":
        params = tasks.Synth1DParams(**data.get("params", {}))
        s_train, s_val = np.random.SeedSequence(data_seed).spawn(2)
        train = tasks.generate_synthetic_1d(s_train, int(data.get("m_train", 4000)),
                                            params, split="train")
        val = tasks.generate_synthetic_1d(s_val, int(data.get("m_val", 1000)),
                                          params, split="val")
        return train, val
    return tasks.build_vdp_forecast_dataset(
        x0=float(data.get("x0", 0.5)),
        v0=float(data.get("v0", 0.0)),
        mu=float(data.get("mu", 2.7)),
        h=float(data.get("h", 0.01)),
        n_transient=int(data.get("n_transient", 5000)),
        n_samples=int(data.get("n_samples", 4000)),
        seed=data_seed,
        val_fraction=float(data.get("val_fraction", 0.2)),
    )


def network_config(exp: ExperimentConfig, variant_types, width: int,
                   train_set: tasks.Dataset) -> nn.NetworkConfig:
    return nn.mlp_config(
        input_dim=train_set.n_features,
        hidden_width=width,
        output_dim=train_set.output_dim,
        activations=tuple(exp.activation_types),
        types=variant_types,
        task=exp.net_task,
    )


def derive_run_seed(campaign_seed: int, variant: str, replicate: int) -> int:
    """Stable per-run seed: adding variants never perturbs other streams."""
    digest = hashlib.sha256(f"{campaign_seed}:{variant}:{replicate}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def fingerprint(exp: ExperimentConfig, variant: str, width: int) -> str:
    ident = {
        "task": exp.task,
        "width": width,
        "types": [nn.spec_to_dict(exp.activation_types[t]) for t in exp.variants[variant]],
        "schedule": exp.schedule,
    }
    return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:12]


def _hessian_diagnostics(record: dg.RunRecord, exp, params, config, train_set, run_seed):
    diag = exp.diagnostics
    k = min(int(diag["hessian_examples"]), train_set.n_examples)
    xb, yb = train_set.inputs[:k], train_set.targets[:k]
    theta_all = params.all_tensors()

    def lossfn():
        return ml.batch_loss(params, config, xb, yb)

    est = dg.hessian_trace_hutchinson(lossfn, theta_all,
                                      n_probes=int(diag["hutchinson_probes"]),
                                      seed=run_seed ^ 0x5EED)
    record.hessian_trace = est.value
    record.hessian_trace_stderr = est.stderr
    n_params = sum(t.data.size for t in theta_all)
    lan = dg.spectrum_lanczos(lossfn, theta_all,
                              k=min(int(diag["lanczos_k"]), n_params),
                              seed=run_seed ^ 0xF00D)
    record.f_near_zero = lan.f_near_zero


def run_single(exp: ExperimentConfig, train_set, val_set, variant: str,
               replicate: int, width: int) -> dg.RunRecord:
    """Train one seeded run and compute its diagnostics."""
    run_seed = derive_run_seed(exp.seed, variant, replicate)
    record = dg.RunRecord(seed=run_seed, fingerprint=fingerprint(exp, variant, width),
                          variant=variant, metric=float("nan"),
                          replicate=replicate, width=width)
    config = network_config(exp, exp.variants[variant], width, train_set)
    schedule = TrainSchedule(**exp.schedule, seed=run_seed)
    try:
        params, _ = ml.train(config, schedule, train_set, val_set)
        record.metric = ml.evaluate(params, config, val_set)
        activity = nn.hidden_activity_matrix(params, config, val_set.inputs)
        summary = dg.participation_ratio(activity)
        record.ratio = summary.ratio
        record.normalized_ratio = summary.normalized
        if exp.diagnostics.get("hessian"):
            _hessian_diagnostics(record, exp, params, config, train_set, run_seed)
    except (TrainingDiverged, dg.DegenerateActivityError) as exc:
        record.status = f"failed: {type(exc).__name__}"
        print(f"[{variant} #{replicate}] {exc}", file=sys.stderr)
    return record


_POOL_STATE = {}


def _pool_init(exp, train_set, val_set, width):
    _POOL_STATE["args"] = (exp, train_set, val_set, width)


def _pool_run(task):
    variant, replicate = task
    exp, train_set, val_set, width = _POOL_STATE["args"]
    return run_single(exp, train_set, val_set, variant, replicate, width)


def run_campaign(exp: ExperimentConfig, train_set, val_set, width: int, jobs: int = 1):
    """All (variant, replicate) runs at one width, optionally on a worker pool."""
    todo = [(variant, rep) for variant in exp.variants for rep in range(exp.n_seeds)]
    if jobs <= 1 or len(todo) == 1:
        records = [run_single(exp, train_set, val_set, v, r, width) for v, r in todo]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(jobs, initializer=_pool_init,
                      initargs=(exp, train_set, val_set, width)) as pool:
            records = pool.map(_pool_run, todo)
    records.sort(key=lambda r: (list(exp.variants).index(r.variant), r.replicate))
    return records


def emit_campaign(exp: ExperimentConfig, records, out_dir, width: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    dg.write_run_records_csv(records, os.path.join(out_dir, "runs.csv"))
    groups = dg.aggregate_runs(records)
    dg.write_group_stats_csv(groups, os.path.join(out_dir, "groups.csv"))
    a_range = (0.0, 1.0) if exp.net_task == "classification" else None
    ok = [r for r in records if r.status == "ok"]
    if ok:
        hist = dg.histogram_2d(ok, bins=exp.hist_bins, a_range=a_range)
        dg.write_hist2d_csv(hist, os.path.join(out_dir, "hist2d.csv"))
    dg.write_summary_json(groups, os.path.join(out_dir, "summary.json"),
                          extra={"task": exp.task, "width": width,
                                 "n_seeds": exp.n_seeds, "campaign_seed": exp.seed})


def _campaign_ok(exp: ExperimentConfig, records) -> bool:
    by_variant = {v: 0 for v in exp.variants}
    for r in records:
        if r.status == "ok":
            by_variant[r.variant] += 1
    return all(count > 0 for count in by_variant.values())


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_train(args) -> int:
    exp = parse_experiment_config(args.config)
    variant = args.variant or next(iter(exp.variants))
    if variant not in exp.variants:
        raise ConfigError(f"unknown variant {variant!r}")
    train_set, val_set = build_datasets(exp)
    config = network_config(exp, exp.variants[variant], exp.hidden_width, train_set)
    run_seed = args.seed if args.seed is not None else derive_run_seed(exp.seed, variant, 0)
    schedule = TrainSchedule(**exp.schedule, seed=run_seed)
    params, history = ml.train(config, schedule, train_set, val_set)

    os.makedirs(args.out, exist_ok=True)
    nn.save_params(params, config, os.path.join(args.out, "params.json"))
    ml.write_history_csv(history, os.path.join(args.out, "history.csv"))
    for t in sorted(history.snapshots):
        ml.write_activation_trace_csv(
            history, t, os.path.join(args.out, f"activation_type{t}.csv"))
    metric = ml.evaluate(params, config, val_set)
    label = "accuracy" if exp.net_task == "classification" else "loss"
    print(f"run seed {run_seed}: validation {label} {metric:.4f}")
    return 0


def cmd_campaign(args) -> int:
    exp = parse_experiment_config(args.config)
    train_set, val_set = build_datasets(exp)
    jobs = args.jobs or os.cpu_count() or 1
    records = run_campaign(exp, train_set, val_set, exp.hidden_width, jobs)
    emit_campaign(exp, records, args.out, exp.hidden_width)
    groups = dg.aggregate_runs(records)
    for fp in sorted(groups, key=lambda f: groups[f].variant):
        g = groups[fp]
        print(f"{g.variant}: n={g.count} median={g.median:.4f} mean={g.mean:.4f}")
    if not _campaign_ok(exp, records):
        print("campaign failed: a variant has zero successful runs", file=sys.stderr)
        return 3
    return 0


def cmd_size_sweep(args) -> int:
    exp = parse_experiment_config(args.config)
    if not exp.sizes:
        raise ConfigError("size sweep needs a 'sizes' list in the config")
    train_set, val_set = build_datasets(exp)
    jobs = args.jobs or os.cpu_count() or 1
    os.makedirs(args.out, exist_ok=True)
    all_ok = True
    combined = []
    for width in exp.sizes:
        records = run_campaign(exp, train_set, val_set, width, jobs)
        emit_campaign(exp, records, os.path.join(args.out, f"size_{width}"), width)
        all_ok = all_ok and _campaign_ok(exp, records)
        groups = dg.aggregate_runs(records)
        for g in sorted(groups.values(), key=lambda g: g.variant):
            combined.append((width, g))
    with open(os.path.join(args.out, "sizes.csv"), "w", encoding="utf-8") as fh:
        fh.write("width,variant,count,mean,median,q1,q3,lo,hi\n")
        for width, g in combined:
            fh.write(f"{width},{g.variant},{g.count},{g.mean!r},{g.median!r},"
                     f"{g.q1!r},{g.q3!r},{g.lo!r},{g.hi!r}\n")
    return 0 if all_ok else 3


def cmd_export_activation(args) -> int:
    try:
        params, config = nn.load_params(args.params)
    except FileNotFoundError:
        raise ConfigError(f"params snapshot not found: {args.params}") from None
    idx = args.type
    if not 0 <= idx < len(config.activations):
        raise ConfigError(f"type index {idx} out of range "
                          f"(snapshot declares {len(config.activations)} types)")
    spec = config.activations[idx]
    if spec.kind != "subnet":
        raise ConfigError(f"no subnet at index {idx} (kind is {spec.kind!r})")
    lo, hi = args.range
    tab = nn.extract_tabulated(spec, params.subnets[idx], lo, hi, args.points)
    nn.save_activation_json(tab, args.out, provenance={
        "base": spec.name, "task": config.task, "seed": config.seed})
    print(f"exported type {idx} ({spec.name} base) on [{lo}, {hi}] to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.task == "mnist1d-synth":
        m = args.m or 4000
        s_train, s_val = np.random.SeedSequence(args.seed).spawn(2)
        train = tasks.generate_synthetic_1d(s_train, m, split="train")
        val = tasks.generate_synthetic_1d(s_val, max(1, m // 4), split="val")
    else:
        train, val = tasks.build_vdp_forecast_dataset(seed=args.seed,
                                                      n_samples=args.m or 4000)
    train_path = os.path.join(args.out, "train.dsv")
    val_path = os.path.join(args.out, "val.dsv")
    tasks.save_dataset(train, train_path)
    tasks.save_dataset(val, val_path)
    print(f"wrote {train_path} ({train.n_examples} examples) and "
          f"{val_path} ({val.n_examples} examples)")
    return 0


def cmd_diagnose(args) -> int:
    try:
        params, config = nn.load_params(args.params)
    except FileNotFoundError:
        raise ConfigError(f"params snapshot not found: {args.params}") from None
    dataset = tasks.load_dataset(args.data)
    result = {
        "task": config.task,
        "metric": ml.evaluate(params, config, dataset),
        "theta_params": nn.theta_size(params),
        "theta_a_params": nn.theta_a_size(params),
    }
    activity = nn.hidden_activity_matrix(params, config, dataset.inputs)
    summary = dg.participation_ratio(activity)
    result["participation_ratio"] = summary.ratio
    result["normalized_participation_ratio"] = summary.normalized
    if args.hessian:
        theta_all = params.all_tensors()
        k = min(args.hessian_examples, dataset.n_examples)
        xb, yb = dataset.inputs[:k], dataset.targets[:k]

        def lossfn():
            return ml.batch_loss(params, config, xb, yb)

        est = dg.hessian_trace_hutchinson(lossfn, theta_all, n_probes=args.probes,
                                          seed=args.seed)
        lan = dg.spectrum_lanczos(lossfn, theta_all,
                                  k=min(args.k, sum(t.data.size for t in theta_all)),
                                  seed=args.seed + 1)
        result["hessian_trace"] = est.value
        result["hessian_trace_stderr"] = est.stderr
        result["f_near_zero"] = lan.f_near_zero
    text = json.dumps(result, sort_keys=True, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Entry point.

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldnn",
                                     description="learned-diversity network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one training run with full artifacts")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("campaign", help="n_seeds runs per variant with diagnostics")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default="runs/campaign")
    p.set_defaults(fn=cmd_campaign)

    p = sub.add_parser("size-sweep", help="repeat the campaign across hidden widths")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default="runs/size-sweep")
    p.set_defaults(fn=cmd_size_sweep)

    p = sub.add_parser("export-activation", help="freeze a learned activation to JSON")
    p.add_argument("params")
    p.add_argument("--type", type=int, required=True)
    p.add_argument("--range", type=float, nargs=2, default=(-6.0, 6.0))
    p.add_argument("--points", type=int, default=601)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_activation)

    p = sub.add_parser("gen-data", help="write dataset containers")
    p.add_argument("task", choices=["mnist1d-synth", "vdp"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--out", default="data")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("diagnose", help="recompute diagnostics from a snapshot")
    p.add_argument("params")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--hessian", action="store_true")
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hessian-examples", type=int, default=1000)
    p.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (tasks.DatasetFormatError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except tasks.TrajectoryDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
