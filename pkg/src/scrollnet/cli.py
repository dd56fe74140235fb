"""Command-line harness: experiment execution, result comparison, selftest.

``run`` executes one experiment config across its seed list and writes all
artifacts (metrics CSV/JSON, run log, checkpoints, config echo) into one
directory per seed; ``compare`` tabulates finished result sets side by
side; ``selftest`` runs the built-in verification suites.

Everything emitted is byte-reproducible under a fixed config and seed: no
timestamps or host details ever reach an artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset, split_classes, synthetic_gaussian_tasks
from .errors import ConfigError, ParseError, ScrollNetError, TrainingDiverged
from .slimmable import build_model, convnet_arch, mlp_arch
from .trainer import StrategyConfig, TrainConfig, new_run, run_sequence
from .selftest import run_selftest

ENV_OUTPUT_ROOT = "SCROLLNET_OUTPUT_ROOT"


def _fmt(x):
    return format(float(x), ".12g")


# -- config schema ---------------------------------------------------------

def _require(section, key, path):
    if key not in section:
        raise ConfigError("required key missing", key=f"{path}.{key}")
    return section[key]


def _check_keys(section, allowed, path):
    if not isinstance(section, dict):
        raise ConfigError("expected an object", key=path)
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", key=path)


def _typed(value, kind, path):
    try:
        if kind is int:
            if isinstance(value, bool) or int(value) != value:
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        if kind is bool:
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind is str:
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind is list:
            if not isinstance(value, list):
                raise ValueError
            return value
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"expected {kind.__name__}, got {value!r}", key=path)


_DATA_KEYS = {
    "synthetic_gaussian": {"kind", "classes_per_task", "tasks", "dim", "separation",
                           "train_per_class", "test_per_class", "seed"},
    "csv": {"kind", "train_path", "test_path", "has_header", "tasks",
            "class_order_seed"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels",
            "tasks", "class_order_seed"},
}


def parse_config(raw, name_default="experiment"):
    """Validate a config dict; unknown keys are rejected with their dotted path."""
    _check_keys(raw, {"name", "data", "model", "num_splits", "scroll_step",
                      "strategy", "train", "seeds", "output_dir"}, "config")
    cfg = {"name": _typed(raw.get("name", name_default), str, "config.name")}

    data = _require(raw, "data", "config")
    kind = _typed(_require(data, "kind", "config.data"), str, "config.data.kind")
    if kind not in _DATA_KEYS:
        raise ConfigError(f"unknown data kind {kind!r}", key="config.data.kind")
    _check_keys(data, _DATA_KEYS[kind], "config.data")
    cfg["data"] = dict(data)

    model = _require(raw, "model", "config")
    preset = _typed(_require(model, "preset", "config.model"), str,
                    "config.model.preset")
    if preset == "mlp":
        _check_keys(model, {"preset", "hidden", "norm"}, "config.model")
        hidden = _typed(_require(model, "hidden", "config.model"), list,
                        "config.model.hidden")
        cfg["model"] = {"preset": "mlp",
                        "hidden": [_typed(h, int, "config.model.hidden") for h in hidden],
                        "norm": _typed(model.get("norm", True), bool,
                                       "config.model.norm")}
    elif preset == "convnet":
        _check_keys(model, {"preset", "channels", "kernel", "norm", "pool_every"},
                    "config.model")
        channels = _typed(_require(model, "channels", "config.model"), list,
                          "config.model.channels")
        cfg["model"] = {
            "preset": "convnet",
            "channels": [_typed(c, int, "config.model.channels") for c in channels],
            "kernel": _typed(model.get("kernel", 3), int, "config.model.kernel"),
            "norm": _typed(model.get("norm", True), bool, "config.model.norm"),
            "pool_every": _typed(model.get("pool_every", 1), int,
                                 "config.model.pool_every"),
        }
    else:
        raise ConfigError(f"unknown model preset {preset!r}",
                          key="config.model.preset")

    cfg["num_splits"] = _typed(raw.get("num_splits", 1), int, "config.num_splits")
    cfg["scroll_step"] = _typed(raw.get("scroll_step", 1), int, "config.scroll_step")

    strat = raw.get("strategy", {"name": "ft"})
    _check_keys(strat, {"name", "lamb", "temperature", "sample_cap",
                        "replay_budget", "replay_mix"}, "config.strategy")
    cfg["strategy"] = {
        "name": _typed(strat.get("name", "ft"), str, "config.strategy.name"),
        "lamb": None if strat.get("lamb") is None
        else _typed(strat["lamb"], float, "config.strategy.lamb"),
        "temperature": _typed(strat.get("temperature", 2.0), float,
                              "config.strategy.temperature"),
        "sample_cap": _typed(strat.get("sample_cap", 2048), int,
                             "config.strategy.sample_cap"),
        "replay_budget": _typed(strat.get("replay_budget", 0), int,
                                "config.strategy.replay_budget"),
        "replay_mix": _typed(strat.get("replay_mix", 0.5), float,
                             "config.strategy.replay_mix"),
    }

    train = raw.get("train", {})
    _check_keys(train, {"epochs", "lr", "lr_decay", "milestones", "batch_size",
                        "momentum", "weight_decay"}, "config.train")
    cfg["train"] = {
        "epochs": _typed(train.get("epochs", 60), int, "config.train.epochs"),
        "lr": _typed(train.get("lr", 0.1), float, "config.train.lr"),
        "lr_decay": _typed(train.get("lr_decay", 0.1), float,
                           "config.train.lr_decay"),
        "milestones": [_typed(m, int, "config.train.milestones")
                       for m in _typed(train.get("milestones", [24, 36]), list,
                                       "config.train.milestones")],
        "batch_size": _typed(train.get("batch_size", 64), int,
                             "config.train.batch_size"),
        "momentum": _typed(train.get("momentum", 0.9), float,
                           "config.train.momentum"),
        "weight_decay": _typed(train.get("weight_decay", 5e-4), float,
                               "config.train.weight_decay"),
    }

    seeds = _typed(raw.get("seeds", [0]), list, "config.seeds")
    cfg["seeds"] = [_typed(s, int, "config.seeds") for s in seeds]
    if not cfg["seeds"]:
        raise ConfigError("seed list is empty", key="config.seeds")
    cfg["output_dir"] = _typed(_require(raw, "output_dir", "config"), str,
                               "config.output_dir")
    return cfg


def build_stream(cfg, seed):
    data = cfg["data"]
    kind = data["kind"]
    if kind == "synthetic_gaussian":
        stream = synthetic_gaussian_tasks(
            classes_per_task=data["classes_per_task"],
            tasks=data["tasks"],
            dim=data["dim"],
            separation=data["separation"],
            seed=data.get("seed", seed),
            train_per_class=data.get("train_per_class", 200),
            test_per_class=data.get("test_per_class", 100),
        )
    elif kind == "csv":
        train = load_dataset(data["train_path"], "csv",
                             has_header=data.get("has_header", False))
        test = load_dataset(data["test_path"], "csv",
                            has_header=data.get("has_header", False),
                            stats=(train.mean, train.std))
        stream = split_classes(train, test, data["tasks"],
                               seed=data.get("class_order_seed", seed))
    else:
        train = load_dataset(data["train_images"], "idx-image",
                             labels_path=data["train_labels"])
        test = load_dataset(data["test_images"], "idx-image",
                            labels_path=data["test_labels"],
                            stats=(train.mean, train.std))
        stream = split_classes(train, test, data["tasks"],
                               seed=data.get("class_order_seed", seed))
    if cfg["model"]["preset"] == "mlp":
        for task in stream.tasks:
            for ds in (task.train, task.test):
                ds.samples = ds.samples.reshape(len(ds.samples), -1)
    return stream


def build_experiment_model(cfg, stream, seed):
    shape = stream.input_shape
    head_sizes = [t.train.num_classes for t in stream.tasks]
    m = cfg["model"]
    if m["preset"] == "mlp":
        arch = mlp_arch(int(np.prod(shape)), m["hidden"], norm=m["norm"])
    else:
        if len(shape) != 3:
            raise ConfigError("convnet preset needs image-shaped data",
                              key="config.model.preset")
        arch = convnet_arch(shape[0], m["channels"], kernel=m["kernel"],
                            norm=m["norm"], pool_every=m["pool_every"])
    return build_model(arch, cfg["num_splits"], head_sizes, seed=seed)


def train_config_for_seed(cfg, seed):
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], lr=t["lr"], lr_decay=t["lr_decay"],
        milestones=tuple(t["milestones"]), batch_size=t["batch_size"],
        momentum=t["momentum"], weight_decay=t["weight_decay"],
        seed=seed, num_splits=cfg["num_splits"], scroll_step=cfg["scroll_step"],
        strategy=StrategyConfig(**cfg["strategy"]),
    )


# -- run -----------------------------------------------------------------------

def _resolve_out_dir(path_str):
    root = os.environ.get(ENV_OUTPUT_ROOT)
    path = Path(path_str)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _config_digest(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def cmd_run(args):
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"config error: invalid JSON at line {e.lineno}, column {e.colno}: "
              f"{e.msg}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(raw, name_default=Path(args.config).stem)
        if args.seed is not None:
            cfg["seeds"] = [args.seed]
        if args.out is not None:
            cfg["output_dir"] = args.out
        out_root = _resolve_out_dir(cfg["output_dir"])
        out_root.mkdir(parents=True, exist_ok=True)
        digest = _config_digest(cfg)
        (out_root / "config_echo.json").write_text(
            json.dumps(cfg, indent=2, sort_keys=True) + "\n")

        per_seed = {}
        for seed in cfg["seeds"]:
            seed_dir = out_root / f"seed_{seed:03d}"
            if seed_dir.exists() and any(seed_dir.iterdir()):
                print(f"config error: {seed_dir} already holds results; "
                      f"refusing to overwrite", file=sys.stderr)
                return 2
            seed_dir.mkdir(parents=True, exist_ok=True)
            stream = build_stream(cfg, seed)
            model = build_experiment_model(cfg, stream, seed)
            tcfg = train_config_for_seed(cfg, seed)
            run = new_run(model, tcfg)
            try:
                with open(seed_dir / "run_log.jsonl", "a") as log_fh:
                    report = run_sequence(run, stream, tcfg,
                                          out_dir=str(seed_dir), log_fh=log_fh)
            except TrainingDiverged as e:
                (seed_dir / "divergence.json").write_text(
                    json.dumps(e.diagnostics, indent=2) + "\n")
                print(f"training aborted: {e}", file=sys.stderr)
                return 1
            summary = report.to_summary()
            summary["seed"] = seed
            summary["config_sha256"] = digest
            summary["config"] = cfg
            (seed_dir / "metrics.csv").write_text(report.to_csv())
            (seed_dir / "metrics.json").write_text(
                json.dumps(summary, indent=2, sort_keys=True) + "\n")
            artifacts = sorted(p.name for p in seed_dir.iterdir())
            (seed_dir / "manifest.json").write_text(json.dumps(
                {"config_sha256": digest, "seed": seed,
                 "artifacts": artifacts + ["manifest.json"]},
                indent=2, sort_keys=True) + "\n")
            per_seed[seed] = summary
        _write_aggregate(out_root, cfg, digest, per_seed)
    except (ConfigError, ParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    return 0


def _write_aggregate(out_root, cfg, digest, per_seed):
    seeds = sorted(per_seed)
    taw = [per_seed[s]["final_avg_task_aware"] for s in seeds]
    tag = [per_seed[s]["final_avg_task_agnostic"] for s in seeds]

    def std(v):
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    summary = {
        "name": cfg["name"],
        "config_sha256": digest,
        "num_tasks": per_seed[seeds[0]]["num_tasks"],
        "seeds": seeds,
        "per_seed": {str(s): per_seed[s] for s in seeds},
        "final_avg_task_aware": {"mean": float(np.mean(taw)), "std": std(taw)},
        "final_avg_task_agnostic": {"mean": float(np.mean(tag)), "std": std(tag)},
        "config": cfg,
    }
    (out_root / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = ["# scrollnet-summary-v1",
             "row,seed,final_avg_task_aware,final_avg_task_agnostic"]
    for s in seeds:
        lines.append(f"seed,{s},{_fmt(per_seed[s]['final_avg_task_aware'])},"
                     f"{_fmt(per_seed[s]['final_avg_task_agnostic'])}")
    lines.append(f"mean,,{_fmt(np.mean(taw))},{_fmt(np.mean(tag))}")
    lines.append(f"std,,{_fmt(std(taw))},{_fmt(std(tag))}")
    (out_root / "summary.csv").write_text("\n".join(lines) + "\n")


# -- compare ---------------------------------------------------------------------

def cmd_compare(args):
    summaries = []
    for d in args.result_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            print(f"compare error: {path} not found", file=sys.stderr)
            return 2
        summaries.append((Path(d).name, json.loads(path.read_text())))
    tasks = {s["num_tasks"] for _, s in summaries}
    if len(tasks) != 1:
        print(f"compare error: mismatched task counts {sorted(tasks)}",
              file=sys.stderr)
        return 2

    base_taw = summaries[0][1]["final_avg_task_aware"]["mean"]
    base_tag = summaries[0][1]["final_avg_task_agnostic"]["mean"]
    rows = []
    for name, s in summaries:
        taw, tag = s["final_avg_task_aware"], s["final_avg_task_agnostic"]
        rows.append((name, taw["mean"], taw["std"], tag["mean"], tag["std"],
                     taw["mean"] - base_taw, tag["mean"] - base_tag))

    header = (f"{'method':<28} {'taw mean±std':>20} {'tag mean±std':>20} "
              f"{'Δtaw':>9} {'Δtag':>9}")
    print(header)
    print("-" * len(header))
    for name, tm, ts, gm, gs, dt, dg in rows:
        print(f"{name:<28} {tm:10.4f} ±{ts:7.4f} {gm:10.4f} ±{gs:7.4f} "
              f"{dt:+9.4f} {dg:+9.4f}")

    out = Path(args.out)
    lines = ["# scrollnet-compare-v1",
             "method,taw_mean,taw_std,tag_mean,tag_std,delta_taw,delta_tag"]
    for name, tm, ts, gm, gs, dt, dg in rows:
        lines.append(f"{name},{_fmt(tm)},{_fmt(ts)},{_fmt(gm)},{_fmt(gs)},"
                     f"{_fmt(dt)},{_fmt(dg)}")
    out.write_text("\n".join(lines) + "\n")
    return 0


def cmd_selftest(args):
    return run_selftest(inject_fault=args.inject_fault)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="scrollnet",
        description="Continual-learning experiments with scrolled weight importance",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True, help="path to a JSON config")
    p_run.add_argument("--seed", type=int, default=None,
                       help="run only this seed (overrides the config list)")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides the config)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate finished result sets")
    p_cmp.add_argument("result_dirs", nargs="+",
                       help="two or more run output directories")
    p_cmp.add_argument("--out", default="compare.csv", help="CSV output path")
    p_cmp.set_defaults(func=cmd_compare)

    p_self = sub.add_parser("selftest", help="run the built-in verification suites")
    p_self.add_argument("--inject-fault", default=None,
                        help="perturb the named check (testing hook)")
    p_self.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScrollNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
