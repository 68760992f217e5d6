"""Command-line entry point.

One subcommand per pipeline stage plus evaluation and ablation. All
commands share a run directory (from the config's ``out`` or ``--out``) and
reuse any artifact already present there. Exit codes: 0 success, 2 usage or
configuration problem, 3 bad or degenerate data, 4 missing artifact or
dependency.
"""

import argparse
import json
import os
import sys

from . import pipeline
from .errors import (ConfigurationError, DegenerateDataError, DependencyError,
                     InputError, UsageError)
from .metrics import EvalReport
from .reporting import emit_report
from .runconfig import RunConfig, load_config
from .selection import (calibrate_youden, infer, load_selector_model,
                        save_selector_model, train_joint)

COMMANDS = ("gen-phantoms", "train-persona", "gen-persona", "extract-features",
            "train", "calibrate", "infer", "evaluate", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radioselect",
        description="Patient-specific radiomic feature selection pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, help_text in (
        ("gen-phantoms", "generate (or reuse) the phantom dataset splits"),
        ("train-persona", "train the healthy-appearance diffusion model"),
        ("gen-persona", "sample a healthy persona for every study and view"),
        ("extract-features", "extract per-study feature pools to CSV"),
        ("train", "train one selector per task and seed (uncalibrated)"),
        ("calibrate", "set each trained selector's decision threshold on val"),
        ("infer", "classify one study and print its selection report"),
        ("evaluate", "run the full pipeline and write the metrics table"),
        ("ablate", "evaluate every ablation variant and compare to baseline"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="run configuration file (key = value lines)")
        cmd.add_argument("--out", help="run directory (overrides the config's out)")
        cmd.add_argument("--seed", type=int, help="override the config's base seed")
        cmd.add_argument("--task", choices=("abnormal", "acl", "meniscus"),
                         help="restrict to one task")
        cmd.add_argument("--views", help="comma-separated view subset or 'all'")
        cmd.add_argument("--threshold", type=float,
                         help="override the selection threshold t_sel")
        cmd.add_argument("--single-thread", action="store_true",
                         help="pin BLAS pools to one thread for bitwise reproducibility")
        if name == "infer":
            cmd.add_argument("--study", required=True, help="case id to classify")
            cmd.add_argument("--split", default="test",
                             choices=("train", "val", "test"),
                             help="split containing the study (default: test)")
    return parser


def _apply_thread_limits(args) -> None:
    limit = None
    if getattr(args, "single_thread", False):
        limit = 1
    elif os.environ.get("RADIOSELECT_THREADS"):
        try:
            limit = int(os.environ["RADIOSELECT_THREADS"])
        except ValueError:
            raise UsageError("RADIOSELECT_THREADS must be an integer") from None
    if limit is not None:
        if limit < 1:
            raise UsageError("thread limit must be >= 1")
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=limit)


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.out:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.task:
        overrides["tasks"] = (args.task,)
    if args.views:
        from .runconfig import _parse_views
        try:
            overrides["views"] = _parse_views(args.views)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.threshold is not None:
        if not 0.0 <= args.threshold <= 1.0:
            raise UsageError("--threshold must be in [0, 1]")
        overrides["t_sel"] = args.threshold
    return config.replace(**overrides) if overrides else config


def cmd_gen_phantoms(config: RunConfig, args) -> int:
    paths = pipeline.stage_paths(config, config.out)
    datasets = pipeline.ensure_dataset(config, paths)
    for split in pipeline.SPLITS:
        print(f"{split}: {len(datasets[split])} studies")
    print(f"dataset: {paths['dataset']}")
    return 0


def cmd_train_persona(config: RunConfig, args) -> int:
    if not config.persona:
        raise UsageError("persona is disabled in this configuration")
    paths = pipeline.stage_paths(config, config.out)
    pipeline.ensure_persona_model(config, paths)
    print(f"persona model: {paths['persona_model']}")
    return 0


def cmd_gen_persona(config: RunConfig, args) -> int:
    if not config.persona:
        raise UsageError("persona is disabled in this configuration")
    paths = pipeline.stage_paths(config, config.out)
    pipeline.ensure_personas(config, paths)
    print(f"personas: {paths['personas']}")
    return 0


def cmd_extract_features(config: RunConfig, args) -> int:
    paths = pipeline.stage_paths(config, config.out)
    layout, pools = pipeline.ensure_features(config, paths)
    total = sum(len(p) for p in pools.values())
    print(f"features: {paths['features']} ({total} studies x {layout.total} features)")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    paths = pipeline.stage_paths(config, config.out)
    datasets = pipeline.ensure_personas(config, paths)
    _, pools = pipeline.ensure_features(config, paths, datasets)
    train = datasets["train"]
    rows = pipeline._pool_rows(train, pools["train"])
    for task in config.tasks:
        for seed in config.seeds:
            path = pipeline.selector_path(config, paths, task, seed)
            if path.exists():
                print(f"{task} seed {seed}: exists ({path.name})")
                continue
            model, losses = train_joint(train, pipeline._selector_config(config, task),
                                        seed=seed, pools=rows)
            save_selector_model(path, model, step=config.epochs)
            print(f"{task} seed {seed}: loss {losses[0]:.4f} -> {losses[-1]:.4f} "
                  f"({path.name})")
    return 0


def cmd_calibrate(config: RunConfig, args) -> int:
    paths = pipeline.stage_paths(config, config.out)
    datasets = pipeline.ensure_personas(config, paths)
    _, pools = pipeline.ensure_features(config, paths, datasets)
    val = datasets["val"]
    rows = pipeline._pool_rows(val, pools["val"])
    for task in config.tasks:
        for seed in config.seeds:
            path = pipeline.selector_path(config, paths, task, seed)
            if not path.exists():
                raise DependencyError(
                    f"no trained selector for task {task!r} seed {seed} "
                    f"(expected {path}); run train first")
            model = load_selector_model(path)
            threshold = calibrate_youden(model, val, pools=rows)
            save_selector_model(path, model, step=config.epochs)
            print(f"{task} seed {seed}: decision threshold {threshold:.4f}")
    return 0


def cmd_infer(config: RunConfig, args) -> int:
    paths = pipeline.stage_paths(config, config.out)
    datasets = pipeline.ensure_personas(config, paths)
    _, pools = pipeline.ensure_features(config, paths, datasets)
    studies = {s.study_id: s for s in datasets[args.split]}
    if args.study not in studies:
        raise InputError(f"study {args.study!r} not in split {args.split!r}")
    study = studies[args.study]
    reports = {}
    for task in config.tasks:
        seed = config.seeds[0]
        path = pipeline.selector_path(config, paths, task, seed)
        if not path.exists():
            raise DependencyError(
                f"no trained selector for task {task!r} seed {seed}; "
                "run train and calibrate first")
        model = load_selector_model(path)
        result = infer(model, study, pool=pools[args.split][args.study])
        reports[task] = result.report
    print(json.dumps(reports, indent=2, sort_keys=True, allow_nan=False))
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    reports, _ = pipeline.evaluate_run(config, config.out)
    sys.stdout.write(emit_report(reports, format="text").decode())
    paths = pipeline.stage_paths(config, config.out)
    print(f"metrics: {paths['metrics']}")
    return 0


def cmd_ablate(config: RunConfig, args) -> int:
    table = pipeline.run_ablation(config, config.out)
    out_path = pipeline.stage_paths(config, config.out)["root"] / "ablation.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(table, indent=2, sort_keys=True, allow_nan=False) + "\n"
    out_path.write_text(payload)
    width = max(len(r["variant"]) for r in table["rows"])
    print(f"baseline: {table['baseline']}")
    for row in table["rows"]:
        line = (f"{row['variant']:<{width}}  {row['task']:<9} "
                f"auc {row['auc_mean']:.4f}")
        if "auc_delta" in row:
            line += f"  delta {row['auc_delta']:+.4f}"
            if row["t"] is None:
                line += f"  ({row['note']})"
            else:
                line += f"  t {row['t']:+.3f}  p {row['p']:.4f}"
        print(line)
    print(f"ablation: {out_path}")
    return 0


_HANDLERS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train-persona": cmd_train_persona,
    "gen-persona": cmd_gen_persona,
    "extract-features": cmd_extract_features,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_limits(args)
        config = _load_run_config(args)
        return _HANDLERS[args.command](config, args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        # covers ParseError and DegenerateDataError
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
