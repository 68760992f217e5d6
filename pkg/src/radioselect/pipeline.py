"""Run-directory orchestration, from raw studies to the metrics table.

Stages: dataset -> (persona model -> personas) -> feature pools -> selector
training -> calibration -> evaluation -> ablation. Every stage persists one
artifact under the run directory, named by a digest of exactly the config
keys that determine its content, so reruns reuse what is still valid and
rebuild the rest. Ablation variants share a run directory on purpose: a
variant that only flips the selection threshold reuses the cached dataset,
personas, and feature pools.
"""

import itertools
from pathlib import Path

import numpy as np

from . import data as data_io
from .diffusion import (load_persona_model, make_persona_model, persona_of_study,
                        save_persona_model, train_persona)
from .errors import DegenerateDataError, DependencyError, InputError
from .features_io import read_feature_csv, write_feature_csv
from .metrics import EvalReport, PredictionSet, confusion_metrics, paired_t_test
from .phantom import make_phantom_dataset
from .radiomics import FeatureLayout, assemble_feature_pool
from .registration import affine_register
from .reporting import emit_report, parse_reports
from .runconfig import RunConfig, config_hash
from .selection import (SelectorTrainConfig, calibrate_youden, infer,
                        load_selector_model, save_selector_model, train_joint)
from .volume import load_volume

__all__ = [
    "SPLITS",
    "stage_paths",
    "ensure_dataset",
    "ensure_persona_model",
    "ensure_personas",
    "ensure_features",
    "ensure_selector",
    "selector_path",
    "evaluate_run",
    "ablation_variants",
    "run_ablation",
]

SPLITS = ("train", "val", "test")

DATA_KEYS = ("data_dir", "phantom_train", "phantom_val", "phantom_test",
             "extents", "seed", "registration")
PERSONA_KEYS = DATA_KEYS + ("diffusion_t", "internal_extents", "persona_steps",
                            "persona_batch", "persona_lr")
SELECTOR_KEYS = ("grid", "views", "persona", "selection", "t_sel", "epochs",
                 "batch_size", "learning_rate", "weight_decay", "net_extents",
                 "base_channels")


def _feature_keys(config: RunConfig) -> tuple:
    keys = DATA_KEYS + ("grid", "views", "persona")
    if config.persona:
        keys = keys + PERSONA_KEYS
    return keys


def _model_keys(config: RunConfig) -> tuple:
    return _feature_keys(config) + SELECTOR_KEYS


def stage_paths(config: RunConfig, root) -> dict:
    root = Path(root)
    return {
        "root": root,
        "dataset": root / f"data-{config_hash(config, DATA_KEYS)}",
        "persona_model": root / f"persona-{config_hash(config, PERSONA_KEYS)}.ckpt",
        "personas": root / f"personas-{config_hash(config, PERSONA_KEYS)}",
        "features": root / f"features-{config_hash(config, _feature_keys(config))}",
        "models": root / "models",
        "metrics": root / ("metrics-" + config_hash(
            config, _model_keys(config) + ("tasks", "seeds")) + ".json"),
    }


def _split_counts(config: RunConfig) -> dict:
    return {"train": config.phantom_train, "val": config.phantom_val,
            "test": config.phantom_test}


def _split_seed(config: RunConfig, index: int) -> int:
    return int(np.random.SeedSequence([config.seed, index]).generate_state(1)[0])


def ensure_dataset(config: RunConfig, paths: dict) -> dict:
    """split -> sorted study list.

    Phantom datasets (and registered copies of external ones) are cached
    under the run directory; an external dataset without registration is
    read in place. With registration on, every view of every study is
    resampled onto the corresponding view of the first training study.
    """
    if config.data_dir and not config.registration:
        return {split: data_io.load_split(config.data_dir, split, views=config.views)
                for split in SPLITS}
    target = paths["dataset"]
    if target.is_dir():
        return {split: data_io.load_split(target, split, views=config.views)
                for split in SPLITS}
    datasets = {}
    reference = None
    for index, split in enumerate(SPLITS):
        if config.data_dir:
            studies = data_io.load_split(config.data_dir, split, views=config.views)
        else:
            count = _split_counts(config)[split]
            studies = make_phantom_dataset(
                _split_seed(config, index), count - count // 2, count // 2,
                extents=config.extents)
        if config.registration:
            if reference is None:
                reference = min(studies, key=lambda s: s.study_id)
            for study in studies:
                if study is reference:
                    continue
                for view, vol in study.volumes.items():
                    _, warped = affine_register(vol, reference.volumes[view])
                    study.volumes[view] = warped
        datasets[split] = studies
        data_io.save_split(target, split, studies)
    return datasets


def ensure_persona_model(config: RunConfig, paths: dict, datasets=None):
    """Train (or reload) the healthy-appearance generator on the healthy
    training studies. Returns None when personas are disabled."""
    if not config.persona:
        return None
    path = paths["persona_model"]
    if path.exists():
        return load_persona_model(path)
    if datasets is None:
        datasets = ensure_dataset(config, paths)
    healthy = [s for s in datasets["train"] if s.labels["abnormal"] == 0]
    if not healthy:
        raise InputError("persona training needs healthy studies in the train split")
    model = make_persona_model(config.extents, timesteps=config.diffusion_t,
                               internal_extents=config.internal_extents,
                               seed=config.seed)
    train_persona(healthy, model, steps=config.persona_steps, seed=config.seed,
                  batch_size=config.persona_batch, lr=config.persona_lr)
    save_persona_model(path, model, step=config.persona_steps)
    return model


def ensure_personas(config: RunConfig, paths: dict, datasets=None, model=None) -> dict:
    """Attach a healthy persona per (study, view), cached as volumes under
    the personas directory. Returns the datasets unchanged when personas are
    disabled."""
    if datasets is None:
        datasets = ensure_dataset(config, paths)
    if not config.persona:
        return datasets
    root = paths["personas"]
    missing = {}
    for split, studies in datasets.items():
        for study in studies:
            for view in config.views:
                path = root / split / "personas" / view / f"{study.study_id}.npy"
                if path.exists():
                    study.personas[view] = load_volume(path)
                else:
                    missing[(split, study.study_id)] = study
    if missing:
        if model is None:
            model = ensure_persona_model(config, paths, datasets)
        # persist study by study so an interrupted run resumes where it left off
        for (split, _), study in missing.items():
            persona_of_study(model, study, seed=config.seed)
            data_io.save_personas(root, split, [study])
    return datasets


def _layout(config: RunConfig) -> FeatureLayout:
    sources = ("original", "persona") if config.persona else ("original",)
    return FeatureLayout(views=config.views, grid=config.grid, sources=sources)


def ensure_features(config: RunConfig, paths: dict, datasets=None) -> tuple:
    """(layout, {split: {study_id: values}}) with one CSV cache per split."""
    layout = _layout(config)
    root = paths["features"]
    if all((root / f"{split}.csv").exists() for split in SPLITS):
        return layout, {split: read_feature_csv(root / f"{split}.csv", layout)
                        for split in SPLITS}
    datasets = ensure_personas(config, paths, datasets)
    pools = {}
    for split in SPLITS:
        split_pools = {}
        for study in datasets[split]:
            split_pools[study.study_id] = assemble_feature_pool(
                study.volumes, study.personas, layout).values
        write_feature_csv(root / f"{split}.csv", split_pools, layout)
        pools[split] = split_pools
    return layout, pools


def _selector_config(config: RunConfig, task: str) -> SelectorTrainConfig:
    sources = ("original", "persona") if config.persona else ("original",)
    return SelectorTrainConfig(
        task=task, views=config.views, grid=config.grid, sources=sources,
        selection_threshold=config.t_sel, selection_enabled=config.selection,
        epochs=config.epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, weight_decay=config.weight_decay,
        net_extents=config.net_extents, base_channels=config.base_channels)


def _pool_rows(studies, pools: dict) -> np.ndarray:
    rows = []
    for study in studies:
        if study.study_id not in pools:
            raise DependencyError(
                f"study {study.study_id} has no cached feature vector; "
                "rerun feature extraction")
        rows.append(pools[study.study_id])
    return np.stack(rows)


def selector_path(config: RunConfig, paths: dict, task: str, seed: int) -> Path:
    digest = config_hash(config, _model_keys(config))
    return paths["models"] / f"selector-{task}-seed{seed}-{digest}.ckpt"


def ensure_selector(config: RunConfig, paths: dict, task: str, seed: int,
                    datasets=None, layout=None, pools=None):
    """Trained and Youden-calibrated selector for (task, seed), cached as a
    checkpoint."""
    path = selector_path(config, paths, task, seed)
    if path.exists():
        return load_selector_model(path)
    if datasets is None:
        datasets = ensure_personas(config, paths)
    if layout is None or pools is None:
        layout, pools = ensure_features(config, paths, datasets)
    train, val = datasets["train"], datasets["val"]
    model, _ = train_joint(train, _selector_config(config, task), seed=seed,
                           pools=_pool_rows(train, pools["train"]))
    calibrate_youden(model, val, pools=_pool_rows(val, pools["val"]))
    save_selector_model(path, model, step=config.epochs)
    return model


def _seed_report(model, studies, pools, label: str) -> EvalReport:
    rows = _pool_rows(studies, pools)
    ids, scores, decisions, labels = [], [], [], []
    for i, study in enumerate(studies):
        result = infer(model, study, pool=rows[i])
        ids.append(study.study_id)
        scores.append(result.probability)
        decisions.append(result.decision)
        labels.append(study.labels[model.task])
    preds = PredictionSet(task=model.task, ids=tuple(ids),
                          scores=np.asarray(scores),
                          decisions=np.asarray(decisions, dtype=np.int64),
                          labels=np.asarray(labels, dtype=np.int64))
    report = confusion_metrics(preds)
    report.threshold = model.decision_threshold
    report.label = label
    report.fingerprint = model.fingerprint
    return report


def _mean_report(task: str, seed_reports: list, seeds) -> EvalReport:
    """Across-seed summary: counts are pooled over the seed runs (for equal
    per-seed test sets the pooled rates equal the across-seed means), auc and
    threshold are seed means, spread is the sample standard deviation."""
    counts = {k: sum(r.counts[k] for r in seed_reports) for k in seed_reports[0].counts}
    n = sum(counts.values())
    pos = counts["tp"] + counts["fn"]
    neg = counts["tn"] + counts["fp"]

    def _std(values):
        vals = [v for v in values if v is not None]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    aucs = [r.auc for r in seed_reports if r.auc is not None]
    return EvalReport(
        task=task,
        threshold=float(np.mean([r.threshold for r in seed_reports])),
        counts=counts,
        accuracy=(counts["tp"] + counts["tn"]) / n,
        sensitivity=counts["tp"] / pos if pos else None,
        specificity=counts["tn"] / neg if neg else None,
        auc=float(np.mean(aucs)) if aucs else None,
        label="seed-mean",
        seeds=tuple(seeds),
        spread={"accuracy": _std([r.accuracy for r in seed_reports]),
                "auc": _std(aucs)},
    )


def _details_from_reports(reports) -> dict:
    details = {}
    for report in reports:
        if report.label.startswith("seed-") and report.label != "seed-mean":
            details.setdefault(report.task, {})[int(report.label[5:])] = report.auc
    return details


def evaluate_run(config: RunConfig, root) -> tuple:
    """Train/calibrate every (task, seed), score the test split, and write
    the metrics artifact. Returns (reports, details) where reports holds the
    per-seed and seed-mean EvalReports in emission order and details maps
    task -> {seed: auc}.

    The metrics artifact is named by the digest of every config key that can
    change it, so when it already exists the stored reports are returned
    without touching the heavier stage artifacts."""
    paths = stage_paths(config, root)
    if paths["metrics"].exists():
        reports = parse_reports(paths["metrics"].read_bytes())
        return reports, _details_from_reports(reports)
    datasets = ensure_dataset(config, paths)
    datasets = ensure_personas(config, paths, datasets)
    layout, pools = ensure_features(config, paths, datasets)

    reports, details = [], {}
    for task in config.tasks:
        seed_reports = []
        details[task] = {}
        for seed in config.seeds:
            model = ensure_selector(config, paths, task, seed,
                                    datasets=datasets, layout=layout, pools=pools)
            report = _seed_report(model, datasets["test"], pools["test"],
                                  label=f"seed-{seed}")
            seed_reports.append(report)
            details[task][seed] = report.auc
        reports.extend(seed_reports)
        reports.append(_mean_report(task, seed_reports, config.seeds))

    payload = emit_report(reports, format="json")
    paths["metrics"].parent.mkdir(parents=True, exist_ok=True)
    paths["metrics"].write_bytes(payload)
    return reports, details


def ablation_variants(config: RunConfig) -> list:
    """(label, variant-config) per combination of the [ablate] axes, baseline
    axis values first so the first variant is the reference row."""
    axes = dict(config.ablate)
    if not axes:
        axes = {"persona": (config.persona, not config.persona),
                "selection": (config.selection, not config.selection)}
    names = sorted(axes)

    def _baseline_first(key):
        values = list(dict.fromkeys(axes[key]))
        base = getattr(config, key)
        if base in values:
            values.remove(base)
            values.insert(0, base)
        return values

    variants = []
    for combo in itertools.product(*(_baseline_first(k) for k in names)):
        overrides = dict(zip(names, combo))
        label = " ".join(f"{k}={_format_value(v)}" for k, v in overrides.items())
        variants.append((label, config.replace(ablate={}, **overrides)))
    return variants


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


def run_ablation(config: RunConfig, root) -> dict:
    """Evaluate every ablation variant and report per-task mean AUC plus a
    paired t-test (over seeds) against the first (baseline) variant. When a
    variant's per-seed AUCs are identical to the baseline's the t-test is
    undefined and reported as such."""
    variants = ablation_variants(config)
    rows = []
    baseline: dict = {}
    for index, (label, variant) in enumerate(variants):
        _, details = evaluate_run(variant, root)
        for task in variant.tasks:
            aucs = [details[task][s] for s in variant.seeds]
            row = {"variant": label, "task": task,
                   "auc_per_seed": [float(a) for a in aucs],
                   "auc_mean": float(np.mean(aucs))}
            if index == 0:
                baseline[task] = aucs
            else:
                diffs = np.asarray(aucs) - np.asarray(baseline[task])
                row["auc_delta"] = float(np.mean(diffs))
                try:
                    t, p, dof = paired_t_test(aucs, baseline[task])
                    row.update({"t": t, "p": p, "dof": dof})
                except DegenerateDataError:
                    # per-seed differences have no variance, so the paired t
                    # statistic is undefined; report the constant gap instead
                    note = ("identical to baseline across seeds"
                            if not np.any(diffs) else
                            "constant difference across seeds; t undefined")
                    row.update({"t": None, "p": None, "note": note})
            rows.append(row)
    return {"baseline": variants[0][0], "rows": rows}
