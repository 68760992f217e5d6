"""Shipping gate: one test per product guarantee, each printing one
``[PASS]``/``[FAIL]`` line (run with ``-s`` to see them live; ``-v`` names
map one-to-one onto the criteria).

The desk-scale fixture runs the complete pipeline once, at the documented
reference configuration, in a fresh directory; the end-to-end, localization,
ablation, and threshold-sweep checks all read from that single run.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from oracles import (auc_oracle, first_order_oracle, max_pairwise_oracle,
                     paired_t_oracle, surface_voxels_oracle, youden_oracle)
from radioselect import cli
from radioselect import data as data_io
from radioselect import pipeline
from radioselect.diffusion import (inpaint, linear_beta_schedule,
                                   make_center_mask, make_denoiser_config,
                                   make_persona_model, q_sample,
                                   sinusoidal_time_embedding, train_persona)
from radioselect.features_io import read_feature_csv
from radioselect.metrics import paired_t_test, roc_auc, youden_threshold
from radioselect.network import NetworkConfig, grad_check, init_parameters
from radioselect.phantom import LESION_MASKS, LESION_VIEW, make_phantom_dataset
from radioselect.radiomics import (FeatureLayout, FeaturePool,
                                   first_order_features, partition_subpatches,
                                   shape_features)
from radioselect.runconfig import RunConfig
from radioselect.selection import (binarize_select, infer, load_selector_model,
                                   logistic_forward,
                                   predict_feature_probabilities)
from radioselect.volume import Volume, load_volume

VIEWS = ("axial", "coronal", "sagittal")


def _criterion(num: int, text: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:02d}: {text}"
    if detail:
        line += f" -- {detail}"
    print(line, flush=True)
    assert ok, line


def _rel_err(actual: float, expected: float) -> float:
    return abs(actual - expected) / max(abs(expected), 1e-12)


# ---------------------------------------------------------------------------
# desk-scale reference run (shared by criteria 6-9)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    config = RunConfig()
    root = tmp_path_factory.mktemp("desk")
    start = time.monotonic()
    reports, details = pipeline.evaluate_run(config, root)
    elapsed = time.monotonic() - start
    return SimpleNamespace(config=config, root=root, paths=pipeline.stage_paths(config, root),
                           reports=reports, details=details, elapsed=elapsed)


def _load_test_split(desk):
    """Test studies with personas attached, plus their cached feature rows."""
    studies = data_io.load_split(desk.paths["dataset"], "test")
    persona_root = desk.paths["personas"] / "test" / "personas"
    for study in studies:
        for view in desk.config.views:
            study.personas[view] = load_volume(persona_root / view / f"{study.study_id}.npy")
    layout = FeatureLayout(views=desk.config.views, grid=desk.config.grid,
                           sources=("original", "persona"))
    pools = read_feature_csv(desk.paths["features"] / "test.csv", layout)
    return studies, pools


# ---------------------------------------------------------------------------
# criterion 1: feature extraction matches brute-force oracles


def test_c01_feature_oracle_equivalence():
    rng = np.random.default_rng(20260815)
    start = time.monotonic()
    worst = 0.0
    for case in range(100):
        volume = rng.uniform(-40.0, 160.0, size=(8, 8, 8))
        if case % 3 == 0:
            volume = np.round(volume)  # heavy ties: percentile/histogram edges
        voxel_volume = float(rng.uniform(0.1, 4.0))
        feats = first_order_features(volume, voxel_volume)
        expected = first_order_oracle(volume.ravel().tolist(), voxel_volume)
        assert set(feats) == set(expected)
        for name, value in expected.items():
            err = _rel_err(feats[name], value)
            worst = max(worst, err)
            assert err < 1e-6, f"case {case}: {name} {feats[name]} vs {value}"

        mask = volume > np.percentile(volume, rng.uniform(20.0, 90.0))
        if case % 7 == 0:
            mask = np.zeros((8, 8, 8), dtype=bool)
            mask[3] = True  # planar region: degenerate-hull path
        if not mask.any():
            mask[4, 4, 4] = True
        shape = shape_features(mask, spacing=(1.0, 1.0, 1.0))
        assert shape["VoxelVolume"] == float(int(mask.sum()))
        surface = surface_voxels_oracle(mask)
        assert shape["Maximum3DDiameter"] == max_pairwise_oracle(surface)
    elapsed = time.monotonic() - start
    _criterion(1, "first-order features match the brute-force oracle to 1e-6; "
                  "VoxelVolume and Maximum3DDiameter are exact", elapsed < 60.0,
               f"100 subpatches, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: pool layout size and index bijection


def test_c02_layout_contract():
    full = FeatureLayout(views=VIEWS, grid=(2, 2, 2), sources=("original", "persona"))
    sagittal = FeatureLayout(views=("sagittal",), grid=(2, 2, 2),
                             sources=("original", "persona"))
    assert full.total == 1824
    assert sagittal.total == 608
    for layout in (full, sagittal):
        seen = set()
        for i in range(layout.total):
            view, patch, source, name = layout.decode(i)
            assert layout.index(view, patch, source, name) == i
            seen.add((view, patch, source, name))
        assert len(seen) == layout.total
    _criterion(2, "feature pool has F=1824 (three views) and F=608 (sagittal), "
                  "with an exhaustive encode/decode bijection", True,
               f"{full.total} and {sagittal.total} slots round-trip")


# ---------------------------------------------------------------------------
# criterion 3: analytic gradients match central differences


def test_c03_gradient_checks():
    rng = np.random.default_rng(33)
    start = time.monotonic()
    errors = {}

    head = NetworkConfig(input_shape=(57, 1, 1, 1),
                         layers=[{"kind": "flatten"},
                                 {"kind": "dense", "features": 1,
                                  "activation": "identity"}], seed=1)
    head_params = init_parameters(head)
    assert head_params.count <= 10_000
    x = rng.normal(size=(4, 57, 1, 1, 1))
    label = np.array([[1.0], [0.0], [1.0], [0.0]])
    errors["logistic head"] = grad_check(head, head_params, x, label=label)

    from radioselect.selection import make_weighting_config

    layout = FeatureLayout()
    weighting = make_weighting_config(layout)
    weighting_params = init_parameters(weighting)
    assert weighting_params.count <= 10_000
    errors["weighting net"] = grad_check(
        weighting, weighting_params, rng.normal(size=(2, 6, 8, 8, 8)))

    denoiser = make_denoiser_config((4, 8, 8), base_channels=2, temb_dim=8)
    denoiser_params = init_parameters(denoiser)
    assert denoiser_params.count <= 10_000
    temb = sinusoidal_time_embedding([3, 17], 8)
    errors["denoiser"] = grad_check(
        denoiser, denoiser_params, rng.normal(size=(2, 3, 4, 8, 8)), temb=temb)

    elapsed = time.monotonic() - start
    ok = all(err < 1e-4 for err in errors.values()) and elapsed < 120.0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items())
    _criterion(3, "gradient checks below 1e-4 on head, weighting net, and "
                  "denoiser (each under 10k parameters)", ok,
               f"{detail}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: diffusion forward moments and schedule endpoints


def test_c04_diffusion_forward_moments():
    timesteps = 200
    schedule = linear_beta_schedule(timesteps)
    assert schedule.betas[0] == 1e-4
    assert schedule.betas[-1] == 0.02

    rng = np.random.default_rng(44)
    x0 = Volume(rng.uniform(0.0, 1.0, size=(8, 8, 8)).astype(np.float32))
    draws = 10_000
    details = []
    for t in (1, timesteps // 2, timesteps):
        alpha_bar = schedule.alpha_bar(t)
        noise = rng.standard_normal(size=(draws, 8, 8, 8))
        samples = np.stack([
            q_sample(x0, t, Volume(noise[i].astype(np.float32)), schedule).intensities
            for i in range(draws)])
        residual = samples.astype(np.float64) - np.sqrt(alpha_bar) * x0.intensities.astype(np.float64)
        se = np.sqrt((1.0 - alpha_bar) / residual.size)
        mean_off = abs(float(residual.mean()))
        var = float(residual.var())
        var_off = abs(var - (1.0 - alpha_bar)) / (1.0 - alpha_bar)
        assert mean_off <= 3.0 * se, f"t={t}: mean off by {mean_off / se:.2f} SE"
        assert var_off <= 0.05, f"t={t}: variance off by {var_off:.3%}"
        details.append(f"t={t} mean {mean_off / se:.2f}SE var {var_off:.2%}")
    _criterion(4, "forward-noising moments match the schedule at t in "
                  "{1, T/2, T} over 10k draws; beta endpoints exact", True,
               "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 5: inpainting keeps everything outside the mask bitwise


def test_c05_inpainting_bitwise_outside_mask():
    rng = np.random.default_rng(55)
    extents = (16, 32, 32)
    volume = Volume(rng.uniform(0.0, 1.0, size=extents).astype(np.float32))

    model = make_persona_model(extents, timesteps=12, internal_extents=(8, 16, 16), seed=0)
    assert model.mask_fractions == (0.5, 0.3, 0.5)
    box = make_center_mask(extents, model.mask_fractions).array(bool)
    outside = ~box

    untrained = inpaint(model, volume, seed=3)
    assert np.array_equal(untrained.intensities[outside], volume.intensities[outside])
    assert not np.array_equal(untrained.intensities[box], volume.intensities[box])

    healthy = make_phantom_dataset(seed=7, n_healthy=4, n_pathological=0, extents=extents)
    train_persona(healthy, model, steps=6, seed=0, batch_size=2)
    trained = inpaint(model, volume, seed=3)
    assert np.array_equal(trained.intensities[outside], volume.intensities[outside])
    assert not np.array_equal(trained.intensities[box], volume.intensities[box])
    _criterion(5, "inpainting output equals its input bitwise outside the "
                  "central 50/30/50 mask, trained and untrained", True,
               f"{int(outside.sum())} outside voxels identical in both models")


# ---------------------------------------------------------------------------
# criterion 6: desk-scale end-to-end performance and runtime


def test_c06_desk_scale_end_to_end(desk):
    rows = []
    ok = True
    for task in desk.config.tasks:
        mean = next(r for r in desk.reports if r.task == task and r.label == "seed-mean")
        rows.append(f"{task} auc {mean.auc:.3f} acc {mean.accuracy:.3f}")
        ok = ok and mean.auc >= 0.90 and mean.accuracy >= 0.85
    budget = 30.0 * 60.0
    ok = ok and desk.elapsed <= budget
    _criterion(6, "desk-scale run reaches AUC >= 0.90 and accuracy >= 0.85 "
                  "per task (3-seed mean) within the 30-minute budget", ok,
               "; ".join(rows) + f"; {desk.elapsed / 60.0:.1f} min")


# ---------------------------------------------------------------------------
# criterion 7: selected features localize to the lesion subpatch


def _lesion_targets(config) -> dict:
    """lesion -> set of (view, subpatch) cells its voxels occupy."""
    grid = partition_subpatches(config.extents, config.grid)
    targets = {}
    for lesion, view in LESION_VIEW.items():
        mask = LESION_MASKS[lesion](config.extents)
        cells = {(view, p) for p, cell in enumerate(grid.cells)
                 if mask[cell.slices()].any()}
        targets[lesion] = cells
    return targets


def test_c07_selection_localizes_lesions(desk):
    studies, pools = _load_test_split(desk)
    lesion_cells = _lesion_targets(desk.config)
    details = []
    ok = True
    for task in desk.config.tasks:
        fractions = []
        empty = 0
        for seed in desk.config.seeds:
            model = load_selector_model(
                pipeline.selector_path(desk.config, desk.paths, task, seed))
            for study in studies:
                if study.labels[task] != 1:
                    continue
                targets = set()
                for lesion in LESION_VIEW:
                    if study.labels.get(lesion, 0) == 1:
                        targets |= lesion_cells[lesion]
                p = predict_feature_probabilities(model, study)
                pool = FeaturePool(model.layout, pools[study.study_id])
                selected = binarize_select(p, pool, model.normalization, 0.4)
                indexes = np.flatnonzero(selected.mask)
                if len(indexes) == 0:
                    empty += 1
                    continue
                hits = sum(1 for i in indexes
                           if model.layout.decode(int(i))[:2] in targets)
                fractions.append(hits / len(indexes))
        assert fractions, f"{task}: every lesion-bearing study selected nothing"
        frac = float(np.mean(fractions))
        details.append(f"{task} {frac:.3f} (n={len(fractions)}, empty={empty})")
        ok = ok and frac >= 0.5
    _criterion(7, "at T_sel=0.4, at least half of the selected features "
                  "(study-averaged) decode to a lesion subpatch or its "
                  "persona counterpart", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 8: ablations point the right way


def test_c08_ablation_directions(desk):
    details = []
    ok = True
    for axis in ("persona", "selection"):
        config = desk.config.replace(ablate={axis: (True, False)})
        table = pipeline.run_ablation(config, desk.root)
        on_rows = [r for r in table["rows"] if r["variant"] == table["baseline"]]
        off_rows = [r for r in table["rows"] if r["variant"] != table["baseline"]]
        on_mean = float(np.mean([a for r in on_rows for a in r["auc_per_seed"]]))
        off_mean = float(np.mean([a for r in off_rows for a in r["auc_per_seed"]]))
        ok = ok and on_mean >= off_mean
        tests = []
        for row in off_rows:
            if row.get("t") is not None:
                tests.append(f"{row['task']} t={row['t']:.2f} p={row['p']:.3f}")
            else:
                tests.append(f"{row['task']} {row['note']}")
        details.append(f"{axis} on {on_mean:.3f} vs off {off_mean:.3f} [{'; '.join(tests)}]")
    _criterion(8, "mean AUC orders persona-on >= persona-off and "
                  "selection-on >= selection-off (paired t reported)", ok,
               " | ".join(details))


# ---------------------------------------------------------------------------
# criterion 9: selection threshold sweep is nested


def test_c09_threshold_sweep_nested(desk):
    studies, pools = _load_test_split(desk)
    thresholds = (0.0, 0.4, 0.5)
    aucs = {t: [] for t in thresholds}
    nested_checks = 0
    for task in desk.config.tasks:
        for seed in desk.config.seeds:
            model = load_selector_model(
                pipeline.selector_path(desk.config, desk.paths, task, seed))
            scores = {t: [] for t in thresholds}
            labels = []
            for study in studies:
                pool = FeaturePool(model.layout, pools[study.study_id])
                p = predict_feature_probabilities(model, study)
                masks = {}
                for t in thresholds:
                    selected = binarize_select(p, pool, model.normalization, t)
                    masks[t] = selected.mask.astype(bool)
                    scores[t].append(logistic_forward(
                        model.head_weights, model.head_bias, selected.values))
                labels.append(study.labels[task])
                assert not np.any(masks[0.5] & ~masks[0.4])
                assert not np.any(masks[0.4] & ~masks[0.0])
                assert masks[0.0].all()  # p > 0 everywhere, so T=0 keeps all
                nested_checks += 1
            for t in thresholds:
                aucs[t].append(roc_auc(np.asarray(scores[t]), np.asarray(labels)))
            if seed == desk.config.seeds[0]:
                # tie the sweep arithmetic to the shipped inference path
                study = studies[0]
                result = infer(model, study, pool=pools[study.study_id])
                assert result.probability == pytest.approx(
                    scores[0.4][0], rel=1e-12)
    detail = ", ".join(f"T={t} auc {float(np.mean(aucs[t])):.3f}" for t in thresholds)
    _criterion(9, "selected sets are nested over the T_sel grid {0.0, 0.4, "
                  "0.5}, with AUC reported per threshold", True,
               f"{nested_checks} study-model pairs; {detail}")


# ---------------------------------------------------------------------------
# criterion 10: metric implementations match independent oracles


def test_c10_metric_oracles():
    rng = np.random.default_rng(1010)
    worst_auc = worst_t = worst_p = 0.0
    for case in range(20):
        n = int(rng.integers(8, 40))
        scores = rng.integers(0, 8, size=n) / 8.0 if case % 2 else rng.uniform(0, 1, n)
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1  # both classes always present
        auc = roc_auc(scores, labels)
        worst_auc = max(worst_auc, abs(auc - auc_oracle(labels.tolist(), scores.tolist())))
        threshold, j = youden_threshold(scores, labels)
        oracle_threshold, oracle_j = youden_oracle(labels.tolist(), scores.tolist())
        assert threshold == oracle_threshold
        assert abs(j - oracle_j) < 1e-12

        a = rng.normal(size=6)
        b = a + rng.normal(scale=0.3, size=6) + 0.2
        t, p, dof = paired_t_test(a, b)
        t_expected, p_expected = paired_t_oracle(a.tolist(), b.tolist())
        assert dof == 5
        worst_t = max(worst_t, abs(t - t_expected))
        worst_p = max(worst_p, abs(p - p_expected))
    ok = worst_auc < 1e-12 and worst_t < 1e-6 and worst_p < 1e-4
    _criterion(10, "AUC equals pair counting, Youden equals brute-force "
                   "argmax, paired t matches the oracle (t to 1e-6, p to 1e-4)",
               ok, f"worst: auc {worst_auc:.1e}, t {worst_t:.1e}, p {worst_p:.1e}")


# ---------------------------------------------------------------------------
# criterion 11: single-threaded reruns are byte-identical


MINI_CFG = """
phantom_train = 8
phantom_val = 6
phantom_test = 6
extents = 16x32x32
internal_extents = 8x16x16
diffusion_t = 10
persona_steps = 4
epochs = 3
batch_size = 4
seeds = 0,1
net_extents = 8x8x8
base_channels = 2
"""


def test_c11_reproducible_metrics(tmp_path):
    cfg_path = tmp_path / "mini.cfg"
    cfg_path.write_text(MINI_CFG)
    payloads = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli.main(["evaluate", "--config", str(cfg_path),
                         "--out", str(out), "--single-thread"]) == 0
        metrics = sorted(out.glob("metrics-*.json"))
        assert len(metrics) == 1
        payloads.append(metrics[0].read_bytes())
    ok = payloads[0] == payloads[1]
    _criterion(11, "two single-threaded runs of the full pipeline produce "
                   "byte-identical metrics files", ok,
               f"{len(payloads[0])} bytes each")
