"""
End-to-end quickstart on a miniature phantom set
================================================

Runs the whole pipeline at toy scale (seconds, not minutes): generate
phantoms, train a small diffusion model, sample healthy personas, extract
the feature pools, train/calibrate one selector per task, and print the
evaluation table plus one per-study selection report.

For the full desk-scale configuration just use the defaults:

    radioselect evaluate --out runs/desk
"""

import json
import tempfile

from radioselect import pipeline
from radioselect.reporting import emit_report
from radioselect.runconfig import RunConfig
from radioselect.selection import infer, load_selector_model

config = RunConfig(
    phantom_train=12, phantom_val=8, phantom_test=8,
    extents=(16, 32, 32), internal_extents=(8, 16, 16),
    diffusion_t=20, persona_steps=40, epochs=30, batch_size=4,
    net_extents=(8, 8, 8), base_channels=4, seeds=(0,),
)

with tempfile.TemporaryDirectory() as root:
    # one call runs every stage; each artifact lands under `root` and a
    # second call would reuse all of them
    reports, details = pipeline.evaluate_run(config, root)
    print(emit_report(reports, format="text").decode())

    # decode what one selector actually used for one pathological study
    paths = pipeline.stage_paths(config, root)
    model = load_selector_model(pipeline.selector_path(config, paths, "abnormal", 0))
    datasets = pipeline.ensure_personas(config, paths)
    sick = next(s for s in datasets["test"] if s.labels["abnormal"] == 1)
    result = infer(model, sick)
    print(f"study {sick.study_id}: p={result.probability:.3f} "
          f"decision={result.decision} selected={result.selected.count}")
    for entry in result.report["selected"][:5]:
        print("  ", json.dumps(entry))
