"""
Anatomy of the feature pool
===========================

Builds one phantom study and walks the feature layout: the pool is an
F-dimensional vector indexed bijectively by (view, subpatch, source,
feature name), F = views x subpatches x sources x 38. The lesion announces
itself as a large original-vs-persona gap exactly in its home subpatch.
"""

import numpy as np

from radioselect.phantom import LESION_VIEW, phantom_study
from radioselect.radiomics import FeatureLayout, assemble_feature_pool
from radioselect.volume import Volume

study, templates = phantom_study(seed=3, case_index=0, lesions=("acl",))
# stand-in persona: the noiseless healthy template (what a perfectly
# trained diffusion model would aim for inside the mask)
study.personas = dict(templates)

layout = FeatureLayout()
print(f"layout: {len(layout.views)} views x {layout.patch_count} subpatches "
      f"x {len(layout.sources)} sources x {len(layout.feature_names)} features "
      f"= {layout.total}")

pool = assemble_feature_pool(study.volumes, study.personas, layout)

# every index decodes, and re-encodes to itself
for i in (0, 381, layout.total - 1):
    view, patch, source, name = layout.decode(i)
    assert layout.index(view, patch, source, name) == i
    print(f"  index {i:5d} -> view={view} subpatch={patch} source={source} {name}")

# per (view, subpatch): mean |original - persona| gap over the 38 features,
# z-scored per feature across slots so scales are comparable
gaps = {}
for view in layout.views:
    for patch in range(layout.patch_count):
        orig = np.array([pool.values[layout.index(view, patch, "original", n)]
                         for n in layout.feature_names])
        pers = np.array([pool.values[layout.index(view, patch, "persona", n)]
                         for n in layout.feature_names])
        gaps[(view, patch)] = np.abs(orig - pers)
stack = np.stack(list(gaps.values()))
scale = stack.std(axis=0)
scale[scale == 0] = 1.0
scores = {k: float((v / scale).mean()) for k, v in gaps.items()}

print("\ntop original-vs-persona gaps (view, subpatch):")
for (view, patch), score in sorted(scores.items(), key=lambda kv: -kv[1])[:3]:
    print(f"  {view:<9} subpatch {patch}: {score:.2f}")
print(f"\nacl lesion truly lives in: {LESION_VIEW['acl']}, subpatch 6")
