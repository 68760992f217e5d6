"""Synthetic knee-like phantom studies with known lesion geometry.

Each study is a nested-ellipsoid anatomy (mildly jittered per study) plus
Gaussian noise, rendered identically in all three views. Pathological
studies carry a bright tubular lesion in the sagittal view (acl-type, in
the posterior-medial octant of the central region) and/or a bright
ellipsoidal blob in the coronal view (meniscus-type, inferior-lateral
octant). Both lesion sites sit strictly inside the central inpainting box,
so a persona model that heals the box removes the evidence.

Generation is a pure function of (seed, case index): the same arguments
always produce bitwise-identical studies, and the noiseless healthy
template behind every study is exposed for ground-truth comparisons.
"""

from __future__ import annotations

import numpy as np

from .data import Study
from .errors import InputError
from .radiomics import VIEW_ORDER
from .volume import Volume

EXTENTS = (32, 128, 128)

NOISE_SIGMA = 0.05

LESION_GAIN = 4.0  # lesion amplitude in noise standard deviations

# acl-type tube: 45 degrees in the (y, x) plane, radius 3, half-length 8;
# sits strictly inside the central box and inside one octant of it
TUBE_CENTER = (20.0, 73.5, 45.0)
TUBE_RADIUS = 3.0
TUBE_HALF_LENGTH = 8.0

# meniscus-type blob: ellipsoid semi-axes (z, y, x)
BLOB_CENTER = (12.0, 54.0, 75.0)
BLOB_AXES = (3.0, 5.0, 5.0)

LESION_VIEW = {"acl": "sagittal", "meniscus": "coronal"}


def _coordinate_grids(extents):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extents), indexing="ij")


def healthy_template(extents=EXTENTS, jitter=(0.0, 0.0, 0.0), scale=1.0) -> np.ndarray:
    """Noiseless nested-ellipsoid anatomy in [0, 1].

    Shell boundaries are logistic ramps rather than hard steps, so intensity
    varies smoothly with position the way soft tissue does; plateau levels
    come out near 0.15 background, 0.49 outer shell, 0.70 middle shell and
    0.36 core.
    """
    zz, yy, xx = _coordinate_grids(extents)
    cz = extents[0] / 2.0 + jitter[0]
    cy = extents[1] / 2.0 + jitter[1]
    cx = extents[2] / 2.0 + jitter[2]
    az, ay, ax = (0.42 * n * scale for n in extents)
    r2 = ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2

    def shell(radius_fraction, width):
        # width is in squared-radius units relative to the shell; the core
        # gets a larger relative width so its small absolute radius still
        # ramps over a few voxels
        return 1.0 / (1.0 + np.exp((r2 / radius_fraction**2 - 1.0) / width))

    return (0.15 + 0.35 * shell(1.0, 0.15) + 0.22 * shell(0.55, 0.2)
            - 0.37 * shell(0.22, 0.3))


def tube_mask(extents=EXTENTS) -> np.ndarray:
    """Voxels within TUBE_RADIUS of the 45-degree segment (acl-type)."""
    zz, yy, xx = _coordinate_grids(extents)
    cz, cy, cx = TUBE_CENTER
    # unit direction in the (y, x) plane
    dy = dx = 1.0 / np.sqrt(2.0)
    py, px = yy - cy, xx - cx
    proj = py * dy + px * dx
    proj = np.clip(proj, -TUBE_HALF_LENGTH, TUBE_HALF_LENGTH)
    dist2 = (zz - cz) ** 2 + (py - proj * dy) ** 2 + (px - proj * dx) ** 2
    return dist2 <= TUBE_RADIUS**2


def blob_mask(extents=EXTENTS) -> np.ndarray:
    """Ellipsoidal blob voxels (meniscus-type)."""
    zz, yy, xx = _coordinate_grids(extents)
    cz, cy, cx = BLOB_CENTER
    az, ay, ax = BLOB_AXES
    r2 = ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
    return r2 <= 1.0


LESION_MASKS = {"acl": tube_mask, "meniscus": blob_mask}


def phantom_study(seed: int, case_index: int, lesions=(), extents=EXTENTS):
    """One study plus its noiseless healthy template.

    Returns (study, templates) where templates maps view -> noiseless
    healthy anatomy (the ground truth a persona should approach inside the
    inpainting box). ``lesions`` is a subset of {"acl", "meniscus"}.
    """
    lesions = tuple(lesions)
    for lesion in lesions:
        if lesion not in LESION_MASKS:
            raise InputError(f"unknown lesion type {lesion!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(case_index)]))
    jitter = rng.uniform(-2.0, 2.0, size=3)
    jitter[0] *= 0.25  # z voxels are 4x coarser; keep the jitter isotropic physically
    scale = float(rng.uniform(0.95, 1.05))
    template = healthy_template(extents, jitter=tuple(jitter), scale=scale)

    labels = {"abnormal": int(bool(lesions)), "acl": 0, "meniscus": 0}
    for lesion in lesions:
        labels[lesion] = 1
    volumes = {}
    templates = {}
    for view in VIEW_ORDER:
        anatomy = template.copy()
        for lesion in lesions:
            if LESION_VIEW[lesion] == view:
                anatomy[LESION_MASKS[lesion](extents)] += LESION_GAIN * NOISE_SIGMA
        noisy = anatomy + rng.normal(0.0, NOISE_SIGMA, size=extents)
        volumes[view] = Volume(np.clip(noisy, 0.0, 1.0).astype(np.float32))
        templates[view] = Volume(template.astype(np.float32))
    return Study(f"{case_index:04d}", labels, volumes), templates


def make_phantom_dataset(seed: int, n_healthy: int, n_pathological: int, extents=EXTENTS):
    """Deterministic list of studies: healthy first, then pathological.

    Pathological studies draw their lesion mix uniformly from
    {acl}, {meniscus}, {acl, meniscus}.
    """
    if n_healthy < 0 or n_pathological < 0:
        raise InputError("study counts must be >= 0")
    mix_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xFEED]))
    studies = []
    for i in range(n_healthy):
        study, _ = phantom_study(seed, i, lesions=(), extents=extents)
        studies.append(study)
    choices = [("acl",), ("meniscus",), ("acl", "meniscus")]
    for i in range(n_pathological):
        lesions = choices[int(mix_rng.integers(0, 3))]
        study, _ = phantom_study(seed, n_healthy + i, lesions=lesions, extents=extents)
        studies.append(study)
    return studies
