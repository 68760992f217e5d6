"""Deterministic radiomic feature extraction.

A volume is partitioned into a grid of subpatches (floor split, remainder
absorbed by the last cell per axis). Each subpatch yields, per source
volume, 19 first-order features over its intensity values, 16 shape
features over its Otsu foreground region, and 3 positional descriptors, in
a fixed name order. The assembled pool is a pure function of its inputs:
repeated extraction is bitwise identical.

Conventions, chosen once and mirrored by the conformance checks: population
(ddof=0) moments, linear-interpolation percentiles, 32-bin equal-width
discretization for entropy/uniformity, Otsu foreground over the same
histogram, 6-neighborhood face counting for surface area, and axis lengths
of 4*sqrt(lambda) from the PCA of foreground voxel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .volume import Volume

FIRST_ORDER_NAMES = [
    "Energy",
    "TotalEnergy",
    "Entropy",
    "Minimum",
    "10Percentile",
    "90Percentile",
    "Maximum",
    "Mean",
    "Median",
    "InterquartileRange",
    "Range",
    "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation",
    "RootMeanSquared",
    "StandardDeviation",
    "Skewness",
    "Kurtosis",
    "Variance",
    "Uniformity",
]

SHAPE_NAMES = [
    "VoxelVolume",
    "SurfaceArea",
    "SurfaceVolumeRatio",
    "Sphericity",
    "Compactness1",
    "Compactness2",
    "SphericalDisproportion",
    "Maximum3DDiameter",
    "Maximum2DDiameterSlice",
    "Maximum2DDiameterColumn",
    "Maximum2DDiameterRow",
    "MajorAxisLength",
    "MinorAxisLength",
    "LeastAxisLength",
    "Elongation",
    "Flatness",
]

POSITIONAL_NAMES = ["PositionZ", "PositionY", "PositionX"]

FEATURE_NAMES = FIRST_ORDER_NAMES + SHAPE_NAMES + POSITIONAL_NAMES

VIEW_ORDER = ["axial", "coronal", "sagittal"]

SOURCE_ORDER = ["original", "persona"]


@dataclass(frozen=True)
class GridCell:
    """Half-open voxel ranges [start, start+extent) per axis."""

    start: tuple
    extent: tuple

    def slices(self):
        return tuple(slice(s, s + e) for s, e in zip(self.start, self.extent))


@dataclass(frozen=True)
class SubpatchGrid:
    grid: tuple
    cells: tuple

    def __len__(self):
        return len(self.cells)


def partition_subpatches(extents, grid) -> SubpatchGrid:
    """Tile a (D, H, W) volume into grid cells, depth-major raster order.

    Per axis the first g-1 cells get floor(n/g) voxels and the last absorbs
    the remainder, so the cells tile the volume exactly.
    """
    if isinstance(extents, Volume):
        extents = extents.extents
    extents = tuple(int(e) for e in extents)
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or min(grid) < 1:
        raise InputError(f"grid must be three positive extents, got {grid}")
    if any(g > e for g, e in zip(grid, extents)):
        raise InputError(f"grid {grid} exceeds volume extents {extents}")
    axis_ranges = []
    for n, g in zip(extents, grid):
        size = n // g
        starts = [i * size for i in range(g)]
        sizes = [size] * (g - 1) + [n - (g - 1) * size]
        axis_ranges.append(list(zip(starts, sizes)))
    cells = []
    for z0, dz in axis_ranges[0]:
        for y0, dy in axis_ranges[1]:
            for x0, dx in axis_ranges[2]:
                cells.append(GridCell(start=(z0, y0, x0), extent=(dz, dy, dx)))
    return SubpatchGrid(grid=grid, cells=tuple(cells))


def discretize(values, bin_count: int = 32) -> np.ndarray:
    """Equal-width bin probabilities over [min, max]; constant input -> [1]."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InputError("cannot discretize an empty value set")
    if bin_count < 1:
        raise InputError(f"bin_count must be >= 1, got {bin_count}")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return np.array([1.0])
    counts, _ = np.histogram(values, bins=bin_count, range=(lo, hi))
    return counts / values.size


def first_order_features(values, voxel_volume: float = 1.0) -> dict:
    """The 19 first-order features of a value multiset, in fixed name order."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InputError("first-order features need at least one voxel")
    n = values.size
    p10, p25, median, p75, p90 = np.percentile(values, [10, 25, 50, 75, 90])
    mean = float(values.mean())
    m2 = float(np.mean((values - mean) ** 2))
    sd = float(np.sqrt(m2))
    energy = float(np.sum(values**2))
    probs = discretize(values)
    nz = probs[probs > 0]
    robust = values[(values >= p10) & (values <= p90)]
    if robust.size:
        robust_mean = float(robust.mean())
        rmad = float(np.mean(np.abs(robust - robust_mean)))
    else:
        rmad = 0.0
    if m2 > 0:
        skewness = float(np.mean((values - mean) ** 3)) / m2**1.5
        kurtosis = float(np.mean((values - mean) ** 4)) / m2**2
    else:
        skewness = 0.0
        kurtosis = 0.0
    out = {
        "Energy": energy,
        "TotalEnergy": float(voxel_volume) * energy,
        "Entropy": float(-np.sum(nz * np.log2(nz))),
        "Minimum": float(values.min()),
        "10Percentile": float(p10),
        "90Percentile": float(p90),
        "Maximum": float(values.max()),
        "Mean": mean,
        "Median": float(median),
        "InterquartileRange": float(p75 - p25),
        "Range": float(values.max() - values.min()),
        "MeanAbsoluteDeviation": float(np.mean(np.abs(values - mean))),
        "RobustMeanAbsoluteDeviation": rmad,
        "RootMeanSquared": float(np.sqrt(energy / n)),
        "StandardDeviation": sd,
        "Skewness": skewness,
        "Kurtosis": kurtosis,
        "Variance": m2,
        "Uniformity": float(np.sum(nz**2)),
    }
    return out


def otsu_threshold(values, bin_count: int = 32) -> float:
    """Threshold maximizing between-class variance over the binned histogram.

    Returns the bin edge of the best split (first maximum). Callers treat
    values strictly above the threshold as foreground.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InputError("cannot threshold an empty value set")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return lo - 1.0
    counts, edges = np.histogram(values, bins=bin_count, range=(lo, hi))
    p = counts / values.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)[:-1]
    w1 = 1.0 - w0
    cum_mean = np.cumsum(p * centers)[:-1]
    total_mean = float(np.sum(p * centers))
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, cum_mean / w0, 0.0)
        mu1 = np.where(w1 > 0, (total_mean - cum_mean) / w1, 0.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between))
    return float(edges[k + 1])


def foreground_mask(subpatch) -> np.ndarray:
    """Otsu foreground of a subpatch; zero-variance input -> all foreground."""
    arr = np.asarray(subpatch, dtype=np.float64)
    if arr.size == 0:
        raise InputError("cannot build a foreground mask of an empty subpatch")
    if float(arr.min()) == float(arr.max()):
        return np.ones(arr.shape, dtype=bool)
    return arr > otsu_threshold(arr)


def _max_pairwise_distance(points: np.ndarray) -> float:
    """Exact max pairwise Euclidean distance; hull-reduced when large."""
    n = points.shape[0]
    if n < 2:
        return 0.0
    if n > 128:
        try:
            from scipy.spatial import ConvexHull, QhullError

            points = points[ConvexHull(points).vertices]
            n = points.shape[0]
        except Exception:
            pass  # degenerate geometry: fall through to the exact scan
    best = 0.0
    step = 512
    for i in range(0, n, step):
        chunk = points[i : i + step]
        d2 = ((chunk[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def _surface_exposure(mask: np.ndarray) -> tuple:
    """Per-axis exposed-face counts (negative and positive directions)."""
    padded = np.pad(mask, 1)
    exposures = []
    for axis in range(3):

        def shifted(offset):
            idx = [slice(1, -1)] * 3
            idx[axis] = slice(1 + offset, mask.shape[axis] + 1 + offset)
            return padded[tuple(idx)]

        exposures.append(int(np.sum(mask & ~shifted(-1))) + int(np.sum(mask & ~shifted(1))))
    return tuple(exposures)


def _surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Integer coordinates of foreground voxels missing >= 1 of 6 neighbors."""
    padded = np.pad(mask, 1)
    full = np.ones(mask.shape, dtype=bool)
    for axis in range(3):
        for offset in (-1, 1):
            idx = [slice(1, -1)] * 3
            idx[axis] = slice(1 + offset, mask.shape[axis] + 1 + offset)
            full &= padded[tuple(idx)]
    return np.argwhere(mask & ~full)


def shape_features(mask, spacing=(1.0, 1.0, 1.0)) -> dict:
    """The 16 shape features of a binary region; empty mask -> all zeros."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise InputError(f"mask must be 3-D, got shape {mask.shape}")
    spacing = tuple(float(s) for s in spacing)
    out = {name: 0.0 for name in SHAPE_NAMES}
    n = int(mask.sum())
    if n == 0:
        return out

    sz, sy, sx = spacing
    volume = n * sz * sy * sx
    faces = _surface_exposure(mask)
    area = faces[0] * sy * sx + faces[1] * sz * sx + faces[2] * sz * sy

    coords_int = _surface_voxels(mask)
    phys = coords_int.astype(np.float64) * np.array(spacing)
    max3d = _max_pairwise_distance(phys)

    plane_axes = {
        "Maximum2DDiameterSlice": 0,  # fixed z, distances in (y, x)
        "Maximum2DDiameterColumn": 2,  # fixed x, distances in (z, y)
        "Maximum2DDiameterRow": 1,  # fixed y, distances in (z, x)
    }
    plane_diams = {}
    for name, axis in plane_axes.items():
        best = 0.0
        keep = [a for a in range(3) if a != axis]
        for v in np.unique(coords_int[:, axis]):
            group = phys[coords_int[:, axis] == v][:, keep]
            best = max(best, _max_pairwise_distance(group))
        plane_diams[name] = best

    all_coords = np.argwhere(mask).astype(np.float64) * np.array(spacing)
    centered = all_coords - all_coords.mean(axis=0)
    cov = centered.T @ centered / n
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    eigvals = np.clip(eigvals, 0.0, None)
    axes_len = 4.0 * np.sqrt(eigvals)

    sphericity = (np.pi ** (1.0 / 3.0)) * (6.0 * volume) ** (2.0 / 3.0) / area
    out.update(
        {
            "VoxelVolume": volume,
            "SurfaceArea": area,
            "SurfaceVolumeRatio": area / volume,
            "Sphericity": sphericity,
            "Compactness1": volume / (np.sqrt(np.pi) * area**1.5),
            "Compactness2": 36.0 * np.pi * volume**2 / area**3,
            "SphericalDisproportion": 1.0 / sphericity,
            "Maximum3DDiameter": max3d,
            "Maximum2DDiameterSlice": plane_diams["Maximum2DDiameterSlice"],
            "Maximum2DDiameterColumn": plane_diams["Maximum2DDiameterColumn"],
            "Maximum2DDiameterRow": plane_diams["Maximum2DDiameterRow"],
            "MajorAxisLength": float(axes_len[0]),
            "MinorAxisLength": float(axes_len[1]),
            "LeastAxisLength": float(axes_len[2]),
            "Elongation": float(np.sqrt(eigvals[1] / eigvals[0])) if eigvals[0] > 0 else 0.0,
            "Flatness": float(np.sqrt(eigvals[2] / eigvals[0])) if eigvals[0] > 0 else 0.0,
        }
    )
    return {name: float(out[name]) for name in SHAPE_NAMES}


def positional_descriptors(cell: GridCell, extents) -> dict:
    """Normalized subpatch-center coordinates, each in (0, 1)."""
    extents = tuple(int(e) for e in extents)
    center = [(s + e / 2.0) / n for s, e, n in zip(cell.start, cell.extent, extents)]
    return dict(zip(POSITIONAL_NAMES, center))


class FeatureLayout:
    """Bijective index over (view, subpatch, source, feature name).

    Index nesting, outermost first: view (canonical order axial, coronal,
    sagittal), subpatch (depth-major raster), source (original, persona),
    feature (19 first-order, 16 shape, 3 positional). Restricting
    ``sources`` to ("original",) gives the persona-free pool.
    """

    def __init__(self, views=VIEW_ORDER, grid=(2, 2, 2), sources=SOURCE_ORDER):
        views = list(views)
        if not views or any(v not in VIEW_ORDER for v in views) or len(set(views)) != len(views):
            raise InputError(f"views must be a nonempty subset of {VIEW_ORDER}, got {views}")
        sources = list(sources)
        if (not sources or any(s not in SOURCE_ORDER for s in sources)
                or len(set(sources)) != len(sources)):
            raise InputError(f"sources must be a nonempty subset of {SOURCE_ORDER}, got {sources}")
        self.views = [v for v in VIEW_ORDER if v in views]
        self.grid = tuple(int(g) for g in grid)
        self.patch_count = int(np.prod(self.grid))
        self.sources = [s for s in SOURCE_ORDER if s in sources]
        self.feature_names = list(FEATURE_NAMES)

    @property
    def total(self) -> int:
        return len(self.views) * self.patch_count * len(self.sources) * len(self.feature_names)

    def index(self, view: str, patch: int, source: str, feature: str) -> int:
        v = self.views.index(view)
        if not 0 <= patch < self.patch_count:
            raise InputError(f"patch index {patch} out of range [0, {self.patch_count})")
        s = self.sources.index(source)
        f = self.feature_names.index(feature)
        return ((v * self.patch_count + patch) * len(self.sources) + s) * len(self.feature_names) + f

    def decode(self, index: int) -> tuple:
        if not 0 <= index < self.total:
            raise InputError(f"feature index {index} out of range [0, {self.total})")
        nf = len(self.feature_names)
        ns = len(self.sources)
        f = index % nf
        rest = index // nf
        s = rest % ns
        rest //= ns
        p = rest % self.patch_count
        v = rest // self.patch_count
        return self.views[v], p, self.sources[s], self.feature_names[f]

    def to_dict(self) -> dict:
        return {"views": self.views, "grid": list(self.grid), "sources": self.sources}

    @staticmethod
    def from_dict(d: dict) -> "FeatureLayout":
        return FeatureLayout(views=d["views"], grid=tuple(d["grid"]),
                             sources=d.get("sources", SOURCE_ORDER))


@dataclass
class FeaturePool:
    layout: FeatureLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total,):
            raise InputError(
                f"pool has {self.values.shape} values, layout expects {self.layout.total}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("feature pool contains non-finite values")


def extract_cell_features(volume: Volume, cell: GridCell) -> dict:
    """First-order + shape + positional features of one subpatch."""
    sub = volume.intensities[cell.slices()].astype(np.float64)
    feats = first_order_features(sub, volume.voxel_volume)
    feats.update(shape_features(foreground_mask(sub), volume.spacing))
    feats.update(positional_descriptors(cell, volume.extents))
    return feats


def assemble_feature_pool(volumes: dict, personas: dict, layout: FeatureLayout) -> FeaturePool:
    """Extract the full F-vector for one study.

    ``volumes`` and ``personas`` map view name -> Volume; every view in the
    layout must be present in ``volumes``, and in ``personas`` when the
    layout includes the persona source.
    """
    for view in layout.views:
        if view not in volumes:
            raise InputError(f"study is missing view {view!r}")
        if "persona" in layout.sources and view not in personas:
            raise InputError(f"study is missing the persona for view {view!r}")
    values = np.zeros(layout.total, dtype=np.float64)
    for view in layout.views:
        grid = partition_subpatches(volumes[view].extents, layout.grid)
        if "persona" in layout.sources and personas[view].extents != volumes[view].extents:
            raise InputError(f"persona extents differ from volume extents for view {view!r}")
        for p, cell in enumerate(grid.cells):
            for source in layout.sources:
                vol = volumes[view] if source == "original" else personas[view]
                feats = extract_cell_features(vol, cell)
                for name, value in feats.items():
                    values[layout.index(view, p, source, name)] = value
    return FeaturePool(layout=layout, values=values)
