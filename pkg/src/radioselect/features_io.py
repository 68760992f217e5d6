"""Feature table serialization.

One CSV row per (study, view, subpatch, source, feature) with the header

    study_id,view,subpatch_index,source,feature_name,value

Values are written with repr, so float64 round-trips exactly and re-writing
the same pools yields a byte-identical file. This schema is the interchange
surface consumed by external validation tooling.
"""

import csv
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .radiomics import FeatureLayout

__all__ = ["write_feature_csv", "read_feature_csv", "FEATURE_CSV_HEADER"]

FEATURE_CSV_HEADER = ("study_id", "view", "subpatch_index", "source", "feature_name", "value")


def write_feature_csv(path, pools: dict, layout: FeatureLayout) -> None:
    """``pools`` maps study_id -> feature vector in layout order. Rows are
    emitted sorted by study id, then by layout index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FEATURE_CSV_HEADER)
        for study_id in sorted(pools):
            values = np.asarray(pools[study_id], dtype=np.float64)
            if values.shape != (layout.total,):
                raise ParseError(
                    f"study {study_id}: {values.shape} values, layout expects {layout.total}")
            for i in range(layout.total):
                view, patch, source, name = layout.decode(i)
                writer.writerow([study_id, view, patch, source, name, repr(float(values[i]))])


def read_feature_csv(path, layout: FeatureLayout) -> dict:
    """Inverse of write_feature_csv; every layout slot of every study must be
    present exactly once."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read feature table {path}: {exc}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows or tuple(rows[0]) != FEATURE_CSV_HEADER:
        raise ParseError(f"{path}: expected header {','.join(FEATURE_CSV_HEADER)}")
    pools: dict = {}
    filled: dict = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 6:
            raise ParseError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
        study_id, view, patch_text, source, name, value_text = row
        try:
            patch = int(patch_text)
            value = float(value_text)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        try:
            index = layout.index(view, patch, source, name)
        except (ValueError, InputError):
            raise ParseError(
                f"{path}:{lineno}: ({view}, {patch}, {source}, {name}) "
                "is not in the feature layout") from None
        if study_id not in pools:
            pools[study_id] = np.zeros(layout.total, dtype=np.float64)
            filled[study_id] = np.zeros(layout.total, dtype=bool)
        if filled[study_id][index]:
            raise ParseError(f"{path}:{lineno}: duplicate entry for study {study_id}")
        pools[study_id][index] = value
        filled[study_id][index] = True
    for study_id, mask in filled.items():
        missing = int(np.sum(~mask))
        if missing:
            raise ParseError(
                f"{path}: study {study_id} is missing {missing} of {layout.total} features")
    return pools
