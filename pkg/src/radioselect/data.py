"""Studies, label tables, and the on-disk dataset layout.

A dataset directory holds one subdirectory per split:

    <root>/<split>/labels.csv                (case_id, abnormal, acl, meniscus)
    <root>/<split>/<view>/<case_id>.npy      one volume per view
    <root>/<split>/personas/<view>/<case_id>.npy   optional generated personas

Case ids are zero-padded digit strings; studies load sorted by id so that
iteration order never depends on filesystem enumeration.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError, ParseError
from .radiomics import VIEW_ORDER
from .volume import Volume, load_volume, save_volume

LABEL_KEYS = ["abnormal", "acl", "meniscus"]


@dataclass
class Study:
    study_id: str
    labels: dict
    volumes: dict = field(default_factory=dict)
    personas: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.labels.keys()) != set(LABEL_KEYS):
            raise InputError(f"study {self.study_id}: labels must be exactly {LABEL_KEYS}")
        for key, value in self.labels.items():
            if value not in (0, 1):
                raise InputError(f"study {self.study_id}: label {key}={value!r} is not 0/1")
        if not self.volumes:
            raise InputError(f"study {self.study_id}: at least one view is required")
        for name in list(self.volumes) + list(self.personas):
            if name not in VIEW_ORDER:
                raise InputError(f"study {self.study_id}: unknown view {name!r}")

    @property
    def views(self):
        return [v for v in VIEW_ORDER if v in self.volumes]


def read_labels_csv(path) -> dict:
    """case_id -> {abnormal, acl, meniscus}; strict header and 0/1 cells."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read labels file {path}: {exc}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != ["case_id"] + LABEL_KEYS:
        raise ParseError(f"{path}: header must be case_id,{','.join(LABEL_KEYS)}")
    labels = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
        case_id = row[0]
        if case_id in labels:
            raise ParseError(f"{path}:{lineno}: duplicate case id {case_id!r}")
        entry = {}
        for key, cell in zip(LABEL_KEYS, row[1:]):
            if cell not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: {key} must be 0 or 1, got {cell!r}")
            entry[key] = int(cell)
        labels[case_id] = entry
    return labels


def write_labels_csv(path, labels: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id"] + LABEL_KEYS)
        for case_id in sorted(labels):
            row = labels[case_id]
            writer.writerow([case_id] + [str(int(row[k])) for k in LABEL_KEYS])


def load_split(root, split: str, views=None, with_personas: bool = False) -> list:
    """All studies of one split, sorted by case id."""
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise InputError(f"split directory not found: {split_dir}")
    labels = read_labels_csv(split_dir / "labels.csv")
    views = [v for v in VIEW_ORDER if views is None or v in views]
    studies = []
    for case_id in sorted(labels):
        volumes = {}
        for view in views:
            vol_path = split_dir / view / f"{case_id}.npy"
            if not vol_path.exists():
                raise InputError(f"missing volume {vol_path}")
            volumes[view] = load_volume(vol_path)
        personas = {}
        if with_personas:
            for view in views:
                p_path = split_dir / "personas" / view / f"{case_id}.npy"
                if not p_path.exists():
                    raise InputError(f"missing persona {p_path}; run persona generation first")
                personas[view] = load_volume(p_path)
        studies.append(Study(case_id, labels[case_id], volumes, personas))
    return studies


def save_split(root, split: str, studies: list) -> None:
    root = Path(root)
    split_dir = root / split
    labels = {}
    for study in studies:
        labels[study.study_id] = study.labels
        for view, vol in study.volumes.items():
            path = split_dir / view / f"{study.study_id}.npy"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_volume(path, vol)
        for view, vol in study.personas.items():
            path = split_dir / "personas" / view / f"{study.study_id}.npy"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_volume(path, vol)
    write_labels_csv(split_dir / "labels.csv", labels)


def save_personas(root, split: str, studies: list) -> None:
    root = Path(root)
    for study in studies:
        for view, vol in study.personas.items():
            path = root / split / "personas" / view / f"{study.study_id}.npy"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_volume(path, vol)


def dataset_fingerprint(studies: list) -> str:
    """Stable digest of study ids and labels (not voxel data)."""
    h = hashlib.sha256()
    for study in sorted(studies, key=lambda s: s.study_id):
        h.update(study.study_id.encode())
        for key in LABEL_KEYS:
            h.update(bytes([study.labels[key]]))
    return h.hexdigest()[:16]
