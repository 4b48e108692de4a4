"""Readers for the preprocessing pipeline's file contracts.

Patches arrive as 16-bit big-endian binary PGM files named
``<patient_id>_<instance_number>.pgm`` plus one JSON sidecar per
patient; patient labels come from the cohort manifest JSON and subsets
from the splits JSON. Everything is parsed here from the documented
formats, keeping this package independent of the pipeline's code.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

PGM_MAXVAL = 65535

LABEL_TO_INDEX = {"aseptic": 0, "infected": 1}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}


class EmptyDataset(Exception):
    """No patches matched the requested patients."""


def read_pgm(path: Path) -> np.ndarray:
    """Decode a 16-bit binary PGM into a float32 grid in [0, 1]."""
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != PGM_MAXVAL:
        raise ValueError(f"{path}: expected maxval {PGM_MAXVAL}, got {maxval}")
    body = data[m.end():]
    if len(body) != width * height * 2:
        raise ValueError(f"{path}: truncated pixel data")
    grid = np.frombuffer(body, dtype=">u2").reshape(height, width)
    return (grid / PGM_MAXVAL).astype(np.float32)


def load_manifest_labels(path: Path) -> dict[str, str]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {entry["id"]: entry["label"] for entry in doc["patients"]}


def load_splits(path: Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        "d_x": list(doc["d_x"]),
        "d_v": [list(block) for block in doc["d_v"]],
        "d_t": list(doc["d_t"]),
        "seed": int(doc["seed"]),
    }


def config_patients(splits: dict, k: int) -> tuple[list[str], list[str]]:
    """Train/valid patient ids for configuration ``k`` (1..4)."""
    if k not in (1, 2, 3, 4):
        raise ValueError(f"configuration index must be 1..4, got {k}")
    valid = list(splits["d_v"][k - 1])
    train = sorted(
        set(splits["d_t"]).union(
            *(splits["d_v"][i] for i in range(len(splits["d_v"])) if i != k - 1)
        )
    )
    return train, valid


@dataclass(frozen=True)
class PatchRecord:
    patient_id: str
    instance_number: int
    path: Path


def scan_patch_dir(patch_dir: Path) -> list[PatchRecord]:
    """All patches listed by the per-patient sidecars, sorted for determinism."""
    records = []
    for sidecar in sorted(Path(patch_dir).glob("*.json")):
        doc = json.loads(sidecar.read_text(encoding="utf-8"))
        pid = doc["patient_id"]
        for entry in doc["patches"]:
            records.append(
                PatchRecord(
                    patient_id=pid,
                    instance_number=int(entry["instance_number"]),
                    path=Path(patch_dir) / entry["file"],
                )
            )
    records.sort(key=lambda r: (r.patient_id, r.instance_number))
    return records


@dataclass
class PatchDataset:
    """Patches for a set of patients, loaded as one tensor."""

    inputs: torch.Tensor  # (n, 1, H, W) float32
    labels: torch.Tensor  # (n,) int64
    patients: list[str]
    instances: list[int]

    def __len__(self) -> int:
        return self.inputs.shape[0]


def load_dataset(
    patch_dir: Path,
    labels_by_patient: dict[str, str],
    patient_ids: list[str] | None = None,
) -> PatchDataset:
    wanted = None if patient_ids is None else set(patient_ids)
    grids = []
    labels = []
    patients = []
    instances = []
    for record in scan_patch_dir(patch_dir):
        if wanted is not None and record.patient_id not in wanted:
            continue
        if record.patient_id not in labels_by_patient:
            continue
        grids.append(torch.from_numpy(read_pgm(record.path)))
        labels.append(LABEL_TO_INDEX[labels_by_patient[record.patient_id]])
        patients.append(record.patient_id)
        instances.append(record.instance_number)
    if not grids:
        raise EmptyDataset(f"no patches under {patch_dir} for the requested patients")
    inputs = torch.stack(grids).unsqueeze(1)
    return PatchDataset(
        inputs=inputs,
        labels=torch.tensor(labels, dtype=torch.int64),
        patients=patients,
        instances=instances,
    )
