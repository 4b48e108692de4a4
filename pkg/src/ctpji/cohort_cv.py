"""Patient cohort manifest and the block cross-validation protocol.

Labels exist at patient level only; every slice inherits its patient's
label. The split carves the cohort into a held-out test block and four
validation blocks, each balanced six aseptic / six infected, with the
remaining patients forming the training pool. The four training
configurations rotate which validation block is held out, and the test
block never enters training or validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABELS = ("aseptic", "infected")

BLOCK_PER_LABEL = 6  # patients per label in the test and validation blocks
N_VALIDATION_BLOCKS = 4
N_CONFIGS = 4


class InsufficientCohort(Exception):
    """Too few patients of some label to fill the balanced blocks."""


class BadConfigIndex(Exception):
    """Configuration index outside 1..4."""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: str
    slice_files: tuple[str, ...] = ()


@dataclass
class CohortManifest:
    patients: list[PatientRecord]

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate patient ids: {dupes}")
        for p in self.patients:
            if p.label not in LABELS:
                raise ValueError(f"patient {p.patient_id}: bad label {p.label!r}")

    def ids_for(self, label: str) -> list[str]:
        return [p.patient_id for p in self.patients if p.label == label]

    @property
    def labels(self) -> dict[str, str]:
        return {p.patient_id: p.label for p in self.patients}

    def __len__(self) -> int:
        return len(self.patients)


def manifest_to_json(manifest: CohortManifest) -> dict:
    return {
        "patients": [
            {"id": p.patient_id, "label": p.label, "slices": list(p.slice_files)}
            for p in manifest.patients
        ]
    }


def manifest_from_json(doc: dict) -> CohortManifest:
    patients = [
        PatientRecord(
            patient_id=entry["id"],
            label=entry["label"],
            slice_files=tuple(entry.get("slices", ())),
        )
        for entry in doc["patients"]
    ]
    return CohortManifest(patients=patients)


def save_manifest(manifest: CohortManifest, path: Path) -> None:
    Path(path).write_text(
        json.dumps(manifest_to_json(manifest), indent=2) + "\n", encoding="utf-8"
    )


def load_manifest(path: Path) -> CohortManifest:
    return manifest_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Splits:
    """The partition: test block, four validation blocks, training pool."""

    d_x: list[str]
    d_v: list[list[str]]
    d_t: list[str]
    seed: int

    def all_sets(self) -> list[list[str]]:
        return [self.d_x, *self.d_v, self.d_t]


def splits_to_json(splits: Splits) -> dict:
    return {
        "d_x": list(splits.d_x),
        "d_v": [list(block) for block in splits.d_v],
        "d_t": list(splits.d_t),
        "seed": splits.seed,
    }


def splits_from_json(doc: dict) -> Splits:
    return Splits(
        d_x=list(doc["d_x"]),
        d_v=[list(block) for block in doc["d_v"]],
        d_t=list(doc["d_t"]),
        seed=int(doc["seed"]),
    )


def save_splits(splits: Splits, path: Path) -> None:
    Path(path).write_text(
        json.dumps(splits_to_json(splits), indent=2) + "\n", encoding="utf-8"
    )


def load_splits(path: Path) -> Splits:
    return splits_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def make_splits(manifest: CohortManifest, seed: int) -> Splits:
    """Randomly assign patients to the balanced blocks, deterministically.

    Needs at least 30 patients per label (five blocks of six each);
    leftovers of both labels form the training pool.
    """
    need = BLOCK_PER_LABEL * (1 + N_VALIDATION_BLOCKS)
    shuffled: dict[str, list[str]] = {}
    rng = np.random.default_rng(seed)
    for label in LABELS:
        ids = sorted(manifest.ids_for(label))
        if len(ids) < need:
            raise InsufficientCohort(
                f"need >= {need} {label} patients for balanced blocks, have {len(ids)}"
            )
        shuffled[label] = [ids[i] for i in rng.permutation(len(ids))]

    def block(k: int) -> list[str]:
        lo = k * BLOCK_PER_LABEL
        hi = lo + BLOCK_PER_LABEL
        return sorted(shuffled["aseptic"][lo:hi] + shuffled["infected"][lo:hi])

    d_x = block(0)
    d_v = [block(1 + k) for k in range(N_VALIDATION_BLOCKS)]
    rest = shuffled["aseptic"][need:] + shuffled["infected"][need:]
    return Splits(d_x=d_x, d_v=d_v, d_t=sorted(rest), seed=seed)


def config(splits: Splits, k: int) -> tuple[list[str], list[str]]:
    """Training configuration ``k``: hold out validation block ``k``.

    Returns ``(train_ids, valid_ids)``; training is the pool plus every
    other validation block, and the test block appears in neither.
    """
    if k not in range(1, N_CONFIGS + 1):
        raise BadConfigIndex(f"config index must be in 1..{N_CONFIGS}, got {k}")
    valid = list(splits.d_v[k - 1])
    train = sorted(
        set(splits.d_t).union(*(splits.d_v[i] for i in range(N_VALIDATION_BLOCKS) if i != k - 1))
    )
    return train, valid
