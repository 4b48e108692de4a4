"""Per-patient accuracy / F-score and patient-level aggregation.

Every slice inherits its patient's label, so per-patient accuracy is
the fraction of slices whose predicted class matches that label. For
the F-score the patient's own label acts as the positive class: recall
equals the accuracy, and precision is 1 whenever at least one slice is
predicted positive (a single-label patient cannot produce a false
positive), giving ``F = 2*acc / (1 + acc)`` and ``F = 0`` when no slice
is predicted positive.

A patient is called infected when the fraction of infected-predicted
slices strictly exceeds the aggregation threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .cohort_cv import CohortManifest, Splits

ASEPTIC = "aseptic"
INFECTED = "infected"

DEFAULT_AGGREGATION_THRESHOLD = 0.5

PREDICTIONS_HEADER = ["patient_id", "instance_number", "prob_infected"]


class EmptyPredictions(Exception):
    """A per-patient operation received no predictions."""


class InvalidThreshold(Exception):
    """Aggregation threshold outside [0, 1]."""


class MissingPredictions(Exception):
    """A test-block patient lacks predictions for a requested configuration."""


class PredictionFormatError(Exception):
    """A predictions CSV does not match the expected schema."""


@dataclass(frozen=True)
class SlicePrediction:
    """One per-image infected-probability record.

    The hard class is the argmax of the two probabilities; a tie at
    exactly 0.5 resolves to aseptic (conservative at slice level).
    """

    patient_id: str
    instance_number: int
    prob_infected: float

    def __post_init__(self):
        if not (0.0 <= self.prob_infected <= 1.0):
            raise ValueError(f"prob_infected must be in [0, 1], got {self.prob_infected}")

    @property
    def predicted_class(self) -> str:
        return INFECTED if self.prob_infected > 0.5 else ASEPTIC


@dataclass(frozen=True)
class PatientReport:
    patient_id: str
    label: str
    n_images: int
    n_correct: int
    accuracy: float
    f_score: float
    aggregated_class: str


def _check_single_patient(preds: Sequence[SlicePrediction]) -> str:
    if not preds:
        raise EmptyPredictions("no predictions given")
    ids = {p.patient_id for p in preds}
    if len(ids) > 1:
        raise ValueError(f"predictions span multiple patients: {sorted(ids)}")
    return ids.pop()


def patient_accuracy(preds: Sequence[SlicePrediction], label: str) -> float:
    """Fraction of slices predicted as the patient's label."""
    _check_single_patient(preds)
    correct = sum(1 for p in preds if p.predicted_class == label)
    return correct / len(preds)


def patient_fscore(preds: Sequence[SlicePrediction], label: str) -> float:
    """Per-patient F-score with the patient's label as positive class."""
    acc = patient_accuracy(preds, label)
    if acc == 0.0:
        return 0.0
    return 2.0 * acc / (1.0 + acc)


def aggregate_patient(
    preds: Sequence[SlicePrediction],
    threshold: float = DEFAULT_AGGREGATION_THRESHOLD,
) -> str:
    """Patient-level call: infected iff the infected fraction exceeds ``threshold``."""
    if not (0.0 <= threshold <= 1.0):
        raise InvalidThreshold(f"threshold must be in [0, 1], got {threshold}")
    _check_single_patient(preds)
    frac = sum(1 for p in preds if p.predicted_class == INFECTED) / len(preds)
    return INFECTED if frac > threshold else ASEPTIC


def patient_report(
    preds: Sequence[SlicePrediction],
    label: str,
    threshold: float = DEFAULT_AGGREGATION_THRESHOLD,
) -> PatientReport:
    pid = _check_single_patient(preds)
    correct = sum(1 for p in preds if p.predicted_class == label)
    acc = correct / len(preds)
    return PatientReport(
        patient_id=pid,
        label=label,
        n_images=len(preds),
        n_correct=correct,
        accuracy=acc,
        f_score=0.0 if acc == 0.0 else 2.0 * acc / (1.0 + acc),
        aggregated_class=aggregate_patient(preds, threshold),
    )


@dataclass(frozen=True)
class TableRow:
    number: int
    patient_id: str
    label: str
    n_images: int
    per_config: Mapping[int, PatientReport]


@dataclass(frozen=True)
class TableReport:
    configs: tuple[int, ...]
    rows: tuple[TableRow, ...]
    threshold: float


def _group_by_patient(preds: Iterable[SlicePrediction]) -> dict[str, list[SlicePrediction]]:
    grouped: dict[str, list[SlicePrediction]] = {}
    for p in preds:
        grouped.setdefault(p.patient_id, []).append(p)
    return grouped


def table_report(
    preds_by_config: Mapping[int, Sequence[SlicePrediction]],
    splits: Splits,
    manifest: CohortManifest,
    threshold: float = DEFAULT_AGGREGATION_THRESHOLD,
) -> TableReport:
    """Per-patient accuracy / F-score table over the held-out test block.

    Patients are numbered 1..12 with aseptic first; every test-block
    patient must have predictions in every provided configuration, with
    a consistent image count across configurations.
    """
    if not preds_by_config:
        raise MissingPredictions("no configurations provided")
    if not splits.d_x:
        raise MissingPredictions("empty test block in splits")
    labels = manifest.labels
    ordered = sorted(splits.d_x, key=lambda pid: (labels.get(pid, "?") != ASEPTIC, pid))
    grouped = {k: _group_by_patient(preds) for k, preds in preds_by_config.items()}
    configs = tuple(sorted(preds_by_config))

    rows = []
    for number, pid in enumerate(ordered, start=1):
        if pid not in labels:
            raise MissingPredictions(f"patient {pid} missing from manifest")
        label = labels[pid]
        per_config = {}
        n_images = None
        for k in configs:
            plist = grouped[k].get(pid)
            if not plist:
                raise MissingPredictions(f"patient {pid} has no predictions for configuration {k}")
            if n_images is None:
                n_images = len(plist)
            elif len(plist) != n_images:
                raise MissingPredictions(
                    f"patient {pid}: {len(plist)} predictions in configuration {k}, "
                    f"expected {n_images}"
                )
            per_config[k] = patient_report(plist, label, threshold)
        rows.append(
            TableRow(
                number=number,
                patient_id=pid,
                label=label,
                n_images=n_images,
                per_config=per_config,
            )
        )
    return TableReport(configs=configs, rows=tuple(rows), threshold=threshold)


def render_table(report: TableReport) -> str:
    """Aligned text table, one row per test-block patient."""
    headers = ["#", "patient", "type", "images"]
    headers += [f"acc/F C{k}" for k in report.configs]
    table = []
    for row in report.rows:
        cells = [str(row.number), row.patient_id, row.label, str(row.n_images)]
        for k in report.configs:
            r = row.per_config[k]
            cells.append(f"{r.accuracy:.2f}/{r.f_score:.2f}")
        table.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for cells in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def report_to_json(report: TableReport) -> dict:
    return {
        "threshold": report.threshold,
        "configs": list(report.configs),
        "patients": [
            {
                "number": row.number,
                "patient_id": row.patient_id,
                "label": row.label,
                "n_images": row.n_images,
                "results": {
                    str(k): {
                        "accuracy": row.per_config[k].accuracy,
                        "f_score": row.per_config[k].f_score,
                        "n_correct": row.per_config[k].n_correct,
                        "aggregated_class": row.per_config[k].aggregated_class,
                    }
                    for k in report.configs
                },
            }
            for row in report.rows
        ],
    }


def save_report_json(report: TableReport, path: Path) -> None:
    Path(path).write_text(
        json.dumps(report_to_json(report), indent=2) + "\n", encoding="utf-8"
    )


def read_predictions_csv(path: Path) -> list[SlicePrediction]:
    """Load the slice-prediction bridge file (strict header and types)."""
    preds = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PredictionFormatError(f"{path}: empty file") from None
        if header != PREDICTIONS_HEADER:
            raise PredictionFormatError(
                f"{path}: header {header!r} != {PREDICTIONS_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise PredictionFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                preds.append(
                    SlicePrediction(
                        patient_id=row[0],
                        instance_number=int(row[1]),
                        prob_infected=float(row[2]),
                    )
                )
            except ValueError as exc:
                raise PredictionFormatError(f"{path}:{lineno}: {exc}") from exc
    return preds


def write_predictions_csv(preds: Iterable[SlicePrediction], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for p in preds:
            writer.writerow([p.patient_id, p.instance_number, f"{p.prob_infected:.6f}"])
