"""Export per-patch infected probabilities as the predictions CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import torch

from .data import PatchRecord, read_pgm, scan_patch_dir
from .train import predict_probs

PREDICTIONS_HEADER = ["patient_id", "instance_number", "prob_infected"]


class IoFailure(Exception):
    """Patches or the output file could not be accessed."""


def predict_export(
    model,
    patch_dir: Path,
    out_csv: Path,
    patient_ids: list[str] | None = None,
    batch_size: int = 32,
) -> list[PatchRecord]:
    """Write one CSV row per patch: ``patient_id,instance_number,prob_infected``.

    Rows are ordered by (patient, instance); reruns with the same
    checkpoint and patches produce an identical file.
    """
    wanted = None if patient_ids is None else set(patient_ids)
    try:
        records = [
            r for r in scan_patch_dir(patch_dir)
            if wanted is None or r.patient_id in wanted
        ]
        if not records:
            raise IoFailure(f"no patches found under {patch_dir}")
        inputs = torch.stack([torch.from_numpy(read_pgm(r.path)) for r in records])
    except (OSError, ValueError) as exc:
        raise IoFailure(str(exc)) from exc
    probs = predict_probs(model, inputs.unsqueeze(1), batch_size=batch_size)
    try:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(PREDICTIONS_HEADER)
            for record, prob in zip(records, probs):
                writer.writerow(
                    [record.patient_id, record.instance_number, f"{float(prob):.6f}"]
                )
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return records
