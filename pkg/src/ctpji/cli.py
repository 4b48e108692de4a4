"""Command-line front end: synth, prep, split, metrics.

Exit codes are a stable contract: 0 success, 1 runtime/IO error,
2 usage error. Logs go to stderr; machine-readable output goes to files
or stdout only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import cohort_cv, contour_patch, hu_pipeline, metrics, phantom_synth
from .dicom_lite import DicomError, parse_dicom

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

SEED_ENV_VAR = "CTPJI_SEED"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        return 0


def _nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


class SliceProcessingError(Exception):
    """A slice file could not be processed; carries the file path."""


def _prep_slice(args: tuple) -> dict:
    """Worker: parse one file and, if it shows the implant, write its patch.

    Output files are keyed on patient id and instance number, so the
    results are byte-identical no matter how slices are scheduled.
    """
    path_str, out_dir, prosthesis_hu, bone_hu, patch_size, bins = args
    try:
        slc = parse_dicom(Path(path_str).read_bytes())
        hu = hu_pipeline.to_hounsfield(slc)
        out = {
            "path": path_str,
            "patient_id": slc.meta.patient_id,
            "instance_number": slc.meta.instance_number,
            "selected": False,
        }
        if hu_pipeline.contains_prosthesis(hu, prosthesis_hu):
            patch = contour_patch.slice_to_patch(hu, bone_hu, patch_size, bins)
            name = contour_patch.patch_filename(patch.patient_id, patch.instance_number)
            (Path(out_dir) / name).write_bytes(contour_patch.encode_pgm(patch.pixels))
            out.update(
                selected=True,
                centroid=[patch.centroid[0], patch.centroid[1]],
                file=name,
            )
        return out
    except (DicomError, OSError) as exc:
        raise SliceProcessingError(f"{path_str}: {exc}") from exc


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        manifest = phantom_synth.generate_cohort(
            n_aseptic=args.aseptic,
            n_infected=args.infected,
            seed=args.seed,
            out_dir=args.out,
            image_size=args.image_size,
            slice_range=(args.min_slices, args.max_slices),
        )
    except phantom_synth.InvalidSpec as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except phantom_synth.IoFailure as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    n_slices = sum(len(p.slice_files) for p in manifest.patients)
    _log(f"wrote {len(manifest)} patients ({n_slices} slices) under {args.out}")
    return EXIT_OK


def cmd_prep(args: argparse.Namespace) -> int:
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        _log(f"error: input directory {in_dir} does not exist")
        return EXIT_USAGE
    patient_dirs = sorted(d for d in in_dir.iterdir() if d.is_dir() and list(d.glob("*.dcm")))
    if not patient_dirs:
        _log(f"error: no patient folders with .dcm files under {in_dir}")
        return EXIT_USAGE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = args.jobs or os.cpu_count() or 1
    executor = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for pdir in patient_dirs:
            files = sorted(pdir.glob("*.dcm"))
            tasks = [
                (str(f), str(out_dir), args.prosthesis_hu, args.bone_hu,
                 args.patch_size, args.bins)
                for f in files
            ]
            if executor is None:
                results = [_prep_slice(t) for t in tasks]
            else:
                results = list(executor.map(_prep_slice, tasks, chunksize=4))

            pids = {r["patient_id"] for r in results}
            if len(pids) > 1:
                _log(f"error: {pdir}: slices span multiple patients {sorted(pids)}")
                return EXIT_RUNTIME
            instances = [r["instance_number"] for r in results]
            if len(set(instances)) != len(instances):
                _log(f"error: {pdir}: duplicate instance numbers")
                return EXIT_RUNTIME

            selected = sorted(
                (r for r in results if r["selected"]), key=lambda r: r["instance_number"]
            )
            pid = pids.pop()
            _log(f"patient {pid}: selected {len(selected)}/{len(results)} slices")
            if not selected:
                _log(f"warning: patient {pid} has no implant-bearing slices, skipped")
                continue
            entries = [
                {
                    "file": r["file"],
                    "instance_number": r["instance_number"],
                    "centroid": r["centroid"],
                    "source": r["path"],
                }
                for r in selected
            ]
            contour_patch.write_sidecar(out_dir, pid, entries)
    except SliceProcessingError as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    except (hu_pipeline.DuplicateInstance, contour_patch.NoContour, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    finally:
        if executor is not None:
            executor.shutdown()
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        _log(f"error: manifest {manifest_path} does not exist")
        return EXIT_USAGE
    try:
        manifest = cohort_cv.load_manifest(manifest_path)
        splits = cohort_cv.make_splits(manifest, args.seed)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _log(f"error: bad manifest: {exc}")
        return EXIT_RUNTIME
    except cohort_cv.InsufficientCohort as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    doc = json.dumps(cohort_cv.splits_to_json(splits), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
        _log(f"wrote splits to {args.out}")
    else:
        sys.stdout.write(doc)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    for path in [*args.preds, args.splits, args.manifest]:
        if not Path(path).is_file():
            _log(f"error: file {path} does not exist")
            return EXIT_USAGE
    if len(args.preds) > 1 and args.config != 1:
        _log("error: --config only applies with a single predictions file")
        return EXIT_USAGE
    try:
        splits = cohort_cv.load_splits(Path(args.splits))
        manifest = cohort_cv.load_manifest(Path(args.manifest))
        preds_by_config = {
            args.config + i: metrics.read_predictions_csv(Path(p))
            for i, p in enumerate(args.preds)
        }
        report = metrics.table_report(
            preds_by_config, splits, manifest, threshold=args.threshold
        )
    except (
        metrics.PredictionFormatError,
        metrics.MissingPredictions,
        metrics.EmptyPredictions,
        ValueError,
        KeyError,
        json.JSONDecodeError,
    ) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    except metrics.InvalidThreshold as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    print(metrics.render_table(report))
    if args.json_out:
        metrics.save_report_json(report, Path(args.json_out))
        _log(f"wrote JSON report to {args.json_out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctpji",
        description=(
            "CT preprocessing and evaluation pipeline for hip-implant "
            "infection screening on synthetic phantom cohorts."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a phantom cohort")
    p_synth.add_argument("--aseptic", type=_nonnegative_int, required=True)
    p_synth.add_argument("--infected", type=_nonnegative_int, required=True)
    p_synth.add_argument("--seed", type=int, default=_default_seed())
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--image-size", type=_positive_int, default=phantom_synth.DEFAULT_IMAGE_SIZE)
    p_synth.add_argument("--min-slices", type=_positive_int, default=phantom_synth.DEFAULT_SLICE_RANGE[0])
    p_synth.add_argument("--max-slices", type=_positive_int, default=phantom_synth.DEFAULT_SLICE_RANGE[1])
    p_synth.set_defaults(func=cmd_synth)

    p_prep = sub.add_parser("prep", help="select slices and extract equalized patches")
    p_prep.add_argument("--input", required=True, help="directory of per-patient .dcm folders")
    p_prep.add_argument("--out", required=True, help="output directory for patches")
    p_prep.add_argument("--prosthesis-hu", type=float, default=hu_pipeline.PROSTHESIS_HU)
    p_prep.add_argument("--bone-hu", type=float, default=hu_pipeline.BONE_HU)
    p_prep.add_argument("--patch-size", type=_positive_int, default=contour_patch.PATCH_SIZE)
    p_prep.add_argument("--bins", type=_positive_int, default=contour_patch.EQUALIZE_BINS)
    p_prep.add_argument("--jobs", type=_positive_int, default=None,
                        help="parallel workers (default: all cores)")
    p_prep.set_defaults(func=cmd_prep)

    p_split = sub.add_parser("split", help="build the cross-validation splits")
    p_split.add_argument("--manifest", required=True)
    p_split.add_argument("--seed", type=int, default=_default_seed())
    p_split.add_argument("--out", default=None, help="output JSON path (default: stdout)")
    p_split.set_defaults(func=cmd_split)

    p_metrics = sub.add_parser("metrics", help="per-patient report from prediction CSVs")
    p_metrics.add_argument("--preds", action="append", required=True,
                           help="predictions CSV; repeat for configurations 1..n")
    p_metrics.add_argument("--splits", required=True)
    p_metrics.add_argument("--manifest", required=True)
    p_metrics.add_argument("--config", type=int, default=1,
                           help="configuration index of a single predictions file")
    p_metrics.add_argument("--threshold", type=float,
                           default=metrics.DEFAULT_AGGREGATION_THRESHOLD)
    p_metrics.add_argument("--json-out", default=None)
    p_metrics.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
