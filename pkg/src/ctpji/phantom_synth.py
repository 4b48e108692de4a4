"""Synthetic per-patient CT series with known ground truth.

Each phantom slice is a soft-tissue disk on an air background with a
cortical bone annulus; implant-bearing slices add a metal disk inside
the annulus. Every patient carries a high-density periosteal margin
band hugging the outer bone border; on aseptic patients it is a smooth
gradient (a normal cortical margin), while infected patients get the
same band rendered as irregular speckle (the periosteal-reaction
proxy). Band area and value distribution match across labels, so the
label lives only in the band's local texture: the infected and aseptic
renderings of the same seed are pixel-identical outside the band, and
no whole-image statistic separates the classes. Random smooth
soft-tissue blobs (label-independent) add the anatomical heterogeneity
that keeps texture location meaningful.

Generation is deterministic: per-slice RNG streams derive from the
patient seed and instance number, and per-patient seeds derive from the
cohort seed and patient id, so parallel generation cannot change any
byte of the output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cohort_cv import CohortManifest, PatientRecord, save_manifest
from .dicom_lite import RawSlice, SliceMeta, write_dicom_lite

LABELS = ("aseptic", "infected")

DEFAULT_SLICE_RANGE = (39, 191)
DEFAULT_IMAGE_SIZE = 512

_SLOPE = 1.0
_INTERCEPT = -1024.0


class InvalidSpec(ValueError):
    """Phantom parameters violate the geometry or range constraints."""


class IoFailure(Exception):
    """Cohort files could not be written."""


@dataclass(frozen=True)
class PhantomGeometry:
    """Scene layout in pixels and tissue radiodensities in HU."""

    center_row: float
    center_col: float
    body_radius: float
    bone_inner_radius: float
    bone_outer_radius: float
    implant_radius: float
    band_width: float
    # the band's values live in two tight modes at the edges of this
    # range; the nuisance blobs fill the middle, which keeps the modes
    # far apart after histogram equalization
    band_amplitude_low: float = 150.0
    band_amplitude_high: float = 450.0
    band_mode_fraction: float = 0.1
    air_hu: float = -1000.0
    soft_tissue_hu: float = 40.0
    soft_tissue_noise: float = 12.0
    # drawn at the dense end of the cortical range so the whole annulus
    # stays above the bone mask threshold
    bone_hu_low: float = 1050.0
    bone_hu_high: float = 1200.0
    implant_hu: float = 8000.0
    # label-independent soft-tissue heterogeneity: random blobs textured
    # with the exact band recipe (additive uniform amplitude on the base),
    # drawn identically for both labels, kept away from the bone/band
    # ring. Patch equalization is a global transform, so without
    # band-indistinguishable nuisance the band's presence would leak into
    # every pixel's rank and hand classifiers a whole-image shortcut; with
    # it, only the band's ring-hugging-the-bone shape separates the labels.
    nuisance_min_blobs: int = 2
    nuisance_max_blobs: int = 6
    nuisance_radius_low_frac: float = 0.10
    nuisance_radius_high_frac: float = 0.22
    nuisance_quiet_margin: float = 4.0

    @classmethod
    def default(cls, image_size: int) -> "PhantomGeometry":
        scale = image_size / 512.0
        mid = (image_size - 1) / 2.0
        return cls(
            center_row=mid,
            center_col=mid,
            body_radius=225.0 * scale,
            bone_inner_radius=48.0 * scale,
            bone_outer_radius=70.0 * scale,
            implant_radius=26.0 * scale,
            band_width=max(5.0, 20.0 * scale),
        )


@dataclass(frozen=True)
class PhantomSpec:
    """One patient's generation parameters.

    Implant-bearing slices are the inclusive instance range
    ``implant_first..implant_last``.
    """

    patient_id: str
    label: str
    num_slices: int
    implant_first: int
    implant_last: int
    seed: int
    image_size: int = DEFAULT_IMAGE_SIZE
    geometry: PhantomGeometry | None = None

    def geom(self) -> PhantomGeometry:
        return self.geometry or PhantomGeometry.default(self.image_size)

    def validate(self) -> None:
        if self.label not in LABELS:
            raise InvalidSpec(f"label must be one of {LABELS}, got {self.label!r}")
        if self.num_slices < 1:
            raise InvalidSpec(f"num_slices must be >= 1, got {self.num_slices}")
        if not (1 <= self.implant_first <= self.implant_last <= self.num_slices):
            raise InvalidSpec(
                f"implant range [{self.implant_first}, {self.implant_last}] "
                f"not within [1, {self.num_slices}]"
            )
        if self.image_size < 16:
            raise InvalidSpec(f"image_size must be >= 16, got {self.image_size}")
        g = self.geom()
        if not (0 < g.implant_radius < g.bone_inner_radius < g.bone_outer_radius):
            raise InvalidSpec(
                "radii must be positive and nested: implant < bone inner < bone outer"
            )
        if g.band_width <= 0:
            raise InvalidSpec("band_width must be positive")
        if g.bone_outer_radius + g.band_width >= g.body_radius:
            raise InvalidSpec("bone annulus plus band must fit inside the body disk")
        margin = min(
            g.center_row, g.center_col,
            self.image_size - 1 - g.center_row, self.image_size - 1 - g.center_col,
        )
        if g.body_radius >= margin + 1:
            raise InvalidSpec("body disk must fit inside the image")
        if not (0 <= g.band_amplitude_low <= g.band_amplitude_high):
            raise InvalidSpec("band amplitudes must satisfy 0 <= low <= high")
        if not (0 <= g.nuisance_min_blobs <= g.nuisance_max_blobs):
            raise InvalidSpec("nuisance blob counts must satisfy 0 <= min <= max")
        if not (0 < g.nuisance_radius_low_frac <= g.nuisance_radius_high_frac < 1):
            raise InvalidSpec("nuisance radius fractions must satisfy 0 < low <= high < 1")
        if not (0 < g.band_mode_fraction <= 0.5):
            raise InvalidSpec("band_mode_fraction must be in (0, 0.5]")
        if g.soft_tissue_hu + g.band_amplitude_high >= g.bone_hu_low - 100:
            raise InvalidSpec("band/nuisance texture must stay clearly below the bone range")


def _slice_rng(seed: int, instance: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(instance, stream)))


def _grids(spec: PhantomSpec):
    g = spec.geom()
    yy, xx = np.mgrid[0:spec.image_size, 0:spec.image_size]
    d_center = np.hypot(yy - g.center_row, xx - g.center_col)
    mid = (spec.image_size - 1) / 2.0
    d_image = np.hypot(yy - mid, xx - mid)
    theta = np.arctan2(yy - g.center_row, xx - g.center_col)
    return g, d_center, d_image, theta


def _band_profile(rng: np.random.Generator, theta: np.ndarray) -> np.ndarray:
    """Smooth random angular profile in [0, 1] (irregular band outline)."""
    amps = rng.uniform(0.3, 1.0, size=4)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    s = np.zeros_like(theta)
    for k, (a, p) in enumerate(zip(amps, phases), start=1):
        s += a * np.sin(k * theta + p)
    return (s / amps.sum() + 1.0) / 2.0


def _rank_flatten(field: np.ndarray) -> np.ndarray:
    """Map sample values onto exactly uniform quantiles in [0, 1]."""
    n = field.size
    ranks = np.empty(n)
    ranks[np.argsort(field, kind="stable")] = np.arange(n)
    return (ranks + 0.5) / n


def infection_band_mask(spec: PhantomSpec, instance: int) -> np.ndarray:
    """The pixels where the infected rendering may differ from aseptic.

    Recomputes the same irregular ring the generator draws for this
    slice, regardless of the spec's label.
    """
    spec.validate()
    g, d_center, d_image, theta = _grids(spec)
    rng = _slice_rng(spec.seed, instance, 1)
    profile = _band_profile(rng, theta)
    width = g.band_width * (0.55 + 0.45 * profile)
    return (
        (d_center > g.bone_outer_radius)
        & (d_center <= g.bone_outer_radius + width)
        & (d_image <= g.body_radius)
    )


def _render_slice_hu(spec: PhantomSpec, instance: int) -> np.ndarray:
    g, d_center, d_image, theta = _grids(spec)
    rng = _slice_rng(spec.seed, instance, 0)

    hu = np.full((spec.image_size, spec.image_size), g.air_hu, dtype=np.float64)
    body = d_image <= g.body_radius
    hu[body] = g.soft_tissue_hu + rng.normal(0.0, g.soft_tissue_noise, int(body.sum()))

    # soft-tissue nuisance blobs; a quiet ring around the bone keeps them
    # clear of the annulus and the (potential) periosteal band
    quiet = (d_center >= g.bone_inner_radius - g.nuisance_quiet_margin) & (
        d_center <= g.bone_outer_radius + g.band_width + g.nuisance_quiet_margin
    )
    allowed = body & ~quiet
    yy, xx = np.mgrid[0:spec.image_size, 0:spec.image_size]
    mid = (spec.image_size - 1) / 2.0
    r_low = g.nuisance_radius_low_frac * g.body_radius
    r_high = g.nuisance_radius_high_frac * g.body_radius
    n_blobs = int(rng.integers(g.nuisance_min_blobs, g.nuisance_max_blobs + 1))
    for _ in range(n_blobs):
        rho = g.body_radius * np.sqrt(rng.uniform()) * 0.95
        phi = rng.uniform(0.0, 2.0 * np.pi)
        cy = mid + rho * np.sin(phi)
        cx = mid + rho * np.cos(phi)
        a = rng.uniform(r_low, r_high)
        b = rng.uniform(r_low, r_high)
        tilt = rng.uniform(0.0, np.pi)
        dy = yy - cy
        dx = xx - cx
        u = dx * np.cos(tilt) + dy * np.sin(tilt)
        v = -dx * np.sin(tilt) + dy * np.cos(tilt)
        blob = ((u / a) ** 2 + (v / b) ** 2 <= 1.0) & allowed
        allowed &= ~blob  # keep blobs disjoint so amplitudes never stack
        if not blob.any():
            continue
        # smooth low-frequency field, rank-flattened to an exactly uniform
        # marginal between the band's two value modes: blob mass is what
        # keeps the modes separated in rank space after equalization
        span = g.band_amplitude_high - g.band_amplitude_low
        gap_lo = g.band_amplitude_low + g.band_mode_fraction * span
        gap_hi = g.band_amplitude_high - g.band_mode_fraction * span
        wave = rng.uniform(1.0, 2.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field = np.sin(wave[0] * np.pi * u[blob] / a + wave[1] * np.pi * v[blob] / b + phase)
        hu[blob] += gap_lo + _rank_flatten(field) * (gap_hi - gap_lo)

    bone = (d_center >= g.bone_inner_radius) & (d_center <= g.bone_outer_radius)
    hu[bone] = rng.uniform(g.bone_hu_low, g.bone_hu_high, int(bone.sum()))
    if spec.implant_first <= instance <= spec.implant_last:
        hu[d_center <= g.implant_radius] = g.implant_hu

    # periosteal margin band, present on every patient with a matched
    # outline and value distribution; only its texture encodes the label
    band_rng = _slice_rng(spec.seed, instance, 1)
    profile = _band_profile(band_rng, theta)
    width = g.band_width * (0.55 + 0.45 * profile)
    band = (
        (d_center > g.bone_outer_radius)
        & (d_center <= g.bone_outer_radius + width)
        & body
    )
    n_band = int(band.sum())
    if n_band:
        # the band REPLACES the underlying tissue with the same exact
        # multiset of elevated values for both labels, split between two
        # tight modes at the edges of the amplitude range; only the
        # pixel assignment differs. Infected: 2x2 clumps scrambled at
        # random (coarse speckle). Aseptic: smoothly layered along the
        # border. Identical value multisets mean the window histogram
        # carries no label information whatsoever.
        span = g.band_amplitude_high - g.band_amplitude_low
        if spec.label == "infected":
            ys, xs = np.nonzero(band)
            block_ids = (ys // 2) * spec.image_size + (xs // 2)
            _, block_index = np.unique(block_ids, return_inverse=True)
            block_values = band_rng.permutation(int(block_index.max()) + 1)
            field = block_values[block_index].astype(np.float64)
        else:
            waves = band_rng.uniform(1.0, 3.0, size=2)
            phase = band_rng.uniform(0.0, 2.0 * np.pi)
            field = np.sin(waves[0] * theta[band] + phase) + 0.5 * np.sin(
                waves[1] * 2.0 * theta[band] + d_center[band]
            )
        quantiles = _rank_flatten(field)
        mode = g.band_mode_fraction * span
        two_mode = np.where(
            quantiles < 0.5,
            g.band_amplitude_low + 2.0 * quantiles * mode,
            g.band_amplitude_high - mode + 2.0 * (quantiles - 0.5) * mode,
        )
        hu[band] = g.soft_tissue_hu + two_mode
    return hu


def generate_patient(spec: PhantomSpec) -> list[RawSlice]:
    """Render every slice of one phantom patient as raw pixel slices.

    Raw values come from inverting the HU rescale for the fixed
    slope/intercept, so converting back recovers the rendered scene (up
    to integer quantization). Deterministic in ``spec.seed``.
    """
    spec.validate()
    slices = []
    for instance in range(1, spec.num_slices + 1):
        hu = _render_slice_hu(spec, instance)
        hu = np.clip(hu, _INTERCEPT, _INTERCEPT + 65535 * _SLOPE)
        pixels = np.rint((hu - _INTERCEPT) / _SLOPE).astype(np.int32)
        meta = SliceMeta(
            patient_id=spec.patient_id,
            instance_number=instance,
            rows=spec.image_size,
            cols=spec.image_size,
            rescale_slope=_SLOPE,
            rescale_intercept=_INTERCEPT,
            bits_allocated=16,
            pixel_representation=0,
        )
        slices.append(RawSlice(meta=meta, pixels=pixels))
    return slices


def _patient_seed(cohort_seed: int, patient_id: str) -> int:
    digest = hashlib.sha256(f"{cohort_seed}/{patient_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class PatientPlan:
    """Per-patient layout drawn from the cohort seed."""

    patient_id: str
    label: str
    num_slices: int
    implant_first: int
    implant_last: int
    seed: int


def cohort_layout(
    n_aseptic: int,
    n_infected: int,
    seed: int,
    slice_range: tuple[int, int] = DEFAULT_SLICE_RANGE,
) -> list[PatientPlan]:
    """Draw slice counts and implant spans for every patient in the cohort."""
    if n_aseptic < 0 or n_infected < 0:
        raise InvalidSpec("patient counts must be >= 0")
    lo, hi = slice_range
    if not (1 <= lo <= hi):
        raise InvalidSpec(f"bad slice range {slice_range}")
    plans = []
    for label, count in (("aseptic", n_aseptic), ("infected", n_infected)):
        for k in range(1, count + 1):
            pid = f"{label}-{k:03d}"
            pseed = _patient_seed(seed, pid)
            rng = np.random.default_rng(np.random.SeedSequence(pseed, spawn_key=(0xC0,)))
            num = int(rng.integers(lo, hi + 1))
            span = int(rng.integers(max(1, num // 3), max(1, (2 * num) // 3) + 1))
            span = min(span, num)
            first = int(rng.integers(1, num - span + 2))
            plans.append(
                PatientPlan(
                    patient_id=pid,
                    label=label,
                    num_slices=num,
                    implant_first=first,
                    implant_last=first + span - 1,
                    seed=pseed,
                )
            )
    return plans


def plan_to_spec(
    plan: PatientPlan,
    image_size: int = DEFAULT_IMAGE_SIZE,
    geometry: PhantomGeometry | None = None,
) -> PhantomSpec:
    return PhantomSpec(
        patient_id=plan.patient_id,
        label=plan.label,
        num_slices=plan.num_slices,
        implant_first=plan.implant_first,
        implant_last=plan.implant_last,
        seed=plan.seed,
        image_size=image_size,
        geometry=geometry,
    )


def jittered_geometry(image_size: int, patient_seed: int) -> PhantomGeometry:
    """Per-patient anatomy variation around the default layout.

    Bone size, implant size, band width and body outline vary patient to
    patient (deterministically in the patient seed), so no fixed-geometry
    pixel arithmetic holds across a cohort.
    """
    rng = np.random.default_rng(np.random.SeedSequence(patient_seed, spawn_key=(0xAE,)))
    base = PhantomGeometry.default(image_size)
    bone = rng.uniform(0.85, 1.15)
    return PhantomGeometry(
        center_row=base.center_row,
        center_col=base.center_col,
        body_radius=base.body_radius * rng.uniform(0.92, 1.05),
        bone_inner_radius=base.bone_inner_radius * bone,
        bone_outer_radius=base.bone_outer_radius * bone,
        implant_radius=base.implant_radius * bone * rng.uniform(0.9, 1.05),
        band_width=base.band_width * rng.uniform(0.8, 1.3),
    )


def generate_cohort(
    n_aseptic: int,
    n_infected: int,
    seed: int,
    out_dir: Path,
    image_size: int = DEFAULT_IMAGE_SIZE,
    slice_range: tuple[int, int] = DEFAULT_SLICE_RANGE,
    geometry: PhantomGeometry | None = None,
) -> CohortManifest:
    """Write a full phantom cohort and its manifest under ``out_dir``.

    Produces ``<out>/<patient_id>/<instance>.dcm`` series, one
    ``ground_truth.json`` per patient (layout and geometry, for
    oracle-style checks), and ``<out>/manifest.json``. Slice file paths
    in the manifest are relative to ``out_dir``.
    """
    out = Path(out_dir)
    plans = cohort_layout(n_aseptic, n_infected, seed, slice_range)
    records = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for plan in plans:
            patient_geometry = geometry or jittered_geometry(image_size, plan.seed)
            spec = plan_to_spec(plan, image_size=image_size, geometry=patient_geometry)
            pdir = out / plan.patient_id
            pdir.mkdir(exist_ok=True)
            rel_paths = []
            for slc in generate_patient(spec):
                name = f"{slc.meta.instance_number}.dcm"
                (pdir / name).write_bytes(write_dicom_lite(slc))
                rel_paths.append(f"{plan.patient_id}/{name}")
            truth = {
                "patient_id": plan.patient_id,
                "label": plan.label,
                "num_slices": plan.num_slices,
                "implant_first": plan.implant_first,
                "implant_last": plan.implant_last,
                "seed": plan.seed,
                "image_size": image_size,
                "geometry": asdict(spec.geom()),
            }
            (pdir / "ground_truth.json").write_text(
                json.dumps(truth, indent=2) + "\n", encoding="utf-8"
            )
            records.append(
                PatientRecord(
                    patient_id=plan.patient_id,
                    label=plan.label,
                    slice_files=tuple(rel_paths),
                )
            )
        manifest = CohortManifest(patients=records)
        save_manifest(manifest, out / "manifest.json")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest
