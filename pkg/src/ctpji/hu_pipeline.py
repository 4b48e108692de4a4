"""Hounsfield conversion, prosthesis slice selection, bone masking.

Raw pixel values convert to Hounsfield units through the per-slice
affine rescale ``hu = pixel * slope + intercept``. Slices showing any
pixel above the prosthesis threshold (metal is far denser than bone)
form the series of interest; thresholding at the bone level yields the
binary mask the contour stage traces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dicom_lite import RawSlice, SliceMeta

PROSTHESIS_HU = 3000.0
BONE_HU = 1000.0


class EmptySelection(Exception):
    """No slice in the series shows the implant."""


class DuplicateInstance(Exception):
    """Two slices of one series share an instance number."""


@dataclass(eq=False)
class HuSlice:
    """A slice converted to Hounsfield units (float32 grid)."""

    meta: SliceMeta
    hu: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, HuSlice):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.hu, other.hu)


@dataclass(eq=False)
class BinaryMask:
    """Boolean grid from thresholding a HU slice (strict ``>``)."""

    bits: np.ndarray
    threshold_hu: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.threshold_hu == other.threshold_hu and np.array_equal(
            self.bits, other.bits
        )


def to_hounsfield(slc: RawSlice) -> HuSlice:
    """Apply the affine rescale elementwise, in float32 arithmetic.

    Slope and intercept are cast to float32 first so the result is
    bit-identical to a per-pixel float32 computation.
    """
    s = np.float32(slc.meta.rescale_slope)
    i = np.float32(slc.meta.rescale_intercept)
    pixels = slc.pixels.reshape(slc.meta.rows, slc.meta.cols)
    hu = pixels.astype(np.float32) * s + i
    return HuSlice(meta=slc.meta, hu=hu)


def contains_prosthesis(slc: HuSlice, threshold: float = PROSTHESIS_HU) -> bool:
    """True iff at least one pixel is strictly above ``threshold``."""
    return bool((slc.hu > threshold).any())


def bone_mask(slc: HuSlice, threshold: float = BONE_HU) -> BinaryMask:
    """Mask of pixels strictly above ``threshold``."""
    return BinaryMask(bits=slc.hu > threshold, threshold_hu=float(threshold))


def select_series(
    slices: Sequence[HuSlice], threshold: float = PROSTHESIS_HU
) -> list[HuSlice]:
    """Keep the implant-bearing slices, ordered by instance number.

    All slices must belong to one patient and carry unique instance
    numbers. Raises :class:`EmptySelection` when nothing qualifies,
    which flags a patient without a visible implant.
    """
    patients = {s.meta.patient_id for s in slices}
    if len(patients) > 1:
        raise ValueError(f"slices span multiple patients: {sorted(patients)}")
    instances = [s.meta.instance_number for s in slices]
    if len(set(instances)) != len(instances):
        dupes = sorted({n for n in instances if instances.count(n) > 1})
        raise DuplicateInstance(f"repeated instance numbers: {dupes}")
    selected = [s for s in slices if contains_prosthesis(s, threshold)]
    if not selected:
        pid = patients.pop() if patients else "<empty series>"
        raise EmptySelection(f"no slice above {threshold} HU for {pid}")
    return sorted(selected, key=lambda s: s.meta.instance_number)
