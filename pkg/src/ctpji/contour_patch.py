"""Border following, centroid location, patch extraction, equalization.

The contour tracer is a topological border-following scan over the
binary mask: foreground components are 8-connected, background regions
4-connected, and every border (the outer one plus one per hole) is
followed point by point. A border point is a foreground pixel with at
least one 4-neighbor in the background or outside the image, so the
union of all traced borders equals that boundary set exactly.

The centroid of the largest filled component anchors a fixed-size
window of HU values, which is then histogram-equalized into [0, 1].
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .hu_pipeline import BinaryMask, HuSlice, bone_mask

PATCH_SIZE = 188
EQUALIZE_BINS = 4096

PGM_MAXVAL = 65535


class NoContour(Exception):
    """Centroid requested with no contours available."""


class CenterOutOfBounds(Exception):
    """Patch center lies outside the source image."""


@dataclass
class Contour:
    """One traced border.

    ``points`` is the traced sequence (row, col); consecutive points are
    8-connected and thin structures may repeat pixels. ``hierarchy_parent``
    is the index of the enclosing contour in the returned list, or None
    when the parent is the image frame. Hole borders carry
    ``is_hole=True`` and always have a parent.
    """

    points: list[tuple[int, int]]
    closed: bool
    hierarchy_parent: int | None
    is_hole: bool


# Neighbor tables around a pixel, clockwise starting East (rows grow
# downward), and the counterclockwise reversal. Indexed lookups drive the
# directional searches of the border-following scan.
_CW = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_CCW = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
_CW_INDEX = {d: k for k, d in enumerate(_CW)}
_CCW_INDEX = {d: k for k, d in enumerate(_CCW)}


def _follow_border(f, start, from_px, nbd):
    """Trace one border, labeling pixels in ``f`` and returning its points."""
    i, j = start
    points = [(i, j)]
    k0 = _CW_INDEX[(from_px[0] - i, from_px[1] - j)]
    i1 = j1 = None
    for d in range(8):
        di, dj = _CW[(k0 + d) % 8]
        if f[i + di, j + dj] != 0:
            i1, j1 = i + di, j + dj
            break
    if i1 is None:
        f[i, j] = -nbd  # isolated pixel
        return points

    points.clear()
    i2, j2 = i1, j1
    i3, j3 = i, j
    while True:
        k0 = _CCW_INDEX[(i2 - i3, j2 - j3)]
        east_seen_zero = False
        i4 = j4 = None
        for d in range(1, 9):
            di, dj = _CCW[(k0 + d) % 8]
            ni, nj = i3 + di, j3 + dj
            if f[ni, nj] != 0:
                i4, j4 = ni, nj
                break
            if di == 0 and dj == 1:
                east_seen_zero = True
        if east_seen_zero:
            f[i3, j3] = -nbd
        elif f[i3, j3] == 1:
            f[i3, j3] = nbd
        points.append((i3, j3))
        if (i4, j4) == (i, j) and (i3, j3) == (i1, j1):
            return points
        i2, j2 = i3, j3
        i3, j3 = i4, j4


def trace_contours(mask: BinaryMask) -> list[Contour]:
    """Extract every border of the mask's 8-connected components.

    Returns outer and hole borders with their nesting hierarchy; an
    all-background mask yields an empty list. The mask grid must be
    non-empty.
    """
    bits = np.asarray(mask.bits, dtype=bool)
    if bits.ndim != 2 or bits.size == 0:
        raise ValueError(f"mask grid must be 2-D and non-empty, got shape {bits.shape}")
    rows, cols = bits.shape

    f = np.zeros((rows + 2, cols + 2), dtype=np.int64)
    f[1:-1, 1:-1] = bits

    # Only pixels with a 4-neighbor background (the boundary set) can
    # start a border or carry a label, so the scan skips everything else.
    fg = f != 0
    interior = fg[1:-1, 1:-1] & fg[:-2, 1:-1] & fg[2:, 1:-1] & fg[1:-1, :-2] & fg[1:-1, 2:]
    boundary = fg[1:-1, 1:-1] & ~interior

    # border id -> (is_hole, parent id); id 1 is the image frame
    border_kind = {1: True}
    border_parent = {1: None}
    traced: list[tuple[int, list[tuple[int, int]]]] = []
    nbd = 1
    for i in range(1, rows + 1):
        lnbd = 1
        for j0 in np.nonzero(boundary[i - 1])[0]:
            j = int(j0) + 1
            fij = f[i, j]
            if fij == 1 and f[i, j - 1] == 0:
                is_hole = False
                from_px = (i, j - 1)
            elif fij >= 1 and f[i, j + 1] == 0:
                is_hole = True
                from_px = (i, j + 1)
                if fij > 1:
                    lnbd = fij
            else:
                if fij != 1:
                    lnbd = abs(int(fij))
                continue
            nbd += 1
            if border_kind[lnbd] == is_hole:
                parent = border_parent[lnbd]
            else:
                parent = lnbd
            border_kind[nbd] = is_hole
            border_parent[nbd] = parent
            traced.append((nbd, _follow_border(f, (i, j), from_px, nbd)))
            fij = f[i, j]
            if fij != 1:
                lnbd = abs(int(fij))

    index_of = {bid: k for k, (bid, _) in enumerate(traced)}
    contours = []
    for bid, pts in traced:
        parent = border_parent[bid]
        contours.append(
            Contour(
                points=[(r - 1, c - 1) for r, c in pts],
                closed=True,
                hierarchy_parent=index_of[parent] if parent in index_of else None,
                is_hole=border_kind[bid],
            )
        )
    return contours


def principal_centroid(
    contours: list[Contour], mask: BinaryMask
) -> tuple[float, float]:
    """Area centroid of the largest filled component.

    The component is the filled region of the outer contour with the
    largest pixel area; ties break toward the contour whose top-left
    boundary pixel is lowest in (row, col) order. The centroid is the
    mean coordinate of the component's pixels.
    """
    if not contours:
        raise NoContour("no contours to choose from")
    outers = [c for c in contours if not c.is_hole]
    if not outers:
        raise NoContour("no outer contour present")
    labels, _ = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=bool))
    areas = np.bincount(labels.ravel())

    def rank(c: Contour):
        lab = labels[c.points[0]]
        return (-int(areas[lab]), min(c.points))

    best = min(outers, key=rank)
    lab = labels[best.points[0]]
    ys, xs = np.nonzero(labels == lab)
    # Means are taken relative to the bounding-box origin and snapped to
    # a 2^-30 pixel grid; adding the integer origin back is then exact
    # in float64, so the centroid is exactly translation-equivariant.
    r0 = int(ys.min())
    c0 = int(xs.min())

    def _mean(deltas: np.ndarray, origin: int) -> float:
        q = float(np.round(deltas.mean() * 2**30)) / 2**30
        return origin + q

    return _mean(ys - r0, r0), _mean(xs - c0, c0)


def extract_patch(
    slc: HuSlice, center: tuple[float, float], size: int = PATCH_SIZE
) -> np.ndarray:
    """Cut the ``size`` x ``size`` HU window centered at ``center``.

    The center is rounded half-up to the nearest pixel and must lie
    inside the image; parts of the window beyond the image are filled
    with the slice's minimum HU value.
    """
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    rows, cols = slc.hu.shape
    r = int(np.floor(center[0] + 0.5))
    c = int(np.floor(center[1] + 0.5))
    if not (0 <= r < rows and 0 <= c < cols):
        raise CenterOutOfBounds(f"center {center} rounds to ({r}, {c}) outside {rows}x{cols}")
    r0 = r - size // 2
    c0 = c - size // 2
    window = np.full((size, size), slc.hu.min(), dtype=np.float32)
    src_r0, src_r1 = max(r0, 0), min(r0 + size, rows)
    src_c0, src_c1 = max(c0, 0), min(c0 + size, cols)
    if src_r0 < src_r1 and src_c0 < src_c1:
        window[src_r0 - r0:src_r1 - r0, src_c0 - c0:src_c1 - c0] = slc.hu[
            src_r0:src_r1, src_c0:src_c1
        ]
    return window


def equalize_hist(window: np.ndarray, bins: int = EQUALIZE_BINS) -> np.ndarray:
    """Histogram-equalize a window into [0, 1].

    Values are quantized into ``bins`` uniform bins spanning the
    window's range and mapped through the empirical CDF. A constant
    window maps to all zeros.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.size == 0:
        raise ValueError("window must be non-empty")
    vmin = w.min()
    vmax = w.max()
    if vmax == vmin:
        return np.zeros(w.shape, dtype=np.float32)
    idx = ((w - vmin) * (bins / (vmax - vmin))).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    hist = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(hist) / w.size
    return cdf[idx].astype(np.float32)


@dataclass(eq=False)
class Patch:
    """An equalized sub-image with its provenance."""

    pixels: np.ndarray
    patient_id: str
    instance_number: int
    centroid: tuple[float, float]

    def validate(self, size: int = PATCH_SIZE) -> None:
        if self.pixels.shape != (size, size):
            raise ValueError(f"patch shape {self.pixels.shape} != ({size}, {size})")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("patch values must lie in [0, 1]")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Patch):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.instance_number == other.instance_number
            and self.centroid == other.centroid
            and np.array_equal(self.pixels, other.pixels)
        )


def slice_to_patch(
    slc: HuSlice,
    bone_threshold: float,
    size: int = PATCH_SIZE,
    bins: int = EQUALIZE_BINS,
) -> Patch:
    """Run mask -> contours -> centroid -> window -> equalization on one slice."""
    mask = bone_mask(slc, bone_threshold)
    contours = trace_contours(mask)
    centroid = principal_centroid(contours, mask)
    window = extract_patch(slc, centroid, size)
    pixels = equalize_hist(window, bins)
    return Patch(
        pixels=pixels,
        patient_id=slc.meta.patient_id,
        instance_number=slc.meta.instance_number,
        centroid=centroid,
    )


def patch_filename(patient_id: str, instance_number: int) -> str:
    return f"{patient_id}_{instance_number}.pgm"


def encode_pgm(pixels: np.ndarray) -> bytes:
    """Encode a [0, 1] grid as a 16-bit big-endian binary PGM (P5)."""
    grid = np.asarray(pixels)
    values = np.rint(grid * PGM_MAXVAL).astype(">u2")
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + values.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a 16-bit binary PGM back to a float32 grid in [0, 1]."""
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError("not a binary PGM (P5) header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != PGM_MAXVAL:
        raise ValueError(f"expected maxval {PGM_MAXVAL}, got {maxval}")
    body = data[m.end():]
    expected = width * height * 2
    if len(body) != expected:
        raise ValueError(f"PGM body is {len(body)} bytes, expected {expected}")
    values = np.frombuffer(body, dtype=">u2").reshape(height, width)
    return (values / PGM_MAXVAL).astype(np.float32)


def save_patch(patch: Patch, out_dir: Path) -> Path:
    patch.validate(size=patch.pixels.shape[0])
    path = Path(out_dir) / patch_filename(patch.patient_id, patch.instance_number)
    path.write_bytes(encode_pgm(patch.pixels))
    return path


def write_sidecar(
    out_dir: Path,
    patient_id: str,
    entries: list[dict],
) -> Path:
    """Write the per-patient JSON sidecar listing patches and centroids.

    Each entry carries ``file``, ``instance_number``, ``centroid`` and
    ``source``; entries are stored sorted by instance number.
    """
    path = Path(out_dir) / f"{patient_id}.json"
    doc = {
        "patient_id": patient_id,
        "patches": sorted(entries, key=lambda e: e["instance_number"]),
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_sidecar(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
