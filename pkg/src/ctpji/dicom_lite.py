"""Minimal single-slice DICOM reader and writer.

Covers just enough of the DICOM encoding to move CT slices through the
pipeline: explicit- and implicit-VR little endian, uncompressed pixel
data, and the metadata tags the preprocessing stages consume (patient,
instance, grid shape, rescale, pixel layout). Unknown tags are skipped
by their declared length, so files carrying extra metadata still parse.
Files produced by :func:`write_dicom_lite` round-trip bit-exactly
through :func:`parse_dicom`.

Out of subset: compressed or big-endian transfer syntaxes, sequences,
undefined-length elements, multi-frame files, non-ASCII text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE = "1.2.840.10008.1.2"

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_PATIENT_ID = (0x0010, 0x0020)
TAG_INSTANCE_NUMBER = (0x0020, 0x0013)
TAG_NUMBER_OF_FRAMES = (0x0028, 0x0008)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLUMNS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

# VRs whose explicit encoding uses the 2-byte reserved + 4-byte length form.
_LONG_FORM_VRS = frozenset(
    {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"UC", b"UN", b"UR", b"UT"}
)
_SHORT_FORM_VRS = frozenset(
    {
        b"AE", b"AS", b"AT", b"CS", b"DA", b"DS", b"DT", b"FL", b"FD", b"IS",
        b"LO", b"LT", b"PN", b"SH", b"SL", b"SS", b"ST", b"TM", b"UI", b"UL",
        b"US",
    }
)
_KNOWN_VRS = _LONG_FORM_VRS | _SHORT_FORM_VRS

_UNDEFINED_LENGTH = 0xFFFFFFFF


class DicomError(Exception):
    """Base class for every error the parser can raise."""


class MissingPixelData(DicomError):
    """The file carries no (7FE0,0010) element."""


class MissingRequiredTag(DicomError):
    """A tag the pipeline depends on (and has no default for) is absent."""


class UnsupportedTransferSyntax(DicomError):
    """Declared transfer syntax is outside the little-endian uncompressed subset."""


class TruncatedElement(DicomError):
    """A declared element length runs past the end of the input."""


class ShapeMismatch(DicomError):
    """Pixel data byte count disagrees with rows x cols x bytes-per-pixel."""


class MalformedElement(DicomError):
    """An element that cannot be decoded within the supported subset."""


class MultiFrameUnsupported(DicomError):
    """NumberOfFrames > 1; the pipeline's unit is one slice per file."""


class InvariantViolation(ValueError):
    """Writer input violates the slice invariants."""


@dataclass(frozen=True)
class SliceMeta:
    """Per-slice metadata needed downstream.

    ``rescale_slope`` / ``rescale_intercept`` map raw pixel values to
    Hounsfield units; ``pixel_representation`` 0 means unsigned storage,
    1 means two's-complement signed.
    """

    patient_id: str
    instance_number: int
    rows: int
    cols: int
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    bits_allocated: int = 16
    pixel_representation: int = 0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise InvariantViolation(
                f"rows and cols must be positive, got {self.rows}x{self.cols}"
            )
        if self.bits_allocated not in (8, 16):
            raise InvariantViolation(
                f"bits_allocated must be 8 or 16, got {self.bits_allocated}"
            )
        if self.pixel_representation not in (0, 1):
            raise InvariantViolation(
                f"pixel_representation must be 0 or 1, got {self.pixel_representation}"
            )


# pixel value bounds keyed by (bits_allocated, pixel_representation)
_PIXEL_BOUNDS = {
    (8, 0): (0, 255),
    (8, 1): (-128, 127),
    (16, 0): (0, 65535),
    (16, 1): (-32768, 32767),
}

_PIXEL_DTYPES = {
    (8, 0): np.dtype("u1"),
    (8, 1): np.dtype("i1"),
    (16, 0): np.dtype("<u2"),
    (16, 1): np.dtype("<i2"),
}


@dataclass(eq=False)
class RawSlice:
    """One parsed slice: metadata plus the raw integer pixel grid.

    ``pixels`` is a row-major ``(rows, cols)`` int32 array (a flat array
    of length rows*cols is accepted and reshaped by :meth:`validate`).
    """

    meta: SliceMeta
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int32)

    def validate(self) -> None:
        """Raise :class:`InvariantViolation` unless shape and value range hold."""
        m = self.meta
        if self.pixels.size != m.rows * m.cols:
            raise InvariantViolation(
                f"pixel count {self.pixels.size} != rows*cols = {m.rows * m.cols}"
            )
        if self.pixels.ndim == 1:
            self.pixels = self.pixels.reshape(m.rows, m.cols)
        elif self.pixels.shape != (m.rows, m.cols):
            raise InvariantViolation(
                f"pixel grid shape {self.pixels.shape} != ({m.rows}, {m.cols})"
            )
        lo, hi = _PIXEL_BOUNDS[(m.bits_allocated, m.pixel_representation)]
        if self.pixels.size:
            pmin = int(self.pixels.min())
            pmax = int(self.pixels.max())
            if pmin < lo or pmax > hi:
                raise InvariantViolation(
                    f"pixel values [{pmin}, {pmax}] exceed "
                    f"{m.bits_allocated}-bit range [{lo}, {hi}]"
                )

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawSlice):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.pixels, other.pixels)


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    @property
    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedElement(
                f"need {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")


def _read_element(cur: _Cursor, explicit: bool):
    """Read one data element, returning ``(tag, vr, value_bytes)``."""
    group = cur.u16()
    elem = cur.u16()
    tag = (group, elem)
    if explicit:
        vr = cur.take(2)
        if vr not in _KNOWN_VRS:
            raise MalformedElement(f"unknown VR {vr!r} for tag {_fmt_tag(tag)}")
        if vr in _LONG_FORM_VRS:
            cur.take(2)  # reserved
            length = cur.u32()
        else:
            length = cur.u16()
    else:
        vr = None
        length = cur.u32()
    if length == _UNDEFINED_LENGTH:
        raise MalformedElement(
            f"undefined-length element {_fmt_tag(tag)} (sequences are out of subset)"
        )
    value = cur.take(length)
    return tag, vr, value


def _fmt_tag(tag) -> str:
    return f"({tag[0]:04X},{tag[1]:04X})"


def _ascii(value: bytes, tag) -> str:
    try:
        return value.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedElement(f"non-ASCII text in {_fmt_tag(tag)}") from exc


def _text(value: bytes, tag) -> str:
    return _ascii(value, tag).rstrip(" \x00")


def _int_value(value: bytes, tag) -> int:
    s = _text(value, tag).strip()
    try:
        return int(s)
    except ValueError as exc:
        raise MalformedElement(f"bad integer string {s!r} in {_fmt_tag(tag)}") from exc


def _float_value(value: bytes, tag):
    """Decode a decimal string; empty value means absent (caller defaults)."""
    s = _text(value, tag).strip()
    if not s:
        return None
    try:
        out = float(s)
    except ValueError as exc:
        raise MalformedElement(f"bad decimal string {s!r} in {_fmt_tag(tag)}") from exc
    if not math.isfinite(out):
        raise MalformedElement(f"non-finite decimal {s!r} in {_fmt_tag(tag)}")
    return out


def _u16_value(value: bytes, tag) -> int:
    if len(value) != 2:
        raise MalformedElement(
            f"{_fmt_tag(tag)} must be a single 16-bit value, got {len(value)} bytes"
        )
    return int.from_bytes(value, "little")


def _sniff_explicit(data: bytes, pos: int) -> bool:
    # An explicit element carries an ASCII VR code right after the 4 tag bytes.
    return data[pos + 4:pos + 6] in _KNOWN_VRS


def parse_dicom(data: bytes) -> RawSlice:
    """Parse one single-frame little-endian uncompressed DICOM slice.

    Accepts files with the 128-byte preamble + ``DICM`` magic (with or
    without a group-0002 file-meta header) as well as bare datasets
    starting at the first element. Raises a :class:`DicomError` subclass
    on anything outside the supported subset; absent RescaleSlope /
    RescaleIntercept default to 1 and 0.
    """
    data = bytes(data)
    cur = _Cursor(data)
    if len(data) >= 132 and data[128:132] == b"DICM":
        cur.pos = 132

    # File-meta group (0002) is always explicit VR little endian.
    ts_uid = None
    while not cur.at_end:
        if cur.pos + 2 > len(data):
            raise TruncatedElement("dangling bytes where an element tag was expected")
        group = int.from_bytes(data[cur.pos:cur.pos + 2], "little")
        if group != 0x0002:
            break
        tag, _vr, value = _read_element(cur, explicit=True)
        if tag == TAG_TRANSFER_SYNTAX:
            ts_uid = _text(value, tag)

    if ts_uid is None:
        explicit = not cur.at_end and _sniff_explicit(data, cur.pos)
    elif ts_uid == EXPLICIT_VR_LE:
        explicit = True
    elif ts_uid == IMPLICIT_VR_LE:
        explicit = False
    else:
        raise UnsupportedTransferSyntax(ts_uid)

    found: dict = {}
    while not cur.at_end:
        tag, vr, value = _read_element(cur, explicit)
        if tag == TAG_PIXEL_DATA:
            if vr not in (None, b"OB", b"OW", b"UN"):
                raise MalformedElement(f"pixel data VR {vr!r} unsupported")
            found[tag] = value
            if not cur.at_end:
                raise MalformedElement("elements found after pixel data")
            break
        found[tag] = value

    if TAG_NUMBER_OF_FRAMES in found:
        frames = _int_value(found[TAG_NUMBER_OF_FRAMES], TAG_NUMBER_OF_FRAMES)
        if frames > 1:
            raise MultiFrameUnsupported(f"{frames} frames declared")

    for required in (
        TAG_PATIENT_ID,
        TAG_INSTANCE_NUMBER,
        TAG_ROWS,
        TAG_COLUMNS,
        TAG_BITS_ALLOCATED,
        TAG_PIXEL_REPRESENTATION,
    ):
        if required not in found:
            raise MissingRequiredTag(_fmt_tag(required))
    if TAG_PIXEL_DATA not in found:
        raise MissingPixelData("no (7FE0,0010) element")

    slope = _float_value(found.get(TAG_RESCALE_SLOPE, b""), TAG_RESCALE_SLOPE)
    intercept = _float_value(found.get(TAG_RESCALE_INTERCEPT, b""), TAG_RESCALE_INTERCEPT)
    try:
        meta = SliceMeta(
            patient_id=_text(found[TAG_PATIENT_ID], TAG_PATIENT_ID),
            instance_number=_int_value(found[TAG_INSTANCE_NUMBER], TAG_INSTANCE_NUMBER),
            rows=_u16_value(found[TAG_ROWS], TAG_ROWS),
            cols=_u16_value(found[TAG_COLUMNS], TAG_COLUMNS),
            rescale_slope=1.0 if slope is None else slope,
            rescale_intercept=0.0 if intercept is None else intercept,
            bits_allocated=_u16_value(found[TAG_BITS_ALLOCATED], TAG_BITS_ALLOCATED),
            pixel_representation=_u16_value(
                found[TAG_PIXEL_REPRESENTATION], TAG_PIXEL_REPRESENTATION
            ),
        )
    except InvariantViolation as exc:
        raise MalformedElement(str(exc)) from exc

    raw = found[TAG_PIXEL_DATA]
    expected = meta.rows * meta.cols * (meta.bits_allocated // 8)
    padded = expected + (expected % 2)  # values are padded to even length
    if len(raw) not in (expected, padded):
        raise ShapeMismatch(
            f"pixel data is {len(raw)} bytes, expected {expected} "
            f"for {meta.rows}x{meta.cols}x{meta.bits_allocated // 8}"
        )
    dtype = _PIXEL_DTYPES[(meta.bits_allocated, meta.pixel_representation)]
    pixels = (
        np.frombuffer(raw[:expected], dtype=dtype)
        .astype(np.int32)
        .reshape(meta.rows, meta.cols)
    )
    return RawSlice(meta=meta, pixels=pixels)


def _encode_short(out: bytearray, tag, vr: bytes, value: bytes) -> None:
    if len(value) % 2:
        raise AssertionError("values must be padded to even length before encoding")
    out += tag[0].to_bytes(2, "little")
    out += tag[1].to_bytes(2, "little")
    out += vr
    out += len(value).to_bytes(2, "little")
    out += value


def _encode_long(out: bytearray, tag, vr: bytes, value: bytes) -> None:
    out += tag[0].to_bytes(2, "little")
    out += tag[1].to_bytes(2, "little")
    out += vr
    out += b"\x00\x00"
    out += len(value).to_bytes(4, "little")
    out += value


def _pad_text(s: str) -> bytes:
    raw = s.encode("ascii")
    return raw + b" " if len(raw) % 2 else raw


def _format_ds(x: float) -> str:
    # %.17g keeps the exact float64 value through a text round-trip; this
    # can exceed the conventional 16-char DS limit, which the reader side
    # of this subset does not enforce.
    return format(x, ".17g")


def write_dicom_lite(slc: RawSlice) -> bytes:
    """Encode a slice as an explicit-VR little-endian file.

    The output starts with the 128-byte preamble, ``DICM`` magic and a
    minimal group-0002 header, and keeps pixel data as the last element.
    ``parse_dicom(write_dicom_lite(s)) == s`` for every valid slice.
    """
    if not isinstance(slc, RawSlice):
        raise InvariantViolation(f"expected RawSlice, got {type(slc).__name__}")
    slc.validate()
    m = slc.meta
    if not m.patient_id.isascii():
        raise InvariantViolation("patient_id must be ASCII")
    if "\\" in m.patient_id or "\x00" in m.patient_id:
        raise InvariantViolation("patient_id must not contain backslash or NUL")
    if m.patient_id != m.patient_id.rstrip(" "):
        raise InvariantViolation("patient_id must not end with padding spaces")
    if not (math.isfinite(m.rescale_slope) and math.isfinite(m.rescale_intercept)):
        raise InvariantViolation("rescale slope/intercept must be finite")

    body = bytearray()
    _encode_short(body, TAG_PATIENT_ID, b"LO", _pad_text(m.patient_id))
    _encode_short(body, TAG_INSTANCE_NUMBER, b"IS", _pad_text(str(m.instance_number)))
    _encode_short(body, TAG_ROWS, b"US", m.rows.to_bytes(2, "little"))
    _encode_short(body, TAG_COLUMNS, b"US", m.cols.to_bytes(2, "little"))
    _encode_short(body, TAG_BITS_ALLOCATED, b"US", m.bits_allocated.to_bytes(2, "little"))
    _encode_short(
        body, TAG_PIXEL_REPRESENTATION, b"US", m.pixel_representation.to_bytes(2, "little")
    )
    _encode_short(body, TAG_RESCALE_INTERCEPT, b"DS", _pad_text(_format_ds(m.rescale_intercept)))
    _encode_short(body, TAG_RESCALE_SLOPE, b"DS", _pad_text(_format_ds(m.rescale_slope)))

    dtype = _PIXEL_DTYPES[(m.bits_allocated, m.pixel_representation)]
    pixel_bytes = slc.pixels.reshape(m.rows, m.cols).astype(dtype).tobytes()
    if len(pixel_bytes) % 2:
        pixel_bytes += b"\x00"
    vr = b"OW" if m.bits_allocated == 16 else b"OB"
    _encode_long(body, TAG_PIXEL_DATA, vr, pixel_bytes)

    ts_value = EXPLICIT_VR_LE.encode("ascii")
    if len(ts_value) % 2:
        ts_value += b"\x00"  # UIs pad with NUL
    meta_group = bytearray()
    _encode_short(meta_group, TAG_TRANSFER_SYNTAX, b"UI", ts_value)
    header = bytearray()
    _encode_short(header, (0x0002, 0x0000), b"UL", len(meta_group).to_bytes(4, "little"))
    header += meta_group

    return b"\x00" * 128 + b"DICM" + bytes(header) + bytes(body)
