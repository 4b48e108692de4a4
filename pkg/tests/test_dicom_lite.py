import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctpji import dicom_lite as dl

# ---------------------------------------------------------------------------
# helpers to hand-assemble files (independent of the library's writer)


def elem_explicit(group, elem, vr, value):
    out = group.to_bytes(2, "little") + elem.to_bytes(2, "little") + vr
    if vr in (b"OB", b"OW", b"UN", b"SQ", b"UT"):
        out += b"\x00\x00" + len(value).to_bytes(4, "little")
    else:
        out += len(value).to_bytes(2, "little")
    return out + value


def elem_implicit(group, elem, value):
    return (
        group.to_bytes(2, "little")
        + elem.to_bytes(2, "little")
        + len(value).to_bytes(4, "little")
        + value
    )


def standard_elements(pixel_value=b"\x07\x00", rows=1, cols=1, extra=()):
    """Explicit-VR elements for a parseable 16-bit 1x1 slice, as a dict."""
    elems = {
        (0x0010, 0x0020): elem_explicit(0x0010, 0x0020, b"LO", b"p0"),
        (0x0020, 0x0013): elem_explicit(0x0020, 0x0013, b"IS", b"1 "),
        (0x0028, 0x0010): elem_explicit(0x0028, 0x0010, b"US", rows.to_bytes(2, "little")),
        (0x0028, 0x0011): elem_explicit(0x0028, 0x0011, b"US", cols.to_bytes(2, "little")),
        (0x0028, 0x0100): elem_explicit(0x0028, 0x0100, b"US", (16).to_bytes(2, "little")),
        (0x0028, 0x0103): elem_explicit(0x0028, 0x0103, b"US", (0).to_bytes(2, "little")),
        (0x0028, 0x1052): elem_explicit(0x0028, 0x1052, b"DS", b"-1024 "),
        (0x0028, 0x1053): elem_explicit(0x0028, 0x1053, b"DS", b"1 "),
        (0x7FE0, 0x0010): elem_explicit(0x7FE0, 0x0010, b"OW", pixel_value),
    }
    for key, raw in extra:
        elems[key] = raw
    return elems


def assemble(elems, order=None):
    order = order or sorted(elems)
    return b"".join(elems[tag] for tag in order)


def make_slice(rng, rows=None, cols=None, bits=16, signed=0):
    rows = rows or int(rng.integers(1, 24))
    cols = cols or int(rng.integers(1, 24))
    lo, hi = {(8, 0): (0, 256), (8, 1): (-128, 128),
              (16, 0): (0, 65536), (16, 1): (-32768, 32768)}[(bits, signed)]
    pixels = rng.integers(lo, hi, size=(rows, cols), dtype=np.int64).astype(np.int32)
    meta = dl.SliceMeta(
        patient_id=f"pat{int(rng.integers(0, 999))}",
        instance_number=int(rng.integers(-50, 500)),
        rows=rows,
        cols=cols,
        rescale_slope=float(rng.choice([1.0, 0.5, 2.0, 1.25])),
        rescale_intercept=float(rng.choice([0.0, -1024.0, 17.5])),
        bits_allocated=bits,
        pixel_representation=signed,
    )
    return dl.RawSlice(meta=meta, pixels=pixels)


# ---------------------------------------------------------------------------
# round trips


def test_round_trip_minimal():
    meta = dl.SliceMeta("pat1", 5, 4, 4, rescale_slope=1.0, rescale_intercept=-1024.0)
    slc = dl.RawSlice(meta, np.arange(16, dtype=np.int32).reshape(4, 4))
    assert dl.parse_dicom(dl.write_dicom_lite(slc)) == slc


def test_round_trip_one_pixel():
    slc = dl.RawSlice(dl.SliceMeta("p", 1, 1, 1), np.zeros((1, 1), dtype=np.int32))
    assert dl.parse_dicom(dl.write_dicom_lite(slc)) == slc


def test_round_trip_large_random():
    rng = np.random.default_rng(0)
    slc = make_slice(rng, rows=512, cols=512, bits=16, signed=1)
    assert dl.parse_dicom(dl.write_dicom_lite(slc)) == slc


@pytest.mark.parametrize("bits,signed", [(8, 0), (8, 1), (16, 0), (16, 1)])
def test_round_trip_all_pixel_layouts(bits, signed):
    rng = np.random.default_rng(bits * 10 + signed)
    for _ in range(8):
        slc = make_slice(rng, bits=bits, signed=signed)
        assert dl.parse_dicom(dl.write_dicom_lite(slc)) == slc


@st.composite
def raw_slices(draw):
    rows = draw(st.integers(1, 12))
    cols = draw(st.integers(1, 12))
    bits = draw(st.sampled_from([8, 16]))
    signed = draw(st.sampled_from([0, 1]))
    lo, hi = {(8, 0): (0, 255), (8, 1): (-128, 127),
              (16, 0): (0, 65535), (16, 1): (-32768, 32767)}[(bits, signed)]
    pixels = draw(
        st.lists(st.integers(lo, hi), min_size=rows * cols, max_size=rows * cols)
    )
    pid_chars = st.sampled_from("abcXYZ019 _.-^")
    pid = draw(st.text(alphabet=pid_chars, max_size=12).map(lambda s: s.rstrip(" ")))
    meta = dl.SliceMeta(
        patient_id=pid,
        instance_number=draw(st.integers(-10_000, 10_000)),
        rows=rows,
        cols=cols,
        rescale_slope=draw(
            st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
        ),
        rescale_intercept=draw(
            st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
        ),
        bits_allocated=bits,
        pixel_representation=signed,
    )
    return dl.RawSlice(meta, np.array(pixels, dtype=np.int32).reshape(rows, cols))


@settings(max_examples=80, deadline=None)
@given(raw_slices())
def test_round_trip_property(slc):
    assert dl.parse_dicom(dl.write_dicom_lite(slc)) == slc


# ---------------------------------------------------------------------------
# declared specifics


def test_two_complement_16bit_pixel():
    body = standard_elements(pixel_value=b"\x9c\xff")
    body[(0x0028, 0x0103)] = elem_explicit(0x0028, 0x0103, b"US", (1).to_bytes(2, "little"))
    slc = dl.parse_dicom(assemble(body))
    assert slc.pixels[0, 0] == -100


def test_missing_pixel_data():
    body = standard_elements()
    del body[(0x7FE0, 0x0010)]
    with pytest.raises(dl.MissingPixelData):
        dl.parse_dicom(assemble(body))


def test_missing_required_tag():
    body = standard_elements()
    del body[(0x0028, 0x0010)]
    with pytest.raises(dl.MissingRequiredTag):
        dl.parse_dicom(assemble(body))


def test_default_slope_intercept():
    body = standard_elements()
    del body[(0x0028, 0x1052)]
    del body[(0x0028, 0x1053)]
    slc = dl.parse_dicom(assemble(body))
    assert slc.meta.rescale_slope == 1.0
    assert slc.meta.rescale_intercept == 0.0


def test_unknown_tags_skipped():
    extra = [
        ((0x0008, 0x0060), elem_explicit(0x0008, 0x0060, b"CS", b"CT")),
        ((0x0029, 0x0011), elem_explicit(0x0029, 0x0011, b"UN", b"1234")),
    ]
    body = standard_elements(extra=extra)
    slc = dl.parse_dicom(assemble(body))
    assert slc.meta.patient_id == "p0"
    assert slc.pixels[0, 0] == 7


def test_element_order_within_group_irrelevant():
    body = standard_elements()
    tags = sorted(body)
    reordered = [tags[1], tags[0]] + tags[2:6][::-1] + tags[6:]
    assert dl.parse_dicom(assemble(body, reordered)) == dl.parse_dicom(assemble(body))


def test_pixel_data_must_be_last():
    body = standard_elements()
    tags = sorted(body)
    order = tags[:-2] + [tags[-1], tags[-2]]  # swap PixelData before slope
    with pytest.raises(dl.MalformedElement):
        dl.parse_dicom(assemble(body, order))


def test_truncated_element():
    body = standard_elements()
    body[(0x7FE0, 0x0010)] = elem_explicit(0x7FE0, 0x0010, b"OW", b"")[:-4] + (
        400
    ).to_bytes(4, "little")
    with pytest.raises(dl.TruncatedElement):
        dl.parse_dicom(assemble(body))


def test_shape_mismatch():
    body = standard_elements(pixel_value=b"\x00\x00\x00\x00")  # 2 px for a 1x1 grid
    with pytest.raises(dl.ShapeMismatch):
        dl.parse_dicom(assemble(body))


def test_multi_frame_rejected():
    extra = [((0x0028, 0x0008), elem_explicit(0x0028, 0x0008, b"IS", b"3 "))]
    body = standard_elements(extra=extra)
    with pytest.raises(dl.MultiFrameUnsupported):
        dl.parse_dicom(assemble(body))


def test_unsupported_transfer_syntax():
    ts = b"1.2.840.10008.1.2.2\x00"  # big endian
    header = elem_explicit(0x0002, 0x0010, b"UI", ts)
    data = b"\x00" * 128 + b"DICM" + header + assemble(standard_elements())
    with pytest.raises(dl.UnsupportedTransferSyntax):
        dl.parse_dicom(data)


def test_implicit_vr_parse():
    elems = [
        elem_implicit(0x0010, 0x0020, b"p0"),
        elem_implicit(0x0020, 0x0013, b"7 "),
        elem_implicit(0x0028, 0x0010, (1).to_bytes(2, "little")),
        elem_implicit(0x0028, 0x0011, (1).to_bytes(2, "little")),
        elem_implicit(0x0028, 0x0100, (16).to_bytes(2, "little")),
        elem_implicit(0x0028, 0x0103, (0).to_bytes(2, "little")),
        elem_implicit(0x7FE0, 0x0010, b"\x2a\x00"),
    ]
    slc = dl.parse_dicom(b"".join(elems))
    assert slc.meta.instance_number == 7
    assert slc.pixels[0, 0] == 42


def test_implicit_vr_via_meta_header():
    ts = b"1.2.840.10008.1.2\x00"
    header = elem_explicit(0x0002, 0x0010, b"UI", ts)
    elems = b"".join(
        [
            elem_implicit(0x0010, 0x0020, b"p0"),
            elem_implicit(0x0020, 0x0013, b"1 "),
            elem_implicit(0x0028, 0x0010, (1).to_bytes(2, "little")),
            elem_implicit(0x0028, 0x0011, (1).to_bytes(2, "little")),
            elem_implicit(0x0028, 0x0100, (16).to_bytes(2, "little")),
            elem_implicit(0x0028, 0x0103, (0).to_bytes(2, "little")),
            elem_implicit(0x7FE0, 0x0010, b"\x01\x00"),
        ]
    )
    slc = dl.parse_dicom(b"\x00" * 128 + b"DICM" + header + elems)
    assert slc.pixels[0, 0] == 1


# ---------------------------------------------------------------------------
# writer invariants


def test_writer_rejects_shape_mismatch():
    meta = dl.SliceMeta("p", 1, 2, 3)
    slc = dl.RawSlice(meta, np.zeros(5, dtype=np.int32))
    with pytest.raises(dl.InvariantViolation):
        dl.write_dicom_lite(slc)


def test_writer_rejects_out_of_range_pixels():
    meta = dl.SliceMeta("p", 1, 1, 1, bits_allocated=8)
    slc = dl.RawSlice(meta, np.array([[300]], dtype=np.int32))
    with pytest.raises(dl.InvariantViolation):
        dl.write_dicom_lite(slc)


def test_writer_rejects_non_ascii_patient():
    meta = dl.SliceMeta("pàt", 1, 1, 1)
    slc = dl.RawSlice(meta, np.zeros((1, 1), dtype=np.int32))
    with pytest.raises(dl.InvariantViolation):
        dl.write_dicom_lite(slc)


def test_meta_invariants():
    with pytest.raises(dl.InvariantViolation):
        dl.SliceMeta("p", 1, 0, 4)
    with pytest.raises(dl.InvariantViolation):
        dl.SliceMeta("p", 1, 4, 4, bits_allocated=12)
    with pytest.raises(dl.InvariantViolation):
        dl.SliceMeta("p", 1, 4, 4, pixel_representation=2)


# ---------------------------------------------------------------------------
# totality: mutations parse or raise a declared error, never crash


@settings(max_examples=300, deadline=None)
@given(
    pos=st.integers(0, 10_000),
    value=st.integers(0, 255),
    seed=st.integers(0, 2**16),
)
def test_any_byte_mutation_is_total(pos, value, seed):
    rng = np.random.default_rng(seed)
    data = bytearray(dl.write_dicom_lite(make_slice(rng)))
    data[pos % len(data)] = value
    try:
        result = dl.parse_dicom(bytes(data))
    except dl.DicomError:
        return
    assert isinstance(result, dl.RawSlice)
    assert result.pixels.shape == (result.meta.rows, result.meta.cols)


@settings(max_examples=120, deadline=None)
@given(
    cut=st.integers(0, 4000),
    seed=st.integers(0, 2**16),
)
def test_truncation_is_total(cut, seed):
    rng = np.random.default_rng(seed)
    data = dl.write_dicom_lite(make_slice(rng))
    try:
        result = dl.parse_dicom(data[: cut % (len(data) + 1)])
    except dl.DicomError:
        return
    assert isinstance(result, dl.RawSlice)
