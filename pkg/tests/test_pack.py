import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsq.pack import (
    MAX_TRIT_BYTE,
    PackedTensor,
    PackError,
    dequantize,
    entropy_bpp,
    load_packed,
    pack,
    report_bpp,
    row_bytes,
    save_packed,
    stored_bpp,
    unpack,
)
from gsq.quantizer import Grid, GroupScales, format_bpp, num_groups

from oracles import trit_byte

GOLDEN = Path(__file__).parent / "golden"
HEADER = 28


def _scales(rows, cols, gs=128, value=1.0):
    return GroupScales(np.full((rows, num_groups(cols, gs) if cols else 0), value, np.float32), gs)


def _payload(pt):
    return pt.to_bytes()[HEADER + 2 * pt.scales.size : -4]


def test_ternary_byte_example():
    pt = pack(np.array([[1, -1, 0, 0, 1]]), _scales(1, 5), 0)
    assert trit_byte([2, 0, 1, 1, 2]) == 200
    assert _payload(pt) == bytes([200])


def test_two_bit_byte_example():
    pt = pack(np.array([[-2, -1, 0, 1]]), _scales(1, 4), 2)
    assert _payload(pt) == bytes([0b11100100]) == bytes([228])


def test_empty_matrix_is_header_only():
    pt = pack(np.zeros((0, 0), np.int64), _scales(0, 0), 2)
    blob = pt.to_bytes()
    assert len(blob) == HEADER + 4 and pt.payload == b""
    back = PackedTensor.from_bytes(blob)
    assert back.dequantize().shape == (0, 0)


def test_header_layout():
    blob = pack(np.zeros((2, 3), np.int64), _scales(2, 3, gs=2), 3).to_bytes()
    magic, ver, mode, rows, cols, gs, sdt = struct.unpack_from("<4sHBQQIB", blob)
    assert (magic, ver, mode, rows, cols, gs, sdt) == (b"GSQP", 1, 3, 2, 3, 2, 1)
    assert struct.unpack_from("<I", blob, len(blob) - 4)[0] == zlib.crc32(blob[:-4])


@st.composite
def packable(draw):
    mode = draw(st.sampled_from([0, 2, 3, 4, 5, 6, 7, 8]))
    rows, cols = draw(st.integers(0, 5)), draw(st.integers(0, 40))
    gs = draw(st.integers(1, 48))
    grid = Grid.from_mode(mode)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    codes = rng.integers(grid.levels[0], grid.levels[-1] + 1, size=(rows, cols))
    ng = num_groups(cols, gs) if cols else 0
    scales = rng.uniform(-4, 4, (rows, ng)).astype(np.float32)
    return mode, codes, GroupScales(scales, gs)


@given(packable())
def test_roundtrip_codes_and_f16_scales(case):
    mode, codes, scales = case
    pt = pack(codes, scales, mode)
    assert len(pt.payload) == codes.shape[0] * row_bytes(mode, codes.shape[1])
    back = PackedTensor.from_bytes(pt.to_bytes())
    assert np.array_equal(unpack(back), codes)
    assert np.array_equal(back.scales, scales.values.astype(np.float16))
    if codes.size:
        ref = scales.values.astype(np.float16).astype(np.float64).repeat(scales.group_size, 1)[:, : codes.shape[1]]
        np.testing.assert_array_equal(dequantize(back), (ref * codes).astype(np.float32))


@given(packable())
def test_rows_decode_independently(case):
    mode, codes, scales = case
    if codes.shape[0] < 2:
        return
    full = pack(codes, scales, mode).payload
    nb = row_bytes(mode, codes.shape[1])
    for r in range(codes.shape[0]):
        one = pack(codes[r : r + 1], GroupScales(scales.values[r : r + 1], scales.group_size), mode).payload
        assert full[r * nb : (r + 1) * nb] == one


def test_ternary_bytes_never_exceed_242(rng):
    codes = rng.integers(-1, 2, size=(50, 123))
    codes[0, :5] = 1
    raw = np.frombuffer(pack(codes, _scales(50, 123), 0).payload, np.uint8)
    assert raw.max() <= MAX_TRIT_BYTE and MAX_TRIT_BYTE in raw


def test_all_zero_codes_dequantize_to_zero(rng):
    pt = pack(np.zeros((3, 9), np.int64), GroupScales(rng.uniform(-9, 9, (3, 3)), 3), 4)
    assert not dequantize(pt).any()


@pytest.mark.parametrize("mode", [0, 2, 3])
def test_golden_decode(mode):
    table = json.loads((GOLDEN / f"fixture_4x128_mode{mode}.json").read_text())
    blob = (GOLDEN / f"fixture_4x128_mode{mode}.gsqp").read_bytes()
    pt = PackedTensor.from_bytes(blob)
    assert (pt.mode, pt.rows, pt.cols, pt.group_size) == (table["mode"], 4, 128, 128)
    assert pt.codes().tolist() == table["codes"]
    assert pt.scales.astype(np.float64).tolist() == table["scales"]
    repacked = pack(np.array(table["codes"]), GroupScales(np.array(table["scales"], np.float32), 128), mode)
    assert repacked.to_bytes() == blob


def test_out_of_range_code_names_coordinate():
    codes = np.zeros((2, 3), np.int64)
    codes[1, 2] = 2
    with pytest.raises(PackError, match=r"\(1, 2\)"):
        pack(codes, _scales(2, 3), 2)
    with pytest.raises(PackError):
        pack(np.array([[0.5]]), _scales(1, 1), 3)
    with pytest.raises(PackError):
        pack(np.zeros((1, 1), np.int64), _scales(1, 1), 9)


def test_scales_must_fit_float16():
    with pytest.raises(PackError, match="float16"):
        pack(np.zeros((1, 1), np.int64), GroupScales(np.array([[1e6]], np.float32), 128), 2)


def _mutations(blob, rng):
    kind = rng.integers(0, 4)
    b = bytearray(blob)
    if kind == 0:  # flip bits anywhere
        for _ in range(rng.integers(1, 4)):
            i = int(rng.integers(0, len(b)))
            b[i] ^= 1 << int(rng.integers(0, 8))
    elif kind == 1:  # truncate
        b = b[: int(rng.integers(0, len(b)))]
    elif kind == 2:  # append junk
        b += bytes(rng.integers(0, 256, int(rng.integers(1, 9)), dtype=np.uint8))
    else:  # rewrite a header field
        i = int(rng.integers(0, HEADER))
        b[i] = (b[i] + int(rng.integers(1, 256))) % 256
    return bytes(b)


def test_corruptions_are_rejected(rng):
    for _ in range(300):
        mode = int(rng.choice([0, 2, 3, 5, 8]))
        grid = Grid.from_mode(mode)
        codes = rng.integers(grid.levels[0], grid.levels[-1] + 1, size=(int(rng.integers(1, 4)), int(rng.integers(1, 30))))
        blob = pack(codes, _scales(*codes.shape, gs=8), mode).to_bytes()
        bad = _mutations(blob, rng)
        if bad == blob:
            continue
        with pytest.raises(PackError):
            PackedTensor.from_bytes(bad)


def _with_crc(body):
    return body + struct.pack("<I", zlib.crc32(body))


def test_structural_checks_behind_valid_checksum():
    blob = pack(np.array([[1, -1, 0]]), _scales(1, 3), 0).to_bytes()
    body = bytearray(blob[:-4])
    body[-1] = 243  # trit byte above 242
    with pytest.raises(PackError, match="ternary byte"):
        PackedTensor.from_bytes(_with_crc(bytes(body)))
    body[-1] = 2 * 81  # non-zero trit in the padding positions
    with pytest.raises(PackError, match="padding"):
        PackedTensor.from_bytes(_with_crc(bytes(body)))
    two = bytearray(pack(np.array([[1, -1, 0]]), _scales(1, 3), 2).to_bytes()[:-4])
    two[-1] |= 0x80
    with pytest.raises(PackError, match="padding"):
        PackedTensor.from_bytes(_with_crc(bytes(two)))
    nan = bytearray(blob[:-4])
    nan[HEADER : HEADER + 2] = np.float16("nan").tobytes()
    with pytest.raises(PackError, match="non-finite"):
        PackedTensor.from_bytes(_with_crc(bytes(nan)))
    for offset, value, msg in [(4, 2, "version"), (6, 9, "mode"), (27, 0, "dtype")]:
        hdr = bytearray(blob[:-4])
        hdr[offset] = value
        with pytest.raises(PackError, match=msg):
            PackedTensor.from_bytes(_with_crc(bytes(hdr)))


def test_save_and_load(tmp_path):
    pt = pack(np.array([[1, 0, -2]]), _scales(1, 3), 2)
    p = tmp_path / "x.gsqp"
    save_packed(p, pt)
    assert load_packed(p).to_bytes() == pt.to_bytes()
    assert [q.name for q in tmp_path.iterdir()] == ["x.gsqp"]


# ---- bits per parameter -------------------------------------------------


def test_stored_bpp_two_and_three_bit():
    assert stored_bpp(2, 256, 128) == 2.125
    assert stored_bpp(3, 256, 128) == 3.125
    assert format_bpp(stored_bpp(3, 128, 128)) == "3.13"


def test_ternary_entropy_and_stored_rates():
    assert format_bpp(entropy_bpp(0, 128)) == "1.71"
    # five trits per byte: 26 bytes per 128-wide row
    assert stored_bpp(0, 128, 128) == 26 * 8 / 128 + 16 / 128 == 1.75


def test_report_bpp_of_packed_tensor(rng):
    pt = pack(rng.integers(-2, 2, size=(4, 256)), _scales(4, 256), 2)
    stored, ent = report_bpp(pt)
    assert stored == ent == 2.125


@pytest.mark.parametrize("mode", [0, 2, 3, 4, 8])
@pytest.mark.parametrize("cols", [1, 37, 128, 500])
def test_stored_bpp_nonincreasing_in_group_size(mode, cols):
    rates = [stored_bpp(mode, cols, gs) for gs in range(1, 600)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
