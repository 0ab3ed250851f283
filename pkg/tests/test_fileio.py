import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catsagg.correlation import FeatureStack
from catsagg.errors import FormatError
from catsagg.fileio import (
    decode_features,
    encode_features,
    load_features,
    load_keypoints,
    save_features,
    save_keypoints,
)
from catsagg.flow import KeypointSet


def stack(rng, shapes):
    return FeatureStack([rng.standard_normal(s).astype(np.float32) for s in shapes])


def test_layout_is_little_endian_row_major():
    lvl = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    buf = encode_features(FeatureStack([lvl]))
    assert buf[:4] == b"CATF"
    assert struct.unpack_from("<IIIII", buf, 4) == (1, 1, 2, 3, 2)
    assert np.frombuffer(buf[24:], "<f4").tolist() == list(range(12))


def test_round_trip_is_bit_identical(tmp_path, rng):
    s = stack(rng, [(2, 3, 4), (1, 5, 2)])
    save_features(tmp_path / "a.catf", s)
    back = load_features(tmp_path / "a.catf")
    assert back.source_kind == "imported" and back.image_id == "a"
    for a, b in zip(s.levels, back.levels):
        assert a.tobytes() == b.tobytes()
    assert encode_features(back) == encode_features(s)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5)), min_size=1, max_size=3), st.integers(0, 2**31))
def test_round_trip_property(shapes, seed):
    s = stack(np.random.default_rng(seed), shapes)
    back = decode_features(encode_features(s))
    assert [l.shape for l in back.levels] == [tuple(x) for x in shapes]
    assert encode_features(back) == encode_features(s)


def test_truncated_file_names_both_lengths(rng):
    buf = encode_features(stack(rng, [(2, 2, 3)]))
    with pytest.raises(FormatError) as info:
        decode_features(buf[:-5])
    msg = str(info.value)
    assert f"expected length >= {len(buf)}" in msg and f"actual {len(buf) - 5}" in msg
    assert info.value.offset == 24


def test_header_errors(rng):
    good = encode_features(stack(rng, [(1, 1, 1)]))
    with pytest.raises(FormatError, match="zero levels"):
        decode_features(b"CATF" + struct.pack("<II", 1, 0))
    with pytest.raises(FormatError, match="magic"):
        decode_features(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="version"):
        decode_features(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(FormatError, match="zero dimension"):
        decode_features(good[:12] + struct.pack("<III", 1, 0, 1) + good[24:])
    with pytest.raises(FormatError, match="overflow"):
        decode_features(good[:12] + struct.pack("<III", 65536, 65536, 4))
    with pytest.raises(FormatError, match="trailing"):
        decode_features(good + b"\0")
    with pytest.raises(FormatError, match="truncated"):
        decode_features(b"CAT")


def test_keypoints_round_trip(tmp_path, rng):
    kps = KeypointSet(rng.uniform(0, 7, (5, 2)), rng.uniform(0, 7, (5, 2)))
    save_keypoints(tmp_path / "k.csv", kps)
    text = (tmp_path / "k.csv").read_text(encoding="utf-8")
    assert text.splitlines()[0] == "idx,x_src,y_src,x_tgt,y_tgt"
    back = load_keypoints(tmp_path / "k.csv")
    np.testing.assert_array_equal(back.src, kps.src)
    np.testing.assert_array_equal(back.tgt, kps.tgt)


def test_keypoint_errors(tmp_path):
    p = tmp_path / "k.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(FormatError, match="header"):
        load_keypoints(p)
    p.write_text("idx,x_src,y_src,x_tgt,y_tgt\n0,1,2,3\n")
    with pytest.raises(FormatError, match="4 fields"):
        load_keypoints(p)
    p.write_text("idx,x_src,y_src,x_tgt,y_tgt\n0,1,2,3,x\n")
    with pytest.raises(FormatError) as info:
        load_keypoints(p)
    assert info.value.offset == len("idx,x_src,y_src,x_tgt,y_tgt\n")
