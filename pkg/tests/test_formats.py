import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbss import formats
from sbss.ecm import EcnWeights


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 6), min_size=0, max_size=4))
def test_tns_round_trip(tmp_path_factory, seed, dims):
    path = tmp_path_factory.mktemp("t") / "a.tns"
    arr = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    formats.write_tns(path, arr)
    first = path.read_bytes()
    back = formats.read_tns(path)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    formats.write_tns(path, back)
    assert path.read_bytes() == first


def test_tns_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    formats.write_tns(tmp_path / "x.tns", arr)
    raw = (tmp_path / "x.tns").read_bytes()
    assert raw[:4] == b"TNS1" and raw[4] == 1 and raw[5] == 3
    assert struct.unpack("<3I", raw[6:18]) == (1, 2, 3)
    assert raw[18:] == arr.astype("<f4").tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02" + b[5:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
])
def test_tns_corruption_names_file(tmp_path, mutate):
    path = tmp_path / "bad.tns"
    formats.write_tns(path, np.zeros((2, 2), np.float32))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(formats.CorruptFileError, match="bad.tns"):
        formats.read_tns(path)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ecw_round_trip(tmp_path, seed):
    w = EcnWeights.init(2 + seed, seed=seed)
    formats.write_ecw(tmp_path / "a.ecw", w)
    first = (tmp_path / "a.ecw").read_bytes()
    back = formats.read_ecw(tmp_path / "a.ecw")
    assert back.arch == w.arch and back.classes == w.classes
    for k in w.params:
        assert back.params[k].tobytes() == w.params[k].tobytes()
    formats.write_ecw(tmp_path / "b.ecw", back)
    assert (tmp_path / "b.ecw").read_bytes() == first
    assert first[:4] == b"ECW1"
    assert struct.unpack("<5I", first[4:24]) == (2 + seed, 96, 2, 3, 7)


def test_ecw_bad_header(tmp_path):
    formats.write_ecw(tmp_path / "a.ecw", EcnWeights.zeros(2))
    raw = bytearray((tmp_path / "a.ecw").read_bytes())
    raw[8:12] = struct.pack("<I", 95)
    (tmp_path / "a.ecw").write_bytes(bytes(raw))
    with pytest.raises(formats.CorruptFileError, match="a.ecw"):
        formats.read_ecw(tmp_path / "a.ecw")


def test_pnm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    lab = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    formats.write_ppm(tmp_path / "a.ppm", img)
    formats.write_pgm(tmp_path / "a.pgm", lab)
    assert formats.read_ppm(tmp_path / "a.ppm").tobytes() == img.tobytes()
    assert formats.read_pgm(tmp_path / "a.pgm").tobytes() == lab.tobytes()
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    with pytest.raises(formats.CorruptFileError):
        formats.read_pgm(tmp_path / "a.ppm")
