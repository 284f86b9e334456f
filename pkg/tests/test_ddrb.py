import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddlspg.ddrb import read_ddrb, read_json, write_ddrb, write_json


def test_header_layout_is_exact(tmp_path):
    path = write_ddrb(tmp_path / "m.ddrb", np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"DDRB"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert struct.unpack("<QQ", raw[8:24]) == (2, 3)
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert len(raw) == 24 + 6 * 8


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 6), st.integers(0, 6)),
              elements=st.floats(allow_nan=False, width=64)))
def test_round_trip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("rt") / "a.ddrb"
    write_ddrb(path, a)
    b = read_ddrb(path)
    assert b.shape == a.shape
    assert np.array_equal(a, b)


def test_vectors_are_stored_as_columns(tmp_path):
    write_ddrb(tmp_path / "v.ddrb", np.arange(4.0))
    assert read_ddrb(tmp_path / "v.ddrb").shape == (4, 1)


def test_bad_magic_version_and_length(tmp_path):
    good = write_ddrb(tmp_path / "g.ddrb", np.ones((2, 2))).read_bytes()
    cases = {
        "magic": b"XXRB" + good[4:],
        "version": good[:4] + struct.pack("<I", 2) + good[8:],
        "short": good[:-8],
        "header": good[:10],
    }
    for name, blob in cases.items():
        p = tmp_path / f"{name}.ddrb"
        p.write_bytes(blob)
        with pytest.raises(ValueError):
            read_ddrb(p)


def test_three_dimensional_input_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_ddrb(tmp_path / "x.ddrb", np.zeros((2, 2, 2)))


def test_json_handles_numpy_values(tmp_path):
    p = write_json(tmp_path / "a.json", {"a": np.arange(3), "b": np.float64(0.5), "c": np.int64(7)})
    assert read_json(p) == {"a": [0, 1, 2], "b": 0.5, "c": 7}
