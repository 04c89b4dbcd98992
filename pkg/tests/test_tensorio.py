import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptad.errors import FormatError
from promptad.tensorio import read_tensors, write_tensors


def test_round_trip(tmp_path):
    tensors = {
        "a": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "b/c": np.array([1.5, -2.25], dtype=np.float32),
        "scalar": np.float32(7.0).reshape(()),
    }
    path = tmp_path / "t.fpk"
    write_tensors(path, tensors)
    loaded = read_tensors(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].shape == np.asarray(tensors[name]).shape
        assert np.array_equal(loaded[name], tensors[name])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(0, 4)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_round_trip_lossless_any_finite_payload(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("fpk") / "x.fpk"
    write_tensors(path, {"x": arr})
    out = read_tensors(path)["x"]
    assert out.dtype == np.float32
    assert np.array_equal(out, arr)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.fpk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError) as err:
        read_tensors(path)
    assert err.value.field == "magic"


def test_bad_version(tmp_path):
    path = tmp_path / "bad.fpk"
    path.write_bytes(b"FPK1" + (99).to_bytes(2, "little") + (0).to_bytes(2, "little"))
    with pytest.raises(FormatError) as err:
        read_tensors(path)
    assert err.value.field == "version"


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.fpk"
    write_tensors(path, {"x": np.ones((4, 4), dtype=np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(FormatError) as err:
        read_tensors(path)
    assert "payload" in err.value.field


def test_count_larger_than_payload(tmp_path):
    path = tmp_path / "t.fpk"
    write_tensors(path, {"x": np.ones(3, dtype=np.float32)})
    data = bytearray(path.read_bytes())
    data[6] = 2  # claim two tensors
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_tensors(path)


def test_trailing_garbage(tmp_path):
    path = tmp_path / "t.fpk"
    write_tensors(path, {"x": np.ones(3, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"!")
    with pytest.raises(FormatError) as err:
        read_tensors(path)
    assert err.value.field == "trailing"


def test_float64_input_is_cast(tmp_path):
    path = tmp_path / "t.fpk"
    write_tensors(path, {"x": np.array([1.0, 2.0])})
    assert read_tensors(path)["x"].dtype == np.float32
