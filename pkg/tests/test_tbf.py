import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from tubekit import tbf
from tubekit.errors import FormatError


@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=4, max_side=5), elements=st.floats(allow_nan=False)))
def test_round_trip_bit_exact(a):
    b = tbf.loads(tbf.dumps(a))
    assert b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_layout_is_little_endian():
    blob = tbf.dumps(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"TBF1"
    assert struct.unpack("<III", blob[4:16]) == (2, 1, 3)
    assert struct.unpack("<3d", blob[16:]) == (1.0, 2.0, 3.0)


def test_bad_magic_and_truncation(tmp_path):
    good = tbf.dumps(np.ones((2, 2)))
    with pytest.raises(FormatError):
        tbf.loads(b"TBF2" + good[4:])
    with pytest.raises(FormatError):
        tbf.loads(good[:-1])
    with pytest.raises(FormatError):
        tbf.loads(good[:6])
    p = tmp_path / "t.tbf"
    tbf.save(p, np.arange(6.0).reshape(2, 3))
    assert tbf.load(p).tolist() == [[0, 1, 2], [3, 4, 5]]
