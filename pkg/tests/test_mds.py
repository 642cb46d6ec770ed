from __future__ import annotations

import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tbfa import mds
from tbfa.errors import FormatError
from tbfa.model import MatrixDataset, TbfaParams

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
arrays = hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=4).flatmap(
    lambda s: hnp.arrays(np.float64, s, elements=finite))


@settings(max_examples=60, deadline=None)
@given(arrays)
def test_binary_round_trip_is_bit_exact(x):
    back = mds.loads(mds.dumps_binary(x))
    assert back.shape == x.shape
    assert back.tobytes() == np.ascontiguousarray(x).tobytes()


@settings(max_examples=60, deadline=None)
@given(arrays)
def test_text_round_trip_is_exact(x):
    back = mds.loads(mds.dumps_text(x).encode())
    np.testing.assert_array_equal(back, x)


def test_text_layout():
    x = np.arange(8.0).reshape(2, 2, 2) / 10
    lines = mds.dumps_text(x).splitlines()
    assert lines[0] == "MDS1 2 2 2"
    assert lines[1] == "0 0.10000000000000001"
    assert len(lines) == 5


def test_binary_layout():
    raw = mds.dumps_binary(np.array([[[1.0, 2.0]]]))
    assert raw[:4] == b"MDSB"
    assert int.from_bytes(raw[4:12], "little") == 1
    assert int.from_bytes(raw[20:28], "little") == 2
    assert np.frombuffer(raw[28:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("raw", [
    b"MDS2 1 1 1\n0\n",
    b"MDS1 1 1 2\n0\n",
    b"MDS1 1 1 1\nabc\n",
    b"MDSB\x01",
    b"MDSB" + (1).to_bytes(8, "little") * 3 + b"\x00" * 4,
    b"\xff\xfe",
])
def test_malformed_datasets(raw):
    with pytest.raises(FormatError):
        mds.loads(raw)


def test_dataset_files_and_labels(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 2, 2))
    for binary in (False, True):
        path = tmp_path / f"d{int(binary)}.mds"
        mds.write_dataset(path, MatrixDataset(x), binary=binary)
        mds.write_labels(str(path) + ".labels", ["clean", "FC", "clean"])
        ds = mds.read_dataset(path, str(path) + ".labels")
        np.testing.assert_array_equal(ds.observations, x)
        assert ds.labels == ("clean", "FC", "clean")
    mds.write_labels(tmp_path / "bad.labels", ["a"])
    with pytest.raises(FormatError):
        mds.read_dataset(tmp_path / "d0.mds", tmp_path / "bad.labels")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    mds.atomic_write(target, "new")
    assert target.read_text() == "new"
    assert os.listdir(tmp_path) == ["out.txt"]


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(TypeError):
        mds.atomic_write(target, 123)        # not bytes or str
    assert target.read_text() == "old"
    assert os.listdir(tmp_path) == ["out.txt"]


def _params(**kw):
    base = dict(W=np.array([[0.1, -0.2], [1 / 3, 0.0], [2.5, 1e-300]]),
                C=np.array([[1.0], [0.3], [-0.7]]), Psi_c=np.array([1.0, 0.2, 0.3]),
                R=np.array([[0.4], [1.1]]), Psi_r=np.array([0.5, 0.6]), nu=4.25)
    base.update(kw)
    return TbfaParams(**base)


def _same(a, b):
    for name in ("W", "C", "Psi_c", "R", "Psi_r"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.gaussian == b.gaussian
    assert a.nu == b.nu


def test_params_round_trip(tmp_path):
    p = _params()
    mds.write_params(tmp_path / "p", p)
    _same(mds.read_params(tmp_path / "p"), p)


def test_params_round_trip_gaussian_and_zero_factors():
    p = _params(C=np.zeros((3, 0)), R=np.zeros((2, 0)), nu=math.inf, gaussian=True)
    text = mds.dumps_params(p)
    assert "nu inf" in text and "matrix C 3 0" in text
    _same(mds.loads_params(text), p)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1e6), st.integers(0, 2**32 - 1))
def test_params_round_trip_property(nu, seed):
    rng = np.random.default_rng(seed)
    p = _params(W=rng.standard_normal((3, 2)), C=rng.standard_normal((3, 1)),
                Psi_c=rng.uniform(0.1, 2, 3), nu=nu)
    _same(mds.loads_params(mds.dumps_params(p)), p)


@pytest.mark.parametrize("text", [
    "",
    "TBFA-PARAMS 2\n",
    "TBFA-PARAMS 1\nnu 3\n",
    "TBFA-PARAMS 1\nmatrix W 1 1\nx\n",
])
def test_malformed_params(text):
    with pytest.raises(FormatError):
        mds.loads_params(text)


def test_invalid_uniqueness_is_a_format_error():
    text = mds.dumps_params(_params()).replace("matrix Psi_c 3 1\n1\n", "matrix Psi_c 3 1\n-1\n")
    with pytest.raises(FormatError):
        mds.loads_params(text)
