import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import boundary_loop, edt_brute, zhang_suen_loop
from tubekit.errors import DimensionError, EmptySourceError
from tubekit.morphology import (
    euclidean_distance_transform,
    extract_boundary,
    squared_distance_transform,
    zhang_suen_skeleton,
)
from tubekit.synth import TubeSpec, generate_mask

masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_boundary_examples():
    block = np.ones((3, 3), bool)
    ring = block.copy()
    ring[1, 1] = False
    assert np.array_equal(extract_boundary(block), ring)
    one = np.zeros((4, 4), bool)
    one[2, 1] = True
    assert np.array_equal(extract_boundary(one), one)
    assert not extract_boundary(np.zeros((5, 5), bool)).any()


@given(masks)
def test_boundary_matches_loop_definition(m):
    b = extract_boundary(m)
    assert np.array_equal(b, boundary_loop(m))
    assert not (b & ~m).any()


def test_skeleton_examples():
    line = np.zeros((5, 9), bool)
    line[2, 1:8] = True
    assert np.array_equal(zhang_suen_skeleton(line), line)
    assert not zhang_suen_skeleton(np.zeros((4, 4), bool)).any()
    # 5 wide by 3 tall solid rectangle thins to a horizontal segment on the middle row
    rect = np.zeros((7, 9), bool)
    rect[2:5, 2:7] = True
    skel = zhang_suen_skeleton(rect)
    rows, cols = np.nonzero(skel)
    assert set(rows) == {3}
    assert np.all(np.diff(np.sort(cols)) == 1)


@given(masks)
def test_skeleton_matches_textbook_loop(m):
    assert np.array_equal(zhang_suen_skeleton(m), zhang_suen_loop(m))


@pytest.mark.parametrize("seed", range(8))
def test_skeleton_on_tubes_matches_loop_and_invariants(seed):
    m = generate_mask(TubeSpec(32, 32, tubes=2, width_min=2, width_max=5, seed=seed))
    s = zhang_suen_skeleton(m)
    assert np.array_equal(s, zhang_suen_loop(m))
    assert not (s & ~m).any()
    assert np.array_equal(zhang_suen_skeleton(s), s)


@given(masks, st.integers(0, 3), st.integers(0, 3))
def test_translation_equivariance_on_padded_input(m, dy, dx):
    pad = np.pad(m, 4)
    moved = np.roll(np.roll(pad, dy, axis=0), dx, axis=1)
    for op in (extract_boundary, zhang_suen_skeleton):
        expect = np.roll(np.roll(op(pad), dy, axis=0), dx, axis=1)
        assert np.array_equal(op(moved), expect)


def test_edt_examples():
    src = np.zeros((5, 5), bool)
    src[0, 0] = True
    assert euclidean_distance_transform(src)[3, 4] == 5.0
    assert not euclidean_distance_transform(np.ones((3, 4), bool)).any()
    with pytest.raises(EmptySourceError):
        euclidean_distance_transform(np.zeros((3, 3), bool))


@pytest.mark.parametrize("seed", range(5))
def test_edt_exact_vs_brute_force_32(seed):
    rng = np.random.default_rng(seed)
    src = rng.random((32, 32)) < rng.uniform(0.002, 0.1)
    src[rng.integers(32), rng.integers(32)] = True
    assert np.array_equal(euclidean_distance_transform(src), edt_brute(src))


@given(arrays(bool, st.tuples(st.integers(1, 10), st.integers(1, 10))).filter(lambda a: a.any()))
def test_edt_property_exact_and_lipschitz(src):
    d = euclidean_distance_transform(src)
    assert np.array_equal(d, edt_brute(src))
    assert np.all(d[src] == 0)
    assert np.all(np.abs(np.diff(d, axis=0)) <= 1 + 1e-12)
    assert np.all(np.abs(np.diff(d, axis=1)) <= 1 + 1e-12)
    assert squared_distance_transform(src).dtype == np.int64


def test_mask_must_be_2d():
    with pytest.raises(DimensionError):
        extract_boundary(np.ones((2, 2, 2), bool))
