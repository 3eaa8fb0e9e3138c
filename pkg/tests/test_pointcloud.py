import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflow.pointcloud import (
    HilbertConfig,
    PointCloud,
    chamfer,
    chamfer_tensor,
    hilbert_index,
    hilbert_indices,
    hilbert_sort,
    read_xyz,
    resample_reshape,
    write_xyz,
)
from cflow.tensor import Tensor

from .conftest import numeric_grad, rel_err


def loop_chamfer(a, b):
    """Pure-Python O(n*m) reference."""
    def directed(p, q):
        total = 0.0
        for x in p:
            total += min(float(np.sqrt(((x - y) ** 2).sum())) for y in q)
        return total / len(p)

    return 0.5 * (directed(a, b) + directed(b, a))


def cell_centers(order):
    side = 1 << order
    g = (np.arange(side) + 0.5) / side
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def test_order_one_is_gray_code():
    cfg = HilbertConfig(1)
    for i in range(8):
        g = i ^ (i >> 1)
        cell = np.array([(g >> 2) & 1, (g >> 1) & 1, g & 1]) * 0.5 + 0.25
        assert hilbert_index(cell, cfg) == i


@pytest.mark.parametrize("order", [1, 2, 3])
def test_curve_is_bijective_and_continuous(order):
    pts = cell_centers(order)
    idx = hilbert_indices(pts, HilbertConfig(order))
    assert sorted(idx.tolist()) == list(range(8**order))
    cells = np.floor(pts[np.argsort(idx)] * (1 << order)).astype(int)
    steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
    np.testing.assert_array_equal(steps, 1)


def test_curve_starts_at_origin_and_default_order():
    assert hilbert_index([0.0, 0.0, 0.0]) == 0
    assert HilbertConfig().order == 10
    assert hilbert_index([1.0, 1.0, 1.0]) < 8**10


def test_invalid_order_and_coordinates():
    with pytest.raises(ValueError):
        HilbertConfig(0)
    with pytest.raises(ValueError):
        HilbertConfig(22)
    with pytest.raises(ValueError):
        hilbert_index([1.2, 0.0, 0.0])


@given(st.integers(1, 21), st.integers(0, 2**31 - 1))
def test_index_range_and_quantization_invariance(order, seed):
    pts = np.random.default_rng(seed).uniform(size=(20, 3))
    cfg = HilbertConfig(order)
    idx = hilbert_indices(pts, cfg)
    assert np.all((idx >= 0) & (idx < 8**order))
    # points in the same cell share the index
    side = 1 << order
    centers = (np.minimum(np.floor(pts * side), side - 1) + 0.5) / side
    np.testing.assert_array_equal(hilbert_indices(centers, cfg), idx)


def test_sort_is_stable_for_duplicates():
    pts = np.array([[0.9, 0.9, 0.9], [0.1, 0.1, 0.1], [0.9, 0.9, 0.9], [0.1, 0.1, 0.1]])
    np.testing.assert_array_equal(hilbert_sort(pts), [1, 3, 0, 2])


def test_normalize_keeps_aspect_and_roundtrips(rng):
    pts = rng.normal(size=(50, 3)) * [10.0, 1.0, 0.1] + 5.0
    pc = PointCloud.normalize(pts)
    assert pc.points.min() >= 0 and pc.points.max() <= 1
    assert pc.points[:, 0].max() - pc.points[:, 0].min() == pytest.approx(1.0)
    np.testing.assert_allclose(pc.denormalized(), pts, atol=1e-12)
    with pytest.raises(ValueError):
        PointCloud.normalize(np.zeros((0, 3)))


@pytest.mark.parametrize("n", [10, 64, 300])
def test_resample_reshape_counts(n, rng):
    pts = rng.uniform(size=(n, 3))
    grid = resample_reshape(pts, 8, 8, seed=0)
    assert grid.shape == (8, 8, 3)
    flat = grid.reshape(-1, 3)
    rows = {tuple(p) for p in pts}
    assert all(tuple(p) in rows for p in flat)
    if n <= 64:
        assert {tuple(p) for p in flat} == rows  # every point kept
    if n >= 64:
        assert len({tuple(p) for p in flat}) == 64  # no repeats
    idx = hilbert_indices(flat)
    assert np.all(np.diff(idx) >= 0)
    np.testing.assert_array_equal(resample_reshape(pts, 8, 8, seed=0), grid)


def test_chamfer_matches_loop_oracle(rng):
    for _ in range(5):
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(17, 3))
        ref = loop_chamfer(a, b)
        assert abs(chamfer(a, b) - ref) < 1e-12
        assert abs(chamfer(a, b, method="brute") - ref) < 1e-12


def test_chamfer_properties(rng):
    a = rng.normal(size=(20, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer(a, a[rng.permutation(20)]) == 0.0
    b = rng.normal(size=(12, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-15)
    with pytest.raises(ValueError):
        chamfer(a, b, method="octree")


def test_chamfer_of_translated_single_points():
    assert chamfer(np.zeros((1, 3)), np.array([[3.0, 4.0, 0.0]])) == pytest.approx(5.0)


def test_chamfer_tensor_value_and_gradient(rng):
    a = rng.normal(size=(2, 6, 3))
    b = rng.normal(size=(2, 5, 3))
    out = chamfer_tensor(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, [chamfer(a[k], b[k]) for k in range(2)], atol=1e-12)
    ta = Tensor(a, requires_grad=True)
    chamfer_tensor(ta, Tensor(b)).sum().backward()
    fd = numeric_grad(lambda v: sum(chamfer(v[k], b[k], "brute") for k in range(2)), a)
    assert rel_err(ta.grad, fd, 1e-6) < 1e-5


def test_xyz_io(tmp_path, rng):
    pts = rng.normal(size=(7, 3))
    write_xyz(tmp_path / "c.xyz", pts)
    np.testing.assert_array_equal(read_xyz(tmp_path / "c.xyz"), pts)
    (tmp_path / "d.xyz").write_text("# header\n1 2 3\n\n4 5 6  # trailing\n")
    np.testing.assert_array_equal(read_xyz(tmp_path / "d.xyz"), [[1, 2, 3], [4, 5, 6]])
    (tmp_path / "e.xyz").write_text("1 2\n")
    with pytest.raises(ValueError, match="e.xyz:1"):
        read_xyz(tmp_path / "e.xyz")
