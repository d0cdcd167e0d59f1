import math

import numpy as np
import pytest

from ncr.grid import GradBuffer, GridSpec, HashGrid, table_index
from ncr.rng import stream

# Hand evaluation of the two-level blend at the geometric midpoint of
# cell sizes (1/4, 1/8): q = sqrt(1/32), w_coarse = (q - 1/8) / (1/8).
W_COARSE_GEOMETRIC = 0.41421356237309503


def constant_level_grid(spec, level_values):
    grid = HashGrid(spec)
    params = np.zeros_like(grid.params)
    for l, val in enumerate(level_values):
        lo = grid._offset[l]
        params[lo:lo + grid._entries[l]] = val
    return HashGrid.from_params(spec, params)


def test_dense_index_row_major():
    assert table_index(np.array([1, 2, 3]), 4, 1 << 16) == 86
    cells = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = table_index(cells, 4, 1 << 16)
    assert np.unique(idx).size == 125  # injective when the lattice fits


def test_hashed_index_in_range():
    rng = np.random.default_rng(0)
    cells = rng.integers(0, 257, size=(1_000_000, 3))
    idx = table_index(cells, 256, 1 << 19)
    assert idx.min() >= 0 and idx.max() < (1 << 19)
    # hashing actually spreads: far more distinct rows than a degenerate map
    assert np.unique(idx).size > (1 << 18)


def test_spec_validation_and_geometry():
    spec = GridSpec(4, 32, 2.0, 2)
    assert [spec.resolution(l) for l in range(4)] == [32, 64, 128, 256]
    assert spec.cell_size(0) == 1 / 32
    assert spec.output_dim == 8
    with pytest.raises(ValueError):
        GridSpec(0, 32, 2.0, 2)
    with pytest.raises(ValueError):
        GridSpec(4, 32, 1.0, 2)
    with pytest.raises(ValueError):
        GridSpec(4, 32, 2.0, 2, table_size=3 << 10)
    with pytest.raises(ValueError):
        GridSpec(4, 32, 2.0, 2, mode="nope")


def test_level_query_lattice_corner_and_center():
    spec = GridSpec(1, 4, 2.0, 3, table_size=1 << 10)
    grid = HashGrid(spec)
    grid.params[86] = [1.0, 2.0, 3.0]  # dense row of cell (1,2,3)
    out = grid.level_query(0, np.array([[0.25, 0.5, 0.75]]))
    assert np.allclose(out[0], [1.0, 2.0, 3.0], atol=1e-15)

    # cell center averages the 8 corners
    rng = np.random.default_rng(1)
    grid = HashGrid.from_params(spec, rng.normal(size=(grid.n_rows, 3)))
    center = np.array([[0.125, 0.375, 0.625]])  # center of cell (0,1,2)
    corners = [(i, j, k) for k in (2, 3) for j in (1, 2) for i in (0, 1)]
    rows = [table_index(np.array(c), 4, 1 << 10) for c in corners]
    assert np.allclose(grid.level_query(0, center)[0],
                       grid.params[rows].mean(axis=0), atol=1e-12)


def test_partition_of_unity_and_constant_grid():
    spec = GridSpec(3, 4, 2.0, 2, table_size=1 << 12)
    grid = constant_level_grid(spec, [[0.7, -0.3]] * 3)
    rng = np.random.default_rng(2)
    p = rng.uniform(0, 1, (200, 3))
    out, _ = grid.query_concat(p)
    assert np.allclose(out, np.tile([0.7, -0.3], 3), atol=1e-12)
    for l in range(3):
        _, w = grid._corners(l, p)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_query_concat_layout():
    spec = GridSpec(4, 4, 2.0, 2, table_size=1 << 12)
    grid = constant_level_grid(spec, [[l + 1.0, -(l + 1.0)] for l in range(4)])
    out, rec = grid.query_concat(np.array([[0.3, 0.6, 0.9]]))
    assert out.shape == (1, 8)
    assert np.allclose(out[0], [1, -1, 2, -2, 3, -3, 4, -4], atol=1e-12)
    assert len(rec.slots) == 4

    single = GridSpec(1, 4, 2.0, 2, table_size=1 << 12)
    g1 = HashGrid(single, stream(5))
    p = np.array([[0.11, 0.52, 0.93]])
    assert np.allclose(g1.query_concat(p)[0], g1.level_query(0, p))


def scale_spec(levels=2):
    return GridSpec(levels, 4, 2.0, 2, table_size=1 << 15, mode="scale_interp")


def test_query_scale_endpoints_and_midpoint():
    spec = scale_spec(2)  # cell sizes 1/4, 1/8
    a0, a1 = np.array([1.0, 10.0]), np.array([3.0, -6.0])
    grid = constant_level_grid(spec, [a0, a1])
    p = np.array([[0.4, 0.4, 0.4]])

    out, _ = grid.query_scale(p, np.array([0.25]))
    assert np.allclose(out[0], a0, atol=1e-12)
    out, _ = grid.query_scale(p, np.array([0.125]))
    assert np.allclose(out[0], a1, atol=1e-12)

    q = math.sqrt(0.25 * 0.125)
    out, _ = grid.query_scale(p, np.array([q]))
    w = W_COARSE_GEOMETRIC
    assert np.allclose(out[0], w * a0 + (1 - w) * a1, atol=1e-12)

    # scale factor folds into the footprint before bracketing
    out, _ = grid.query_scale(p, np.array([q / 3.0]), s=3.0)
    assert np.allclose(out[0], w * a0 + (1 - w) * a1, atol=1e-12)


def test_query_scale_clamps_out_of_range():
    spec = scale_spec(3)
    vals = [np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.array([4.0, 0.0])]
    grid = constant_level_grid(spec, vals)
    p = np.array([[0.5, 0.5, 0.5]])
    out, _ = grid.query_scale(p, np.array([99.0]))
    assert np.allclose(out[0], vals[0], atol=1e-12)
    out, _ = grid.query_scale(p, np.array([0.0]))
    assert np.allclose(out[0], vals[-1], atol=1e-12)


def test_query_scale_continuous_across_level_boundaries():
    spec = scale_spec(4)
    rng = np.random.default_rng(3)
    grid = HashGrid.from_params(spec, rng.uniform(-1, 1, (HashGrid(spec).n_rows, 2)))
    p = rng.uniform(0, 1, (16, 3))
    for l in range(4):
        cs = spec.cell_size(l)
        lo, _ = grid.query_scale(p, np.full(16, cs - 1e-9))
        hi, _ = grid.query_scale(p, np.full(16, cs + 1e-9))
        assert np.max(np.abs(hi - lo)) < 1e-6


def test_query_is_linear_in_params():
    spec = scale_spec(3)
    rng = np.random.default_rng(4)
    shape = (HashGrid(spec).n_rows, 2)
    P, Q = rng.normal(size=shape), rng.normal(size=shape)
    ga = HashGrid.from_params(spec, P)
    gb = HashGrid.from_params(spec, Q)
    gc = HashGrid.from_params(spec, 2.0 * P - 0.5 * Q)
    p = rng.uniform(0, 1, (32, 3))
    r = rng.uniform(0.01, 0.3, 32)
    va, _ = ga.query_scale(p, r)
    vb, _ = gb.query_scale(p, r)
    vc, _ = gc.query_scale(p, r)
    assert np.allclose(vc, 2.0 * va - 0.5 * vb, atol=1e-6)


def test_query_mean_averages_levels():
    spec = GridSpec(4, 4, 2.0, 2, table_size=1 << 12)
    grid = constant_level_grid(spec, [[l + 1.0, 0.0] for l in range(4)])
    out, rec = grid.query_mean(np.array([[0.2, 0.5, 0.8]]))
    assert np.allclose(out[0], [2.5, 0.0], atol=1e-12)
    assert len(rec.slots) == 4


def test_backward_lattice_corner_unit_gradient():
    spec = GridSpec(2, 4, 2.0, 2, table_size=1 << 12)
    grid = HashGrid(spec, stream(6))
    p = np.array([[0.25, 0.5, 0.75]])
    _, rec = grid.query_concat(p)
    up = np.zeros((1, 4))
    up[0, 1] = 1.0  # level 0, channel 1
    buf = grid.grad_buffer()
    grid.backward(rec, up, buf)
    dense = buf.dense()
    assert np.isclose(dense[86, 1], 1.0)
    dense[86, 1] = 0.0
    assert np.all(dense == 0.0)


def test_backward_zero_upstream_is_empty():
    spec = scale_spec(2)
    grid = HashGrid(spec, stream(7))
    _, rec = grid.query_scale(np.array([[0.3, 0.3, 0.3]]), np.array([0.2]))
    buf = grid.grad_buffer()
    grid.backward(rec, np.zeros((1, 2)), buf)
    assert buf.is_empty


@pytest.mark.parametrize("mode,query", [
    ("concat", lambda g, p, r: g.query_concat(p)),
    ("scale_interp", lambda g, p, r: g.query_scale(p, r)),
])
def test_backward_matches_finite_differences(mode, query):
    spec = GridSpec(3, 4, 2.0, 2, table_size=1 << 12, mode=mode)
    rng = np.random.default_rng(8)
    grid = HashGrid.from_params(spec, rng.normal(size=(HashGrid(spec).n_rows, 2)))
    p = rng.uniform(0, 1, (5, 3))
    r = rng.uniform(0.02, 0.4, 5)

    out, rec = query(grid, p, r)
    up = rng.normal(size=out.shape)
    buf = grid.grad_buffer()
    grid.backward(rec, up, buf)
    analytic = buf.dense()

    h = 1e-4
    for row in buf.touched_rows():
        for k in range(2):
            saved = grid.params[row, k]
            grid.params[row, k] = saved + h
            up_v = np.sum(up * query(grid, p, r)[0])
            grid.params[row, k] = saved - h
            dn_v = np.sum(up * query(grid, p, r)[0])
            grid.params[row, k] = saved
            fd = (up_v - dn_v) / (2 * h)
            assert abs(analytic[row, k] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_grad_buffer_merge_and_validation():
    buf = GradBuffer(10, 2)
    buf.add([1, 1, 3], [[1.0, 0.0], [2.0, 0.0], [0.0, 5.0]])
    other = GradBuffer(10, 2)
    other.add([3], [[1.0, 1.0]])
    buf.merge(other)
    dense = buf.dense()
    assert np.allclose(dense[1], [3.0, 0.0])
    assert np.allclose(dense[3], [1.0, 6.0])
    assert np.array_equal(buf.touched_rows(), [1, 3])
    with pytest.raises(ValueError):
        buf.add([1, 2], [[1.0, 0.0]])


def test_grad_buffer_compact_sums_duplicates():
    buf = GradBuffer(100, 2)
    buf.add([7, 3, 7], [[1.0, 2.0], [5.0, 0.0], [0.5, -1.0]])
    rows, vals = buf.compact()
    assert rows.tolist() == [3, 7]
    assert np.allclose(vals, [[5.0, 0.0], [1.5, 1.0]])
    empty_rows, empty_vals = GradBuffer(100, 2).compact()
    assert empty_rows.size == 0 and empty_vals.shape == (0, 2)


def test_grad_buffer_compact_agrees_with_dense():
    rng = np.random.default_rng(17)
    buf = GradBuffer(64, 2)
    for _ in range(5):
        buf.add(rng.integers(0, 64, 30), rng.normal(size=(30, 2)))
    rows, vals = buf.compact()
    dense = buf.dense()
    assert np.allclose(dense[rows], vals)
    untouched = np.setdiff1d(np.arange(64), rows)
    assert np.all(dense[untouched] == 0.0)
