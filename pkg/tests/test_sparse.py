import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gradcheck
from doremi3d.errors import ConfigurationError
from doremi3d.sparse import (
    SparseConvKernel,
    SparseVoxelGrid,
    VoxelHashMap,
    conv_features,
    grid_pool,
    grid_unpool,
    kernel_offsets,
    neighbor_lookup,
    pack_coords,
    pool_features,
    submanifold_conv,
    unpool_features,
)
from doremi3d.tensor import Tensor


def random_grid(rng, size=6, din=3, fill=None):
    fill = rng.uniform(0.05, 0.6) if fill is None else fill
    occ = np.argwhere(rng.random((size, size, size)) < fill)
    if len(occ) == 0:
        occ = np.array([[0, 0, 0]])
    return SparseVoxelGrid(occ, rng.normal(size=(len(occ), din)))


def dense_conv_oracle(grid, weight, bias):
    """Scatter into a padded dense volume, convolve by explicit window sums, read back."""
    coords = grid.coords
    lo = coords.min(axis=0) - 1
    dims = coords.max(axis=0) - lo + 2
    feats = np.asarray(grid.features)
    volume = np.zeros(tuple(dims) + (feats.shape[1],))
    volume[tuple((coords - lo).T)] = feats
    offsets = kernel_offsets(3)
    out = np.zeros((len(coords), weight.shape[2]))
    for i, c in enumerate(coords - lo):
        acc = bias.copy()
        for k, o in enumerate(offsets):
            acc = acc + volume[tuple(c + o)] @ weight[k]
        out[i] = acc
    return out


def raw_kernel(din, dout, rng):
    k = SparseConvKernel(din, dout, rng, norm=False)
    k.bias.data = rng.normal(size=dout)
    return k


def test_hash_map_lookup_and_misses():
    coords = np.array([[0, 0, 0], [1, 2, 3], [-5, 7, 100], [4, 4, 4]])
    hm = VoxelHashMap(coords)
    assert hm.lookup(coords).tolist() == [0, 1, 2, 3]
    assert hm.lookup(np.array([[9, 9, 9], [1, 2, 4]])).tolist() == [-1, -1]
    assert [1, 2, 3] in hm and [3, 2, 1] not in hm
    with pytest.raises(ConfigurationError):
        VoxelHashMap(np.array([[1, 1, 1], [1, 1, 1]]))
    with pytest.raises(ConfigurationError):
        pack_coords(np.array([[2**21, 0, 0]]))


@given(st.integers(0, 2**31))
def test_hash_map_matches_dict(seed):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(-40, 40, size=(rng.integers(1, 300), 3)), axis=0)
    hm = VoxelHashMap(coords)
    ref = {tuple(c): i for i, c in enumerate(coords)}
    queries = np.concatenate([coords, rng.integers(-45, 45, size=(100, 3))])
    expect = [ref.get(tuple(q), -1) for q in queries]
    assert hm.lookup(queries).tolist() == expect


def test_kernel_offsets_order():
    off = kernel_offsets(3)
    assert off.shape == (27, 3)
    assert off[0].tolist() == [-1, -1, -1] and off[13].tolist() == [0, 0, 0]
    assert off.tolist() == sorted(off.tolist())
    with pytest.raises(ConfigurationError):
        kernel_offsets(2)


def test_identity_kernel_single_voxel():
    grid = SparseVoxelGrid(np.array([[3, 3, 3]]), np.array([[1.0, -2.0]]))
    k = SparseConvKernel(2, 2, None, norm=False)
    k.weight.data[13] = np.eye(2)
    np.testing.assert_array_equal(submanifold_conv(grid, k).features, grid.features)


def test_all_ones_kernel_adjacent_pair():
    feats = np.array([[1.0], [10.0]])
    grid = SparseVoxelGrid(np.array([[0, 0, 0], [0, 0, 1]]), feats)
    k = SparseConvKernel(1, 1, None, norm=False)
    k.weight.data[:] = 1.0
    np.testing.assert_array_equal(submanifold_conv(grid, k).features, [[11.0], [11.0]])


def test_neighbor_lookup_examples():
    lone = SparseVoxelGrid(np.array([[0, 0, 0], [5, 5, 5]]), np.zeros((2, 1)))
    assert neighbor_lookup(lone, (0, 0, 0)) == [((0, 0, 0), 0)]
    block = SparseVoxelGrid(np.argwhere(np.ones((3, 3, 3))), np.zeros((27, 1)))
    assert len(neighbor_lookup(block, (1, 1, 1))) == 27


@given(st.integers(0, 2**31))
def test_neighbor_lookup_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng)
    q = grid.coords[rng.integers(len(grid))] + rng.integers(-1, 2, size=3)
    got = sorted(r for _, r in neighbor_lookup(grid, q, 3))
    brute = sorted(i for i, c in enumerate(grid.coords) if np.all(np.abs(c - q) <= 1))
    assert got == brute


@given(st.integers(0, 2**31))
def test_conv_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, size=5)
    k = raw_kernel(3, 4, rng)
    out = submanifold_conv(grid, k)
    np.testing.assert_array_equal(out.coords, grid.coords)
    ref = dense_conv_oracle(grid, k.weight.data, k.bias.data)
    assert np.max(np.abs(out.features - ref)) <= 1e-12


@given(st.integers(0, 2**31), st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50))
def test_translation_equivariance_bit_exact(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng)
    shifted = SparseVoxelGrid(grid.coords + np.array([dx, dy, dz]), grid.features)
    k = SparseConvKernel(3, 5, rng)
    np.testing.assert_array_equal(submanifold_conv(grid, k).features, submanifold_conv(shifted, k).features)


def test_conv_with_norm_applies_layer_norm():
    rng = np.random.default_rng(0)
    grid = random_grid(rng, din=4)
    k = SparseConvKernel(4, 6, rng)
    out = submanifold_conv(grid, k).features
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)


def test_conv_channel_mismatch():
    rng = np.random.default_rng(0)
    grid = random_grid(rng, din=3)
    with pytest.raises(ConfigurationError):
        submanifold_conv(grid, SparseConvKernel(4, 2, rng))


def test_conv_gradients():
    rng = np.random.default_rng(3)
    grid = random_grid(rng, size=4, din=3, fill=0.5)
    rb = grid.rulebook(3)
    k = SparseConvKernel(3, 2, rng)

    def fn(x, w, b, g, o):
        k.weight, k.bias, k.gain, k.offset = w, b, g, o
        return conv_features(x, rb, k)

    args = [np.asarray(grid.features), k.weight.data, rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)]
    assert gradcheck(fn, args) < 1e-6


def test_pool_constant_field_and_roundtrip():
    rng = np.random.default_rng(2)
    grid = random_grid(rng, din=2)
    const = grid.with_features(np.tile([[1.5, -0.25]], (len(grid), 1)))
    child, pmap = grid_pool(const, 2)
    np.testing.assert_allclose(child.features, np.tile([[1.5, -0.25]], (len(child), 1)), atol=1e-15)
    np.testing.assert_allclose(grid_unpool(child, pmap), const.features, atol=1e-15)


@given(st.integers(0, 2**31), st.integers(2, 3))
def test_pool_mean_oracle(seed, factor):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, size=7, din=2)
    child, pmap = grid_pool(grid, factor)
    groups = {}
    for c, f in zip(grid.coords, grid.features):
        groups.setdefault(tuple(np.floor_divide(c, factor)), []).append(f)
    assert len(groups) == len(child)
    for c, f in zip(child.coords, child.features):
        np.testing.assert_allclose(f, np.mean(groups[tuple(c)], axis=0), atol=1e-12)
    members = np.concatenate(pmap.members)
    assert sorted(members.tolist()) == list(range(len(grid)))


def test_pool_factor_validation():
    grid = random_grid(np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        grid_pool(grid, 1)


def test_pool_gradients():
    rng = np.random.default_rng(4)
    grid = random_grid(rng, din=2)
    grid_t = grid.with_features(Tensor(np.asarray(grid.features)))
    _, pmap = grid_pool(grid_t, 2)
    x = np.asarray(grid.features)
    assert gradcheck(lambda t: pool_features(t, pmap), [x]) < 1e-6
    child = pool_features(Tensor(x), pmap).data
    assert gradcheck(lambda t: unpool_features(t, pmap), [child]) < 1e-6


def test_rulebook_cached_and_shared():
    grid = random_grid(np.random.default_rng(5))
    rb = grid.rulebook(3)
    assert grid.rulebook(3) is rb
    assert grid.with_features(np.zeros((len(grid), 1))).rulebook(3) is rb
    assert sum(len(s) for s, _ in rb.pairs) == rb.src.size
