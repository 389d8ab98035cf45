import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from doremi3d.data import (
    IDENTITY_POLICY,
    AugmentPolicy,
    DomainSpec,
    PointCloud,
    augment_student,
    generate_scene,
    load_cloud,
    load_manifest,
    partition_patches,
    save_cloud,
    save_manifest,
    scene_primitives,
    standard_corpus,
    voxelize,
)
from doremi3d.errors import AugmentationError, ConfigurationError, FormatError, GenerationError

CLEAN = DomainSpec(7, "clean", 2000.0)


def random_cloud(rng, n=200, scale=1.0):
    return PointCloud(rng.uniform(0, scale, size=(n, 3)), rng.uniform(0, 1, size=(n, 3)),
                      rng.integers(0, 5, size=n), 0)


def test_same_seed_same_cloud():
    spec = standard_corpus().domain(2)
    a, b = generate_scene(spec, 11), generate_scene(spec, 11)
    for field in ("positions", "colors", "labels"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert len(generate_scene(spec, 12)) != len(a) or not np.array_equal(generate_scene(spec, 12).positions, a.positions)


def test_noiseless_points_lie_on_surfaces():
    cloud = generate_scene(CLEAN, 4)
    dist = np.min(np.stack([p.distance(cloud.positions) for p in scene_primitives(4)]), axis=0)
    assert dist.max() < 1e-9


def test_labels_within_class_set():
    corpus = standard_corpus()
    for spec in corpus.domains:
        for seed in range(3):
            assert set(np.unique(generate_scene(spec, seed).labels)) <= set(spec.class_set)


def test_density_doubling_doubles_count():
    double = DomainSpec(8, "double", 4000.0)
    n1 = sum(len(generate_scene(CLEAN, s)) for s in range(20))
    n2 = sum(len(generate_scene(double, s)) for s in range(20))
    assert 1.8 <= n2 / n1 <= 2.2


def test_low_density_errors():
    with pytest.raises(GenerationError):
        generate_scene(DomainSpec(9, "thin", 1.0), 0)


def test_domain_spec_validation():
    with pytest.raises(ConfigurationError):
        DomainSpec(0, "x", 10.0, occlusion_fraction=1.0)
    with pytest.raises(ConfigurationError):
        DomainSpec(0, "x", -1.0)
    with pytest.raises(ConfigurationError):
        DomainSpec(0, "x", 10.0, color_palette_bias=(2.0, 0.0, 0.0))
    with pytest.raises(ConfigurationError):
        PointCloud(np.zeros((2, 3)), np.full((2, 3), 1.5), [0, 0], 0)


def test_voxelize_mean_and_identity_examples():
    cloud = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], [[1, 0, 0], [0, 1, 0]], [0, 0], 0)
    grid, inv = voxelize(cloud, 1.0)
    np.testing.assert_array_equal(grid.features, [[0.5, 0.5, 0.0]])
    assert inv.tolist() == [0, 0]
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [3, 3, 3]], dtype=float) + 0.5
    grid, inv = voxelize(PointCloud(pts, np.zeros((4, 3)), [0] * 4, 0), 1.0)
    assert len(grid) == 4
    np.testing.assert_array_equal(grid.coords[inv], np.floor(pts))


@given(st.integers(0, 2**31), st.floats(0.05, 0.5))
def test_voxel_count_and_permutation_invariance(seed, size):
    r = np.random.default_rng(seed)
    cloud = random_cloud(r)
    grid, inv = voxelize(cloud, size)
    assert len(grid) == len({tuple(c) for c in np.floor(cloud.positions / size).astype(int)})
    perm = r.permutation(len(cloud))
    shuffled, inv2 = voxelize(cloud.subset(perm), size)
    np.testing.assert_array_equal(shuffled.coords, grid.coords)
    np.testing.assert_array_equal(shuffled.features, grid.features)
    np.testing.assert_array_equal(inv2, inv[perm])


def test_voxelize_rejects_bad_size():
    with pytest.raises(ConfigurationError):
        voxelize(random_cloud(np.random.default_rng(0)), 0.0)


@given(st.integers(0, 2**31), st.floats(0.1, 2.0))
def test_patches_partition(seed, extent):
    cloud = random_cloud(np.random.default_rng(seed))
    patches = partition_patches(cloud, extent)
    members = np.concatenate([p.indices for p in patches])
    assert sorted(members.tolist()) == list(range(len(cloud)))
    for p in patches:
        cells = np.floor(cloud.positions[p.indices] / extent).astype(int)
        assert (cells == np.array(p.grid_coord)).all()


def test_patch_trivial_cases():
    one = PointCloud([[0.3, 0.3, 0.3]], [[0, 0, 0]], [0], 0)
    assert [p.indices.tolist() for p in partition_patches(one, 0.5)] == [[0]]
    cloud = random_cloud(np.random.default_rng(1))
    assert len(partition_patches(cloud, 10.0)) == 1


def test_mask_schedule_endpoints():
    pol = AugmentPolicy()
    assert pol.mask_fraction(0.0) == pol.mask_lo and pol.mask_fraction(1.0) == pol.mask_hi
    assert pol.mask_fraction(0.5) == pytest.approx((pol.mask_lo + pol.mask_hi) / 2, abs=1e-15)
    ts = np.linspace(0, 1, 50)
    assert np.all(np.diff([pol.mask_fraction(t) for t in ts]) >= 0)


def test_identity_policy_is_identity():
    cloud = generate_scene(CLEAN, 2)
    out = augment_student(cloud, partition_patches(cloud), IDENTITY_POLICY, 0.3, 5)
    np.testing.assert_array_equal(out.positions, cloud.positions)
    np.testing.assert_array_equal(out.colors, cloud.colors)
    np.testing.assert_array_equal(out.point_ids, cloud.point_ids)


def test_full_color_drop_blackens():
    cloud = generate_scene(CLEAN, 3)
    pol = AugmentPolicy((1.0, 1.0), 1.0, (0.0, 0.0), 0.0, 0.0, 0.0)
    out = augment_student(cloud, partition_patches(cloud), pol, 0.0, 0)
    assert np.all(out.colors == 0.0)


@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_augment_subset_and_darkening(seed, progress):
    cloud = generate_scene(CLEAN, seed % 5)
    patches = partition_patches(cloud)
    out, rec = augment_student(cloud, patches, AugmentPolicy(), progress, seed, return_record=True)
    assert len(set(out.point_ids.tolist())) == len(out)
    src = cloud.subset(out.point_ids)
    np.testing.assert_array_equal(out.positions, src.positions)
    np.testing.assert_array_equal(out.labels, src.labels)
    changed = np.any(out.colors != src.colors, axis=1)
    assert np.all(out.colors[changed] == 0.0)
    assert len(rec.masked_patches) == math.floor(AugmentPolicy().mask_fraction(progress) * len(patches))
    masked = np.concatenate([patches[i].indices for i in rec.masked_patches] + [np.zeros(0, int)])
    assert not set(masked.tolist()) & set(out.point_ids.tolist())


def test_drop_frequencies_match_ratios():
    r = np.random.default_rng(0)
    n = 100_000
    cloud = PointCloud(r.uniform(0, 0.4, size=(n, 3)), r.uniform(0.1, 1, size=(n, 3)), np.zeros(n), 0)
    patches = partition_patches(cloud, 1.0)
    pol = AugmentPolicy((0.0, 0.6), 1.0, (0.0, 0.6), 1.0, 0.0, 0.0)
    out, rec = augment_student(cloud, patches, pol, 0.0, 3, return_record=True)
    assert abs((1 - len(out) / n) - rec.drop_ratio[0]) < 0.02
    assert abs(np.mean(np.all(out.colors == 0, axis=1)) - rec.color_ratio[0]) < 0.02


def test_augment_removing_everything_errors():
    cloud = generate_scene(CLEAN, 1)
    pol = AugmentPolicy(point_drop_ratio=(1.0, 1.0), point_drop_prob=1.0, mask_lo=0.0, mask_hi=0.0)
    with pytest.raises(AugmentationError):
        augment_student(cloud, partition_patches(cloud), pol, 0.0, 0)


def test_cloud_roundtrip_bit_exact(tmp_path):
    cloud = generate_scene(standard_corpus().domain(1), 5)
    save_cloud(cloud, tmp_path / "c.bin")
    back = load_cloud(tmp_path / "c.bin")
    for field in ("positions", "colors", "labels"):
        np.testing.assert_array_equal(getattr(back, field), getattr(cloud, field))
    assert back.domain_id == 1
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_cloud(tmp_path / "bad.bin")


def test_manifest_roundtrip(tmp_path):
    corpus = standard_corpus(5, 2)
    save_manifest(corpus, tmp_path / "m.yaml")
    back = load_manifest(tmp_path / "m.yaml")
    assert back.to_dict() == corpus.to_dict()
    assert [d.domain_id for d in back.training_domains] == [0, 1, 2]
    (tmp_path / "x.yaml").write_text("domains: []\nsplits: {}\nbogus: 1\n")
    with pytest.raises(ConfigurationError):
        load_manifest(tmp_path / "x.yaml")
