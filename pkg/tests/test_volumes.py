import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_trilinear, rotation

from atlasreg.field import DisplacementField
from atlasreg.volumes import (
    AffineTransform,
    ImageVolume,
    LabelMap,
    ManifestRow,
    SamplingGrid,
    compose_chain,
    interpolation_count,
    load_volume,
    moment_affine_init,
    read_affine,
    read_manifest,
    sample,
    save_volume,
    trilinear,
    write_affine,
    write_manifest,
)


grids = st.builds(
    SamplingGrid,
    shape=st.tuples(*[st.integers(2, 9)] * 3),
    spacing=st.tuples(*[st.floats(0.3, 3.0)] * 3),
    direction=st.tuples(*[st.floats(-np.pi, np.pi)] * 3).map(lambda a: rotation(*a)),
    origin=st.tuples(*[st.floats(-50, 50)] * 3),
)


class TestSamplingGrid:
    @given(grids, st.lists(st.tuples(*[st.floats(-5, 15)] * 3), min_size=1, max_size=8))
    def test_index_world_roundtrip(self, g, idx):
        idx = np.asarray(idx)
        back = g.world_to_index(g.index_to_world(idx))
        np.testing.assert_allclose(back, idx, atol=1e-9)

    def test_affine_matches_mapping(self):
        g = SamplingGrid((4, 5, 6), (1.5, 2.0, 0.5), rotation(0.1, 0.2, 0.3), (3, -1, 7))
        idx = np.array([[1.0, 2.0, 3.0]])
        want = g.direction @ np.diag(g.spacing) @ idx[0] + np.asarray(g.origin)
        np.testing.assert_allclose(g.index_to_world(idx)[0], want)
        assert SamplingGrid.from_affine(g.shape, g.affine) == g

    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError):
            SamplingGrid((4, 4, 4), (1, 0, 1))
        with pytest.raises(ValueError):
            SamplingGrid((4, 4, 4), direction=np.diag([1, 2, 1]))
        with pytest.raises(ValueError):
            SamplingGrid((0, 4, 4))

    def test_anisotropic_extent_matches_exhaustive_mapping(self):
        g = SamplingGrid((4, 6, 3), (0.5, 0.5, 2.0), origin=(-3, 7, 1))
        corners = []
        for i in range(4):
            for j in range(6):
                for k in range(3):
                    corners.append(g.index_to_world([[i, j, k]])[0])
        corners = np.asarray(corners)
        # centre-to-centre span plus one voxel equals the box extent
        span = corners.max(0) - corners.min(0) + np.asarray(g.spacing)
        np.testing.assert_allclose(g.extent(), span)
        np.testing.assert_allclose(g.extent(), np.asarray(g.shape) * np.asarray(g.spacing))

    def test_downsample_shares_fine_positions(self):
        g = SamplingGrid((9, 8, 7), (1.0, 2.0, 1.5), origin=(1, 2, 3))
        c = g.downsample(2)
        assert c.shape == (5, 4, 4)
        np.testing.assert_allclose(c.index_to_world([[2, 1, 3]]), g.index_to_world([[4, 2, 6]]))


class TestVolumes:
    def test_label_map_needs_names_for_present_labels(self):
        g = SamplingGrid((2, 2, 2))
        with pytest.raises(ValueError):
            LabelMap(np.ones((2, 2, 2)), g, {0: "bg"})
        with pytest.raises(ValueError):
            LabelMap(np.full((2, 2, 2), 0.5), g)
        lm = LabelMap(np.ones((2, 2, 2)), g)
        assert lm.label_names[1] == "label_1"

    def test_data_is_read_only(self):
        v = ImageVolume(np.zeros((2, 2, 2)), SamplingGrid((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ImageVolume(np.zeros((2, 2, 3)), SamplingGrid((2, 2, 2)))


class TestAffine:
    def test_inverse_and_compose(self, rng):
        m = np.eye(4)
        m[:3, :3] = rotation(0.3, -0.2, 0.5) * 1.3
        m[:3, 3] = [4, -2, 1]
        a = AffineTransform(m)
        pts = rng.normal(size=(10, 3)) * 20
        np.testing.assert_allclose(a.inverse()(a(pts)), pts, atol=1e-10)
        assert (a @ a.inverse()).is_identity(1e-12)

    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            AffineTransform(np.diag([1, 0, 1, 1]))

    def test_chain_order_and_folding(self):
        t1, t2 = AffineTransform.translation([1, 0, 0]), AffineTransform.translation([0, 2, 0])
        s = AffineTransform(np.diag([2.0, 2.0, 2.0, 1.0]))
        chain = compose_chain([s, t1, t2])
        assert len(chain) == 1  # all affine parts fold into one
        np.testing.assert_allclose(chain(np.zeros((1, 3))), [[2.0, 4.0, 0.0]])
        assert compose_chain([AffineTransform.identity()]).is_identity()
        with pytest.raises(ValueError):
            compose_chain([])

    def test_translations_add(self, rng):
        t1, t2 = rng.normal(size=3), rng.normal(size=3)
        chain = compose_chain([AffineTransform.translation(t1), AffineTransform.translation(t2)])
        x = rng.normal(size=(10, 3)) * 10
        np.testing.assert_allclose(chain(x), x + t1 + t2, atol=1e-12)

    def test_affine_then_field_matches_pointwise(self, rng):
        g = SamplingGrid((6, 7, 5), (1.0, 1.5, 2.0), rotation(0.1, 0.2, -0.1), (2, -3, 4))
        u = DisplacementField(torch.from_numpy(rng.normal(size=(3, *g.shape))), g)
        m = np.eye(4)
        m[:3, :3] = rotation(0.3, 0, 0.2) * 1.1
        m[:3, 3] = [1, 2, 3]
        a = AffineTransform(m)
        x = g.index_to_world(rng.uniform(0, 4, size=(25, 3)))
        got = compose_chain([a, u])(x)
        want = []
        for p in x:
            idx = g.world_to_index(p[None])[0]
            disp = np.array([brute_trilinear(u.u[k].numpy(), idx) for k in range(3)])
            want.append(m[:3, :3] @ (p + disp) + m[:3, 3])
        assert np.max(np.abs(got - np.asarray(want))) < 1e-9

    def test_affine_file_roundtrip(self, tmp_path):
        a = AffineTransform(np.array([[1.0, 0.1, 0, 2], [0, 1, 0, 3], [0, 0, 0.9, -1], [0, 0, 0, 1]]))
        p = write_affine(a, tmp_path / "a.txt")
        np.testing.assert_array_equal(read_affine(p).matrix, a.matrix)


class TestTrilinear:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30)
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        data = r.normal(size=(4, 5, 3))
        pts = r.uniform(-1.0, 5.5, size=(20, 3))
        got = trilinear(torch.from_numpy(data), torch.from_numpy(pts), fill=-7.0)[0].numpy()
        want = [brute_trilinear(data, p, -7.0) for p in pts]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_identity_sampling_is_bitwise(self, rng):
        g = SamplingGrid((5, 6, 7), (1.2, 0.8, 2.0), rotation(0.4, 0.1, -0.3), (10, 20, -5))
        v = ImageVolume(rng.normal(size=g.shape), g)
        out = sample(v, g)
        assert np.array_equal(out, v.data)

    def test_gradient_flows_through_snapped_points(self):
        data = torch.arange(8.0, dtype=torch.float64).reshape(2, 2, 2)
        idx = torch.zeros((1, 3), dtype=torch.float64, requires_grad=True)
        trilinear(data, idx).sum().backward()
        # d/dx along axis 0 at the corner is data[1,0,0] - data[0,0,0]
        np.testing.assert_allclose(idx.grad.numpy(), [[4.0, 2.0, 1.0]])


class TestSample:
    def test_translation_shift(self, rng):
        g = SamplingGrid((6, 6, 6))
        v = ImageVolume(rng.normal(size=g.shape), g)
        out = sample(v, g, compose_chain([AffineTransform.translation([1, 0, 0])]))
        np.testing.assert_array_equal(out[:-1], v.data[1:])
        # last plane maps to index 6, past the box edge at 5.5, so it takes the fill value
        assert np.all(out[-1] == 0)

    def test_inverse_translation_pair_is_identity(self, rng):
        g = SamplingGrid((6, 6, 6))
        v = ImageVolume(rng.normal(size=g.shape), g)
        chain = compose_chain([AffineTransform.translation([1, 0, 0]), AffineTransform.translation([-1, 0, 0])])
        assert np.array_equal(sample(v, g, chain), v.data)

    def test_affine_and_field_on_ramp_matches_brute_force(self, rng):
        g = SamplingGrid((8, 8, 8))
        i, j, k = np.indices(g.shape)
        ramp = ImageVolume(1.0 * i + 2.0 * j + 0.5 * k + 0.1 * i * j, g)
        u = DisplacementField(torch.from_numpy(0.7 * rng.normal(size=(3, *g.shape))), g)
        m = np.eye(4)
        m[:3, :3] = rotation(0.05, 0.1, 0) * 0.95
        m[:3, 3] = [0.3, -0.2, 0.4]
        a = AffineTransform(m)
        out = sample(ramp, g, compose_chain([a, u]))
        for idx in itertools.product(range(8), repeat=3):
            p = np.asarray(idx, dtype=np.float64)
            disp = np.array([brute_trilinear(u.u[c].numpy(), p) for c in range(3)])
            q = m[:3, :3] @ (p + disp) + m[:3, 3]
            assert abs(out[idx] - brute_trilinear(ramp.data, q, 0.0)) < 1e-9

    def test_out_of_field_is_background(self, rng):
        g = SamplingGrid((4, 4, 4))
        v = ImageVolume(rng.normal(size=g.shape) + 5, g)
        out = sample(v, g, compose_chain([AffineTransform.translation([10, 0, 0])]))
        assert np.all(out == 0)

    @given(st.integers(0, 2**31 - 1), st.floats(-0.7, 0.7), st.floats(0.8, 1.25))
    @settings(max_examples=25, deadline=None)
    def test_label_closure(self, seed, angle, scale):
        r = np.random.default_rng(seed)
        g = SamplingGrid((6, 5, 4))
        ids = np.array([0, 3, 7, 11])
        lm = LabelMap(ids[r.integers(0, 4, g.shape)], g)
        m = np.eye(4)
        m[:3, :3] = rotation(angle, 0, 0) * scale
        out = sample(lm, SamplingGrid((7, 7, 7), origin=(-1, -1, -1)), compose_chain([AffineTransform(m)]))
        assert set(np.unique(out)) <= set(ids)

    def test_single_interpolation_per_chain(self, rng):
        g = SamplingGrid((5, 5, 5))
        v = ImageVolume(rng.normal(size=g.shape), g)
        chain = compose_chain([AffineTransform.translation([0.3, 0, 0]), AffineTransform.translation([0, 0.2, 0])])
        before = interpolation_count()
        sample(v, g, chain)
        assert interpolation_count() == before + 1

    def test_disjoint_grids_without_chain(self):
        a = SamplingGrid((3, 3, 3))
        b = SamplingGrid((3, 3, 3), origin=(100, 0, 0))
        with pytest.raises(ValueError):
            sample(ImageVolume(np.zeros((3, 3, 3)), a), b)


class TestIO:
    def test_nifti_roundtrip(self, tmp_path, rng):
        g = SamplingGrid((4, 5, 6), (1.5, 1.0, 2.0), rotation(0.2, 0.0, 0.1), (1, 2, 3))
        img = ImageVolume(rng.normal(size=g.shape), g)
        lab = LabelMap(rng.integers(0, 3, g.shape), g, {0: "bg", 1: "a", 2: "b"})
        save_volume(img, tmp_path / "img.nii.gz")
        save_volume(lab, tmp_path / "lab.nii.gz", description="probe")
        img2 = load_volume(tmp_path / "img.nii.gz")
        lab2 = load_volume(tmp_path / "lab.nii.gz", "label")
        np.testing.assert_array_equal(img2.data, img.data)
        np.testing.assert_array_equal(lab2.data, lab.data)
        assert lab2.label_names == lab.label_names
        assert img2.grid == g

    def test_phantom_roundtrip(self, tmp_path, phantom32):
        _, (img, lab) = phantom32
        save_volume(lab, tmp_path / "p.nii.gz")
        back = load_volume(tmp_path / "p.nii.gz", "label")
        assert np.array_equal(back.data, lab.data) and back.grid == lab.grid

    def test_missing_and_bad_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nope.nii.gz")
        bad = tmp_path / "bad.nii.gz"
        bad.write_bytes(b"not a nifti")
        with pytest.raises(ValueError):
            load_volume(bad)

    def test_manifest_roundtrip(self, tmp_path):
        rows = [
            ManifestRow("a", tmp_path / "a.nii.gz", tmp_path / "al.nii.gz", None, ()),
            ManifestRow("b", tmp_path / "b.nii.gz", tmp_path / "bl.nii.gz", tmp_path / "bt.nii.gz",
                        (tmp_path / "x.txt", tmp_path / "y.txt")),
        ]
        p = write_manifest(rows, tmp_path / "m.tsv", header="provenance line")
        back = read_manifest(p)
        assert [r.case_id for r in back] == ["a", "b"]
        assert back[1].affines == rows[1].affines and back[0].tumour is None


class TestMomentInit:
    def test_recovers_known_affine(self):
        g = SamplingGrid((40, 40, 40))
        idx = g.world_points().numpy()
        q = (idx - 19.5) / np.array([14.0, 9.0, 6.0])
        atlas = LabelMap((np.linalg.norm(q, axis=-1) < 1).astype(int), g)
        m = np.eye(4)
        m[:3, :3] = np.diag([1.1, 0.9, 1.0])
        m[:3, 3] = [2.0, -1.5, 1.0]
        truth = AffineTransform(m)  # subject world -> atlas world
        subj = LabelMap(sample(atlas, g, compose_chain([truth])), g)
        est = moment_affine_init(subj, atlas)
        np.testing.assert_allclose(est.matrix[:3, :3], truth.matrix[:3, :3], atol=0.05)
        np.testing.assert_allclose(est.matrix[:3, 3], truth.matrix[:3, 3], atol=0.75)  # voxelised masks

    @staticmethod
    def ellipsoid(g, centre, semi):
        q = (g.world_points().numpy() - centre) / np.asarray(semi)
        return LabelMap((np.linalg.norm(q, axis=-1) < 1).astype(int), g)

    def test_self_alignment_is_identity(self):
        g = SamplingGrid((30, 30, 30))
        atlas = self.ellipsoid(g, 14.5, (10.0, 7.0, 5.0))
        assert moment_affine_init(atlas, atlas).is_identity(1e-6)

    def test_known_shift(self):
        g = SamplingGrid((40, 40, 40))
        atlas = self.ellipsoid(g, 19.5, (10.0, 7.0, 5.0))
        shift = np.array([5.0, -3.0, 2.0])
        subj = LabelMap(sample(atlas, g, compose_chain([AffineTransform.translation(shift)])), g)
        est = moment_affine_init(subj, atlas)
        np.testing.assert_allclose(est.matrix[:3, 3], shift, atol=0.5)

    def test_isotropic_scaling(self):
        g = SamplingGrid((48, 48, 48))
        c = 23.5
        atlas = self.ellipsoid(g, c, (12.0, 9.0, 7.0))
        m = np.eye(4)
        m[:3, :3] /= 1.2
        m[:3, 3] = c - c / 1.2  # about the centre
        subj = LabelMap(sample(atlas, g, compose_chain([AffineTransform(m)])), g)
        est = moment_affine_init(subj, atlas)
        np.testing.assert_allclose(np.diag(est.matrix)[:3], 1 / 1.2, rtol=0.05)

    def test_empty_foreground(self):
        g = SamplingGrid((3, 3, 3))
        with pytest.raises(ValueError):
            moment_affine_init(LabelMap(np.zeros((3, 3, 3)), g), LabelMap(np.ones((3, 3, 3)), g))
