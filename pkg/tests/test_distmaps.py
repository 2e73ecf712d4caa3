import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_boundary_distance, brute_junction

from atlasreg.distmaps import distance_map, junction_surface, load_distance_map, save_distance_map
from atlasreg.volumes import LabelMap, SamplingGrid


def cube_phantom():
    lab = np.zeros((7, 7, 7), dtype=np.int32)
    lab[1:6, 1:6, 1:6] = 1
    return LabelMap(lab, SamplingGrid(lab.shape))


class TestDistanceMap:
    def test_cube_centre_and_corner(self):
        lm = cube_phantom()
        dm = distance_map(lm, gamma=1.0)
        assert dm.data[3, 3, 3] == pytest.approx(2.5 + 1.0)
        assert dm.data[1, 1, 1] == pytest.approx(0.5 + 1.0)
        oracle = brute_boundary_distance(lm.data, (1, 1, 1))
        metric = dm.data - 1.0 * lm.data
        np.testing.assert_allclose(metric, oracle, atol=0.5 * np.sqrt(3))

    def test_uniform_map_measures_to_grid_faces(self):
        lm = LabelMap(np.ones((6, 5, 4), dtype=np.int32), SamplingGrid((6, 5, 4)))
        dm = distance_map(lm, gamma=0.0)
        np.testing.assert_allclose(dm.data[0, 2, 2], 0.5)
        np.testing.assert_allclose(dm.data, brute_boundary_distance(lm.data, (1, 1, 1)), atol=1e-12)

    def test_gamma_offset_dominates(self):
        lab = np.ones((4, 4, 6), dtype=np.int32)
        lab[:, :, 3:] = 2
        dm = distance_map(LabelMap(lab, SamplingGrid(lab.shape)), gamma=10.0)
        thickness = 3.0
        assert dm.data[lab == 2].min() - dm.data[lab == 1].max() >= 10.0 - thickness

    def test_inside_distance_never_negative(self, rng):
        lab = rng.integers(0, 4, (6, 6, 6))
        dm = distance_map(LabelMap(lab, SamplingGrid(lab.shape)), gamma=1.0)
        assert np.all(dm.data >= 1.0 * lab)

    @given(st.integers(0, 2**31 - 1), st.tuples(*[st.sampled_from([0.5, 1.0, 2.0])] * 3))
    @settings(max_examples=12, deadline=None)
    def test_matches_brute_force_within_half_diagonal(self, seed, spacing):
        r = np.random.default_rng(seed)
        lab = (r.random((6, 5, 5)) < 0.6).astype(np.int32) + (r.random((6, 5, 5)) < 0.3)
        dm = distance_map(LabelMap(lab, SamplingGrid(lab.shape, spacing)), gamma=1.0)
        oracle = brute_boundary_distance(lab, spacing)
        half_diag = 0.5 * np.linalg.norm(spacing)
        assert np.max(np.abs(dm.data - lab - oracle)) <= half_diag + 1e-9

    def test_doubling_spacing_doubles_metric_part(self):
        lab = np.ones((5, 5, 8), dtype=np.int32)
        lab[:, :, 4:] = 2
        a = distance_map(LabelMap(lab, SamplingGrid(lab.shape, (1.0, 1.0, 1.0))), gamma=1.0)
        b = distance_map(LabelMap(lab, SamplingGrid(lab.shape, (2.0, 2.0, 2.0))), gamma=1.0)
        np.testing.assert_allclose(b.data - lab, 2 * (a.data - lab), atol=1e-12)

    def test_pure_function_of_labels(self, rng):
        lab = rng.integers(0, 3, (5, 5, 5))
        g = SamplingGrid(lab.shape)
        names = {0: "a", 1: "b", 2: "c"}
        a = distance_map(LabelMap(lab, g, names, id="x"), 1.0)
        b = distance_map(LabelMap(lab.copy(), g, {0: "p", 1: "q", 2: "r"}, id="y"), 1.0)
        assert np.array_equal(a.data, b.data)
        assert a.source_label_set == (0, 1, 2)

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            distance_map(cube_phantom(), gamma=-1.0)

    def test_io_roundtrip(self, tmp_path):
        dm = distance_map(cube_phantom(), gamma=1.0)
        p = save_distance_map(dm, tmp_path / "d.nii.gz")
        back = load_distance_map(p)
        np.testing.assert_allclose(back.data, dm.data, atol=1e-6)  # float32 storage
        assert back.gamma == 1.0 and back.source_label_set == dm.source_label_set
        assert back.grid == dm.grid


class TestJunctionSurface:
    def test_planar_interface(self):
        lab = np.ones((6, 6, 6), dtype=np.int32)
        lab[3:] = 2
        lm = LabelMap(lab, SamplingGrid(lab.shape))
        s = junction_surface(lm, [1], [2])
        assert s.sum() == 36 and s[2].all()

    def test_non_adjacent_is_empty(self):
        lab = np.zeros((7, 3, 3), dtype=np.int32)
        lab[:2] = 1
        lab[5:] = 2
        assert not junction_surface(LabelMap(lab, SamplingGrid(lab.shape)), [1], [2]).any()

    def test_phantom_shell_matches_neighbour_scan(self, phantom32):
        _, (_, lm) = phantom32
        s = junction_surface(lm, [1], [2])
        assert s.any()
        assert np.array_equal(s, brute_junction(np.asarray(lm.data), {1}, {2}))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_random_maps_match_neighbour_scan(self, seed):
        lab = np.random.default_rng(seed).integers(0, 4, (5, 6, 4))
        lm = LabelMap(lab, SamplingGrid(lab.shape))
        assert np.array_equal(junction_surface(lm, [1, 3], [2]), brute_junction(lab, {1, 3}, {2}))

    def test_overlapping_sets_rejected(self):
        with pytest.raises(ValueError):
            junction_surface(cube_phantom(), [0, 1], [1])
        with pytest.raises(ValueError):
            junction_surface(cube_phantom(), [], [1])
