import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from oracles import finite_difference_check

from atlasreg.distmaps import distance_map
from atlasreg.field import DisplacementField, VelocityField, integrate_svf
from atlasreg.losses import (
    CaseTransform,
    DegenerateInputWarning,
    LossWeights,
    atlas_space_distance,
    general_loss,
    overfit_loss,
    reg_loss,
    sim_loss,
    subject_space_atlas_distance,
    vol_loss,
    vol_loss_from_jacobian,
)
from atlasreg.phantom import make_collapse_toy
from atlasreg.volumes import LabelMap, SamplingGrid

SIG_AT_ONE = 1 / (1 + math.exp(2.5))  # sigmoid(5 * (1 - 1.5))


def sphere_labels(n=16, r_outer=6.5, r_inner=3.5, shift=(0, 0, 0)):
    g = SamplingGrid((n, n, n))
    c = (n - 1) / 2 + np.asarray(shift, dtype=np.float64)
    r = np.linalg.norm(g.world_points().numpy() - c, axis=-1)
    lab = np.where(r < r_outer, 1, 0) + (r < r_inner)
    return LabelMap(lab, g)


def ncc_oracle(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return -float(np.corrcoef(a, b)[0, 1])


class TestSim:
    def test_perfect_and_anti_correlation(self, rng):
        a = rng.normal(size=(4, 4, 4))
        assert float(sim_loss(a, a)) == pytest.approx(-1.0, abs=1e-12)
        assert float(sim_loss(a, 3.0 - a)) == pytest.approx(1.0, abs=1e-12)

    def test_swapped_pair_hand_value(self):
        a = np.arange(8.0).reshape(2, 2, 2)
        b = a.copy().ravel()
        b[[2, 5]] = b[[5, 2]]
        b = b.reshape(2, 2, 2)
        # centred a: -3.5..3.5, sum of squares 42; swapping 2 and 5 changes the cross sum by -(5-2)**2
        want = -(42.0 - 9.0) / 42.0
        assert float(sim_loss(a, b)) == pytest.approx(want, abs=1e-12)
        assert float(sim_loss(a, b)) == pytest.approx(ncc_oracle(a, b), abs=1e-12)

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(-5, 5))
    @settings(max_examples=30)
    def test_symmetry_and_affine_invariance(self, seed, alpha, beta):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(3, 4, 5)), r.normal(size=(3, 4, 5))
        s = float(sim_loss(a, b))
        assert abs(s - float(sim_loss(b, a))) < 1e-12
        assert abs(s - float(sim_loss(alpha * a + beta, b))) < 1e-9
        assert -1 - 1e-12 <= s <= 1 + 1e-12

    def test_zero_variance_flagged(self):
        with pytest.warns(DegenerateInputWarning):
            assert float(sim_loss(np.ones(8), np.arange(8.0))) == 0.0


def brute_reg(u, spacing):
    total = 0.0
    _, nx, ny, nz = u.shape
    for c in range(3):
        for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
            for axis, (di, dj, dk) in enumerate([(1, 0, 0), (0, 1, 0), (0, 0, 1)]):
                ii, jj, kk = i + di, j + dj, k + dk
                if ii < nx and jj < ny and kk < nz:
                    total += ((u[c, ii, jj, kk] - u[c, i, j, k]) / spacing[axis]) ** 2
    return total


class TestReg:
    def test_constant_field_is_zero(self):
        g = SamplingGrid((5, 5, 5))
        u = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64).view(3, 1, 1, 1).expand(3, 5, 5, 5).clone()
        assert float(reg_loss(DisplacementField(u, g))) == 0.0

    def test_linear_field(self):
        g = SamplingGrid((6, 5, 4), (2.0, 1.0, 1.0))
        c = 0.3
        u = torch.zeros(3, *g.shape, dtype=torch.float64)
        u[0] = c * g.world_points()[..., 0]
        n_diffs = (6 - 1) * 5 * 4  # forward differences along x
        assert float(reg_loss(DisplacementField(u, g))) == pytest.approx(n_diffs * c**2, rel=1e-12)

    def test_matches_naive_loop(self, rng):
        g = SamplingGrid((8, 8, 8), (1.0, 0.5, 2.0))
        u = rng.normal(size=(3, *g.shape))
        got = float(reg_loss(DisplacementField(torch.from_numpy(u), g)))
        assert got == pytest.approx(brute_reg(u, g.spacing), abs=1e-9, rel=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20)
    def test_non_negative_and_zero_only_when_constant(self, seed):
        r = np.random.default_rng(seed)
        g = SamplingGrid((3, 4, 3))
        u = r.normal(size=(3, *g.shape))
        assert float(reg_loss(DisplacementField(torch.from_numpy(u), g))) > 0


class TestVol:
    def test_identity(self):
        lm = sphere_labels(8, 3.0, 1.5)
        val = float(vol_loss(lm, DisplacementField.identity(lm.grid)))
        assert val == pytest.approx(SIG_AT_ONE, abs=1e-12)
        assert SIG_AT_ONE == pytest.approx(0.07586, abs=1e-5)

    def test_uniform_change_of_one_label_not_penalised(self):
        lab = np.zeros((4, 4, 4), dtype=np.int64)
        lab[:2] = 1
        jac = np.where(lab == 1, 1.2**3, 1.0)
        assert float(vol_loss_from_jacobian(lab, jac)) == pytest.approx(SIG_AT_ONE, abs=1e-12)

    def test_half_expanded_half_contracted(self):
        lab = np.ones((2, 2, 2), dtype=np.int64)
        jac = np.array([2.0, 0.5] * 4).reshape(2, 2, 2)
        # mean J = 1.25, ratios 1.6 and 2.5
        sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
        want = (sig(5 * (1.6 - 1.5)) + sig(5 * (2.5 - 1.5))) / 2
        assert want == pytest.approx((0.62246 + 0.99331) / 2, abs=1e-5)
        assert float(vol_loss_from_jacobian(lab, jac)) == pytest.approx(want, abs=1e-12)

    @given(st.floats(0.7, 1.4))
    @settings(max_examples=15, deadline=None)
    def test_uniform_scaling_invariance(self, s):
        g = SamplingGrid((6, 6, 6))
        lm = LabelMap(np.ones(g.shape, dtype=int), g)
        u = torch.from_numpy(np.moveaxis((s - 1) * g.world_points().numpy(), -1, 0).copy())
        assert float(vol_loss(lm, DisplacementField(u, g))) == pytest.approx(SIG_AT_ONE, abs=1e-9)

    def test_empty_labels(self):
        with pytest.raises(ValueError):
            vol_loss_from_jacobian(np.zeros((0,), dtype=int), np.zeros((0,)))


@pytest.fixture(scope="module")
def probe16():
    atlas = sphere_labels(16, 6.5, 3.5)
    subject = sphere_labels(16, 6.0, 3.0, shift=(0.7, -0.4, 0.3))
    g = atlas.grid
    r = np.random.default_rng(11)
    comps = [ndimage.gaussian_filter(r.standard_normal(g.shape), 2.5, mode="wrap") for _ in range(3)]
    v = np.stack(comps)
    v0 = torch.from_numpy(1.5 * v / np.linalg.norm(v, axis=0).max())
    return atlas, subject, v0


class TestGradients:
    def test_sim_gradient(self, probe16):
        atlas, subject, v0 = probe16
        da, ds = distance_map(atlas, 1.0), distance_map(subject, 1.0)
        fixed = torch.tensor(da.data)

        def f(vt):
            T, _ = integrate_svf(VelocityField(vt, atlas.grid), steps=2)
            return sim_loss(atlas_space_distance(ds, T), fixed)

        worst = finite_difference_check(f, v0)
        print(f"worst relative error {worst:.2e}")
        assert worst < 1e-3

    def test_reg_gradient(self, probe16):
        atlas, _, v0 = probe16

        def f(vt):
            T, _ = integrate_svf(VelocityField(vt, atlas.grid), steps=2)
            return reg_loss(T)

        worst = finite_difference_check(f, v0)
        print(f"worst relative error {worst:.2e}")
        assert worst < 1e-3

    def test_vol_gradient(self, probe16):
        atlas, _, v0 = probe16

        def f(vt):
            T, _ = integrate_svf(VelocityField(3.0 * vt, atlas.grid), steps=3)
            return vol_loss(atlas, T)

        worst = finite_difference_check(f, v0)
        print(f"worst relative error {worst:.2e}")
        assert worst < 1e-3


def ident_case(labels, **kw):
    z = DisplacementField.identity(labels.grid)
    return CaseTransform(labels, z, z, **kw)


class TestObjectives:
    def test_general_identity(self):
        atlas = sphere_labels(12, 5.0, 2.5)
        w = LossWeights()
        rep = general_loss([ident_case(atlas), ident_case(atlas)], atlas, w)
        assert rep.sim == pytest.approx(-2.0, abs=1e-12)
        assert rep.reg == 0.0
        assert rep.pairwise_sim == pytest.approx(-2.0, abs=1e-12)  # ordered pairs (0,1) and (1,0)
        assert rep.total == pytest.approx(-2 * w.lambda1 - 2 * w.lambda3, abs=1e-12)

    def test_general_batch_of_one_has_no_pairwise_term(self):
        atlas = sphere_labels(12, 5.0, 2.5)
        assert general_loss([ident_case(atlas)], atlas).pairwise_sim == 0.0

    def test_general_compositional_oracle(self, rng):
        atlas = sphere_labels(12, 5.0, 2.5)
        subs = [sphere_labels(12, 4.5, 2.0, (0.5, 0, 0)), sphere_labels(12, 5.2, 3.0, (0, -0.6, 0.2))]
        w = LossWeights(lambda1=0.3, lambda2=0.01, lambda3=0.2, lambda4=0.5)
        cases = []
        for k, s in enumerate(subs):
            v = VelocityField(torch.from_numpy(0.5 * rng.normal(size=(3, *atlas.grid.shape))), atlas.grid)
            T, T_inv = integrate_svf(v)
            cases.append(CaseTransform(s, T, T_inv))
        rep = general_loss(cases, atlas, w)
        da = distance_map(atlas, w.gamma)
        ds = [distance_map(s, w.gamma) for s in subs]
        sims = [float(sim_loss(ds[i].data, subject_space_atlas_distance(da, cases[i].T_inv, subs[i].grid))) for i in range(2)]
        regs = [float(reg_loss(c.T)) for c in cases]
        warped = [atlas_space_distance(ds[i], cases[i].T) for i in range(2)]
        pair = float(sim_loss(warped[0], warped[1])) + float(sim_loss(warped[1], warped[0]))
        want = w.lambda1 * sum(sims) + w.lambda2 * sum(regs) + w.lambda3 * pair
        assert rep.total == pytest.approx(want, abs=1e-9)
        assert float(rep.loss) == pytest.approx(rep.total, abs=1e-12)
        assert rep.vol == 0.0 and rep.mode == "general"

    def test_overfit_identity(self):
        atlas = sphere_labels(12, 5.0, 2.5)
        w = LossWeights()
        rep = overfit_loss(ident_case(atlas), atlas, w)
        assert rep.sim == pytest.approx(-1.0, abs=1e-12) and rep.reg == 0.0
        assert rep.vol == pytest.approx(SIG_AT_ONE, abs=1e-12)
        assert rep.total == pytest.approx(-w.lambda1 + w.lambda4 * SIG_AT_ONE, abs=1e-12)

    def test_overfit_without_volume_term(self, rng):
        atlas = sphere_labels(12, 5.0, 2.5)
        v = VelocityField(torch.from_numpy(0.5 * rng.normal(size=(3, *atlas.grid.shape))), atlas.grid)
        T, T_inv = integrate_svf(v)
        w = LossWeights(lambda4=0.0, lambda2=0.01)
        rep = overfit_loss(CaseTransform(sphere_labels(12, 4.5, 2.0), T, T_inv), atlas, w)
        assert rep.vol == 0.0
        assert rep.total == pytest.approx(w.lambda1 * rep.sim + w.lambda2 * rep.reg, abs=1e-12)

    def test_overfit_compositional_oracle(self, rng):
        atlas = sphere_labels(12, 5.0, 2.5)
        subj = sphere_labels(12, 4.5, 2.0, (0.4, 0.3, 0))
        v = VelocityField(torch.from_numpy(0.5 * rng.normal(size=(3, *atlas.grid.shape))), atlas.grid)
        T, T_inv = integrate_svf(v)
        w = LossWeights(lambda1=0.2, lambda2=0.03, lambda4=0.7)
        rep = overfit_loss(CaseTransform(subj, T, T_inv), atlas, w)
        sim = float(sim_loss(atlas_space_distance(distance_map(subj, 1.0), T), distance_map(atlas, 1.0).data))
        want = w.lambda1 * sim + w.lambda2 * float(reg_loss(T)) + w.lambda4 * float(vol_loss(atlas, T))
        assert rep.total == pytest.approx(want, abs=1e-9)

    def test_report_serialises_without_tensor(self):
        atlas = sphere_labels(8, 3.0, 1.5)
        rec = overfit_loss(ident_case(atlas), atlas).to_json(epoch=3)
        assert '"epoch": 3' in rec and "loss" not in rec.replace("pairwise", "")

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1)
        with pytest.raises(ValueError):
            LossWeights(gamma=0)


class TestCollapseOrdering:
    def test_atlas_space_favours_collapse_image_space_does_not(self):
        toy = make_collapse_toy()
        w = LossWeights()
        keep = CaseTransform(toy.subject, *toy.preserve)
        fold = CaseTransform(toy.subject, *toy.collapse)
        assert overfit_loss(fold, toy.atlas, w).sim < overfit_loss(keep, toy.atlas, w).sim
        assert general_loss([fold], toy.atlas, w).total > general_loss([keep], toy.atlas, w).total
