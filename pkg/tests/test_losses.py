import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from longreg import losses
from longreg.losses import (FeatureVec, LossWeights, bending_energy, gaussian_kernel, grad_of,
                            mmd_sq, multiscale_dice, ssd)
from longreg.volgrid import DDF, Volume3D, affine_to_ddf

from oracles import bending_energy_loops, central_fd, max_rel_err, mmd_loops


@pytest.fixture(autouse=True, scope="module")
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def box_masks():
    a = torch.zeros(4, 4, 4)
    b = torch.zeros(4, 4, 4)
    a[0, 0, 0:4] = 1  # 4 voxels
    b[0, 0, 2:4] = 1
    b[1, 0, 0:2] = 1  # 4 voxels, 2 shared
    return a, b


class TestSSD:
    def test_equal(self):
        x = torch.rand(3, 4, 5)
        assert float(ssd(x, x)) == 0.0

    def test_constant(self):
        assert float(ssd(torch.full((3, 2, 7), 0.5), torch.zeros(3, 2, 7))) == pytest.approx(0.25)

    def test_symmetric_and_volume_inputs(self):
        rng = np.random.default_rng(0)
        a, b = Volume3D(rng.random((3, 3, 3))), Volume3D(rng.random((3, 3, 3)))
        assert float(ssd(a, b)) == float(ssd(b, a)) > 0

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ssd(torch.zeros(2, 2, 2), torch.zeros(2, 2, 3))


class TestDice:
    def test_identical(self):
        a, _ = box_masks()
        assert float(multiscale_dice(a, a, scales=[0])) == pytest.approx(1.0, abs=1e-6)

    def test_disjoint(self):
        a = torch.zeros(4, 4, 4)
        b = torch.zeros(4, 4, 4)
        a[0] = 1
        b[3] = 1
        assert float(multiscale_dice(a, b, scales=[0], eps=1e-6)) == pytest.approx(0.0, abs=1e-6)

    def test_half_overlap(self):
        a, b = box_masks()
        assert float(multiscale_dice(a, b, scales=[0])) == pytest.approx(0.5, abs=1e-6)

    def test_default_scales_in_unit_interval(self):
        a, b = box_masks()
        v = float(multiscale_dice(a, b))
        assert 0 < v <= 1

    def test_symmetric_and_permutation_invariant(self):
        g = torch.Generator().manual_seed(1)
        p, q = torch.rand(4, 4, 4, generator=g), torch.rand(4, 4, 4, generator=g)
        assert float(multiscale_dice(p, q)) == pytest.approx(float(multiscale_dice(q, p)))
        perm = torch.randperm(64, generator=g)
        pp, qp = p.reshape(-1)[perm].reshape(4, 4, 4), q.reshape(-1)[perm].reshape(4, 4, 4)
        assert float(multiscale_dice(pp, qp, scales=[0])) == pytest.approx(
            float(multiscale_dice(p, q, scales=[0])))

    def test_smoothing_preserves_mass_in_interior(self):
        x = torch.zeros(21, 21, 21)
        x[10, 10, 10] = 1
        assert float(losses.gaussian_smooth(x, 2.0).sum()) == pytest.approx(1.0)


class TestBendingEnergy:
    def test_zero(self):
        assert float(bending_energy(torch.zeros(3, 5, 5, 5))) == 0.0

    def test_affine_is_zero(self):
        A = np.array([[1.1, 0.2, 0.0], [-0.1, 0.9, 0.05], [0.0, 0.3, 1.2]])
        ddf = affine_to_ddf(A, [1.0, -2.0, 0.5], (6, 5, 7))
        assert float(bending_energy(torch.as_tensor(ddf.disp, dtype=torch.float64))) < 1e-10

    def test_quadratic_hand_value(self):
        x = torch.arange(5.0)
        u = torch.zeros(3, 5, 5, 5)
        u[0] = (x ** 2)[:, None, None]
        assert float(bending_energy(u)) == pytest.approx(4.0)

    def test_against_loop_oracle(self):
        u = np.random.default_rng(0).normal(size=(3, 5, 4, 6))
        assert float(bending_energy(torch.as_tensor(u))) == pytest.approx(bending_energy_loops(u))

    def test_too_small(self):
        with pytest.raises(ValueError):
            bending_energy(torch.zeros(3, 2, 5, 5))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.normal(size=(3, 5, 5, 5))
        A = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
        aff = affine_to_ddf(A, rng.normal(size=3), (5, 5, 5)).disp.astype(np.float64)
        e0 = float(bending_energy(torch.as_tensor(u)))
        e1 = float(bending_energy(torch.as_tensor(u + aff)))
        assert e1 == pytest.approx(e0, rel=1e-9, abs=1e-9)
        assert e0 >= 0


class TestKernelAndMMD:
    def test_kernel_values(self):
        u = torch.tensor([1.0, 2.0, 3.0])
        assert float(gaussian_kernel(u, u, 0.7)) == 1.0
        v = u + torch.tensor([1.0, 1.0, 0.0])  # squared distance 2 = 2 * sigma
        assert float(gaussian_kernel(u, v, 1.0)) == pytest.approx(math.exp(-1))
        assert float(gaussian_kernel(u, u + 1e3, 1.0)) == 0.0

    def test_kernel_feature_vec_inputs(self):
        a = FeatureVec(torch.ones(4), "IF")
        b = FeatureVec(torch.zeros(4), "IB")
        assert float(gaussian_kernel(a, b, 2.0)) == pytest.approx(math.exp(-1))
        with pytest.raises(ValueError):
            FeatureVec(torch.ones(2), "XX")

    def test_kernel_length_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_kernel(torch.ones(3), torch.ones(4), 1.0)

    @pytest.mark.parametrize("n", [1, 2, 4, 7])
    def test_self_mmd(self, n):
        V = torch.randn(n, 5)
        assert float(mmd_sq(V, V, 1.3)) == pytest.approx(-2 / n, abs=1e-12)

    def test_separated_pairs(self):
        VI = torch.zeros(2, 3)
        VJ = torch.full((2, 3), 100.0)
        assert float(mmd_sq(VI, VJ, 1.0)) == pytest.approx(1.0, abs=1e-9)

    def test_single_far_vectors(self):
        assert float(mmd_sq(torch.zeros(1, 3), torch.full((1, 3), 100.0), 1.0)) == \
            pytest.approx(0.0, abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.floats(0.1, 10.0), st.integers(0, 2 ** 31))
    def test_matches_loop_oracle_and_symmetric(self, I, J, sigma, seed):
        rng = np.random.default_rng(seed)
        VI, VJ = rng.normal(size=(I, 4)), rng.normal(size=(J, 4))
        got = float(mmd_sq(torch.as_tensor(VI), torch.as_tensor(VJ), sigma))
        assert got == pytest.approx(mmd_loops(VI, VJ, sigma), abs=1e-12)
        assert float(mmd_sq(torch.as_tensor(VJ), torch.as_tensor(VI), sigma)) == \
            pytest.approx(got, abs=1e-12)

    def test_median_heuristic(self):
        V = torch.tensor([[0.0], [1.0], [3.0]])  # squared distances 1, 9, 4
        assert losses.median_sq_distance(V) == 4.0
        assert losses.median_sq_distance(torch.zeros(3, 2)) == 1.0
        assert float(mmd_sq(V[:2], V[2:])) == pytest.approx(mmd_loops(V[:2], V[2:], 4.0))

    def test_empty(self):
        with pytest.raises(ValueError):
            mmd_sq(torch.zeros(0, 3), torch.zeros(2, 3), 1.0)


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.beta, w.gamma, w.lam) == (1.0, 1.0, 50.0, 0.01)

    @pytest.mark.parametrize("kw", [dict(alpha=-1), dict(sigma=0.0), dict(eps=0.0),
                                    dict(dice_scales=()), dict(dice_scales=(-1,))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)


class TestGradients:
    def test_ssd_stationary(self):
        a = torch.rand(3, 3, 3)
        ga, gb = grad_of(ssd, a, a)
        assert not ga.any() and not gb.any()

    def test_kernel_maximum(self):
        u = torch.rand(6)
        gu, _ = grad_of(lambda a, b: gaussian_kernel(a, b, 0.5), u, u)
        assert not gu.any()

    def _check(self, fn, *inputs, which=0, n=60):
        analytic = grad_of(fn, *inputs)[which].reshape(-1).numpy()
        x = inputs[which]
        idx = np.random.default_rng(0).choice(x.numel(), size=min(n, x.numel()), replace=False)

        def f(v):
            args = list(inputs)
            args[which] = v
            return fn(*args)

        # h balances truncation (h^2) against roundoff (eps / h) for these smooth terms
        numeric = central_fd(f, x, idx, h=1e-4)
        assert max_rel_err(analytic[idx], numeric) < 1e-6

    def test_ssd_fd(self):
        self._check(ssd, torch.rand(4, 4, 4), torch.rand(4, 4, 4))

    def test_dice_fd(self):
        p, q = torch.rand(6, 6, 6), torch.rand(6, 6, 6)
        self._check(lambda a, b: multiscale_dice(a, b, scales=(0, 1, 2)), p, q, which=1)

    def test_bending_fd(self):
        self._check(bending_energy, torch.randn(3, 5, 5, 5))

    def test_kernel_fd(self):
        self._check(lambda a, b: gaussian_kernel(a, b, 0.8), torch.randn(5), torch.randn(5))

    def test_mmd_fd(self):
        VI, VJ = torch.randn(3, 4), torch.randn(2, 4)
        self._check(lambda a, b: mmd_sq(a, b, 2.0), VI, VJ, which=0)
        self._check(lambda a, b: mmd_sq(a, b, 2.0), VI, VJ, which=1)
