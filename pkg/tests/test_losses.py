import math

import numpy as np
import pytest
import torch

from poselift import losses
from poselift.errors import (
    DomainError,
    NonFiniteLossError,
    PairingError,
    ShapeMismatchError,
    ZeroSkeletonError,
)
from poselift.losses import (
    LossTerms,
    LossWeights,
    derangement,
    loss_2d,
    loss_3d,
    loss_bl,
    loss_def,
    loss_def_batch,
    loss_discriminator,
    loss_generator_adv,
    loss_omega,
    loss_total,
    relative_bone_lengths,
)
from poselift.skeleton import make_topology


def _t(x):
    return torch.as_tensor(x, dtype=torch.float64)


@pytest.fixture(scope="module")
def chain5():
    # 5-joint chain: 4 bones.
    return make_topology("chain5", list("abcde"), [0, 0, 1, 2, 3])


class TestPoseLosses:
    def test_identical_inputs_zero(self):
        y = _t(np.random.default_rng(0).normal(size=(4, 17, 2)))
        assert float(loss_2d(y, y)) == 0.0
        v = _t(np.random.default_rng(1).normal(size=(4, 17, 3)))
        assert float(loss_3d(v, v)) == 0.0

    def test_single_coordinate_unit_difference(self):
        # One coordinate off by 1 with J = 17 2D joints: mean over 34 entries.
        y = torch.zeros(17, 2, dtype=torch.float64)
        y2 = y.clone()
        y2[3, 0] = 1.0
        assert float(loss_2d(y2, y)) == pytest.approx(1.0 / 34.0, abs=1e-15)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a, b = _t(rng.normal(size=(17, 2))), _t(rng.normal(size=(17, 2)))
            assert float(loss_2d(a, b)) == pytest.approx(float(loss_2d(b, a)), rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            loss_2d(torch.zeros(17, 2), torch.zeros(16, 2))


class TestDeformationLoss:
    def test_unchanged_poses_zero(self):
        rng = np.random.default_rng(3)
        vj, vk = _t(rng.normal(size=(9, 3))), _t(rng.normal(size=(9, 3)))
        assert float(loss_def(vj, vk, vj.clone(), vk.clone())) == 0.0

    def test_shared_offset_invariance(self):
        rng = np.random.default_rng(4)
        vj, vk = _t(rng.normal(size=(9, 3))), _t(rng.normal(size=(9, 3)))
        vpj, vpk = _t(rng.normal(size=(9, 3))), _t(rng.normal(size=(9, 3)))
        base = float(loss_def(vj, vk, vpj, vpk))
        offset = _t([1.7, -0.3, 2.2])
        shifted = float(loss_def(vj, vk, vpj + offset, vpk + offset))
        assert shifted == pytest.approx(base, rel=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        vj, vk = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        vpj, vpk = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        direct = np.mean(((vpj - vpk) - (vj - vk)) ** 2)
        value = float(loss_def(_t(vj), _t(vk), _t(vpj), _t(vpk)))
        assert value == pytest.approx(direct, abs=1e-12)

    def test_derangement_has_no_fixed_points(self):
        rng = np.random.default_rng(6)
        for size in (2, 3, 5, 64):
            for _ in range(20):
                perm = derangement(size, rng)
                assert not np.any(perm == np.arange(size))
                assert sorted(perm) == list(range(size))

    def test_small_batch_raises(self):
        rng = np.random.default_rng(7)
        with pytest.raises(PairingError):
            loss_def_batch(torch.zeros(1, 9, 3), torch.zeros(1, 9, 3), rng)

    def test_batch_order_invariant_under_fixed_pairing(self):
        rng = np.random.default_rng(8)
        v = _t(rng.normal(size=(6, 9, 3)))
        vp = _t(rng.normal(size=(6, 9, 3)))
        pair = derangement(6, rng)
        idx = torch.as_tensor(pair)
        base = float(loss_def(v, v[idx], vp, vp[idx]))
        order = torch.as_tensor(rng.permutation(6))
        reord = float(
            loss_def(v[order], v[idx][order], vp[order], vp[idx][order])
        )
        assert reord == pytest.approx(base, abs=1e-12)


class TestBoneLengths:
    def test_uniform_bones(self, chain5):
        pose = _t([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0]])
        b = relative_bone_lengths(pose, chain5)
        assert torch.allclose(b, torch.ones(4, dtype=torch.float64), atol=1e-12)

    def test_known_ratios(self, chain5):
        # Bone lengths (2, 1, 1, 1) -> relative (1.6, 0.8, 0.8, 0.8).
        pose = _t([[0, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]])
        b = relative_bone_lengths(pose, chain5)
        assert torch.allclose(b, _t([1.6, 0.8, 0.8, 0.8]), atol=1e-12)

    def test_scale_invariance(self, chain5):
        rng = np.random.default_rng(9)
        pose = _t(rng.normal(size=(5, 3)))
        b1 = relative_bone_lengths(pose, chain5)
        b2 = relative_bone_lengths(pose * 3.7, chain5)
        assert torch.allclose(b1, b2, atol=1e-12)

    def test_zero_skeleton_raises(self, chain5):
        with pytest.raises(ZeroSkeletonError):
            relative_bone_lengths(torch.zeros(5, 3), chain5)

    def test_output_mean_one(self, chain5):
        rng = np.random.default_rng(10)
        for _ in range(10):
            b = relative_bone_lengths(_t(rng.normal(size=(5, 3))), chain5)
            assert float(b.mean()) == pytest.approx(1.0, abs=1e-12)


class TestBoneLengthPrior:
    def _weights(self, n_bones, sigma=0.1):
        ref = np.full(n_bones, 1.0)
        return LossWeights(sigma_b=sigma, ref_bone_lengths=ref)

    def test_minimum_at_reference(self):
        # 16 equal bones at the reference: N * log(sigma_b * sqrt(2 pi)).
        topo = make_topology("chain17", [f"j{i}" for i in range(17)], [0] + list(range(16)))
        pose = torch.zeros(17, 3, dtype=torch.float64)
        pose[:, 0] = torch.arange(17, dtype=torch.float64)
        weights = self._weights(16)
        value = float(loss_bl(pose, topo, weights))
        expected = 16.0 * math.log(0.1 * math.sqrt(2 * math.pi))
        assert value == pytest.approx(expected, abs=1e-9)

    def test_any_other_lengths_score_higher(self, chain5):
        weights = self._weights(4)
        uniform = torch.zeros(5, 3, dtype=torch.float64)
        uniform[:, 0] = torch.arange(5, dtype=torch.float64)
        minimum = float(loss_bl(uniform, chain5, weights))
        rng = np.random.default_rng(11)
        for _ in range(20):
            pose = _t(rng.normal(size=(5, 3)))
            assert float(loss_bl(pose, chain5, weights)) > minimum

    def test_gradient_matches_finite_differences(self, chain5):
        weights = self._weights(4)
        rng = np.random.default_rng(12)
        pose = rng.normal(size=(5, 3))

        def value(p):
            return float(loss_bl(_t(p), chain5, weights))

        t = torch.tensor(pose, dtype=torch.float64, requires_grad=True)
        loss_bl(t, chain5, weights).backward()
        analytic = t.grad.numpy()

        h = 1e-4
        for idx in np.ndindex(pose.shape):
            pp, pm = pose.copy(), pose.copy()
            pp[idx] += h
            pm[idx] -= h
            numeric = (value(pp) - value(pm)) / (2 * h)
            scale = max(abs(numeric), abs(analytic[idx]), 1e-8)
            assert abs(numeric - analytic[idx]) / scale < 1e-4


class TestAdversarial:
    def test_perfect_discriminator_supremum(self):
        real = torch.full((8,), 1.0 - 1e-12, dtype=torch.float64)
        fake = torch.full((8,), 1e-12, dtype=torch.float64)
        assert float(loss_discriminator(real, fake)) == pytest.approx(0.0, abs=1e-9)

    def test_constant_half(self):
        half = torch.full((16,), 0.5, dtype=torch.float64)
        value = float(loss_discriminator(half, half))
        assert value == pytest.approx(2.0 * math.log(0.5), abs=1e-12)

    def test_bounded_above_by_zero(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            real = _t(rng.uniform(1e-6, 1 - 1e-6, size=8))
            fake = _t(rng.uniform(1e-6, 1 - 1e-6, size=8))
            assert float(loss_discriminator(real, fake)) <= 0.0

    def test_domain_error(self):
        with pytest.raises(DomainError):
            loss_discriminator(_t([0.5, 1.0]), _t([0.5, 0.5]))
        with pytest.raises(DomainError):
            loss_generator_adv(_t([0.0]))

    def test_generator_term(self):
        fake = _t([0.25, 0.25])
        assert float(loss_generator_adv(fake)) == pytest.approx(-math.log(0.25), rel=1e-12)


class TestOmegaLoss:
    def test_exact_inversion_zero(self):
        rng = np.random.default_rng(14)
        u = _t(rng.normal(size=(4, 9, 2)))
        img = _t(rng.uniform(0, 1, size=(4, 1, 16, 16)))
        assert float(loss_omega(u, u.clone(), img, img.clone(), 0.1)) == 0.0

    def test_pixel_term_arithmetic(self):
        # First term 0; pixel mean square 0.04 with lambda 0.1 -> 0.004.
        u = torch.zeros(2, 9, 2, dtype=torch.float64)
        img_a = torch.zeros(2, 1, 8, 8, dtype=torch.float64)
        img_b = torch.full((2, 1, 8, 8), 0.2, dtype=torch.float64)
        value = float(loss_omega(u, u, img_a, img_b, 0.1))
        assert value == pytest.approx(0.004, abs=1e-15)

    def test_lambda_scales_only_pixel_term(self):
        rng = np.random.default_rng(15)
        u_pred = _t(rng.normal(size=(2, 9, 2)))
        u = _t(rng.normal(size=(2, 9, 2)))
        img_a = _t(rng.uniform(0, 1, size=(2, 1, 8, 8)))
        img_b = _t(rng.uniform(0, 1, size=(2, 1, 8, 8)))
        v1 = float(loss_omega(u_pred, u, img_a, img_b, 0.1))
        v2 = float(loss_omega(u_pred, u, img_a, img_b, 0.2))
        joint_term = float(((u_pred - u) ** 2).mean())
        pixel_term = float(((img_a - img_b) ** 2).mean())
        assert v1 == pytest.approx(joint_term + 0.1 * pixel_term, rel=1e-12)
        assert v2 - v1 == pytest.approx(0.1 * pixel_term, rel=1e-9)


class TestTotal:
    def _terms(self, adv, omega, base, nf, bl):
        return LossTerms(
            adv=_t(adv),
            omega=_t(omega),
            pose2d=_t(base),
            pose3d=_t(0.0),
            deform=_t(0.0),
            nf=_t(nf),
            bone=_t(bl),
        )

    def test_all_zero(self):
        total, breakdown = loss_total(self._terms(0, 0, 0, 0, 0), LossWeights())
        assert float(total) == 0.0
        assert set(breakdown) == {
            "loss_d", "loss_omega", "loss_2d", "loss_3d", "loss_def",
            "loss_nf", "loss_bl",
        }

    def test_unit_weights_arithmetic(self):
        total, _ = loss_total(self._terms(0.1, 0.2, 0.3, 0.4, 0.5), LossWeights())
        assert float(total) == pytest.approx(1.5, abs=1e-12)

    def test_ablation_row_drops_prior_terms(self):
        # Zeroing the flow and bone weights reproduces the adversarial +
        # regression + base configuration of the ablation table.
        terms = self._terms(0.1, 0.2, 0.3, 0.4, 0.5)
        ablated = LossWeights(w_nf=0.0, w_bl=0.0)
        total, _ = loss_total(terms, ablated)
        assert float(total) == pytest.approx(0.1 + 0.2 + 0.3, abs=1e-12)

    def test_non_finite_term_named(self):
        terms = self._terms(0.1, float("nan"), 0.3, 0.4, 0.5)
        with pytest.raises(NonFiniteLossError, match="omega"):
            loss_total(terms, LossWeights())

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(w_nf=-1.0)
        with pytest.raises(ValueError):
            LossWeights(sigma_b=0.0)
        with pytest.raises(ValueError):
            LossWeights(ref_bone_lengths=np.array([1.5, 1.5]))


class TestGradientChecks:
    """Central finite differences vs autograd for the differentiable losses."""

    def _check(self, fn, shapes, seed, h=1e-4, tol=1e-4):
        rng = np.random.default_rng(seed)
        points = [rng.normal(size=s) for s in shapes]
        tensors = [
            torch.tensor(p, dtype=torch.float64, requires_grad=True) for p in points
        ]
        fn(*tensors).backward()
        for arg_i, (point, tensor) in enumerate(zip(points, tensors)):
            analytic = tensor.grad.numpy()
            for idx in np.ndindex(point.shape):
                pp = [p.copy() for p in points]
                pm = [p.copy() for p in points]
                pp[arg_i][idx] += h
                pm[arg_i][idx] -= h
                fp = float(fn(*[_t(p) for p in pp]))
                fm = float(fn(*[_t(p) for p in pm]))
                numeric = (fp - fm) / (2 * h)
                scale = max(abs(numeric), abs(analytic[idx]), 1e-8)
                assert abs(numeric - analytic[idx]) / scale < tol

    def test_loss_2d_gradient(self):
        self._check(loss_2d, [(3, 2), (3, 2)], seed=16)

    def test_loss_3d_gradient(self):
        self._check(loss_3d, [(3, 3), (3, 3)], seed=17)

    def test_loss_def_gradient(self):
        self._check(loss_def, [(3, 3)] * 4, seed=18)

    def test_loss_omega_gradient(self):
        def fn(u_pred, u, img_a, img_b):
            return loss_omega(u_pred, u, img_a, img_b, 0.1)

        self._check(fn, [(2, 3, 2), (2, 3, 2), (2, 1, 4, 4), (2, 1, 4, 4)], seed=19)

    def test_adversarial_gradients(self):
        def disc_fn(real_logit, fake_logit):
            return loss_discriminator(torch.sigmoid(real_logit), torch.sigmoid(fake_logit))

        self._check(disc_fn, [(4,), (4,)], seed=20)

        def gen_fn(fake_logit):
            return loss_generator_adv(torch.sigmoid(fake_logit))

        self._check(gen_fn, [(4,)], seed=21)


class TestPermutationConsistency:
    def test_batch_permutation_leaves_scalars_unchanged(self):
        rng = np.random.default_rng(22)
        a = _t(rng.normal(size=(8, 9, 2)))
        b = _t(rng.normal(size=(8, 9, 2)))
        perm = torch.as_tensor(rng.permutation(8))
        assert float(loss_2d(a, b)) == pytest.approx(
            float(loss_2d(a[perm], b[perm])), abs=1e-12
        )
        probs = _t(rng.uniform(0.1, 0.9, size=16))
        perm16 = torch.as_tensor(rng.permutation(16))
        assert float(loss_generator_adv(probs)) == pytest.approx(
            float(loss_generator_adv(probs[perm16])), abs=1e-12
        )
