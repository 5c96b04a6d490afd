"""Loss semantics against scalar/pixel-loop oracles, identity properties,
and finite-difference gradient verification."""
import math

import numpy as np
import pytest

from divsynth import autodiff as ad
from divsynth import losses as ls
from divsynth.data import SemanticLayout, NoiseVector
from divsynth.models import FeatureExtractor


def t64(arr):
    return ad.tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64)


def seg_l1_ref(a, b, layout, c):
    """Pixel-loop oracle for the segmentwise distance."""
    total, count = 0.0, 0
    for y in range(layout.height):
        for x in range(layout.width):
            if layout.pixels[y, x] == c:
                for ch in range(3):
                    total += abs(a[ch, y, x] - b[ch, y, x])
                    count += 1
    return total / count if count else 0.0


def random_pair(rng, layout):
    shape = (3, layout.height, layout.width)
    return t64(rng.uniform(0, 1, shape)), t64(rng.uniform(0, 1, shape))


class TestSegmentwiseL1:
    def test_identical_images_zero(self):
        layout = SemanticLayout(np.array([[0, 1], [1, 0]], dtype=np.uint8), classes=2)
        a = t64(np.random.default_rng(0).uniform(0, 1, (3, 2, 2)))
        for c in range(2):
            assert ls.segmentwise_l1(a, a, layout, c).item() == 0.0

    def test_constant_offset_single_class(self):
        layout = SemanticLayout(np.zeros((3, 3), dtype=np.uint8), classes=1)
        a = t64(np.full((3, 3, 3), 0.2))
        b = t64(np.full((3, 3, 3), 0.7))
        assert abs(ls.segmentwise_l1(a, b, layout, 0).item() - 0.5) < 1e-12

    def test_two_band_layout(self):
        # |a-b| constant per pixel across channels: [[0.2,0.4],[0.6,0.8]]
        layout = SemanticLayout(np.array([[0, 0], [1, 1]], dtype=np.uint8), classes=2)
        diff = np.array([[0.2, 0.4], [0.6, 0.8]])
        a = t64(np.zeros((3, 2, 2)))
        b = t64(np.broadcast_to(diff, (3, 2, 2)))
        assert abs(ls.segmentwise_l1(a, b, layout, 0).item() - 0.3) < 1e-12
        assert abs(ls.segmentwise_l1(a, b, layout, 1).item() - 0.7) < 1e-12
        assert abs(seg_l1_ref(a.data, b.data, layout, 0) - 0.3) < 1e-12

    def test_matches_pixel_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            layout = SemanticLayout(rng.integers(0, 3, (4, 5)).astype(np.uint8), classes=3)
            a, b = random_pair(rng, layout)
            for c in range(3):
                expected = seg_l1_ref(a.data, b.data, layout, c)
                got = ls.segmentwise_l1(a, b, layout, c).item()
                assert abs(got - expected) < 1e-12

    def test_absent_class_is_zero(self):
        layout = SemanticLayout(np.zeros((2, 2), dtype=np.uint8), classes=3)
        rng = np.random.default_rng(2)
        a, b = random_pair(rng, layout)
        assert ls.segmentwise_l1(a, b, layout, 2).item() == 0.0

    def test_invalid_class_rejected(self):
        layout = SemanticLayout(np.zeros((2, 2), dtype=np.uint8), classes=2)
        a = t64(np.zeros((3, 2, 2)))
        with pytest.raises(ls.LossError, match="out of range"):
            ls.segmentwise_l1(a, a, layout, 5)

    def test_partition_identity(self):
        # sum_c (pixels_c/HW) * seg_c == global mean L1
        rng = np.random.default_rng(3)
        for _ in range(20):
            layout = SemanticLayout(rng.integers(0, 4, (6, 6)).astype(np.uint8), classes=4)
            a, b = random_pair(rng, layout)
            hw = layout.height * layout.width
            acc = 0.0
            for c in range(4):
                w_c = np.count_nonzero(layout.pixels == c) / hw
                acc += w_c * ls.segmentwise_l1(a, b, layout, c).item()
            assert abs(acc - ls.global_l1(a, b).item()) < 1e-6


class TestAdversarialLosses:
    def test_disc_half_scores(self):
        d = t64(np.full((1, 2, 2), 0.5))
        expected = 2 * math.log(0.5)
        assert abs(ls.loss_discriminator(d, d).item() - expected) < 1e-9

    def test_disc_supremum(self):
        d_real = t64(np.full((1, 2, 2), 1.0 - 1e-7))
        d_fake = t64(np.full((1, 2, 2), 1e-7))
        assert abs(ls.loss_discriminator(d_real, d_fake).item()) < 1e-5

    def test_disc_point_nine(self):
        d_real = t64(np.full((1, 1, 1), 0.9))
        d_fake = t64(np.full((1, 1, 1), 0.1))
        expected = math.log(0.9) + math.log(0.9)
        assert abs(ls.loss_discriminator(d_real, d_fake).item() - expected) < 1e-9

    def test_gen_perfect_fake(self):
        rng = np.random.default_rng(4)
        img = t64(rng.uniform(0, 1, (3, 4, 4)))
        d = t64(np.full((1, 2, 2), 0.5))
        got = ls.loss_generator(d, img, img, alpha=100.0).item()
        assert abs(got - math.log(0.5)) < 1e-9

    def test_gen_alpha_zero_is_pure_adversarial(self):
        rng = np.random.default_rng(5)
        fake = t64(rng.uniform(0, 1, (3, 4, 4)))
        real = t64(rng.uniform(0, 1, (3, 4, 4)))
        d = t64(np.full((1, 2, 2), 0.3))
        got = ls.loss_generator(d, fake, real, alpha=0.0).item()
        assert abs(got - math.log(0.7)) < 1e-9

    def test_gen_constant_offset(self):
        real = t64(np.full((3, 4, 4), 0.4))
        fake = t64(np.full((3, 4, 4), 0.5))
        d = t64(np.full((1, 2, 2), 0.5))
        got = ls.loss_generator(d, fake, real, alpha=100.0).item()
        assert abs(got - (math.log(0.5) + 10.0)) < 1e-9


@pytest.fixture(scope="module")
def phi64():
    return FeatureExtractor(stages=2, base_width=4, seed=55, dtype=np.float64)


class TestContentLosses:

    def test_equal_images_zero(self, phi64):
        rng = np.random.default_rng(6)
        img = t64(rng.uniform(0, 1, (3, 8, 8)))
        img2 = t64(img.data.copy())
        assert ls.loss_content(img, img2, phi64, [0.5, 0.5]).item() == 0.0

    def test_linear_in_weights(self, phi64):
        rng = np.random.default_rng(7)
        a = t64(rng.uniform(0, 1, (3, 8, 8)))
        b = t64(rng.uniform(0, 1, (3, 8, 8)))
        one = ls.loss_content(a, b, phi64, [0.5, 0.5]).item()
        two = ls.loss_content(a, b, phi64, [1.0, 1.0]).item()
        assert abs(two - 2 * one) < 1e-12

    def test_single_stage_constant_feature_gap(self):
        # features differing by a constant 0.3 with weight 1 -> loss 0.3
        phi = FeatureExtractor(stages=1, base_width=2, seed=9, dtype=np.float64)
        rng = np.random.default_rng(8)
        img = t64(rng.uniform(0, 1, (3, 8, 8)))
        feats = phi.features(img)
        shifted = [t64(feats[0].data + 0.3)]
        got = ls.loss_content(img, shifted, phi, [1.0]).item()
        assert abs(got - 0.3) < 1e-12

    def test_precomputed_real_features_match(self, phi64):
        rng = np.random.default_rng(9)
        a = t64(rng.uniform(0, 1, (3, 8, 8)))
        b = t64(rng.uniform(0, 1, (3, 8, 8)))
        direct = ls.loss_content(a, b, phi64, [0.5, 0.5]).item()
        cached = ls.loss_content(a, phi64.features(b), phi64, [0.5, 0.5]).item()
        assert direct == cached

    def test_hindsight_reduces_to_content_for_one(self, phi64):
        rng = np.random.default_rng(10)
        a = t64(rng.uniform(0, 1, (3, 8, 8)))
        b = t64(rng.uniform(0, 1, (3, 8, 8)))
        assert ls.loss_hindsight([a], b, phi64, [0.5, 0.5]).item() == \
            ls.loss_content(a, b, phi64, [0.5, 0.5]).item()

    def test_hindsight_takes_minimum(self, phi64):
        rng = np.random.default_rng(11)
        real = t64(rng.uniform(0, 1, (3, 8, 8)))
        outs = [t64(rng.uniform(0, 1, (3, 8, 8))) for _ in range(3)]
        per = [ls.loss_content(o, real, phi64, [0.5, 0.5]).item() for o in outs]
        got = ls.loss_hindsight(outs, real, phi64, [0.5, 0.5]).item()
        assert got == min(per)

    def test_hindsight_identical_outputs(self, phi64):
        rng = np.random.default_rng(12)
        real = t64(rng.uniform(0, 1, (3, 8, 8)))
        out = t64(rng.uniform(0, 1, (3, 8, 8)))
        outs = [out, t64(out.data.copy()), t64(out.data.copy())]
        assert ls.loss_hindsight(outs, real, phi64, [0.5, 0.5]).item() == \
            ls.loss_content(out, real, phi64, [0.5, 0.5]).item()

    def test_hindsight_gradient_only_to_argmin(self, phi64):
        rng = np.random.default_rng(13)
        real = t64(rng.uniform(0, 1, (3, 8, 8)))
        far = ad.tensor(rng.uniform(0, 1, (3, 8, 8)), dtype=np.float64, requires_grad=True)
        near = ad.tensor(real.data + 0.01 * rng.uniform(size=(3, 8, 8)),
                         dtype=np.float64, requires_grad=True)
        loss = ls.loss_hindsight([far, near], real, phi64, [0.5, 0.5])
        tape = ad.backward(loss)
        assert np.all(tape.grad(far) == 0)
        assert np.any(tape.grad(near) != 0)

    def test_hindsight_empty_rejected(self, phi64):
        with pytest.raises(ls.LossError, match="empty"):
            ls.loss_hindsight([], t64(np.zeros((3, 8, 8))), phi64, [0.5, 0.5])


def two_class_layout():
    px = np.zeros((4, 4), dtype=np.uint8)
    px[2:] = 1
    return SemanticLayout(px, classes=2)


class TestDiversityLosses:
    def test_unconditional_zero_noise(self):
        rng = np.random.default_rng(14)
        layout = two_class_layout()
        a, b = random_pair(rng, layout)
        assert ls.diversity_unconditional(a, b, NoiseVector.zero(2)).item() == 0.0

    def test_unconditional_equal_images(self):
        layout = two_class_layout()
        a = t64(np.random.default_rng(15).uniform(0, 1, (3, 4, 4)))
        n = NoiseVector(np.array([0.5, -0.5]))
        assert ls.diversity_unconditional(a, a, n).item() == 0.0

    def test_unconditional_scalar_example(self):
        # mean |n| = 0.5, mean L1 = 0.2 -> -0.1
        a = t64(np.zeros((3, 2, 2)))
        b = t64(np.full((3, 2, 2), 0.2))
        n = NoiseVector(np.array([0.5, 0.5]))
        assert abs(ls.diversity_unconditional(a, b, n).item() - (-0.1)) < 1e-9

    def test_unconditional_nonpositive(self):
        rng = np.random.default_rng(16)
        layout = two_class_layout()
        for _ in range(20):
            a, b = random_pair(rng, layout)
            n = NoiseVector.sample(2, rng)
            assert ls.diversity_unconditional(a, b, n).item() <= 0.0

    def test_bilinearity(self):
        rng = np.random.default_rng(17)
        a = t64(rng.uniform(0, 1, (3, 4, 4)))
        delta = rng.uniform(-0.2, 0.2, (3, 4, 4))
        n = NoiseVector(np.array([0.4, 0.8]))
        base = ls.diversity_unconditional(a, t64(a.data + delta), n).item()
        half_n = NoiseVector(n.entries * 0.5)
        assert abs(ls.diversity_unconditional(a, t64(a.data + delta), half_n).item()
                   - 0.5 * base) < 1e-9
        assert abs(ls.diversity_unconditional(a, t64(a.data + 0.5 * delta), n).item()
                   - 0.5 * base) < 1e-9

    def test_segmentwise_zero_noise(self):
        rng = np.random.default_rng(18)
        layout = two_class_layout()
        a, b = random_pair(rng, layout)
        assert ls.diversity_segmentwise(a, b, layout, NoiseVector.zero(2)).item() == 0.0

    def test_segmentwise_single_class_reduces_to_global(self):
        layout = SemanticLayout(np.zeros((4, 4), dtype=np.uint8), classes=1)
        rng = np.random.default_rng(19)
        a, b = random_pair(rng, layout)
        n = NoiseVector(np.array([0.7]))
        seg = ls.diversity_segmentwise(a, b, layout, n).item()
        expected = -0.7 * ls.global_l1(a, b).item()
        assert abs(seg - expected) < 1e-12

    def test_segmentwise_scalar_example(self):
        # |n| = (0.5, 1.0), segment distances (0.3, 0.1) -> -0.25
        layout = two_class_layout()
        diff = np.zeros((3, 4, 4))
        diff[:, :2, :] = 0.3
        diff[:, 2:, :] = 0.1
        a = t64(np.zeros((3, 4, 4)))
        b = t64(diff)
        n = NoiseVector(np.array([0.5, 1.0]))
        assert abs(ls.diversity_segmentwise(a, b, layout, n).item() - (-0.25)) < 1e-9

    def test_segmentwise_recovers_unconditional_up_to_class_count(self):
        # with equal per-class distances and one shared |n^c| magnitude the
        # two mean-normalized losses agree up to the class-count factor
        layout = two_class_layout()
        a = t64(np.zeros((3, 4, 4)))
        b = t64(np.full((3, 4, 4), 0.2))
        n = NoiseVector(np.array([0.6, -0.6]))
        seg = ls.diversity_segmentwise(a, b, layout, n).item()
        unc = ls.diversity_unconditional(a, b, n).item()
        assert abs(seg - layout.classes * unc) < 1e-9
        assert abs(unc - (-0.6 * 0.2)) < 1e-9

    def test_hinged_zero_noise(self):
        rng = np.random.default_rng(20)
        layout = two_class_layout()
        a, b = random_pair(rng, layout)
        assert ls.diversity_hinged(a, b, layout, NoiseVector.zero(2), 0.3).item() == 0.0

    def test_hinged_saturated(self):
        layout = two_class_layout()
        a = t64(np.zeros((3, 4, 4)))
        b = t64(np.full((3, 4, 4), 0.5))  # every distance 0.5 >= 0.3
        n = NoiseVector(np.array([0.9, -0.4]))
        assert ls.diversity_hinged(a, b, layout, n, 0.3).item() == 0.0

    def test_hinged_scalar_example(self):
        # |n| = (0.5, 1.0), distances (0.1, 0.4), bound 0.3 -> 0.5*0.2 = 0.10
        layout = two_class_layout()
        diff = np.zeros((3, 4, 4))
        diff[:, :2, :] = 0.1
        diff[:, 2:, :] = 0.4
        a, b = t64(np.zeros((3, 4, 4))), t64(diff)
        n = NoiseVector(np.array([0.5, 1.0]))
        got = ls.diversity_hinged(a, b, layout, n, 0.3).item()
        assert abs(got - 0.10) < 1e-9

    def test_hinged_nonnegative(self):
        rng = np.random.default_rng(21)
        layout = two_class_layout()
        for _ in range(20):
            a, b = random_pair(rng, layout)
            n = NoiseVector.sample(2, rng)
            assert ls.diversity_hinged(a, b, layout, n, 0.3).item() >= 0.0

    def test_hinge_monotonicity(self):
        # growing one class's distance weakly decreases the loss, flat past the bound
        layout = two_class_layout()
        n = NoiseVector(np.array([0.8, 0.3]))
        prev = None
        for dist in np.linspace(0.0, 0.6, 13):
            diff = np.zeros((3, 4, 4))
            diff[:, :2, :] = dist
            val = ls.diversity_hinged(t64(np.zeros((3, 4, 4))), t64(diff), layout, n, 0.3).item()
            if prev is not None:
                assert val <= prev + 1e-12
            if dist >= 0.3:
                assert abs(val - 0.3 * 0.3) < 1e-9  # only the untouched class remains
            prev = val

    def test_absent_class_contributes_zero(self):
        layout = SemanticLayout(np.zeros((4, 4), dtype=np.uint8), classes=3)
        rng = np.random.default_rng(22)
        a, b = random_pair(rng, layout)
        n_only_absent = NoiseVector(np.array([0.0, 0.9, 0.9]))
        assert ls.diversity_hinged(a, a, layout, n_only_absent, 0.3).item() == 0.0


class TestCombinedObjective:
    def test_beta_zero(self):
        base, div = t64(1.5), t64(0.3)
        assert ls.objective_combined(base, div, 0.0).item() == 1.5

    def test_scalar_example(self):
        base, div = t64(1.0), t64(0.1)
        assert abs(ls.objective_combined(base, div, 10.0).item() - 2.0) < 1e-12

    def test_config_defaults_and_validation(self):
        cfg = ls.LossConfig()
        assert cfg.alpha == 100.0 and cfg.lambda_c == 0.3
        np.testing.assert_array_equal(cfg.lambda_for(4), [0.3] * 4)
        with pytest.raises(ls.LossError):
            ls.LossConfig(beta=-1)
        with pytest.raises(ls.LossError):
            ls.LossConfig(lambda_k=(0.0, 0.0))
        with pytest.raises(ls.LossError):
            ls.LossConfig(lambda_c=-0.1)


class TestLossGradients:
    """Finite-difference verification of every loss w.r.t. its image or
    score arguments; 64-bit, step 1e-4, tolerance 1e-4."""

    STEP = 1e-4
    TOL = 1e-4

    def check(self, fn, point, mode="central"):
        report = ad.gradient_check(fn, point, step=self.STEP, tolerance=self.TOL, mode=mode)
        assert report.passed, f"rel err {report.max_rel_error:.2e} at {report.worst_index}"

    def away_from_hinge(self, layout, b_data, noise, lam, rng, margin=5e-3):
        """Shift the second image until no class distance sits within
        ``margin`` of the hinge bound (central differences need clearance)."""
        a = np.zeros_like(b_data)
        for _ in range(50):
            ok = True
            at = t64(a)
            bt = t64(b_data)
            for c in layout.present_classes():
                d = ls.segmentwise_l1(at, bt, layout, c).item()
                if abs(d - lam) < margin:
                    ok = False
            if ok:
                return b_data
            b_data = np.clip(b_data + rng.uniform(0.01, 0.03), 0, 1)
        raise AssertionError("could not find a hinge-clear point")

    def test_discriminator_loss_grads(self):
        rng = np.random.default_rng(30)
        other = t64(rng.uniform(0.1, 0.9, (1, 2, 2)))
        for _ in range(10):
            p = t64(rng.uniform(0.1, 0.9, (1, 2, 2)))
            self.check(lambda x: ls.loss_discriminator(x, other), p)
            self.check(lambda x: ls.loss_discriminator(other, x), p)

    def test_generator_loss_grads(self):
        rng = np.random.default_rng(31)
        real = t64(rng.uniform(0, 1, (3, 4, 4)))
        d = t64(rng.uniform(0.1, 0.9, (1, 2, 2)))
        for _ in range(10):
            fake = t64(rng.uniform(0, 1, (3, 4, 4)))
            self.check(lambda x: ls.loss_generator(d, x, real, alpha=7.0), fake)
            self.check(lambda x: ls.loss_generator(x, fake, real, alpha=7.0),
                       t64(rng.uniform(0.1, 0.9, (1, 2, 2))))

    def draw_feature_clear_pair(self, rng, phi, margin=0.02):
        # probe pairs whose feature differences sit clear of the abs kink
        # and whose pixels sit clear of the chroma log-clamp thresholds
        for _ in range(200):
            a = t64(rng.uniform(0.15, 0.85, (3, 8, 8)))
            b = t64(rng.uniform(0.15, 0.85, (3, 8, 8)))
            fa_list, fb_list = phi.features(a), phi.features(b)
            diffs = [np.abs(fa.data - fb.data).min()
                     for fa, fb in zip(fa_list, fb_list)]
            act = min(np.abs(fa.data).min() for fa in fa_list)
            if min(diffs) > margin and act > margin:
                return a, b
        raise AssertionError("no kink-clear content pair found")

    def test_content_loss_grads(self):
        phi = FeatureExtractor(stages=2, base_width=4, seed=60, dtype=np.float64)
        rng = np.random.default_rng(32)
        for _ in range(10):
            fake, real = self.draw_feature_clear_pair(rng, phi)
            self.check(lambda x: ls.loss_content(x, real, phi, [0.6, 0.4]), fake)

    def test_hindsight_loss_grads(self):
        phi = FeatureExtractor(stages=1, base_width=4, seed=61, dtype=np.float64)
        rng = np.random.default_rng(33)
        fixed = t64(rng.uniform(0, 1, (3, 8, 8)) + 2.0)  # loss stays far above x's
        for _ in range(10):
            x, real = self.draw_feature_clear_pair(rng, phi)
            self.check(lambda x_: ls.loss_hindsight([x_, fixed], real, phi, [1.0]), x)

    def test_unconditional_diversity_grads(self):
        rng = np.random.default_rng(34)
        layout = two_class_layout()
        n = NoiseVector(np.array([0.7, -0.4]))
        for _ in range(10):
            a, b = random_pair(rng, layout)
            # keep |a-b| off zero so the abs kink stays clear of the FD step
            b = t64(np.where(np.abs(a.data - b.data) < 0.01, b.data + 0.05, b.data))
            self.check(lambda x: ls.diversity_unconditional(x, b, n), a)

    def test_segmentwise_diversity_grads(self):
        rng = np.random.default_rng(35)
        layout = two_class_layout()
        n = NoiseVector(np.array([0.9, -0.8]))
        for _ in range(10):
            a, b = random_pair(rng, layout)
            b = t64(np.where(np.abs(a.data - b.data) < 0.01, b.data + 0.05, b.data))
            self.check(lambda x: ls.diversity_segmentwise(x, b, layout, n), a)

    def test_hinged_diversity_grads(self):
        rng = np.random.default_rng(36)
        layout = two_class_layout()
        n = NoiseVector(np.array([0.9, -0.8]))
        for _ in range(10):
            a, b = random_pair(rng, layout)
            b = t64(np.where(np.abs(a.data - b.data) < 0.01, b.data + 0.05, b.data))
            bd = self.away_from_hinge(layout, b.data, n, 0.3, rng)
            self.check(lambda x: ls.diversity_hinged(x, t64(bd), layout, n, 0.3), a)

    def test_hinged_diversity_at_kink_one_sided(self):
        # a point sitting exactly on the hinge bound (0.25 is exact in binary,
        # so the segment mean hits the kink dead on): the central difference
        # straddles the kink, so compare one-sided instead.
        layout = SemanticLayout(np.zeros((2, 2), dtype=np.uint8), classes=1)
        lam = 0.25
        a = t64(np.zeros((3, 2, 2)))
        b = t64(np.full((3, 2, 2), lam))  # distance exactly at the bound
        n = NoiseVector(np.array([1.0]))
        # analytic subgradient takes the zero branch at the kink
        leaf = ad.tensor(b.data, dtype=np.float64, requires_grad=True)
        tape = ad.backward(ls.diversity_hinged(a, leaf, layout, n, lam))
        np.testing.assert_array_equal(tape.grad(leaf), 0.0)
        # the zero branch matches the forward one-sided difference (distance
        # grows past the bound, loss stays 0) ...
        fd_up = ad.finite_difference(
            lambda x: ls.diversity_hinged(a, x, layout, n, lam), b,
            step=self.STEP, mode="forward")
        np.testing.assert_allclose(fd_up, 0.0, atol=1e-9)
        # ... while the other side sees the active-branch slope -1/12
        fd_down = ad.finite_difference(
            lambda x: ls.diversity_hinged(a, x, layout, n, lam), b,
            step=self.STEP, mode="backward")
        np.testing.assert_allclose(fd_down, -1.0 / 12.0, rtol=1e-6)
