import math

import pytest
import torch

from vbdeblur.elbo import (
    STD_FLOOR,
    ElboBreakdown,
    LossMode,
    data_term,
    image_entropy_term,
    kernel_kl_term,
    loss,
    prior_terms,
)
from vbdeblur.errors import NumericError, ParameterError, ShapeError
from vbdeblur.fields import BlurredObservation, KernelBelief, SharpImageBelief, convolve_valid
from vbdeblur.priors import PenaltyWeights, PriorKind, prior_weights

from conftest import make_belief, make_kernel, make_observation


class TestKernelKlTerm:
    def test_standard_normal_entry(self):
        assert float(kernel_kl_term(torch.zeros(1, 1, dtype=torch.float64), 1.0)) == pytest.approx(0.0)

    def test_unit_mean_entry(self):
        kernel = KernelBelief(torch.ones(1, 1, dtype=torch.float64), std_scalar=1.0)
        assert float(kernel_kl_term(kernel)) == pytest.approx(-0.5)

    def test_half_std_entry(self):
        value = float(kernel_kl_term(torch.zeros(1, 1, dtype=torch.float64), 0.5))
        assert value == pytest.approx(0.5 * (1.0 + 2.0 * math.log(0.5) - 0.25), abs=1e-6)
        assert value == pytest.approx(-0.31816, abs=1e-4)

    def test_invalid_std_rejected(self):
        with pytest.raises(ParameterError):
            kernel_kl_term(torch.zeros(2, 2), 0.0)


class TestImageEntropyTerm:
    def _one_pixel(self, s):
        return SharpImageBelief(torch.full((1, 1, 1), 0.5, dtype=torch.float64),
                                torch.full((1, 1, 1), s, dtype=torch.float64))

    def test_unit_std(self):
        value = float(image_entropy_term(self._one_pixel(1.0)))
        assert value == pytest.approx(0.5 * (math.log(2 * math.pi) + 1.0), abs=1e-9)
        assert value == pytest.approx(1.41894, abs=1e-5)

    def test_entropy_zero_point(self):
        s = (2.0 * math.pi * math.e) ** -0.5
        assert float(image_entropy_term(self._one_pixel(s))) == pytest.approx(0.0, abs=1e-12)

    def test_floor_keeps_term_finite(self):
        value = float(image_entropy_term(self._one_pixel(0.0)))
        expected = 0.5 * (math.log(2 * math.pi) + 1.0 + 2.0 * math.log(STD_FLOOR))
        assert value == pytest.approx(expected)
        assert math.isfinite(value)

    def test_monotone_in_std(self):
        belief = make_belief(shape=(1, 4, 4), seed=1)
        base = float(image_entropy_term(belief))
        bumped = SharpImageBelief(belief.mean, belief.std + 0.01)
        assert float(image_entropy_term(bumped)) > base


class TestPriorTerms:
    def test_single_pixel_weight(self):
        # one active pixel with E[(F_x I)^2] = 0.14 and weight 0.25
        mean = torch.tensor([[[0.5], [0.8]]], dtype=torch.float64)
        std = torch.tensor([[[0.2], [0.1]]], dtype=torch.float64)
        belief = SharpImageBelief(mean, std)
        wx = torch.zeros(1, 2, 1, dtype=torch.float64)
        wx[0, 1, 0] = 0.25
        weights = PenaltyWeights(wx, torch.zeros(1, 2, 1, dtype=torch.float64))
        px, py = prior_terms(belief, weights, PriorKind.sparse())
        assert float(px) == pytest.approx(-0.00875)
        assert float(py) == 0.0

    def test_flat_belief_gives_zero(self):
        belief = SharpImageBelief(torch.full((1, 5, 5), 0.3, dtype=torch.float64),
                                  torch.zeros(1, 5, 5, dtype=torch.float64))
        weights = prior_weights(belief, PriorKind.sparse())
        px, py = prior_terms(belief, weights, PriorKind.sparse())
        assert float(px) == 0.0 and float(py) == 0.0

    def test_extreme_dark_channel_zero_image(self):
        belief = SharpImageBelief(torch.zeros(1, 6, 6, dtype=torch.float64),
                                  torch.zeros(1, 6, 6, dtype=torch.float64))
        kind = PriorKind.extreme(patch_radius=1)
        gen = torch.Generator().manual_seed(0)
        weights = prior_weights(belief, kind, num_samples=2, rng=gen)
        px, _ = prior_terms(belief, weights, kind, num_samples=2, rng=gen)
        assert float(px) == 0.0

    def test_terms_are_nonpositive(self):
        belief = make_belief(shape=(1, 7, 7), seed=12)
        for kind in (PriorKind.sparse(), PriorKind.extreme(patch_radius=2)):
            gen = torch.Generator().manual_seed(3)
            weights = prior_weights(belief, kind, num_samples=2, rng=gen)
            px, py = prior_terms(belief, weights, kind, num_samples=2, rng=gen)
            assert float(px) <= 0.0 and float(py) <= 0.0

    def test_none_family_returns_zeros(self):
        belief = make_belief()
        px, py = prior_terms(belief, None, PriorKind.none())
        assert float(px) == 0.0 and float(py) == 0.0

    def test_active_prior_requires_weights(self):
        belief = make_belief()
        with pytest.raises(ParameterError):
            prior_terms(belief, None, PriorKind.sparse())

    def test_sparse_weakly_decreasing_in_std(self):
        belief = make_belief(shape=(1, 6, 6), seed=4, std_scale=0.05)
        weights = prior_weights(belief, PriorKind.sparse())
        px0, py0 = prior_terms(belief, weights, PriorKind.sparse())
        std = belief.std.clone()
        std[0, 3, 3] += 0.05
        bumped = SharpImageBelief(belief.mean, std)
        px1, py1 = prior_terms(bumped, weights, PriorKind.sparse())
        assert float(px1) <= float(px0)
        assert float(py1) <= float(py0)


class TestDataTerm:
    def test_perfect_reconstruction_is_zero(self):
        belief = make_belief(shape=(1, 6, 6), seed=5, std_scale=0.0)
        delta = torch.zeros(3, 3, dtype=torch.float64)
        delta[1, 1] = 1.0
        kernel = KernelBelief(delta)
        obs = BlurredObservation(belief.mean[:, 1:5, 1:5].clone(), noise_sigma=0.5)
        assert float(data_term(obs, belief, kernel)) == 0.0

    def test_scaled_sse(self):
        # SSE 0.5 at sigma 0.5 gives -0.5 / (2 * 0.25) = -1.0
        mean = torch.zeros(1, 2, 1, dtype=torch.float64)
        mean[0, 0, 0] = 0.5
        mean[0, 1, 0] = 0.5
        belief = SharpImageBelief(mean, torch.zeros_like(mean))
        kernel = KernelBelief(torch.ones(1, 1, dtype=torch.float64))
        obs = BlurredObservation(torch.zeros(1, 2, 1, dtype=torch.float64), noise_sigma=0.5)
        assert float(data_term(obs, belief, kernel)) == pytest.approx(-1.0)

    def test_matches_analytic_expectation(self):
        belief = make_belief(shape=(1, 8, 8), seed=31, std_scale=0.2)
        kernel = make_kernel((3, 3), seed=32)
        obs = make_observation(belief, kernel, seed=33, sigma=0.3)
        closed = -(float(((obs.image - convolve_valid(belief.mean, kernel.mean)) ** 2).sum())
                   + float(convolve_valid(belief.std**2, kernel.mean**2).sum())) / (2 * 0.3**2)
        gen = torch.Generator().manual_seed(34)
        with torch.no_grad():
            sampled = float(data_term(obs, belief, kernel, num_samples=100_000, rng=gen))
        assert abs(sampled - closed) / abs(closed) < 0.01

    def test_seed_invariant_with_zero_std(self):
        belief = make_belief(shape=(1, 8, 8), seed=41, std_scale=0.0)
        kernel = make_kernel((3, 3), seed=42)
        obs = make_observation(belief, kernel, seed=43)
        a = float(data_term(obs, belief, kernel, rng=torch.Generator().manual_seed(1)))
        b = float(data_term(obs, belief, kernel, rng=torch.Generator().manual_seed(2)))
        assert a == b

    def test_invalid_sample_count(self):
        belief = make_belief()
        kernel = make_kernel()
        obs = make_observation(belief, kernel)
        with pytest.raises(ParameterError):
            data_term(obs, belief, kernel, num_samples=0)

    def test_shape_mismatch_raises(self):
        belief = make_belief(shape=(1, 8, 8))
        kernel = make_kernel((3, 3))
        obs = BlurredObservation(torch.rand(1, 5, 5), noise_sigma=0.1)
        with pytest.raises(ShapeError):
            data_term(obs, belief, kernel)


class TestLoss:
    def test_dip_perfect_reconstruction(self):
        belief = make_belief(shape=(1, 6, 6), seed=6, std_scale=0.0)
        delta = torch.zeros(3, 3, dtype=torch.float64)
        delta[1, 1] = 1.0
        kernel = KernelBelief(delta)
        obs = BlurredObservation(belief.mean[:, 1:5, 1:5].clone(), noise_sigma=0.5)
        value, breakdown = loss(LossMode(False, PriorKind.none()), obs, belief, kernel)
        assert float(value) == 0.0
        assert breakdown.kernel_kl == 0.0 and breakdown.image_entropy == 0.0

    def test_breakdown_total_is_sum_of_parts(self):
        belief = make_belief(shape=(1, 8, 8), seed=7)
        kernel = make_kernel((3, 3), seed=8)
        obs = make_observation(belief, kernel, seed=9)
        for mode in (LossMode(True, PriorKind.sparse()), LossMode(True, PriorKind.none()),
                     LossMode(False, PriorKind.sparse())):
            value, b = loss(mode, obs, belief, kernel, rng=torch.Generator().manual_seed(0))
            parts = b.kernel_kl + b.image_entropy + b.prior_x + b.prior_y + b.data
            assert b.total == pytest.approx(parts, abs=1e-9)
            assert float(value) == pytest.approx(-b.total, rel=1e-12, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_degenerates_to_point_estimate_loss(self, seed):
        """Zero std + dropped KL/entropy must reproduce the point-estimate
        sparse loss exactly, term by term."""
        belief = make_belief(shape=(1, 7, 7), seed=seed, std_scale=0.0)
        kernel = make_kernel((3, 3), seed=seed + 50)
        obs = make_observation(belief, kernel, seed=seed + 100, sigma=0.4)
        _, vb = loss(LossMode(True, PriorKind.sparse()), obs, belief, kernel,
                     rng=torch.Generator().manual_seed(seed))
        dip_value, db = loss(LossMode(False, PriorKind.sparse()), obs, belief, kernel,
                             rng=torch.Generator().manual_seed(seed))
        assert vb.prior_x == db.prior_x
        assert vb.prior_y == db.prior_y
        assert vb.data == db.data
        assert float(dip_value) == -(db.prior_x + db.prior_y + db.data)
        assert float(dip_value) == -(vb.prior_x + vb.prior_y + vb.data)

    def test_dip_mode_ignores_std(self):
        belief = make_belief(shape=(1, 6, 6), seed=13, std_scale=0.2)
        kernel = make_kernel((3, 3), seed=14)
        obs = make_observation(belief, kernel, seed=15)
        a, _ = loss(LossMode(False, PriorKind.sparse()), obs, belief, kernel,
                    rng=torch.Generator().manual_seed(0))
        b, _ = loss(LossMode(False, PriorKind.sparse()), obs, belief.with_zero_std(), kernel,
                    rng=torch.Generator().manual_seed(0))
        assert float(a) == float(b)

    def test_non_finite_term_is_named(self):
        belief = make_belief(shape=(1, 6, 6), seed=16)
        kernel = make_kernel((3, 3), seed=17)
        obs = make_observation(belief, kernel, seed=18)
        obs.image[0, 2, 2] = float("nan")
        with pytest.raises(NumericError, match="data"):
            loss(LossMode(True, PriorKind.none()), obs, belief, kernel,
                 rng=torch.Generator().manual_seed(0))


class TestGradients:
    def _setup(self, seed=0):
        belief = make_belief(shape=(1, 6, 6), seed=seed, std_scale=0.08, margin=0.2)
        kernel = make_kernel((3, 3), seed=seed + 1)
        obs = make_observation(belief, kernel, seed=seed + 2, sigma=0.5)
        mode = LossMode(True, PriorKind.sparse())
        weights = prior_weights(belief, mode.prior)
        return mode, obs, belief, kernel, weights

    def _loss_value(self, mode, obs, belief, kernel, weights):
        value, _ = loss(mode, obs, belief, kernel, num_samples=1,
                        rng=torch.Generator().manual_seed(7), weights=weights)
        return value

    def test_every_field_partial_matches_finite_differences(self):
        mode, obs, belief0, kernel0, weights = self._setup()
        mean = belief0.mean.clone().requires_grad_(True)
        std = belief0.std.clone().requires_grad_(True)
        kmean = kernel0.mean.clone().requires_grad_(True)
        belief = SharpImageBelief(mean, std)
        kernel = KernelBelief(kmean, kernel0.std_scalar)

        value = self._loss_value(mode, obs, belief, kernel, weights)
        value.backward()
        h = 1e-4
        for tensor in (mean, std, kmean):
            grad = tensor.grad.reshape(-1)
            # perturb in place so the validated belief/kernel objects are reused
            flat = tensor.data.reshape(-1)
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(self._loss_value(mode, obs, belief, kernel, weights).detach())
                flat[idx] = orig - h
                down = float(self._loss_value(mode, obs, belief, kernel, weights).detach())
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = float(grad[idx])
                assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd)) + 1e-7, (
                    f"partial {idx} mismatch: analytic {an}, finite-difference {fd}"
                )
