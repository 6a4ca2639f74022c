"""The variational lower bound (training objective) and its term breakdown.

The bound over the image belief, kernel belief, and penalty weights is

    total = kernel_kl + image_entropy + prior_x + prior_y + data,

maximized by the solver; the returned scalar loss is its negation.  Each
closed-form term keeps its additive constants so the breakdown is
self-consistent; constants do not affect gradients.

Two non-variational baseline modes reuse the same terms with the std field
forced to zero and the kernel-KL / entropy contributions dropped:

* point estimate ("dip"): loss = ||I_b - k (x) E(I)||^2 / (2 sigma^2),
* point estimate + prior: the same plus the weighted prior penalties.

The data fidelity in all modes carries the 1/(2 sigma^2) Gaussian
log-likelihood scale, so the variational objective with zero std and the
KL/entropy terms removed coincides exactly with the baseline-plus-prior
loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import priors
from .errors import NumericError, ParameterError, ShapeError
from .fields import BlurredObservation, KernelBelief, SharpImageBelief, convolve_valid
from .priors import PenaltyWeights, PriorFamily, PriorKind

LOG_2PI = math.log(2.0 * math.pi)

# Lower clamp for the std field inside the entropy term; ln S diverges at 0.
STD_FLOOR = 1e-6

# Cap on elements per sampled batch in the Monte Carlo data term.
_CHUNK_ELEMENTS = 8_000_000


@dataclass(frozen=True)
class LossMode:
    """Objective selector: variational on/off crossed with a prior family."""

    variational: bool = True
    prior: PriorKind = PriorKind.sparse()

    @property
    def label(self) -> str:
        base = "vb" if self.variational else "dip"
        if self.prior.family is PriorFamily.NONE:
            return base
        return f"{base}-{self.prior.family.value}"

    @classmethod
    def from_flags(cls, variational: bool, prior: PriorKind) -> "LossMode":
        return cls(variational=variational, prior=prior)


@dataclass(frozen=True)
class ElboBreakdown:
    """Per-term values of the bound at one evaluation point."""

    kernel_kl: float
    image_entropy: float
    prior_x: float
    prior_y: float
    data: float
    total: float

    @classmethod
    def build(cls, kernel_kl, image_entropy, prior_x, prior_y, data) -> "ElboBreakdown":
        parts = tuple(
            float(t.detach()) if torch.is_tensor(t) else float(t)
            for t in (kernel_kl, image_entropy, prior_x, prior_y, data)
        )
        return cls(*parts, total=sum(parts))

    FIELDS = ("kernel_kl", "image_entropy", "prior_x", "prior_y", "data", "total")


def kernel_kl_term(kernel, std_scalar: float | None = None):
    """Negative KL of the kernel belief from a standard normal, in closed form.

    With a constant per-entry std s this is (1/2) sum (1 + 2 ln s - E^2 - s^2);
    everything except the -E^2/2 part is constant, but the constants are kept
    so the reported term is the full closed form.  Accepts a ``KernelBelief``
    or a raw mean tensor plus ``std_scalar`` for formula-level use.
    """
    if isinstance(kernel, KernelBelief):
        mean, s = kernel.mean, kernel.std_scalar
    else:
        mean, s = kernel, std_scalar
    if s is None or s <= 0:
        raise ParameterError(f"kernel std_scalar must be positive, got {s}")
    n = mean.numel()
    const = n * (1.0 + 2.0 * math.log(s) - s * s)
    return 0.5 * (const - (mean**2).sum())


def image_entropy_term(belief: SharpImageBelief):
    """Gaussian entropy of the image belief: (1/2) sum (ln 2pi + 1 + 2 ln S).

    S is clamped below by ``STD_FLOOR`` so the term stays finite; it is
    monotone increasing in every std entry above the floor.
    """
    s = torch.clamp(belief.std, min=STD_FLOOR)
    n = s.numel()
    return 0.5 * (n * (LOG_2PI + 1.0) + 2.0 * torch.log(s).sum())


def prior_terms(belief: SharpImageBelief, weights: PenaltyWeights | None, kind: PriorKind,
                num_samples: int = 1, rng=None):
    """Weighted prior penalties (-1/4) sum E[F(I)^2] * weight, per direction.

    ``weights`` must be precomputed (and detached) for an active prior; the
    'none' family returns a pair of zeros.  Both values are <= 0.
    """
    if kind.family is PriorFamily.NONE:
        zero = belief.mean.new_zeros(())
        return zero, zero.clone()
    if weights is None:
        raise ParameterError("prior_terms requires precomputed weights for an active prior")
    if kind.family is PriorFamily.SPARSE:
        mx2, my2 = priors.sparse_second_moments(belief)
    else:
        e2, s2 = priors.squared_moments(belief)
        mx2 = priors.extreme_channel_samples(e2, s2, kind.patch_radius, num_samples, rng)
        ce2, cs2 = priors.complement_squared_moments(belief, kind.inflated_complement_std)
        my2 = priors.extreme_channel_samples(ce2, cs2, kind.patch_radius, num_samples, rng)
    px = -0.25 * (mx2 * weights.weight_x).sum()
    py = -0.25 * (my2 * weights.weight_y).sum()
    return px, py


def data_term(obs: BlurredObservation, belief: SharpImageBelief, kernel: KernelBelief,
              num_samples: int = 1, rng=None):
    """Monte Carlo data fidelity: -(1/A) sum_a ||I_b - k (x) I^a||^2 / (2 sigma^2).

    ``I^a`` are reparameterized draws ``mean + eps^a * std`` and ``k`` is the
    kernel mean.  Differentiable w.r.t. the belief fields and the kernel with
    the draws held fixed.  When the std field is identically zero (and not on
    the gradient path) the sampled and deterministic values coincide exactly,
    so sampling is skipped.
    """
    if num_samples < 1:
        raise ParameterError(f"num_samples must be >= 1, got {num_samples}")
    mean, std = belief.mean, belief.std
    kh, kw = kernel.shape
    expected = (mean.shape[0], mean.shape[1] - kh + 1, mean.shape[2] - kw + 1)
    if tuple(obs.image.shape) != expected:
        raise ShapeError(
            f"observation shape {tuple(obs.image.shape)} incompatible with belief "
            f"{tuple(mean.shape)} and kernel {(kh, kw)} (expected {expected})"
        )
    scale = 1.0 / (2.0 * obs.noise_sigma**2)
    if not std.requires_grad and not bool(std.any()):
        pred = convolve_valid(mean, kernel.mean)
        return -scale * ((obs.image - pred) ** 2).sum()
    chunk = max(1, _CHUNK_ELEMENTS // mean.numel())
    total = None
    remaining = num_samples
    while remaining > 0:
        a = min(chunk, remaining)
        eps = torch.randn((a, *mean.shape), generator=rng, dtype=mean.dtype)
        preds = convolve_valid(mean + eps * std, kernel.mean)
        sse = ((obs.image - preds) ** 2).sum()
        total = sse if total is None else total + sse
        remaining -= a
    return -scale * total / num_samples


def loss(mode: LossMode, obs: BlurredObservation, belief: SharpImageBelief, kernel: KernelBelief,
         num_samples: int = 1, rng=None, weights: PenaltyWeights | None = None):
    """Scalar training loss plus its term breakdown for the chosen mode.

    Variational mode: loss = -(kernel_kl + image_entropy + prior_x + prior_y
    + data).  Non-variational modes zero the std field and drop the KL and
    entropy terms.  ``weights`` may be precomputed (the solver does this once
    per step, before sampling); otherwise they are derived from the belief
    here, from the zero-std belief in non-variational modes.

    Raises ``NumericError`` naming the first non-finite term, if any.
    """
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    if not mode.variational:
        belief = belief.with_zero_std()
    active_prior = mode.prior.family is not PriorFamily.NONE
    if active_prior and weights is None:
        weights = priors.prior_weights(belief, mode.prior, num_samples, rng)
    px, py = prior_terms(belief, weights, mode.prior, num_samples, rng)
    data = data_term(obs, belief, kernel, num_samples, rng)
    if mode.variational:
        kl = kernel_kl_term(kernel)
        ent = image_entropy_term(belief)
    else:
        kl = belief.mean.new_zeros(())
        ent = belief.mean.new_zeros(())
    breakdown = ElboBreakdown.build(kl, ent, px, py, data)
    for name in ("kernel_kl", "image_entropy", "prior_x", "prior_y", "data"):
        value = getattr(breakdown, name)
        if not math.isfinite(value):
            raise NumericError(f"non-finite {name} term: {value}")
    return -(kl + ent + px + py + data), breakdown
