"""Penalty function, adaptive penalty weights, and prior-operator moments.

The image prior penalizes the responses of two operators F_x / F_y applied to
the latent image.  Two operator families are supported:

* sparse: F_x / F_y are forward differences along the first / second spatial
  axis (x runs down the rows, y across the columns), with replicate padding
  at the leading border.
* extreme: F_x is the dark channel (patch-and-channel minimum of the image),
  F_y the bright channel complement (patch-and-channel minimum of 1 - image).

Because the latent image is a per-pixel Gaussian belief, the penalty enters
the objective through E[F(I)^2].  For the sparse family this expectation has
a closed form; for the extreme family it is estimated by reparameterized
sampling of the squared image, whose Gaussian moments also have closed forms.

Penalty weights (one per pixel of the operator output) are derived from the
concave-conjugate bound of the penalty: weight = rho'(v) / v evaluated at
v = sqrt(E[F(I)^2]).  They are recomputed from the current belief at every
optimization step and excluded from gradient flow.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError
from .fields import SharpImageBelief

# Lower clamp for |x| and for the RMS operator response v.  The log penalty
# and the 1/v^2 weights diverge at zero; flat image regions would otherwise
# produce infinite weights and NaN gradients.
VALUE_EPS = 1e-4

# Keeps the square roots in the moment formulas differentiable where both
# moments vanish (sqrt has an infinite slope at zero; with std identically
# zero the chain rule would otherwise produce 0 * inf = NaN gradients).
_MOMENT_EPS = 1e-12


class PriorFamily(enum.Enum):
    NONE = "none"
    SPARSE = "sparse"
    EXTREME = "extreme"


@dataclass(frozen=True)
class PriorKind:
    """Which prior operator family to use, plus its parameters.

    ``patch_radius`` only matters for the extreme family (the patch is a
    (2r+1) x (2r+1) window).  ``inflated_complement_std`` switches the
    complemented squared-variable std to a variant with an extra 4*S^2 term
    under the square root; the default is the form implied by substituting
    the complemented mean into the squared-variable identity.
    """

    family: PriorFamily = PriorFamily.NONE
    patch_radius: int = 17
    inflated_complement_std: bool = False

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ParameterError(f"patch_radius must be >= 0, got {self.patch_radius}")

    @classmethod
    def none(cls) -> "PriorKind":
        return cls(family=PriorFamily.NONE)

    @classmethod
    def sparse(cls) -> "PriorKind":
        return cls(family=PriorFamily.SPARSE)

    @classmethod
    def extreme(cls, patch_radius: int = 17, inflated_complement_std: bool = False) -> "PriorKind":
        return cls(
            family=PriorFamily.EXTREME,
            patch_radius=patch_radius,
            inflated_complement_std=inflated_complement_std,
        )


@dataclass(frozen=True)
class PenaltyWeights:
    """Per-pixel penalty weights for the two prior directions.

    Shapes follow the prior operator output: (C, H, W) for the sparse family,
    (H, W) for the extreme family.  Entries are non-negative and finite, and
    are treated as constants w.r.t. gradients within an optimization step.
    """

    weight_x: torch.Tensor
    weight_y: torch.Tensor

    def __post_init__(self):
        for name, w in (("weight_x", self.weight_x), ("weight_y", self.weight_y)):
            if bool((w < 0).any()):
                raise ParameterError(f"{name} must be non-negative")
            if not bool(torch.isfinite(w).all()):
                raise ParameterError(f"{name} must be finite")


def penalty(x):
    """Log-magnitude penalty ln(max(|x|, eps)), elementwise."""
    x = torch.as_tensor(x)
    return torch.log(torch.clamp(torch.abs(x), min=VALUE_EPS))


def penalty_deriv(x):
    """Derivative of the log-magnitude penalty: 1/x, clamped near zero.

    Uses sign(x)/max(|x|, eps) with sign(0) taken as +1, so the function is
    total and consistent with ``penalty`` away from the clamp.
    """
    x = torch.as_tensor(x)
    sign = torch.where(x < 0, -1.0, 1.0).to(x.dtype if x.dtype.is_floating_point else torch.get_default_dtype())
    return sign / torch.clamp(torch.abs(x), min=VALUE_EPS)


def weight_expectation(v):
    """Expected penalty weight rho'(v)/v for the log penalty: 1/max(v, eps)^2.

    ``v`` is the non-negative RMS operator response.  The result is detached
    from the autograd graph (weights are constants within a step).
    """
    v = torch.as_tensor(v)
    clamped = torch.clamp(v.detach(), min=VALUE_EPS)
    return 1.0 / (clamped * clamped)


def sparse_second_moments(belief: SharpImageBelief):
    """Closed-form E[(F_x I)^2] and E[(F_y I)^2] for forward differences.

    Per pixel, E[(I(m,n) - I(m-1,n))^2] = (E(m,n) - E(m-1,n))^2 + S^2(m,n)
    + S^2(m-1,n), and analogously along the second axis.  The leading row /
    column is replicate-padded, i.e. the out-of-range neighbour is an
    independent pixel with the border belief.
    """
    mean, std = belief.mean, belief.std
    mean_x = torch.cat([mean[:, :1, :], mean[:, :-1, :]], dim=1)
    std_x = torch.cat([std[:, :1, :], std[:, :-1, :]], dim=1)
    mean_y = torch.cat([mean[:, :, :1], mean[:, :, :-1]], dim=2)
    std_y = torch.cat([std[:, :, :1], std[:, :, :-1]], dim=2)
    mx2 = (mean - mean_x) ** 2 + std**2 + std_x**2
    my2 = (mean - mean_y) ** 2 + std**2 + std_y**2
    return mx2, my2


def squared_moments(belief: SharpImageBelief):
    """Gaussian moments of the squared image: E(I^2) and S(I^2).

    E(I^2) = E^2 + S^2 and S(I^2) = sqrt(4 E^2 S^2 + 2 S^4); both are exact
    for a Gaussian variable.  The std is factored as S * sqrt(4 E^2 + 2 S^2)
    so it is exactly zero (with a finite gradient) when S is zero.
    """
    e, s = belief.mean, belief.std
    e2 = e**2 + s**2
    s2 = s * torch.sqrt(4.0 * e**2 + 2.0 * s**2 + _MOMENT_EPS)
    return e2, s2


def complement_squared_moments(belief: SharpImageBelief, inflated_std: bool = False):
    """Gaussian moments of the complemented squared image (1 - I)^2.

    Substituting the complemented mean into the squared-variable identities
    gives E((1-I)^2) = (1-E)^2 + S^2 and S((1-I)^2) =
    sqrt(4 (1-E)^2 S^2 + 2 S^4).  With ``inflated_std`` the std picks up an
    extra 4*S^2 term under the root (a strictly larger variance model kept
    available as a compatibility switch).
    """
    e, s = belief.mean, belief.std
    ce = 1.0 - e
    e2 = ce**2 + s**2
    if inflated_std:
        s2 = s * torch.sqrt(4.0 + 4.0 * e**2 + 2.0 * s**2)
    else:
        s2 = s * torch.sqrt(4.0 * ce**2 + 2.0 * s**2 + _MOMENT_EPS)
    return e2, s2


def extreme_channel_samples(e2, s2, patch_radius, num_samples, rng=None):
    """Monte Carlo estimate of E[min over patch and channels of I^2].

    Draws ``num_samples`` reparameterized samples of the squared image from
    its moments (clamped below at zero, squares cannot be negative), takes
    the minimum over color channels and then over the (2r+1)^2 patch around
    each pixel, and averages the resulting maps.  Patch minima at the border
    use replicate padding, which for a minimum equals shrinking the window.
    Differentiable w.r.t. ``e2`` and ``s2`` with the draws held fixed.

    Returns a 2-D (H, W) field.
    """
    if num_samples < 1:
        raise ParameterError(f"num_samples must be >= 1, got {num_samples}")
    if patch_radius < 0:
        raise ParameterError(f"patch_radius must be >= 0, got {patch_radius}")
    chunk = max(1, 4_000_000 // max(e2.numel(), 1))
    accum = None
    remaining = num_samples
    while remaining > 0:
        a = min(chunk, remaining)
        eps = torch.randn((a, *e2.shape), generator=rng, dtype=e2.dtype)
        draws = torch.clamp(e2 + eps * s2, min=0.0)
        channel_min = draws.amin(dim=1, keepdim=True)
        if patch_radius > 0:
            # min-pool via negated max-pool; implicit -inf padding never wins,
            # so the border behaves like a shrunk (replicate-padded) window.
            pooled = -F.max_pool2d(
                -channel_min,
                kernel_size=2 * patch_radius + 1,
                stride=1,
                padding=patch_radius,
            )
        else:
            pooled = channel_min
        batch_sum = pooled.sum(dim=0)
        accum = batch_sum if accum is None else accum + batch_sum
        remaining -= a
    return accum.squeeze(0) / num_samples


def prior_weights(belief: SharpImageBelief, kind: PriorKind, num_samples: int = 1, rng=None) -> PenaltyWeights:
    """Penalty weights for both prior directions from the current belief.

    Evaluates v = sqrt(E[F(I)^2]) with the family's estimator and maps it
    through ``weight_expectation``.  Runs under no_grad: weights are inputs
    to the objective, not part of the gradient path.
    """
    if kind.family is PriorFamily.NONE:
        raise ParameterError("prior weights are undefined for the 'none' prior")
    with torch.no_grad():
        if kind.family is PriorFamily.SPARSE:
            mx2, my2 = sparse_second_moments(belief)
        else:
            e2, s2 = squared_moments(belief)
            mx2 = extreme_channel_samples(e2, s2, kind.patch_radius, num_samples, rng)
            ce2, cs2 = complement_squared_moments(belief, kind.inflated_complement_std)
            my2 = extreme_channel_samples(ce2, cs2, kind.patch_radius, num_samples, rng)
        vx = torch.sqrt(torch.clamp(mx2, min=0.0))
        vy = torch.sqrt(torch.clamp(my2, min=0.0))
    return PenaltyWeights(weight_expectation(vx), weight_expectation(vy))
