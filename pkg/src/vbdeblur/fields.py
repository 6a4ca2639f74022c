"""Belief types for images and kernels, the blur forward model, and sampling.

Conventions used throughout the package:

* Images are float tensors of shape (C, H, W) with intensities in [0, 1].
  8-bit files are rescaled to this range on ingest (see ``imaging``).
* The latent sharp image is oversized: for an observation of size M x N and a
  kernel of size Kh x Kw, the latent field is (M + Kh - 1) x (N + Kw - 1), so
  a VALID convolution reproduces the observed extent without inventing
  boundary pixels.
* ``convolve_valid`` implements cross-correlation (no kernel flip):
  out[m, n] = sum_{i,j} kernel[i, j] * image[m + i, n + j].  Mathematical
  convolution is the same operation with a flipped kernel; one orientation is
  fixed here and used both for synthesis and inside the solver, so estimated
  kernels are directly comparable with ground truth.
* All functions are pure given their inputs; randomness enters only through
  explicitly passed seeds or ``torch.Generator`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

# Fidelity weight attached to observations synthesized without noise, so that
# the data term is always well defined (the weight must be positive).
DEFAULT_NOISE_SIGMA = 0.02

# Tolerance for the unit-sum kernel invariant.
KERNEL_SUM_TOL = 1e-6


def _check_field(name, value, ndim):
    if not torch.is_tensor(value) or not value.dtype.is_floating_point:
        raise ShapeError(f"{name} must be a floating-point tensor")
    if value.dim() != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got {value.dim()}")


@dataclass(frozen=True)
class SharpImageBelief:
    """Per-pixel Gaussian belief over the latent sharp image.

    ``mean`` and ``std`` are (C, Mp, Np) tensors; ``mean`` lies in [0, 1] and
    ``std`` is non-negative.  Mp and Np include the kernel margin.
    """

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        _check_field("mean", self.mean, 3)
        _check_field("std", self.std, 3)
        if self.mean.shape != self.std.shape:
            raise ShapeError(
                f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}"
            )
        if bool((self.std < 0).any()):
            raise ParameterError("std must be non-negative everywhere")
        if bool((self.mean < 0).any()) or bool((self.mean > 1).any()):
            raise ParameterError("mean must lie in [0, 1] everywhere")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.mean.shape[-2:])

    def with_zero_std(self) -> "SharpImageBelief":
        """Same mean field with the uncertainty collapsed to zero."""
        return SharpImageBelief(self.mean, torch.zeros_like(self.std))

    def detached(self) -> "SharpImageBelief":
        return SharpImageBelief(self.mean.detach(), self.std.detach())


@dataclass(frozen=True)
class KernelBelief:
    """Expectation field of the blur kernel plus its constant std scalar.

    The mean is a non-negative (Kh, Kw) tensor summing to one; the standard
    deviation is a single configured constant shared by every entry.
    """

    mean: torch.Tensor
    std_scalar: float = 1.0

    def __post_init__(self):
        _check_field("kernel mean", self.mean, 2)
        if self.std_scalar < 0:
            raise ParameterError(f"std_scalar must be non-negative, got {self.std_scalar}")
        if bool((self.mean < 0).any()):
            raise ParameterError("kernel entries must be non-negative")
        total = float(self.mean.detach().sum().double())
        if abs(total - 1.0) > KERNEL_SUM_TOL:
            raise ParameterError(f"kernel entries must sum to 1, got {total!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mean.shape)

    def detached(self) -> "KernelBelief":
        return KernelBelief(self.mean.detach(), self.std_scalar)


@dataclass(frozen=True)
class BlurredObservation:
    """Observed blurred image with the noise level used in the data term."""

    image: torch.Tensor
    noise_sigma: float

    def __post_init__(self):
        _check_field("image", self.image, 3)
        if not self.noise_sigma > 0:
            raise ParameterError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if bool((self.image < 0).any()) or bool((self.image > 1).any()):
            raise ParameterError("observation values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.image.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.image.shape[-2:])


@dataclass(frozen=True)
class NoiseInputs:
    """Fixed generator inputs, drawn once per run and never updated."""

    z_image: torch.Tensor
    z_kernel: torch.Tensor
    seed: int

    @classmethod
    def draw(cls, spatial_shape, image_channels, kernel_dim, seed, dtype=torch.float32):
        """Draw fixed uniform noise inputs reproducibly from ``seed``.

        ``spatial_shape`` is the latent (Mp, Np) extent; the image input gets
        ``image_channels`` channels, the kernel input is a flat vector of
        length ``kernel_dim``.  Values are uniform on [0, 0.1).
        """
        gen = torch.Generator().manual_seed(seed)
        z_image = 0.1 * torch.rand((image_channels, *spatial_shape), generator=gen, dtype=dtype)
        z_kernel = 0.1 * torch.rand((kernel_dim,), generator=gen, dtype=dtype)
        z_image.requires_grad_(False)
        z_kernel.requires_grad_(False)
        return cls(z_image=z_image, z_kernel=z_kernel, seed=seed)


def convolve_valid(image: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Valid-region cross-correlation of ``image`` with a shared 2-D kernel.

    ``image`` has shape (..., H, W); every leading dimension (channels,
    sample batches) is filtered with the same kernel.  The output spatial
    extent is (H - Kh + 1, W - Kw + 1).
    """
    if kernel.dim() != 2:
        raise ShapeError(f"kernel must be 2-D, got {kernel.dim()} dimensions")
    if image.dim() < 2:
        raise ShapeError("image must have at least 2 dimensions")
    kh, kw = kernel.shape
    h, w = image.shape[-2:]
    if h < kh or w < kw:
        raise ShapeError(f"image extent {(h, w)} smaller than kernel {(kh, kw)}")
    lead = image.shape[:-2]
    flat = image.reshape(-1, 1, h, w)
    weight = kernel.reshape(1, 1, kh, kw).to(dtype=image.dtype)
    out = F.conv2d(flat, weight)
    return out.reshape(*lead, h - kh + 1, w - kw + 1)


def sample_image(belief: SharpImageBelief, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + eps * std``.

    ``eps`` either matches the belief shape exactly or carries extra leading
    sample dimensions.  The result is differentiable w.r.t. the belief fields
    with ``eps`` held fixed.
    """
    shape = belief.mean.shape
    if eps.shape[-len(shape):] != shape:
        raise ShapeError(
            f"eps trailing shape {tuple(eps.shape)} does not match belief {tuple(shape)}"
        )
    return belief.mean + eps * belief.std


def degrade(sharp: torch.Tensor, kernel: torch.Tensor, sigma: float, seed: int) -> BlurredObservation:
    """Blur ``sharp`` with ``kernel``, add Gaussian noise, clamp to [0, 1].

    The kernel must be non-negative with unit sum.  Deterministic given
    ``seed``.  With ``sigma`` = 0 the synthesis is noiseless; the returned
    observation then carries ``DEFAULT_NOISE_SIGMA`` as its fidelity weight
    because the data term requires a positive noise level.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if bool((kernel < 0).any()):
        raise ParameterError("kernel entries must be non-negative")
    total = float(kernel.sum().double())
    if abs(total - 1.0) > KERNEL_SUM_TOL:
        raise ParameterError(f"kernel entries must sum to 1, got {total!r}")
    blurred = convolve_valid(sharp, kernel)
    if sigma > 0:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(blurred.shape, generator=gen, dtype=blurred.dtype)
        blurred = blurred + sigma * noise
    blurred = blurred.clamp(0.0, 1.0)
    return BlurredObservation(image=blurred, noise_sigma=sigma if sigma > 0 else DEFAULT_NOISE_SIGMA)
