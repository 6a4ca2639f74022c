import numpy as np
import pytest
import torch

from vbdeblur.fields import BlurredObservation, KernelBelief, SharpImageBelief


def make_belief(shape=(1, 8, 8), seed=0, dtype=torch.float64, std_scale=0.1, margin=0.1):
    """Random valid belief with means away from the [0, 1] boundary."""
    gen = torch.Generator().manual_seed(seed)
    mean = margin + (1.0 - 2.0 * margin) * torch.rand(shape, generator=gen, dtype=dtype)
    std = std_scale * (0.2 + 0.8 * torch.rand(shape, generator=gen, dtype=dtype))
    return SharpImageBelief(mean=mean, std=std)


def make_kernel(shape=(3, 3), seed=0, dtype=torch.float64, std_scalar=1.0):
    gen = torch.Generator().manual_seed(seed)
    raw = torch.rand(shape, generator=gen, dtype=dtype) + 0.05
    return KernelBelief(mean=raw / raw.sum(), std_scalar=std_scalar)


def make_observation(belief, kernel, seed=0, sigma=0.5):
    """Random observation compatible with the belief/kernel pair."""
    gen = torch.Generator().manual_seed(seed)
    kh, kw = kernel.shape
    c, mp, np_ = belief.mean.shape
    image = torch.rand((c, mp - kh + 1, np_ - kw + 1), generator=gen, dtype=belief.mean.dtype)
    return BlurredObservation(image=image, noise_sigma=sigma)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
