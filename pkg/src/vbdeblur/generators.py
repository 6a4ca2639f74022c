"""Generator networks: an encoder-decoder image generator with skip
connections that emits mean and std fields, and a fully connected kernel
generator whose softmax output lives on the probability simplex.

Both are deterministic functions of (parameters, fixed noise input); no
noise is added to the inputs during optimization.  Initialization is
reproducible from an integer seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError, ShapeError
from .fields import KernelBelief, NoiseInputs, SharpImageBelief

CHECKPOINT_FORMAT = "vbdeblur-checkpoint-v1"


_ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.2, inplace=True),
    "relu": lambda: nn.ReLU(inplace=True),
    "silu": lambda: nn.SiLU(inplace=True),
}


@dataclass(frozen=True)
class ImageGeneratorSpec:
    """Architecture knobs for the image generator.

    The decoder head emits 2C channels: the first C squash to the mean field
    in (0, 1), the last C to the std field in (0, s_max].  ``activation``
    may be swapped for a smooth one (silu) where piecewise linearity is
    undesirable, e.g. for finite-difference probes.
    """

    scales: int = 5
    channels_per_scale: int = 128
    skip_channels: int = 16
    input_channels: int = 8
    s_max: float = 0.1
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.scales < 1:
            raise ParameterError(f"scales must be >= 1, got {self.scales}")
        if min(self.channels_per_scale, self.skip_channels, self.input_channels) < 1:
            raise ParameterError("channel counts must be positive")
        if not self.s_max > 0:
            raise ParameterError(f"s_max must be positive, got {self.s_max}")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class KernelGeneratorSpec:
    """Architecture knobs for the fully connected kernel generator."""

    input_dim: int = 200
    hidden_dim: int = 1000
    kernel_std: float = 1.0
    activation: str = "relu"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim) < 1:
            raise ParameterError("layer widths must be positive")
        if self.kernel_std <= 0:
            raise ParameterError(f"kernel_std must be positive, got {self.kernel_std}")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")


def _conv_block(in_ch, out_ch, kernel_size, act, stride=1):
    pad = kernel_size // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=pad,
                  padding_mode="reflect" if pad else "zeros"),
        nn.BatchNorm2d(out_ch),
        act(),
    )


class ImageGenerator(nn.Module):
    """Skip-connection encoder-decoder mapping a fixed noise field to a belief.

    Each scale downsamples by a strided conv and taps a 1x1 skip branch; the
    decoder upsamples bilinearly back through the skips.  The output belief
    has the same spatial extent as the input noise.
    """

    def __init__(self, spec: ImageGeneratorSpec, image_channels: int):
        super().__init__()
        if image_channels < 1:
            raise ParameterError(f"image_channels must be >= 1, got {image_channels}")
        self.spec = spec
        self.image_channels = image_channels
        ch = spec.channels_per_scale
        act = _ACTIVATIONS[spec.activation]
        downs, skips, ups = [], [], []
        in_ch = spec.input_channels
        for _ in range(spec.scales):
            downs.append(nn.Sequential(
                _conv_block(in_ch, ch, 3, act, stride=2),
                _conv_block(ch, ch, 3, act),
            ))
            skips.append(_conv_block(in_ch, spec.skip_channels, 1, act))
            ups.append(nn.Sequential(
                _conv_block(ch + spec.skip_channels, ch, 3, act),
                _conv_block(ch, ch, 1, act),
            ))
            in_ch = ch
        self.downs = nn.ModuleList(downs)
        self.skips = nn.ModuleList(skips)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(ch, 2 * image_channels, 1)

    def forward(self, z: torch.Tensor) -> SharpImageBelief:
        if z.dim() != 3 or z.shape[0] != self.spec.input_channels:
            raise ShapeError(
                f"noise input must be ({self.spec.input_channels}, H, W), got {tuple(z.shape)}"
            )
        # Every scale halves the extent (rounding up); the deepest downsampling
        # input must still be at least 2 px for its reflection padding.
        if min(z.shape[-2:]) <= 2 ** (self.spec.scales - 1):
            raise ShapeError(
                f"spatial extent {tuple(z.shape[-2:])} too small for {self.spec.scales} scales"
            )
        x = z.unsqueeze(0)
        taps = []
        for down, skip in zip(self.downs, self.skips):
            taps.append(skip(x))
            x = down(x)
        for up, tap in zip(reversed(self.ups), reversed(taps)):
            x = F.interpolate(x, size=tap.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, tap], dim=1))
        out = self.head(x).squeeze(0)
        c = self.image_channels
        mean = torch.sigmoid(out[:c])
        std = self.spec.s_max * torch.sigmoid(out[c:])
        return SharpImageBelief(mean=mean, std=std)


class KernelGenerator(nn.Module):
    """Fully connected generator mapping a fixed noise vector to a kernel.

    A softmax over the flat output guarantees non-negative entries that sum
    to one; the kernel std is the configured constant.
    """

    def __init__(self, spec: KernelGeneratorSpec, kernel_shape):
        super().__init__()
        kh, kw = kernel_shape
        if kh < 1 or kw < 1:
            raise ParameterError(f"kernel shape must be positive, got {kernel_shape}")
        self.spec = spec
        self.kernel_shape = (int(kh), int(kw))
        self.net = nn.Sequential(
            nn.Linear(spec.input_dim, spec.hidden_dim),
            _ACTIVATIONS[spec.activation](),
            nn.Linear(spec.hidden_dim, kh * kw),
        )

    def forward(self, z: torch.Tensor) -> KernelBelief:
        if z.dim() != 1 or z.shape[0] != self.spec.input_dim:
            raise ShapeError(
                f"noise input must be a vector of length {self.spec.input_dim}, got {tuple(z.shape)}"
            )
        flat = torch.softmax(self.net(z), dim=0)
        return KernelBelief(mean=flat.reshape(self.kernel_shape), std_scalar=self.spec.kernel_std)


def init_image_generator(spec: ImageGeneratorSpec, image_channels: int, seed: int,
                         dtype=torch.float32) -> ImageGenerator:
    """Build an image generator with parameters drawn reproducibly from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ImageGenerator(spec, image_channels)
    return net.to(dtype)


def init_kernel_generator(spec: KernelGeneratorSpec, kernel_shape, seed: int,
                          dtype=torch.float32) -> KernelGenerator:
    """Build a kernel generator with parameters drawn reproducibly from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = KernelGenerator(spec, kernel_shape)
    return net.to(dtype)


def save_checkpoint(path, image_gen: ImageGenerator, kernel_gen: KernelGenerator,
                    noise: NoiseInputs):
    """Archive both parameter sets plus the fixed noise inputs and seed.

    Single-file torch archive; see the README for the documented key layout.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "image_spec": asdict(image_gen.spec),
        "image_channels": image_gen.image_channels,
        "image_state": image_gen.state_dict(),
        "kernel_spec": asdict(kernel_gen.spec),
        "kernel_shape": kernel_gen.kernel_shape,
        "kernel_state": kernel_gen.state_dict(),
        "z_image": noise.z_image,
        "z_kernel": noise.z_kernel,
        "seed": noise.seed,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Restore (image_gen, kernel_gen, noise) from ``save_checkpoint`` output."""
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise OSError(f"cannot read checkpoint file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise OSError(f"not a recognized checkpoint file: {path}")
    image_gen = ImageGenerator(ImageGeneratorSpec(**payload["image_spec"]), payload["image_channels"])
    image_gen.load_state_dict(payload["image_state"])
    kernel_gen = KernelGenerator(KernelGeneratorSpec(**payload["kernel_spec"]), payload["kernel_shape"])
    kernel_gen.load_state_dict(payload["kernel_state"])
    noise = NoiseInputs(z_image=payload["z_image"], z_kernel=payload["z_kernel"], seed=payload["seed"])
    return image_gen, kernel_gen, noise
