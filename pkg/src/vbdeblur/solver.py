"""The optimization loop: alternate weight computation, sampling, bound
evaluation, and simultaneous gradient updates of both generators.

Each iteration performs, in order: (1) forward both generators from their
fixed noise inputs, (2) recompute the penalty weights from the fresh
(pre-update) belief with gradients blocked, (3) draw the Monte Carlo data
term, (4) assemble the bound, (5) take one Adam step on both parameter sets
maximizing it.  After the final iteration the generators are run once more
to produce the returned estimates.

A run is deterministic given its config: sub-seeds for image-generator init,
kernel-generator init, the fixed noise inputs, and the per-step sampling are
derived from ``config.seed`` at fixed offsets (+0, +1, +2, +3).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import elbo, generators
from . import priors as priors_mod
from .elbo import ElboBreakdown, LossMode
from .errors import NonFiniteLossError, NumericError, ParameterError, ShapeError
from .fields import BlurredObservation, NoiseInputs
from .generators import ImageGeneratorSpec, KernelGeneratorSpec
from .priors import PriorFamily

LOSS_CSV_HEADER = ("step", "kernel_kl", "image_entropy", "prior_x", "prior_y",
                   "data", "total", "seconds")


@dataclass(frozen=True)
class RunConfig:
    """All hyperparameters of one optimization run."""

    steps: int = 5000
    lr_image: float = 1e-2
    lr_kernel: float = 1e-4
    samples: int = 1
    sigma: float = 0.02
    mode: LossMode = field(default_factory=LossMode)
    kernel_shape: tuple[int, int] = (31, 31)
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    image_spec: ImageGeneratorSpec = field(default_factory=ImageGeneratorSpec)
    kernel_spec: KernelGeneratorSpec = field(default_factory=KernelGeneratorSpec)

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.lr_image <= 0 or self.lr_kernel <= 0:
            raise ParameterError("learning rates must be positive")
        if self.samples < 1:
            raise ParameterError(f"samples must be >= 1, got {self.samples}")
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.log_every < 1:
            raise ParameterError(f"log_every must be >= 1, got {self.log_every}")
        kh, kw = self.kernel_shape
        if kh < 1 or kw < 1:
            raise ParameterError(f"kernel shape must be positive, got {self.kernel_shape}")

    @property
    def s_max(self) -> float:
        return self.image_spec.s_max


@dataclass(frozen=True)
class StepRecord:
    """One logged optimization step plus the invariant witnesses at that step."""

    step: int
    breakdown: ElboBreakdown
    seconds: float
    kernel_sum: float
    kernel_min: float
    std_min: float
    std_max: float


@dataclass(frozen=True)
class RunResult:
    """Final estimates and the per-step log of one run."""

    image: np.ndarray
    kernel: np.ndarray
    belief: object
    log: list[StepRecord]
    total_seconds: float


def _center_crop(mean: torch.Tensor, out_shape, kernel_shape):
    kh, kw = kernel_shape
    r0, c0 = (kh - 1) // 2, (kw - 1) // 2
    m, n = out_shape
    return mean[:, r0:r0 + m, c0:c0 + n]


def run(obs: BlurredObservation, config: RunConfig, checkpoint_path=None) -> RunResult:
    """Execute the full optimization and return the final estimates.

    Aborts with ``NonFiniteLossError`` (step index and term breakdown
    attached) if any term of the bound stops being finite.  When
    ``checkpoint_path`` is given and ``config.checkpoint_every`` > 0, the
    generator parameters are archived there every that many steps and at the
    end of the run.
    """
    start = time.perf_counter()
    c, m, n = obs.image.shape
    kh, kw = config.kernel_shape
    latent_shape = (m + kh - 1, n + kw - 1)
    obs = replace(obs, noise_sigma=config.sigma)

    image_gen = generators.init_image_generator(config.image_spec, c, config.seed)
    kernel_gen = generators.init_kernel_generator(config.kernel_spec, config.kernel_shape,
                                                  config.seed + 1)
    noise = NoiseInputs.draw(latent_shape, config.image_spec.input_channels,
                             config.kernel_spec.input_dim, seed=config.seed + 2)
    sample_rng = torch.Generator().manual_seed(config.seed + 3)
    optimizer = torch.optim.Adam([
        {"params": image_gen.parameters(), "lr": config.lr_image},
        {"params": kernel_gen.parameters(), "lr": config.lr_kernel},
    ])

    mode = config.mode
    active_prior = mode.prior.family is not PriorFamily.NONE
    log: list[StepRecord] = []
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        belief = image_gen(noise.z_image)
        kernel = kernel_gen(noise.z_kernel)
        weights = None
        if active_prior:
            weight_belief = belief if mode.variational else belief.with_zero_std()
            weights = priors_mod.prior_weights(weight_belief, mode.prior,
                                               config.samples, sample_rng)
        try:
            loss, breakdown = elbo.loss(mode, obs, belief, kernel,
                                        num_samples=config.samples, rng=sample_rng,
                                        weights=weights)
        except NumericError as exc:
            raise NonFiniteLossError(step, getattr(exc, "breakdown", None), str(exc)) from exc
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        seconds = time.perf_counter() - t0
        if step % config.log_every == 0 or step == config.steps:
            with torch.no_grad():
                log.append(StepRecord(
                    step=step,
                    breakdown=breakdown,
                    seconds=seconds,
                    kernel_sum=float(kernel.mean.sum().double()),
                    kernel_min=float(kernel.mean.min()),
                    std_min=float(belief.std.min()),
                    std_max=float(belief.std.max()),
                ))
        if (checkpoint_path is not None and config.checkpoint_every > 0
                and step % config.checkpoint_every == 0):
            generators.save_checkpoint(checkpoint_path, image_gen, kernel_gen, noise)

    with torch.no_grad():
        belief = image_gen(noise.z_image)
        kernel = kernel_gen(noise.z_kernel)
    if checkpoint_path is not None:
        generators.save_checkpoint(checkpoint_path, image_gen, kernel_gen, noise)
    image = _center_crop(belief.mean, (m, n), config.kernel_shape)
    return RunResult(
        image=image.numpy().copy(),
        kernel=kernel.mean.numpy().copy(),
        belief=belief.detached(),
        log=log,
        total_seconds=time.perf_counter() - start,
    )


ABLATION_MODES = tuple(
    LossMode(variational=v, prior=p)
    for v in (False, True)
    for p in (priors_mod.PriorKind.none(), priors_mod.PriorKind.sparse(), priors_mod.PriorKind.extreme())
)


def ablation_suite(obs: BlurredObservation, base_config: RunConfig, modes=ABLATION_MODES):
    """Run every mode with shared seeds; returns {mode label: RunResult}.

    The label order is fixed: dip, dip-sparse, dip-extreme, vb, vb-sparse,
    vb-extreme.
    """
    results = {}
    for mode in modes:
        results[mode.label] = run(obs, replace(base_config, mode=mode))
    return results


def write_loss_csv(log, path):
    """Write the per-step loss log in the documented CSV layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_HEADER)
        for rec in log:
            b = rec.breakdown
            writer.writerow([rec.step, repr(b.kernel_kl), repr(b.image_entropy),
                             repr(b.prior_x), repr(b.prior_y), repr(b.data),
                             repr(b.total), f"{rec.seconds:.6f}"])


def read_loss_csv(path):
    """Read back a loss CSV as a list of dict rows with float values."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            rows.append({k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
    return rows
