"""Image and kernel file I/O, synthetic test data, and evaluation metrics.

File formats: images are 8-bit PNG (grayscale or RGB), kernels are UTF-8
text matrices of floats (one row per line, full float64 precision) with an
optional normalized PNG visualization for figures.  In-memory images are
float numpy arrays of shape (C, H, W) in [0, 1]; kernels are 2-D float64
arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ParameterError, ShapeError
from .fields import convolve_valid


@dataclass(frozen=True)
class EvalRecord:
    """Metrics for one deblurring result."""

    psnr: float
    ssim: float
    kernel_error: float
    runtime_seconds: float


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] images: 10 log10(1 / MSE).

    Identical inputs have no finite PSNR; exact matches report +inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    window = g[:, None] * g[None, :]
    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with an 11x11 Gaussian window on [0, 1] images.

    Standard constants C1 = 0.01^2, C2 = 0.03^2; local moments are computed
    with the Gaussian window over the valid region and averaged over pixels
    and channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"expected (C, H, W) or (H, W) images, got shape {a.shape}")
    if min(a.shape[-2:]) < window_size:
        raise ParameterError(
            f"image extent {a.shape[-2:]} smaller than the {window_size}x{window_size} window"
        )
    c1, c2 = 0.01**2, 0.03**2
    window = _gaussian_window(window_size, sigma)
    ta = torch.from_numpy(a)
    tb = torch.from_numpy(b)
    mu_a = convolve_valid(ta, window)
    mu_b = convolve_valid(tb, window)
    var_a = convolve_valid(ta * ta, window) - mu_a**2
    var_b = convolve_valid(tb * tb, window) - mu_b**2
    cov = convolve_valid(ta * tb, window) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def kernel_recovery_error(est: np.ndarray, truth: np.ndarray) -> float:
    """Translation-aligned mean squared difference of unit-sum kernels.

    Both kernels are normalized to unit sum, zero-padded onto a common
    canvas, and compared over every integer translation; the reported value
    is the minimum of sum((est_shifted - truth)^2) / canvas_size, with the
    canvas sized max(heights) x max(widths).  Symmetric in its arguments.
    """
    est = _normalized_kernel(np.asarray(est, dtype=np.float64))
    truth = _normalized_kernel(np.asarray(truth, dtype=np.float64))
    hc = max(est.shape[0], truth.shape[0])
    wc = max(est.shape[1], truth.shape[1])
    # ||A_d - B||^2 over the whole plane = sum A^2 + sum B^2 - 2 xcorr(A,B)(d);
    # the best translation maximizes the cross-correlation.
    ta = torch.from_numpy(est)[None, None]
    tb = torch.from_numpy(truth)[None, None]
    pad_h, pad_w = truth.shape[0] - 1, truth.shape[1] - 1
    padded = torch.nn.functional.pad(ta, (pad_w, pad_w, pad_h, pad_h))
    xcorr = torch.nn.functional.conv2d(padded, tb)
    best = float(xcorr.max())
    sq = float((est**2).sum() + (truth**2).sum() - 2.0 * best)
    return max(sq, 0.0) / (hc * wc)


def _normalized_kernel(kernel: np.ndarray) -> np.ndarray:
    if kernel.ndim != 2:
        raise ShapeError(f"kernel must be 2-D, got shape {kernel.shape}")
    total = kernel.sum()
    if not np.isfinite(total) or total <= 0:
        raise ParameterError("kernel is not normalizable (non-positive or non-finite sum)")
    return kernel / total


def best_alignment(est: np.ndarray, truth: np.ndarray, max_shift: int) -> tuple[int, int]:
    """Integer translation of ``est`` that minimizes MSE against ``truth``.

    Blind deconvolution only determines the (image, kernel) pair up to a
    joint translation, so result images are aligned to ground truth before
    scoring, mirroring the translation-aligned kernel metric.  The search
    covers shifts in [-max_shift, max_shift]^2 over the overlap region.
    """
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {est.shape} vs {truth.shape}")
    best = (0, 0)
    best_mse = math.inf
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            a, b = shifted_overlap(est, truth, dy, dx)
            mse = float(np.mean((a - b) ** 2))
            if mse < best_mse:
                best_mse = mse
                best = (dy, dx)
    return best


def shifted_overlap(est: np.ndarray, truth: np.ndarray, dy: int, dx: int):
    """Crop both images to the region where est shifted by (dy, dx) overlaps truth."""
    h, w = est.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        raise ParameterError(f"shift ({dy}, {dx}) larger than the image {h}x{w}")
    ey0, ty0 = (dy, 0) if dy >= 0 else (0, -dy)
    ex0, tx0 = (dx, 0) if dx >= 0 else (0, -dx)
    hh, ww = h - abs(dy), w - abs(dx)
    a = est[..., ey0:ey0 + hh, ex0:ex0 + ww]
    b = truth[..., ty0:ty0 + hh, tx0:tx0 + ww]
    return a, b


def aligned_image_metrics(est: np.ndarray, truth: np.ndarray, max_shift: int):
    """PSNR and SSIM after searching the best integer alignment."""
    dy, dx = best_alignment(est, truth, max_shift)
    a, b = shifted_overlap(est, truth, dy, dx)
    return psnr(a, b), ssim(a, b)


# ---------------------------------------------------------------------------
# file I/O


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG (or any PIL-readable raster) as (C, H, W) in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("L" if img.mode in ("1", "I", "F", "LA") else "RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot read image file {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def save_image(path, image: np.ndarray):
    """Save a (C, H, W) float image in [0, 1] as an 8-bit PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W) image, got shape {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if quantized.shape[0] == 1:
        pil = Image.fromarray(quantized[0], mode="L")
    else:
        pil = Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


def load_kernel(path) -> np.ndarray:
    """Load a text kernel matrix (one row of floats per line)."""
    try:
        kernel = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except FileNotFoundError as exc:
        raise OSError(f"cannot read kernel file {path}: {exc}") from exc
    except ValueError as exc:
        raise OSError(f"cannot parse kernel file {path}: {exc}") from exc
    return kernel


def save_kernel(path, kernel: np.ndarray):
    """Save a kernel as a text matrix with full float64 round-trip precision."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ShapeError(f"kernel must be 2-D, got shape {kernel.shape}")
    np.savetxt(path, kernel, fmt="%.17g")


def save_kernel_image(path, kernel: np.ndarray):
    """Save a max-normalized grayscale PNG visualization of a kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    peak = kernel.max()
    vis = kernel / peak if peak > 0 else kernel
    save_image(path, vis[None])


# ---------------------------------------------------------------------------
# synthetic data


def linear_motion_kernel(shape, length=None, angle_deg=30.0) -> np.ndarray:
    """Linear motion blur: a unit-sum line segment through the kernel center.

    ``length`` defaults to 0.8 * min(shape); the segment is rasterized by
    bilinear splatting of densely spaced points, so fractional lengths and
    arbitrary angles are supported.
    """
    kh, kw = shape
    if kh < 1 or kw < 1:
        raise ParameterError(f"kernel shape must be positive, got {shape}")
    if length is None:
        length = 0.8 * min(kh, kw)
    if length < 1.0:
        length = 1.0
    kernel = np.zeros((kh, kw), dtype=np.float64)
    cy, cx = (kh - 1) / 2.0, (kw - 1) / 2.0
    theta = math.radians(angle_deg)
    num = max(2, int(32 * length))
    for t in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, num):
        _splat(kernel, cy + t * math.sin(theta), cx + t * math.cos(theta))
    return kernel / kernel.sum()


def random_walk_kernel(shape, num_steps=None, seed=0) -> np.ndarray:
    """Random-walk motion blur: a jittery trajectory splatted from the center.

    Deterministic per seed.  The walk is folded back into the support so the
    kernel never degenerates to an empty canvas.
    """
    kh, kw = shape
    if kh < 1 or kw < 1:
        raise ParameterError(f"kernel shape must be positive, got {shape}")
    if num_steps is None:
        num_steps = 4 * max(kh, kw)
    rng = np.random.default_rng(seed)
    kernel = np.zeros((kh, kw), dtype=np.float64)
    y, x = (kh - 1) / 2.0, (kw - 1) / 2.0
    velocity = rng.normal(scale=0.6, size=2)
    for _ in range(num_steps):
        velocity = 0.85 * velocity + rng.normal(scale=0.35, size=2)
        ny, nx = y + velocity[0], x + velocity[1]
        # substep splats keep the trajectory connected
        for frac in np.linspace(0.0, 1.0, 4):
            _splat(kernel, y + frac * (ny - y), x + frac * (nx - x))
        y = min(max(ny, 0.0), kh - 1)
        x = min(max(nx, 0.0), kw - 1)
    return kernel / kernel.sum()


def _splat(canvas, y, x):
    """Accumulate unit mass at a fractional position with bilinear weights."""
    kh, kw = canvas.shape
    y = min(max(y, 0.0), kh - 1.0)
    x = min(max(x, 0.0), kw - 1.0)
    y0, x0 = int(y), int(x)
    y1, x1 = min(y0 + 1, kh - 1), min(x0 + 1, kw - 1)
    fy, fx = y - y0, x - x0
    canvas[y0, x0] += (1 - fy) * (1 - fx)
    canvas[y0, x1] += (1 - fy) * fx
    canvas[y1, x0] += fy * (1 - fx)
    canvas[y1, x1] += fy * fx


def synthetic_sharp_image(shape=(64, 64), channels=1, seed=0) -> np.ndarray:
    """Piecewise-constant cartoon test image with crisp edges.

    Random rectangles, ellipses, and bars over a two-tone background; such
    images have sparse gradients, which is the regime the gradient prior is
    built for.  Deterministic per seed.
    """
    h, w = shape
    if channels not in (1, 3):
        raise ParameterError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((channels, h, w), dtype=np.float64)
    split = rng.uniform(0.3, 0.7)
    for c in range(channels):
        lo, hi = rng.uniform(0.05, 0.35), rng.uniform(0.55, 0.9)
        img[c] = np.where(xx < split * w, lo, hi)
    num_shapes = int(rng.integers(6, 10))
    for _ in range(num_shapes):
        kind = rng.choice(["rect", "ellipse", "bar"])
        color = rng.uniform(0.0, 1.0, size=channels)
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
        if kind == "rect":
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        elif kind == "ellipse":
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        else:
            angle = rng.uniform(0, math.pi)
            dist = np.abs((yy - cy) * math.cos(angle) - (xx - cx) * math.sin(angle))
            mask = dist < max(1.5, 0.06 * min(h, w))
        for c in range(channels):
            img[c][mask] = color[c]
    return np.clip(img, 0.0, 1.0)
