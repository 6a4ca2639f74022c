"""Command-line front end: deblur a single image, synthesize test data,
evaluate results, run the ablation matrix, and benchmark step timing.

Flag resolution order (lowest to highest precedence): built-in defaults,
``--config`` file entries, ``VBDEBLUR_<KEY>`` environment variables,
explicit command-line flags.  Config files are flat ``key=value`` text
mirroring the flag names (dashes become underscores); every run writes its
resolved settings back out as ``config.txt``, which can be fed to
``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import math
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import fields, imaging, solver
from .elbo import LossMode
from .errors import NumericError, ParameterError, ShapeError
from .generators import ImageGeneratorSpec, KernelGeneratorSpec
from .priors import PriorKind
from .solver import RunConfig

ENV_PREFIX = "VBDEBLUR_"

RUN_DEFAULTS = {
    "steps": "5000",
    "lr_image": "0.01",
    "lr_kernel": "0.0001",
    "samples": "1",
    "sigma": "0.02",
    "prior": "sparse",
    "variational": "on",
    "kernel_size": "31x31",
    "seed": "0",
    "log_every": "50",
    "checkpoint_every": "0",
    "s_max": "0.1",
    "patch_radius": "17",
    "complement_std": "consistent",
    "scales": "5",
    "channels_per_scale": "128",
    "skip_channels": "16",
    "input_channels": "8",
    "kernel_input_dim": "200",
    "kernel_hidden_dim": "1000",
    "kernel_std": "1.0",
}

SYNTH_DEFAULTS = {
    "kernel_type": "linear",
    "kernel_size": "31x31",
    "motion_angle": "30.0",
    "sigma": "0.01",
    "seed": "0",
}

BENCH_DEFAULTS = {
    "image_sizes": "128,256,384,512",
    "kernel_sizes": "",
    "bench_steps": "6",
    "image_size": "256",
}

RUN_KEYS = tuple(RUN_DEFAULTS)


def _parse_kernel_size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", " ").split()
    try:
        if len(parts) == 1:
            kh = kw = int(parts[0])
        elif len(parts) == 2:
            kh, kw = int(parts[0]), int(parts[1])
        else:
            raise ValueError(text)
    except ValueError:
        raise ParameterError(f"kernel size must look like '31x31', got {text!r}") from None
    if kh < 1 or kw < 1:
        raise ParameterError(f"kernel size must be positive, got {text!r}")
    return kh, kw


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise ParameterError(f"expected on/off, got {text!r}")


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_config_snapshot(path, settings: dict[str, str]):
    lines = [f"{key}={settings[key]}" for key in sorted(settings)]
    Path(path).write_text("\n".join(lines) + "\n")


def _resolve_settings(args, keys, defaults) -> dict[str, str]:
    config_values = {}
    if getattr(args, "config", None):
        config_values = read_config_file(args.config)
    resolved = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = str(flag)
            continue
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            resolved[key] = env
            continue
        if key in config_values:
            resolved[key] = config_values[key]
            continue
        if key in defaults:
            resolved[key] = defaults[key]
    return resolved


def build_run_config(settings: dict[str, str]) -> RunConfig:
    prior_name = settings["prior"].strip().lower()
    if prior_name == "none":
        prior = PriorKind.none()
    elif prior_name == "sparse":
        prior = PriorKind.sparse()
    elif prior_name == "extreme":
        prior = PriorKind.extreme(
            patch_radius=int(settings["patch_radius"]),
            inflated_complement_std=settings["complement_std"].strip().lower() == "inflated",
        )
    else:
        raise ParameterError(f"prior must be none/sparse/extreme, got {settings['prior']!r}")
    mode = LossMode(variational=_parse_bool(settings["variational"]), prior=prior)
    image_spec = ImageGeneratorSpec(
        scales=int(settings["scales"]),
        channels_per_scale=int(settings["channels_per_scale"]),
        skip_channels=int(settings["skip_channels"]),
        input_channels=int(settings["input_channels"]),
        s_max=float(settings["s_max"]),
    )
    kernel_spec = KernelGeneratorSpec(
        input_dim=int(settings["kernel_input_dim"]),
        hidden_dim=int(settings["kernel_hidden_dim"]),
        kernel_std=float(settings["kernel_std"]),
    )
    return RunConfig(
        steps=int(settings["steps"]),
        lr_image=float(settings["lr_image"]),
        lr_kernel=float(settings["lr_kernel"]),
        samples=int(settings["samples"]),
        sigma=float(settings["sigma"]),
        mode=mode,
        kernel_shape=_parse_kernel_size(settings["kernel_size"]),
        seed=int(settings["seed"]),
        log_every=int(settings["log_every"]),
        checkpoint_every=int(settings["checkpoint_every"]),
        image_spec=image_spec,
        kernel_spec=kernel_spec,
    )


def _require(settings, key, command):
    value = settings.get(key)
    if not value:
        raise ParameterError(f"{command} requires --{key.replace('_', '-')}")
    return value


def _load_observation(path, sigma):
    image = imaging.load_image(path)
    return fields.BlurredObservation(image=torch.from_numpy(image), noise_sigma=sigma)


def _write_run_outputs(out_dir: Path, result, settings):
    out_dir.mkdir(parents=True, exist_ok=True)
    imaging.save_image(out_dir / "image.png", result.image)
    imaging.save_kernel(out_dir / "kernel.txt", result.kernel)
    imaging.save_kernel_image(out_dir / "kernel.png", result.kernel)
    solver.write_loss_csv(result.log, out_dir / "loss.csv")
    # the snapshot names everything needed to reproduce except the (self-
    # referential) output directory, which reruns supply afresh
    snapshot = {k: v for k, v in settings.items() if k != "out"}
    write_config_snapshot(out_dir / "config.txt", snapshot)
    (out_dir / "meta.txt").write_text(f"runtime_seconds={result.total_seconds:.3f}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_deblur(args) -> int:
    settings = _resolve_settings(args, RUN_KEYS + ("input", "out"), RUN_DEFAULTS)
    input_path = _require(settings, "input", "deblur")
    out_dir = Path(_require(settings, "out", "deblur"))
    config = build_run_config(settings)
    kh, kw = config.kernel_shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"kernel size must be odd in both dimensions, got {kh}x{kw}")
    obs = _load_observation(input_path, config.sigma)
    checkpoint = out_dir / "checkpoint.pt" if config.checkpoint_every > 0 else None
    if checkpoint is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = solver.run(obs, config, checkpoint_path=checkpoint)
    _write_run_outputs(out_dir, result, settings)
    print(f"wrote {out_dir} (mode {config.mode.label}, {config.steps} steps, "
          f"{result.total_seconds:.1f}s)")
    return 0


def cmd_synthesize(args) -> int:
    keys = tuple(SYNTH_DEFAULTS) + ("sharp", "kernel", "motion_length", "walk_steps", "out")
    settings = _resolve_settings(args, keys, SYNTH_DEFAULTS)
    sharp_path = _require(settings, "sharp", "synthesize")
    out_dir = Path(_require(settings, "out", "synthesize"))
    sharp = imaging.load_image(sharp_path)
    if settings.get("kernel"):
        kernel = imaging.load_kernel(settings["kernel"])
        if bool((kernel < 0).any()):
            raise ParameterError(f"kernel file {settings['kernel']} has negative entries")
        kernel = kernel / kernel.sum()
    else:
        shape = _parse_kernel_size(settings["kernel_size"])
        if settings["kernel_type"] == "linear":
            length = float(settings["motion_length"]) if settings.get("motion_length") else None
            kernel = imaging.linear_motion_kernel(shape, length=length,
                                                  angle_deg=float(settings["motion_angle"]))
        elif settings["kernel_type"] == "random-walk":
            steps = int(settings["walk_steps"]) if settings.get("walk_steps") else None
            kernel = imaging.random_walk_kernel(shape, num_steps=steps,
                                                seed=int(settings["seed"]))
        else:
            raise ParameterError(
                f"kernel type must be linear or random-walk, got {settings['kernel_type']!r}")
    sigma = float(settings["sigma"])
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    obs = fields.degrade(torch.from_numpy(sharp.astype(np.float32)),
                         torch.from_numpy(kernel.astype(np.float32)),
                         sigma, int(settings["seed"]))
    kh, kw = kernel.shape
    r0, c0 = (kh - 1) // 2, (kw - 1) // 2
    m, n = obs.image.shape[-2:]
    truth_crop = sharp[:, r0:r0 + m, c0:c0 + n]
    out_dir.mkdir(parents=True, exist_ok=True)
    imaging.save_image(out_dir / "blurred.png", obs.image.numpy())
    imaging.save_image(out_dir / "truth_sharp.png", truth_crop)
    imaging.save_kernel(out_dir / "truth_kernel.txt", kernel)
    imaging.save_kernel_image(out_dir / "truth_kernel.png", kernel)
    write_config_snapshot(out_dir / "synth_config.txt", settings)
    print(f"wrote {out_dir} ({m}x{n} observation, {kh}x{kw} kernel, sigma {sigma})")
    return 0


def _find_run_dirs(root: Path):
    """Run directories under ``root``: anything holding image.png + kernel.txt.

    Labeling: <image>/<mode> for two-level layouts, <root name>/<dir name>
    for one-level layouts (the ablate command's output), and
    <root name>/default when the root itself is a run directory.
    """
    runs = []
    candidates = [root] + sorted(p for p in root.rglob("*") if p.is_dir())
    for p in candidates:
        if not ((p / "image.png").exists() and (p / "kernel.txt").exists()):
            continue
        rel = p.relative_to(root)
        parts = rel.parts
        if len(parts) == 0:
            image, mode = root.name, "default"
        elif len(parts) == 1:
            image, mode = root.name, parts[0]
        else:
            image, mode = parts[-2], parts[-1]
        runs.append((image, mode, p))
    return runs


def _truth_for(truth_root: Path, image: str):
    direct = truth_root / "truth_sharp.png"
    nested = truth_root / image / "truth_sharp.png"
    if nested.exists():
        return truth_root / image
    if direct.exists():
        return truth_root
    return None


def cmd_evaluate(args) -> int:
    settings = _resolve_settings(args, ("results", "truth", "out"), {})
    results_root = Path(_require(settings, "results", "evaluate"))
    truth_root = Path(_require(settings, "truth", "evaluate"))
    out_path = Path(_require(settings, "out", "evaluate"))
    if not results_root.is_dir():
        raise OSError(f"results directory not found: {results_root}")
    if not truth_root.is_dir():
        raise OSError(f"truth directory not found: {truth_root}")
    runs = _find_run_dirs(results_root)
    if not runs:
        raise ParameterError(f"no run directories (image.png + kernel.txt) under {results_root}")
    missing = [f"{image}/{mode}" for image, mode, _ in runs
               if _truth_for(truth_root, image) is None]
    if missing:
        raise ParameterError("missing ground truth for: " + ", ".join(sorted(set(missing))))
    rows = []
    for image, mode, run_dir in runs:
        truth_dir = _truth_for(truth_root, image)
        record = evaluate_run(run_dir, truth_dir)
        rows.append((image, mode, record))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mode", "psnr", "ssim", "kernel_error", "seconds"])
        for image, mode, rec in rows:
            writer.writerow([image, mode, f"{rec.psnr:.4f}", f"{rec.ssim:.4f}",
                             f"{rec.kernel_error:.6f}", f"{rec.runtime_seconds:.3f}"])
    by_mode: dict[str, list] = {}
    for _, mode, rec in rows:
        by_mode.setdefault(mode, []).append(rec)
    print(f"{'mode':<14}{'psnr':>9}{'ssim':>8}{'kernel_err':>12}{'n':>4}")
    for mode in sorted(by_mode):
        recs = by_mode[mode]
        mean_psnr = statistics.fmean(r.psnr for r in recs)
        mean_ssim = statistics.fmean(r.ssim for r in recs)
        mean_kerr = statistics.fmean(r.kernel_error for r in recs)
        print(f"{mode:<14}{mean_psnr:>9.2f}{mean_ssim:>8.3f}{mean_kerr:>12.6f}{len(recs):>4}")
    print(f"wrote {out_path}")
    return 0


def evaluate_run(run_dir: Path, truth_dir: Path) -> imaging.EvalRecord:
    """Metrics for one run directory against its ground-truth sidecars.

    Image metrics are computed after integer-shift alignment (up to the
    kernel radius): a blind estimate is only defined up to a joint
    translation of the image and the kernel.
    """
    estimate = imaging.load_image(run_dir / "image.png")
    est_kernel = imaging.load_kernel(run_dir / "kernel.txt")
    truth_sharp = imaging.load_image(truth_dir / "truth_sharp.png")
    truth_kernel = imaging.load_kernel(truth_dir / "truth_kernel.txt")
    seconds = math.nan
    meta = run_dir / "meta.txt"
    if meta.exists():
        for line in meta.read_text().splitlines():
            if line.startswith("runtime_seconds="):
                seconds = float(line.split("=", 1)[1])
    max_shift = (max(truth_kernel.shape) - 1) // 2
    psnr_value, ssim_value = imaging.aligned_image_metrics(estimate, truth_sharp, max_shift)
    return imaging.EvalRecord(
        psnr=psnr_value,
        ssim=ssim_value,
        kernel_error=imaging.kernel_recovery_error(est_kernel, truth_kernel),
        runtime_seconds=seconds,
    )


def _ablate_worker(payload):
    label, image, sigma, config, threads = payload
    torch.set_num_threads(threads)
    obs = fields.BlurredObservation(image=torch.from_numpy(image), noise_sigma=sigma)
    return label, solver.run(obs, config)


def cmd_ablate(args) -> int:
    settings = _resolve_settings(args, RUN_KEYS + ("input", "out", "truth", "workers"),
                                 RUN_DEFAULTS | {"workers": "1"})
    input_path = _require(settings, "input", "ablate")
    out_root = Path(_require(settings, "out", "ablate"))
    base_config = build_run_config(settings)
    image = imaging.load_image(input_path)
    workers = int(settings["workers"])
    jobs = []
    for mode in solver.ABLATION_MODES:
        jobs.append((mode.label, image, base_config.sigma,
                     replace(base_config, mode=mode), max(1, torch.get_num_threads() // max(workers, 1))))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_ablate_worker, jobs))
    else:
        results = dict(_ablate_worker(job) for job in jobs)
    for mode in solver.ABLATION_MODES:
        mode_settings = dict(settings)
        mode_settings["prior"] = mode.prior.family.value
        mode_settings["variational"] = "on" if mode.variational else "off"
        _write_run_outputs(out_root / mode.label, results[mode.label], mode_settings)
    print(f"wrote {out_root} ({len(results)} modes)")
    if settings.get("truth"):
        eval_args = argparse.Namespace(results=str(out_root), truth=settings["truth"],
                                       out=str(out_root / "eval.csv"), config=None)
        return cmd_evaluate(eval_args)
    return 0


def _parse_int_list(text: str):
    items = [part.strip() for part in text.split(",") if part.strip()]
    return [int(item) for item in items]


def _seconds_per_step(log):
    # median over post-warmup steps; the first iterations pay allocator costs
    times = [rec.seconds for rec in log]
    tail = times[2:] if len(times) > 4 else times[1:] if len(times) > 1 else times
    return statistics.median(tail)


def cmd_bench_timing(args) -> int:
    keys = RUN_KEYS + tuple(BENCH_DEFAULTS) + ("out",)
    settings = _resolve_settings(args, keys, RUN_DEFAULTS | BENCH_DEFAULTS)
    out_dir = Path(_require(settings, "out", "bench-timing"))
    config = build_run_config(settings)
    bench_steps = int(settings["bench_steps"])
    config = replace(config, steps=bench_steps, log_every=1, checkpoint_every=0)
    image_sizes = _parse_int_list(settings["image_sizes"])
    kernel_sizes = _parse_int_list(settings["kernel_sizes"])
    fixed_image = int(settings["image_size"])
    rows = []
    for side in image_sizes:
        sec = _bench_point(side, config.kernel_shape, config)
        rows.append(("image", side, sec))
        print(f"image {side:4d}px: {sec:.3f} s/step")
    for ksize in kernel_sizes:
        sec = _bench_point(fixed_image, (ksize, ksize), replace(config, kernel_shape=(ksize, ksize)))
        rows.append(("kernel", ksize, sec))
        print(f"kernel {ksize:3d}px: {sec:.3f} s/step")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "size", "seconds_per_step"])
        for sweep, size, sec in rows:
            writer.writerow([sweep, size, f"{sec:.6f}"])
    _plot_timing(rows, out_dir / "timing.png")
    print(f"wrote {out_dir}")
    return 0


def _bench_point(side, kernel_shape, config):
    kh, kw = kernel_shape
    sharp = imaging.synthetic_sharp_image((side + kh - 1, side + kw - 1), channels=1,
                                          seed=config.seed)
    kernel = imaging.linear_motion_kernel(kernel_shape, angle_deg=37.0)
    obs = fields.degrade(torch.from_numpy(sharp.astype(np.float32)),
                         torch.from_numpy(kernel.astype(np.float32)), 0.01, config.seed)
    result = solver.run(obs, config)
    return _seconds_per_step(result.log)


def _plot_timing(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sweeps = {"image": [], "kernel": []}
    for sweep, size, sec in rows:
        sweeps[sweep].append((size, sec))
    active = [name for name, pts in sweeps.items() if pts]
    fig, axes = plt.subplots(1, max(len(active), 1), figsize=(5 * max(len(active), 1), 4))
    if len(active) <= 1:
        axes = [axes]
    for ax, name in zip(axes, active):
        pts = sorted(sweeps[name])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
        ax.set_xlabel(f"{name} size (px)")
        ax.set_ylabel("seconds per step")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(sub):
    for key in RUN_KEYS:
        sub.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vbdeblur",
        description="Single-image blind deconvolution with a variational deep image prior.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    deblur = subs.add_parser("deblur", help="estimate a sharp image and kernel from one blurred image")
    deblur.add_argument("--input", default=None, help="blurred input PNG")
    deblur.add_argument("--out", default=None, help="output directory")
    deblur.add_argument("--config", default=None, help="key=value settings file")
    _add_run_flags(deblur)
    deblur.set_defaults(func=cmd_deblur)

    synth = subs.add_parser("synthesize", help="build a blurred test instance with ground truth")
    synth.add_argument("--sharp", default=None, help="sharp source PNG")
    synth.add_argument("--kernel", default=None, help="kernel text file (overrides --kernel-type)")
    synth.add_argument("--kernel-type", dest="kernel_type", default=None,
                       choices=["linear", "random-walk"])
    synth.add_argument("--kernel-size", dest="kernel_size", default=None)
    synth.add_argument("--motion-length", dest="motion_length", default=None)
    synth.add_argument("--motion-angle", dest="motion_angle", default=None)
    synth.add_argument("--walk-steps", dest="walk_steps", default=None)
    synth.add_argument("--sigma", default=None)
    synth.add_argument("--seed", default=None)
    synth.add_argument("--out", default=None)
    synth.add_argument("--config", default=None)
    synth.set_defaults(func=cmd_synthesize)

    ev = subs.add_parser("evaluate", help="score result directories against ground truth")
    ev.add_argument("--results", default=None, help="root of run directories")
    ev.add_argument("--truth", default=None, help="root of ground-truth sidecars")
    ev.add_argument("--out", default=None, help="CSV output path")
    ev.add_argument("--config", default=None)
    ev.set_defaults(func=cmd_evaluate)

    ab = subs.add_parser("ablate", help="run all six objective modes with shared seeds")
    ab.add_argument("--input", default=None)
    ab.add_argument("--out", default=None)
    ab.add_argument("--truth", default=None, help="optional ground truth for an eval table")
    ab.add_argument("--workers", default=None, help="parallel worker processes")
    ab.add_argument("--config", default=None)
    _add_run_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    bench = subs.add_parser("bench-timing", help="seconds-per-step versus image and kernel size")
    bench.add_argument("--image-sizes", dest="image_sizes", default=None,
                       help="comma-separated observation side lengths")
    bench.add_argument("--kernel-sizes", dest="kernel_sizes", default=None,
                       help="comma-separated kernel side lengths (may be empty)")
    bench.add_argument("--image-size", dest="image_size", default=None,
                       help="fixed observation side for the kernel sweep")
    bench.add_argument("--bench-steps", dest="bench_steps", default=None)
    bench.add_argument("--out", default=None)
    bench.add_argument("--config", default=None)
    _add_run_flags(bench)
    bench.set_defaults(func=cmd_bench_timing)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, ShapeError, NumericError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    raise SystemExit(main())
