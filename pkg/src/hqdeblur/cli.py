"""Batch command line: kernel synthesis, blurring, training, inference,
evaluation, and gradient verification.

Exit codes: 0 success, 1 I/O failure, 2 bad flags, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dblt, ppm
from .figures import (save_loss_curves, save_metric_histograms,
                      save_restoration_panel)
from .gradcheck import build_check_instance, gradient_check
from .metrics import evaluate_model, write_report_csv
from .network import forward, load_model, save_model
from .synthesis import (linear_kernels, load_dataset, synthesize,
                        trajectory_kernels)
from .training import TrainConfig, TrainingDivergedError, fit, init_params

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

LOCK_NAME = ".hqdeblur.lock"


class CliError(Exception):
    """Terminates the verb with a specific exit code and message."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


class OutputLock:
    """Exclusive per-directory lock so two runs never share an output dir."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.path = self.directory / LOCK_NAME
        self._fd: int | None = None

    def __enter__(self) -> "OutputLock":
        os.makedirs(self.directory, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(
                EXIT_IO,
                f"{self.path}: output directory is locked by another run "
                "(delete the lock file if no other run is active)")
        os.write(self._fd, f"{os.getpid()}\n".encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _note(args, message: str) -> None:
    if args.verbose:
        print(message)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CliError(EXIT_USAGE, message)


def _read_image(path) -> np.ndarray:
    try:
        return ppm.read_image(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}")


def _read_kernel(path) -> np.ndarray:
    try:
        return dblt.read_tensor_file(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}")


def _load_model(path):
    try:
        return load_model(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}")


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}")


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write_kernel_files(kernels: Sequence[np.ndarray], out_dir, args) -> int:
    os.makedirs(out_dir, exist_ok=True)
    for index, kernel in enumerate(kernels):
        dblt.write_tensor(Path(out_dir) / f"k{index:04d}.dblt", kernel)
    print(f"wrote {len(kernels)} kernels to {out_dir}")
    return EXIT_OK


def cmd_synth_kernels(args) -> int:
    _require(args.angles >= 1 and args.lengths >= 1,
             "--angles and --lengths must be positive")
    _require(1 <= args.min_len <= args.max_len,
             "need 1 <= --min-len <= --max-len")
    _require(args.size >= 3 and args.size % 2 == 1,
             "--size must be an odd integer >= 3")
    _require(args.max_len <= args.size,
             "--max-len must fit inside --size")
    kernels = linear_kernels(args.angles, args.lengths, args.size,
                             args.min_len, args.max_len)
    return _write_kernel_files(kernels, args.out, args)


def cmd_synth_trajectories(args) -> int:
    _require(args.count >= 1, "--count must be positive")
    _require(args.size >= 3 and args.size % 2 == 1,
             "--size must be an odd integer >= 3")
    _require(args.scales >= 1 and args.rotations >= 1,
             "--scales and --rotations must be positive")
    kernels = trajectory_kernels(args.count, args.size, seed=args.seed,
                                 scales=args.scales, rotations=args.rotations)
    return _write_kernel_files(kernels, args.out, args)


def cmd_blur(args) -> int:
    _require(args.noise_std >= 0.0, "--noise-std must be non-negative")
    image = _read_image(args.image)
    kernel = _read_kernel(args.kernel)
    sample = synthesize(image, kernel, noise_std=args.noise_std, seed=args.seed)
    _ensure_parent(args.out)
    ppm.write_image(args.out, sample.y)
    _note(args, f"blurred {args.image} with {args.kernel} "
                f"(noise {args.noise_std:g}, seed {args.seed})")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args.layers >= 1, "--layers must be positive")
    _require(args.channels >= 1, "--channels must be positive")
    _require(args.epochs >= 1, "--epochs must be positive")
    _require(args.batch >= 1, "--batch must be positive")
    _require(args.lr > 0.0, "--lr must be positive")
    _require(args.kernel_size >= 3 and args.kernel_size % 2 == 1,
             "--kernel-size must be an odd integer >= 3")
    _require(args.decay_every >= 1, "--decay-every must be positive")
    _require(args.decay_every <= args.epochs,
             "--decay-every must not exceed --epochs")

    samples = _load_dataset(args.data)
    if not samples:
        raise CliError(EXIT_IO, f"{args.data}: dataset is empty")
    triples = [s.triple() for s in samples]
    planes = 3 if triples[0][0].ndim == 3 else 1

    params = init_params(args.layers, args.channels, planes=planes,
                         k_shape=(args.kernel_size, args.kernel_size),
                         seed=args.seed)
    config = TrainConfig(epochs=args.epochs, lr0=args.lr,
                         batch_size=args.batch, seed=args.seed,
                         decay_every=args.decay_every)
    out = Path(args.out)
    _ensure_parent(out)
    out_dir = out.parent

    with OutputLock(out_dir):
        result = fit(triples, params, config, out_dir,
                     checkpoint_every=args.checkpoint_every)
        if out.name != "model.dblt":
            os.replace(out_dir / "model.dblt", out)
        save_loss_curves(result.history, out_dir / "training_loss.png")

    if args.verbose:
        for h in result.history:
            print(f"epoch {h.epoch:4d}  lr {h.lr:.2e}  loss {h.total:.6g}  "
                  f"kernel {h.kernel_term:.6g}  image {h.image_term:.6g}")
    last = result.history[-1]
    print(f"trained {args.layers} layers x {args.channels} channels on "
          f"{len(triples)} samples; final epoch loss {last.total:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_deblur(args) -> int:
    params = _load_model(args.model)
    y = _read_image(args.input)
    try:
        result = forward(y, params)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"{args.input}: {exc}")
    if not (np.all(np.isfinite(result.image))
            and np.all(np.isfinite(result.kernel))):
        raise CliError(EXIT_NUMERIC,
                       "deblurred output contains non-finite values")
    _ensure_parent(args.out_image)
    _ensure_parent(args.out_kernel)
    ppm.write_image(args.out_image, result.image)
    dblt.write_tensor(args.out_kernel, result.kernel)
    print(f"wrote {args.out_image} and {args.out_kernel}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = _load_model(args.model)
    samples = _load_dataset(args.data)
    if not samples:
        raise CliError(EXIT_IO, f"{args.data}: dataset is empty")

    report_path = Path(args.report)
    _ensure_parent(report_path)
    with OutputLock(report_path.parent):
        report = evaluate_model(params, samples)
        write_report_csv(report_path, report)
        stem = report_path.with_suffix("")
        save_metric_histograms(report, f"{stem}_histograms.png")
        shown = samples[:4]
        results = [forward(s.y, params) for s in shown]
        save_restoration_panel(shown, results, f"{stem}_panels.png")

    if args.verbose:
        for row in report.rows:
            print(f"sample {row.sample_id}: psnr {row.psnr_db:.3f} dB  "
                  f"isnr {row.isnr_db:+.3f} dB  ssim {row.ssim:.4f}  "
                  f"kernel rmse {row.kernel_rmse:.6g}")
    print(f"evaluated {len(samples)} samples: "
          f"mean psnr {report.mean('psnr_db'):.3f} dB, "
          f"mean isnr {report.mean('isnr_db'):+.3f} dB, "
          f"mean ssim {report.mean('ssim'):.4f}, "
          f"mean kernel rmse {report.mean('kernel_rmse'):.6g}")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _require(args.layers >= 1, "--layers must be positive")
    _require(args.channels >= 1, "--channels must be positive")
    _require(args.size >= 8, "--size must be at least 8")
    _require(args.tol > 0.0, "--tol must be positive")
    y, x_true, k_true, params = build_check_instance(
        args.layers, args.channels, args.size, seed=args.seed)
    report = gradient_check(y, x_true, k_true, params, tolerance=args.tol)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise CliError(EXIT_NUMERIC,
                       f"gradient check failed: max relative error "
                       f"{report.max_rel_err:.3e} exceeds {args.tol:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for every random choice (default 0)")
    common.add_argument("--verbose", action="store_true",
                        help="print per-item progress detail")

    parser = argparse.ArgumentParser(
        prog="hqdeblur",
        description="Blind deblurring with an unrolled half-quadratic "
                    "splitting network.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    p = sub.add_parser("synth-kernels", parents=[common],
                       help="rasterize a grid of linear motion kernels")
    p.add_argument("--angles", type=int, default=16)
    p.add_argument("--lengths", type=int, default=16)
    p.add_argument("--min-len", type=float, default=5.0)
    p.add_argument("--max-len", type=float, default=20.0)
    p.add_argument("--size", type=int, default=31)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_kernels)

    p = sub.add_parser("synth-trajectories", parents=[common],
                       help="rasterize random smooth trajectory kernels")
    p.add_argument("--count", type=int, default=8,
                   help="base trajectories (each yields scales x rotations kernels)")
    p.add_argument("--size", type=int, default=31)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--rotations", type=int, default=8)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_trajectories)

    p = sub.add_parser("blur", parents=[common],
                       help="blur an image with a kernel plus Gaussian noise")
    p.add_argument("--image", required=True, help="sharp PGM/PPM input")
    p.add_argument("--kernel", required=True, help="kernel tensor (DBLT)")
    p.add_argument("--noise-std", type=float, default=0.01)
    p.add_argument("--out", required=True, help="blurred PGM/PPM output")
    p.set_defaults(func=cmd_blur)

    p = sub.add_parser("train", parents=[common],
                       help="train a model on a synthesized dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--layers", type=int, default=10)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--epochs", type=int, default=160)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--kernel-size", type=int, default=31,
                   help="odd kernel window estimated by the model")
    p.add_argument("--decay-every", type=int, default=20,
                   help="halve the learning rate every this many epochs")
    p.add_argument("--checkpoint-every", type=int, default=20)
    p.add_argument("--out", required=True, help="model file (DBLT)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deblur", parents=[common],
                       help="estimate the kernel and sharp image for one input")
    p.add_argument("--model", required=True, help="trained model (DBLT)")
    p.add_argument("--input", required=True, help="blurred PGM/PPM input")
    p.add_argument("--out-image", required=True, help="restored PGM/PPM output")
    p.add_argument("--out-kernel", required=True, help="kernel tensor output (DBLT)")
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("eval", parents=[common],
                       help="score a model on a dataset and render figures")
    p.add_argument("--model", required=True, help="trained model (DBLT)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--report", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="verify analytic gradients against finite differences")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"hqdeblur: {exc}", file=sys.stderr)
        return exc.exit_code
    except TrainingDivergedError as exc:
        print(f"hqdeblur: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"hqdeblur: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"hqdeblur: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
