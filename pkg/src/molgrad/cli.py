"""Command-line front end: ``molgrad <subcommand> [flags]``.

Each subcommand reads an optional INI config (``--config``); keys live in a
section named after the subcommand (or ``[common]``) and use the long flag
name without dashes (``gamma-step`` or ``gamma_step``).  Flags win over the
file.  Outputs are staged in a temporary location and renamed into place
only when the subcommand succeeds.

Exit codes: 0 success, 1 validation failure, 2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import math
import os
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .exceptions import FormatError, MolgradError, NumericalError
from .imaging import (
    BlurKernel,
    Image,
    add_noise,
    build_blur_operator,
    edge_density,
    load_kernel,
    pgm_read,
    pgm_write,
    psnr,
    read_manifest,
    synth_dataset,
    write_manifest,
)
from .network import init_network, load_network, save_network
from .pnp import StepSizeWarning, write_trace_csv
from .restoration import restore
from .training import TrainConfig, clamp_negative_weights, negative_weight_mass, train, write_training_csv
from .verification import reports_to_csv, reports_to_text, run_suite

log = logging.getLogger("molgrad")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    """Bad or missing command-line input; maps to exit code 1."""


# -- staged outputs ----------------------------------------------------------


@contextlib.contextmanager
def staged_file(target):
    """Yield a temporary path next to ``target``; rename onto it on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".part", dir=target.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, target)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


@contextlib.contextmanager
def staged_dir(target):
    """Yield a scratch directory whose files are moved into ``target`` on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", suffix=".part", dir=target.parent))
    try:
        yield tmp
        target.mkdir(exist_ok=True)
        for item in sorted(tmp.iterdir()):
            os.replace(item, target / item.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


# -- argument handling -------------------------------------------------------

# dest -> (type, default) per subcommand; filled by _opt
_DEFAULTS: dict = {}


def _opt(p, name, flag, type_, default, help_, **kw):
    _DEFAULTS.setdefault(name, {})[flag.lstrip("-").replace("-", "_")] = (type_, default)
    shown = "" if default is None else f" (default: {default})"
    p.add_argument(flag, type=type_, default=None, help=help_ + shown, **kw)


def _choice(*allowed):
    def parse(text):
        if text not in allowed:
            raise argparse.ArgumentTypeError(f"expected one of {', '.join(allowed)}, got {text!r}")
        return text

    parse.__name__ = "choice"
    return parse


def _int_list(text):
    try:
        out = tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("widths must be positive integers")
    return out


def _build_parser():
    _DEFAULTS.clear()
    parser = argparse.ArgumentParser(prog="molgrad", description="Certified gradient-denoiser toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    def new(name, help_, aliases=()):
        p = sub.add_parser(name, help=help_, description=help_, aliases=list(aliases))
        p.set_defaults(command=name)
        p.add_argument("--config", type=Path, default=None, help="INI file with a [%s] or [common] section" % name)
        _opt(p, name, "--seed", int, 0, "random seed")
        return p

    p = new("synth", "Write a synthetic PGM dataset plus manifest.csv.")
    _opt(p, "synth", "--output", Path, None, "output directory")
    _opt(p, "synth", "--count", int, 200, "number of images")
    _opt(p, "synth", "--size", int, 16, "image side length")
    _opt(p, "synth", "--kind", _choice("blocks", "stripes", "blobs"), "blocks", "blocks|stripes|blobs")

    p = new("train", "Train, clamp and certify a denoiser.")
    _opt(p, "train", "--input", Path, None, "dataset manifest (CSV with a 'path' column)")
    _opt(p, "train", "--output", Path, None, "output directory for model.net, training.csv, certification.*")
    _opt(p, "train", "--hidden", _int_list, "256,512,256", "comma-separated hidden widths")
    _opt(p, "train", "--gamma", float, 1.0, "sReLU quadratic half-width")
    _opt(p, "train", "--epochs", int, 100, "training epochs")
    _opt(p, "train", "--batch-size", int, 16, "minibatch size")
    _opt(p, "train", "--sigma", float, 0.05, "training noise level")
    _opt(p, "train", "--alpha", float, 10.0, "nonnegativity barrier weight")
    _opt(p, "train", "--lr", float, 3e-3, "learning rate for the first phase")
    _opt(p, "train", "--final-lr", float, 3e-4, "learning rate for the final phase")
    _opt(p, "train", "--final-fraction", float, 0.2, "fraction of epochs run at --final-lr")
    _opt(p, "train", "--checkpoint-every", int, 0, "checkpoint period in epochs (0 disables)")
    _opt(p, "train", "--samples", int, 20, "Jacobian samples for certification")
    _opt(p, "train", "--pairs", int, 200, "monotonicity pairs for certification")

    p = new("certify", "Run the verification suite on a model.", aliases=("verify",))
    _opt(p, "certify", "--model", Path, None, "model file")
    _opt(p, "certify", "--output", Path, None, "report path prefix (writes .txt and .csv)")
    _opt(p, "certify", "--samples", int, 100, "Jacobian samples")
    _opt(p, "certify", "--pairs", int, 1000, "monotonicity pairs")
    _opt(p, "certify", "--scale", float, 1.0, "sampling scale around --center")
    _opt(p, "certify", "--center", float, 0.0, "sampling center")

    p = new("denoise", "Apply a model to one PGM image.")
    _opt(p, "denoise", "--model", Path, None, "model file")
    _opt(p, "denoise", "--input", Path, None, "noisy PGM")
    _opt(p, "denoise", "--output", Path, None, "denoised PGM")
    _opt(p, "denoise", "--reference", Path, None, "clean PGM for PSNR")

    p = new("degrade", "Blur and add noise to a PGM image.")
    _opt(p, "degrade", "--input", Path, None, "clean PGM")
    _opt(p, "degrade", "--output", Path, None, "degraded PGM")
    _opt(p, "degrade", "--kernel", str, "box:3", "kernel file or box:k, gaussian:k:std, motion:k")
    _opt(p, "degrade", "--sigma", float, 0.01, "noise standard deviation")
    _opt(p, "degrade", "--boundary", _choice("zero", "replicate"), "zero", "zero|replicate")

    p = new("deblur", "Restore a blurred PGM with the PnP solver.")
    _opt(p, "deblur", "--model", Path, None, "model file")
    _opt(p, "deblur", "--input", Path, None, "degraded PGM")
    _opt(p, "deblur", "--output", Path, None, "restored PGM (trace CSV goes beside it)")
    _opt(p, "deblur", "--kernel", str, "box:3", "kernel file or box:k, gaussian:k:std, motion:k")
    _opt(p, "deblur", "--boundary", _choice("zero", "replicate"), "zero", "zero|replicate")
    _opt(p, "deblur", "--reference", Path, None, "clean PGM for PSNR")
    _opt(p, "deblur", "--mu", float, 50.0, "data-fidelity weight")
    _opt(p, "deblur", "--sigma", float, None, "primal step; omitted means the bound beta/(1-beta)")
    _opt(p, "deblur", "--gamma-step", float, 0.8, "tau = gamma_step / (sigma + kappa/2)")
    _opt(p, "deblur", "--mode", _choice("strict", "relaxed"), "strict", "strict|relaxed step-size gate")
    _opt(p, "deblur", "--lipschitz", float, None, "skip estimation and use this L_D")
    _opt(
        p, "deblur", "--lipschitz-set", _choice("observation", "conservative"), "observation",
        "inputs for estimating L_D: observation|conservative (adds the zero start and random images)",
    )
    _opt(p, "deblur", "--max-iter", int, 500, "iteration cap")
    _opt(p, "deblur", "--rel-tol", float, 1e-10, "stop when ||dv||^2/||v||^2 falls below this")

    p = new("verify-solver", "Check the PnP solver against a closed-form affine instance.", aliases=("solver-selftest",))
    _opt(p, "verify-solver", "--sigma", float, None, "primal step; omitted means the bound beta/(1-beta)")
    _opt(p, "verify-solver", "--tau-scale", float, 1.0, "multiply tau (values > 1 break condition (ii))")
    _opt(p, "verify-solver", "--max-iter", int, 500, "iteration cap")
    _opt(p, "verify-solver", "--rel-tol", float, 1e-24, "stopping threshold")
    return parser


def _resolve(args):
    """Fill unset flags from the config file, then from built-in defaults."""
    cfg = configparser.ConfigParser()
    if args.config is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        try:
            cfg.read(args.config)
        except configparser.Error as exc:
            raise FormatError(f"bad config file {args.config}: {exc}") from exc
    sections = [s for s in (args.command, "common") if cfg.has_section(s)]
    for dest, (type_, default) in _DEFAULTS[args.command].items():
        if getattr(args, dest) is not None:
            continue
        value = default
        for sec in sections:
            for key in (dest, dest.replace("_", "-")):
                if cfg.has_option(sec, key):
                    raw = cfg.get(sec, key)
                    try:
                        value = type_(raw)
                    except (argparse.ArgumentTypeError, ValueError) as exc:
                        raise UsageError(f"config [{sec}] {key}: {exc}") from exc
                    break
            else:
                continue
            break
        setattr(args, dest, value)
    return args


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _need_files(args, *names):
    for n in names:
        p = getattr(args, n)
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"--{n.replace('_', '-')}: no such file {p}")


def _kernel(spec: str) -> BlurKernel:
    if Path(spec).is_file():
        return load_kernel(spec)
    name, *rest = spec.split(":")
    try:
        if name == "box":
            return BlurKernel.box(int(rest[0]) if rest else 3)
        if name == "motion":
            return BlurKernel.motion(int(rest[0]) if rest else 5)
        if name == "gaussian":
            k = int(rest[0]) if rest else 5
            return BlurKernel.gaussian(k, float(rest[1]) if len(rest) > 1 else 1.0)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad kernel spec {spec!r}: {exc}") from exc
    raise FileNotFoundError(f"--kernel: no such file or named kernel {spec!r}")


def _fmt_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    _need(args, "output")
    images = synth_dataset(args.kind, args.count, args.size, args.seed)
    with staged_dir(args.output) as tmp:
        names = []
        for i, img in enumerate(images):
            pgm_write(img, tmp / f"img_{i:05d}.pgm")
            names.append(tmp / f"img_{i:05d}.pgm")
        write_manifest(names, tmp / "manifest.csv")
    print(f"wrote {len(images)} images and manifest.csv to {args.output}")
    return EXIT_OK


def _schedule(epochs, lr, final_lr, final_fraction):
    if epochs == 0:
        return ()
    cut = min(max(epochs - int(round(final_fraction * epochs)), 1), epochs)
    sched = [(1, cut, lr)]
    if cut < epochs:
        sched.append((cut + 1, epochs, final_lr))
    return tuple(sched)


def cmd_train(args) -> int:
    _need(args, "input", "output")
    _need_files(args, "input")
    paths = read_manifest(args.input)
    images = [pgm_read(p) for p in paths]
    if not images:
        raise UsageError(f"manifest {args.input} lists no images")
    d0 = images[0].height * images[0].width
    net = init_network([d0, *args.hidden], gamma=args.gamma, seed=args.seed)
    with staged_dir(args.output) as tmp:
        config = TrainConfig(
            epochs=args.epochs,
            alpha_barrier=args.alpha,
            lr_schedule=_schedule(args.epochs, args.lr, args.final_lr, args.final_fraction),
            batch_size=args.batch_size,
            noise_sigma=args.sigma,
            seed=args.seed,
            checkpoint_every=args.checkpoint_every,
            checkpoint_dir=str(tmp / "checkpoints") if args.checkpoint_every else None,
        )
        try:
            net, history = train(config, images, net)
        except NumericalError as exc:
            dump = Path(str(args.output).rstrip("/\\") + ".nan-dump.npz")
            np.savez(dump, **{k: np.asarray(v) for k, v in (exc.payload or {}).items()})
            print(f"offending batch written to {dump}", file=sys.stderr)
            raise
        neg, frac = negative_weight_mass(net)
        net = clamp_negative_weights(net)
        write_training_csv(history, tmp / "training.csv")
        save_network(net, tmp / "model.net")
        data = np.array([im.vector for im in images])
        reports = run_suite(
            net,
            seed=args.seed,
            samples=args.samples,
            pairs=args.pairs,
            scale=float(data.std()) or 1.0,
            center=float(data.mean()),
            lipschitz_inputs=data[: min(len(data), 8)],
        )
        (tmp / "certification.txt").write_text(reports_to_text(reports))
        (tmp / "certification.csv").write_text(reports_to_csv(reports))
    final = history[-1].mean_loss if history else float("nan")
    print(f"trained {args.epochs} epochs, final loss {final:.6g}; clamped negative mass {neg:.3g} ({frac:.2%})")
    print(reports_to_text(reports), end="")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VALIDATION


def cmd_certify(args) -> int:
    _need(args, "model")
    _need_files(args, "model")
    net = load_network(args.model)
    reports = run_suite(net, seed=args.seed, samples=args.samples, pairs=args.pairs, scale=args.scale, center=args.center)
    text = reports_to_text(reports)
    if args.output is not None:
        prefix = Path(args.output)
        with staged_file(prefix.with_suffix(".txt")) as t, staged_file(prefix.with_suffix(".csv")) as c:
            t.write_text(text)
            c.write_text(reports_to_csv(reports))
    print(text, end="")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VALIDATION


def _check_geometry(net, img):
    if img.height * img.width != net.in_dim:
        raise UsageError(f"image is {img.height}x{img.width} but the model expects {net.in_dim} pixels")


def cmd_denoise(args) -> int:
    _need(args, "model", "input", "output")
    _need_files(args, "model", "input", "reference")
    from .denoiser import denoise

    net = load_network(args.model)
    img = pgm_read(args.input)
    _check_geometry(net, img)
    out = Image.from_vector(denoise(net, img.vector), img.width, img.height)
    with staged_file(args.output) as tmp:
        pgm_write(out, tmp)
    if args.reference is not None:
        ref = pgm_read(args.reference)
        print(f"psnr_input {_fmt_psnr(psnr(img, ref))}")
        print(f"psnr_output {_fmt_psnr(psnr(out, ref))}")
    print(f"edge_density {edge_density(out):.6g}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    _need(args, "input", "output")
    _need_files(args, "input")
    img = pgm_read(args.input)
    A = build_blur_operator(_kernel(args.kernel), img.width, img.height, args.boundary)
    blurred = Image.from_vector(A.forward(img.vector), img.width, img.height)
    noisy = add_noise(blurred, args.sigma, args.seed)
    with staged_file(args.output) as tmp:
        pgm_write(noisy, tmp)
    print(f"psnr_degraded {_fmt_psnr(psnr(noisy, img))}")
    return EXIT_OK


def cmd_deblur(args) -> int:
    _need(args, "model", "input", "output")
    _need_files(args, "model", "input", "reference")
    net = load_network(args.model)
    img = pgm_read(args.input)
    _check_geometry(net, img)
    A = build_blur_operator(_kernel(args.kernel), img.width, img.height, args.boundary)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", StepSizeWarning)
        res = restore(
            net,
            A,
            img.vector,
            args.mu,
            sigma=args.sigma,
            mode=args.mode,
            gamma_step=args.gamma_step,
            lipschitz=args.lipschitz,
            lipschitz_set=args.lipschitz_set,
            max_iter=args.max_iter,
            rel_tol=args.rel_tol,
            seed=args.seed,
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Image.from_vector(res.image, img.width, img.height)
    trace_path = Path(str(args.output) + ".trace.csv")
    with staged_file(args.output) as t1, staged_file(trace_path) as t2:
        pgm_write(out, t1)
        write_trace_csv(res.trace, t2)
    p = res.params
    print(f"lipschitz {res.lipschitz:.6g} beta {res.beta:.6g} sigma {p.sigma:.6g} tau {p.tau:.6g} kappa {p.kappa:.6g}")
    print(res.step_check.describe())
    print(f"iterations {res.trace.iterations} stop {res.trace.reason}")
    if args.reference is not None:
        ref = pgm_read(args.reference)
        print(f"psnr_degraded {_fmt_psnr(psnr(img, ref))}")
        print(f"psnr_restored {_fmt_psnr(psnr(out, ref))}")
    return EXIT_OK


def cmd_verify_solver(args) -> int:
    from .selftest import run_selftest

    res = run_selftest(args.seed, tau_scale=args.tau_scale, sigma=args.sigma, max_iter=args.max_iter, rel_tol=args.rel_tol)
    print(
        f"rel_error {res.rel_error:.3e} iterations {res.iterations} stop {res.reason} "
        f"sigma {res.sigma:.6g} tau {res.tau:.6g} region_ratio {res.region_ratio:.3g}"
    )
    print("PASS" if res.passed else "FAIL")
    return EXIT_OK if res.passed else EXIT_VALIDATION


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "certify": cmd_certify,
    "denoise": cmd_denoise,
    "degrade": cmd_degrade,
    "deblur": cmd_deblur,
    "verify-solver": cmd_verify_solver,
}


def _thread_limit():
    n = os.environ.get("MOLGRAD_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise UsageError(f"MOLGRAD_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args = _resolve(args)
        with _thread_limit():
            return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, FormatError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, MolgradError, ValueError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
