"""Command-line entry point: ``virtualde <subcommand>``.

Subcommands: ``phantom-gen``, ``train``, ``infer``, ``suppress``, ``eval``,
``froc``.  Settings come from an optional JSON or TOML file with one section
per area (``phantom``, ``training``, ``generator``, ``discriminator``,
``suppress``, ``infer``, ``froc``); command-line flags override the file.
Unknown sections or keys are rejected.

Exit status: 0 on success, 1 on runtime failure, 2 on usage/config errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import froc as froc_mod
from .imagecore import Image, read_image, write_image
from .model import DiscriminatorSpec, GeneratorSpec, load_checkpoint
from .phantom import PhantomSpec, generate_dataset, read_lesions
from .training import TrainingConfig, apply_thread_cap, train

log = logging.getLogger("virtualde")


class ConfigError(ValueError):
    pass


@dataclass
class SuppressOptions:
    threshold: float | None = None
    kernel_size: int = 201
    sigma: float = 50.0
    reference_size: int | None = 2022


@dataclass
class InferOptions:
    bone_min: float = 0.0
    bone_max: float = 1.0


@dataclass
class FrocOptions:
    radius: float = froc_mod.DEFAULT_RADIUS
    fp_levels: list = field(default_factory=lambda: [1.0, 2.0])
    n_boot: int = 2000


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    suppress: SuppressOptions = field(default_factory=SuppressOptions)
    infer: InferOptions = field(default_factory=InferOptions)
    froc: FrocOptions = field(default_factory=FrocOptions)


def _section(cls, name, data):
    if not isinstance(data, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    if cls is TrainingConfig:
        try:
            return TrainingConfig.from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"[training]: {exc}") from exc
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    sections = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    for name, value in data.items():
        default = getattr(cfg, name)
        setattr(cfg, name, _section(type(default), name, value))
    return cfg


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _add_globals(p, suppress_defaults=False):
    d = (lambda v: argparse.SUPPRESS) if suppress_defaults else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON or TOML config file")
    p.add_argument("--seed", type=int, default=d(None), help="master random seed")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--verbose", action="store_true", default=d(False),
                   help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="virtualde", description=__doc__.split("\n")[0])
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic dual-energy dataset")
    _add_globals(p, True)
    p.add_argument("--n", type=_positive_int, required=True, help="number of phantoms")
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="share of cases in the test split")
    p.add_argument("--format", choices=["pfm", "png"], default="pfm")

    p = sub.add_parser("train", help="train the generator/discriminator pair")
    _add_globals(p, True)
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--epochs", type=_non_negative_int, help="training epochs")
    p.add_argument("--lambda", dest="lambda_l1", type=float, help="L1 loss weight")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=_positive_int, help="images per mini-batch")
    p.add_argument("--profile", choices=["smoke"],
                   help="generate a small dataset and train briefly")

    p = sub.add_parser("infer", help="virtual bone images from standard images")
    _add_globals(p, True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--bone-min", type=float, help="raw value mapped from -1")
    p.add_argument("--bone-max", type=float, help="raw value mapped from +1")

    p = sub.add_parser("suppress", help="virtual soft tissue from standard + bone")
    _add_globals(p, True)
    p.add_argument("--standard", required=True, help="standard image file")
    p.add_argument("--bone", required=True, help="bone image file")
    p.add_argument("--threshold", type=float, help="bone edge threshold")
    p.add_argument("--name", default="soft", help="output file stem")
    p.add_argument("--debug", action="store_true", help="also write intermediate fields")

    p = sub.add_parser("eval", help="PSNR/SSIM/RMAE on a manifest split")
    _add_globals(p, True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--self", dest="self_eval", action="store_true",
                   help="score ground truth against itself")
    p.add_argument("--split", default="test", help="manifest split to score")

    p = sub.add_parser("froc", help="FROC curves and bootstrap sensitivity")
    _add_globals(p, True)
    p.add_argument("--lesions", required=True, nargs="+", help="lesion CSV files")
    p.add_argument("--marks", required=True, action="append",
                   help="mark CSV for one reader (repeatable)")
    p.add_argument("--label", action="append", help="curve label per --marks")
    p.add_argument("--image-ids", help="file listing every image id, one per line")
    p.add_argument("--radius", type=float, help="acceptance radius in pixels")
    p.add_argument("--fp-levels", type=float, nargs="+",
                   help="FP/image rates for the bootstrap")
    p.add_argument("--n-boot", type=int, help="bootstrap resamples")
    return parser


# -- subcommands -----------------------------------------------------------


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom_gen(args, cfg: RunConfig):
    spec = cfg.phantom
    if args.size:
        spec = replace(spec, size=args.size)
    seed = args.seed if args.seed is not None else spec.seed
    out = _out_dir(args, "phantoms")
    manifest = generate_dataset(args.n, seed, spec, out, args.test_fraction, args.format)
    print(f"wrote {len(manifest)} samples to {out / 'manifest.json'}")
    return 0


def _smoke(args, cfg):
    out = _out_dir(args, "smoke")
    seed = args.seed if args.seed is not None else 0
    generate_dataset(40, seed, replace(cfg.phantom, size=64), out / "data", 0.2)
    tcfg = replace(cfg.training, epochs=5, seed=seed)
    print(json.dumps({"training": tcfg.to_dict()}, indent=1))
    res = train(tcfg, out / "data" / "manifest.json", out / "run", cfg.generator,
                replace(cfg.discriminator, patch_size=min(cfg.discriminator.patch_size, 64)))
    ratio = res.val_l1[-1] / res.val_l1[0]
    print(f"validation L1: epoch 0 {res.val_l1[0]:.5f}, epoch 5 {res.val_l1[-1]:.5f} "
          f"(ratio {ratio:.3f})")
    return 0


def cmd_train(args, cfg: RunConfig):
    if args.profile == "smoke":
        return _smoke(args, cfg)
    if not args.manifest:
        raise ConfigError("train needs --manifest (or --profile smoke)")
    tcfg = cfg.training
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lambda_l1", args.lambda_l1),
                                   ("learning_rate", args.lr), ("batch_size", args.batch_size),
                                   ("seed", args.seed)) if v is not None}
    tcfg = replace(tcfg, **overrides)
    print(json.dumps({"training": tcfg.to_dict(), "generator": asdict(cfg.generator),
                      "discriminator": asdict(cfg.discriminator)}, indent=1))
    res = train(tcfg, args.manifest, _out_dir(args, "run"), cfg.generator, cfg.discriminator)
    print(f"checkpoint: {res.checkpoint}\nloss log: {res.loss_log}")
    return 0


IMAGE_SUFFIXES = (".pfm", ".png")


def _expand_inputs(inputs):
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        else:
            files.append(p)
    return files


def cmd_infer(args, cfg: RunConfig):
    from .metrics import predict_bone

    gen, _, _ = load_checkpoint(args.checkpoint)
    gen.eval()
    lo = cfg.infer.bone_min if args.bone_min is None else args.bone_min
    hi = cfg.infer.bone_max if args.bone_max is None else args.bone_max
    out = _out_dir(args, "inferred")
    files = _expand_inputs(args.inputs)
    if not files:
        raise ConfigError("no input images found")
    for f in files:
        bone = predict_bone(gen, read_image(f), (lo, hi))
        dest = write_image(out / f"{f.stem}_bone.pfm", bone, image_id=f.stem)
        log.info("%s -> %s", f, dest)
    print(f"wrote {len(files)} bone images to {out}")
    return 0


def _write_preview(path, pixels):
    from PIL import Image as PILImage

    lo, hi = float(pixels.min()), float(pixels.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    PILImage.fromarray(np.round((pixels - lo) * scale).astype(np.uint8)).save(path)


def cmd_suppress(args, cfg: RunConfig):
    from .imagecore import write_pfm
    from .suppress import suppress_bone

    opts = cfg.suppress
    threshold = args.threshold if args.threshold is not None else opts.threshold
    debug = {} if args.debug else None
    soft = suppress_bone(read_image(args.standard), read_image(args.bone), threshold,
                         opts.kernel_size, opts.sigma, opts.reference_size, debug=debug)
    out = _out_dir(args, "suppressed")
    write_image(out / f"{args.name}.pfm", soft, image_id=args.name)
    _write_preview(out / f"{args.name}_preview.png", soft.pixels)
    if debug is not None:
        for key in ("low", "delta", "d11", "d12", "d22", "high"):
            write_pfm(out / f"{args.name}_{key}.pfm", debug[key])
        # residual of the reintegration against the edited field
        (out / f"{args.name}_debug.json").write_text(json.dumps(
            {"threshold": debug["threshold"], "residual": debug["residual"]}, indent=1) + "\n")
    print(f"wrote {out / (args.name + '.pfm')}")
    return 0


def cmd_eval(args, cfg: RunConfig):
    from .metrics import evaluate_cases, evaluate_pairs, load_split, write_metrics_csv

    out = _out_dir(args, "eval")
    csv_path = out / "metrics.csv"
    if args.self_eval:
        samples, missing = load_split(args.manifest, args.split)
        cases = []
        for s in samples:
            cases.append((s.id, "bone", s.bone, s.bone))
            if s.soft is not None:
                cases.append((s.id, "soft", s.soft, s.soft))
        ev = evaluate_cases(cases)
        ev.missing = missing
        write_metrics_csv(csv_path, ev)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --self is given")
        ev = evaluate_pairs(args.manifest, args.checkpoint, csv_path, cfg.suppress.threshold,
                            args.split)
    for kind, s in ev.summary.items():
        m, sd = s["mean"], s["std"]
        print(f"{kind}: PSNR {m['psnr_db']:.2f} +- {sd['psnr_db']:.2f} dB, "
              f"SSIM {m['ssim_x100']:.1f} +- {sd['ssim_x100']:.1f}, "
              f"RMAE {m['rmae_percent']:.2f} +- {sd['rmae_percent']:.2f} %")
    if ev.missing:
        for p in ev.missing:
            print(f"missing: {p}", file=sys.stderr)
        return 1
    return 0


def cmd_froc(args, cfg: RunConfig):
    opts = cfg.froc
    radius = args.radius if args.radius is not None else opts.radius
    levels = args.fp_levels or opts.fp_levels
    n_boot = args.n_boot if args.n_boot is not None else opts.n_boot
    seed = args.seed if args.seed is not None else 0
    lesions = [les for path in args.lesions for les in read_lesions(path)]
    ids = []
    if args.image_ids:
        ids = [ln.strip() for ln in Path(args.image_ids).read_text().splitlines() if ln.strip()]
    labels = args.label or []
    if labels and len(labels) != len(args.marks):
        raise ConfigError("give one --label per --marks file")
    labels = labels or [Path(m).stem for m in args.marks]
    out = _out_dir(args, "froc")
    curves = {}
    rows = []
    for label, path in zip(labels, args.marks):
        cases = froc_mod.build_cases(lesions, froc_mod.read_marks(path), ids)
        curve = froc_mod.froc_curve(cases, radius)
        curves[label] = curve
        froc_mod.write_curve_csv(out / f"froc_{label}.csv", curve)
        boot = froc_mod.bootstrap_ci(cases, radius, levels, n_boot, seed)
        for f, m, lo, hi in zip(boot.fp_levels, boot.mean, boot.lo95, boot.hi95):
            rows.append([label, repr(f), repr(froc_mod.sensitivity_at_fp(curve, f)), repr(m),
                         repr(lo), repr(hi), boot.n_skipped])
            print(f"{label}: sensitivity@{f:g}FP = {froc_mod.sensitivity_at_fp(curve, f):.3f} "
                  f"(bootstrap mean {m:.3f}, 95% CI {lo:.3f}-{hi:.3f})")
    import csv

    with open(out / "froc_bootstrap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "fp", "sensitivity", "boot_mean", "lo95", "hi95", "skipped"])
        w.writerows(rows)
    froc_mod.plot_curves(out / "froc.svg", curves)
    return 0


COMMANDS = {"phantom-gen": cmd_phantom_gen, "train": cmd_train, "infer": cmd_infer,
            "suppress": cmd_suppress, "eval": cmd_eval, "froc": cmd_froc}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    apply_thread_cap()
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"virtualde: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"virtualde: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
