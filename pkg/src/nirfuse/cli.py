"""Command-line entry point: ``nirfuse fit|render|metrics|synth|dwt``.

Exit codes: 0 success, 1 usage or invalid input, 2 I/O, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diffcore as dc
from . import imaging, synth, trainer
from .fields import CheckpointError, load_checkpoint
from .wavelet import DETAIL_BANDS, WaveletError, dwt2_multiscale

log = logging.getLogger("nirfuse")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3

# fit outputs, relative to --out
RESTORED, LOW_PANEL, HIGH_PANEL, LOG_CSV, PANELS_JSON, CONFIG_FILE, CHECKPOINT = (
    "restored.png", "low.png", "high.png", "train_log.csv", "panels.json", "config.toml", "model.ckpt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_help(f) -> str:
    extra = f"default: {cfgmod._format_value(f.default)}"
    if f.metadata.get("source"):
        extra += f"; {f.metadata['source']}"
    return f"{f.metadata.get('help', '')} ({extra})"


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig/LossConfig field; unset flags stay absent from the namespace."""
    group = parser.add_argument_group("training configuration (flags override --config)")
    for name, f in cfgmod.all_fields().items():
        kw = dict(dest=f"cfg_{name}", default=argparse.SUPPRESS, help=_field_help(f))
        if f.type in ("bool", bool):
            group.add_argument(_flag(name), action=argparse.BooleanOptionalAction, **kw)
        elif f.type in ("tuple", tuple):
            group.add_argument(_flag(name), type=float, nargs=2, metavar=("LO", "HI"), **kw)
        elif f.type in ("int", int):
            group.add_argument(_flag(name), type=int, metavar="N", **kw)
        else:
            group.add_argument(_flag(name), type=float, metavar="X", **kw)


def resolve_config(args) -> cfgmod.TrainConfig:
    """Config file (if any), then explicit flags; flags win."""
    try:
        base = cfgmod.load(args.config) if args.config else cfgmod.TrainConfig()
    except OSError as exc:
        raise OSError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    if getattr(args, "iters", None) is not None:
        overrides["iterations"] = args.iters
    if "low_band" in overrides:
        overrides["low_band"] = tuple(overrides["low_band"])
    if "high_band" in overrides:
        overrides["high_band"] = tuple(overrides["high_band"])
    return base.replace(**overrides) if overrides else base


# -- subcommands ---------------------------------------------------------------

def cmd_fit(args) -> int:
    config = resolve_config(args)
    rgb = imaging.load_image(args.rgb)
    nir = imaging.load_image(args.nir)
    if rgb.shape[2] != 3:
        raise UsageError(f"{args.rgb}: expected an RGB image, got {rgb.shape[2]} channel(s)")
    if nir.shape[2] == 3:
        nir = imaging.luminance(nir)[..., None]
    if rgb.shape[:2] != nir.shape[:2]:
        raise UsageError(f"RGB is {rgb.shape[0]}x{rgb.shape[1]} but NIR is {nir.shape[0]}x{nir.shape[1]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    written = []

    def progress(it, report):
        if args.progress_every and (it + 1) % args.progress_every == 0:
            log.info("iter %d  total %.5f  lf %.5f  hf %.5f  grad %.5f", it + 1, report.total, report.l_lf,
                     report.l_hf, report.l_grad)

    try:
        cfgmod.save(config, out / CONFIG_FILE)
        written.append(out / CONFIG_FILE)
        try:
            result = trainer.fit(rgb, nir, config, checkpoint_path=ckpt, progress=progress)
        except trainer.FitAborted as exc:
            trainer.write_log(exc.result.log, out / LOG_CSV)
            log.error("%s; last good state saved to %s", exc, ckpt)
            raise
        d = result.diagnostics
        for name, plane in ((RESTORED, d["restored"]), (LOW_PANEL, d["low"]), (HIGH_PANEL, d["high_display"])):
            written.append(out / name)
            imaging.save_image(plane, out / name, bit_depth=args.bit_depth)
        written.append(out / LOG_CSV)
        trainer.write_log(result.log, out / LOG_CSV)
        written.append(out / PANELS_JSON)
        (out / PANELS_JSON).write_text(json.dumps({
            "high_display": {"map": "(x / m + 1) / 2", "m": d["high_display_scale"], "plane": "G_HF - beta"},
            "low_display": {"map": "clip(x, 0, 1)"},
            "beta": d["beta"],
            "rgb_gain": config.rgb_gain,
            "iterations": result.iterations_run,
            "wall_time_s": result.wall_time,
        }, indent=2, sort_keys=True))
    except BaseException:
        for p in written:
            if p != ckpt and p.exists() and p.name != LOG_CSV:
                p.unlink()
        raise
    print(f"restored image: {out / RESTORED}")
    print(f"checkpoint:     {ckpt}")
    return EXIT_OK


def cmd_render(args) -> int:
    if args.width < 1 or args.height < 1:
        raise UsageError(f"output size must be positive, got {args.width}x{args.height}")
    model = load_checkpoint(args.checkpoint)
    imaging.save_image(model.render(args.height, args.width), args.out, bit_depth=args.bit_depth)
    print(f"rendered {args.width}x{args.height}: {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    restored = imaging.load_image(args.restored)
    nir = imaging.load_image(args.nir)
    gt = imaging.load_image(args.gt) if args.gt else None
    report = imaging.evaluate_pair(restored, nir, gt, margin=args.margin)
    print(imaging.format_report(report))
    if args.out_json:
        Path(args.out_json).write_text(imaging.report_json(report, restored=str(args.restored), margin=args.margin)
                                       + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    scene = synth.SceneSpec(seed=args.seed, height=args.size[0], width=args.size[1], regions=args.regions,
                            texture_amplitude=args.texture_amplitude, texture_band=tuple(args.texture_band))
    deg = synth.DegradeSpec(gain=args.gain, read_noise=args.read_noise, shot_noise=args.shot_noise)
    clean, noisy, nir = synth.reference_pair(scene, deg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, plane in (("clean_rgb.png", clean), ("noisy_rgb.png", noisy), ("nir.png", nir)):
        imaging.save_image(plane, out / name, bit_depth=args.bit_depth)
    (out / "scene.json").write_text(json.dumps(synth.sidecar(scene, deg), indent=2, sort_keys=True))
    print(f"wrote clean_rgb.png, noisy_rgb.png, nir.png, scene.json to {out}")
    return EXIT_OK


def cmd_dwt(args) -> int:
    plane = imaging.load_image(args.input)
    pyr = dwt2_multiscale(plane, args.levels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scales = {}
    for s in range(1, args.levels + 1):
        for name in DETAIL_BANDS:
            c = pyr.band(s, name).value
            m = float(np.max(np.abs(c)))
            scales[f"L{s}_{name}"] = m
            shown = np.full_like(c, 0.5) if m == 0 else (c / m + 1.0) / 2.0
            imaging.save_image(shown, out / f"L{s}_{name}.png")
    ll = pyr.band(args.levels, "LL").value
    imaging.save_image(ll / 2 ** args.levels, out / f"L{args.levels}_LL.png")
    (out / "dwt.json").write_text(json.dumps({
        "detail_map": "(c / m + 1) / 2 with m = max |c| per subband (m = 0 shows mid-gray)",
        "ll_map": f"c / 2^{args.levels}",
        "m": scales,
    }, indent=2, sort_keys=True))
    print(f"wrote {3 * args.levels + 1} subband images to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nirfuse", description="Zero-shot RGB+NIR low-light restoration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    # the same switches after the subcommand name; SUPPRESS keeps the top-level values otherwise
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common], help="fit the model to one RGB/NIR pair",
                       description="Fit the frequency-split field to an aligned RGB/NIR pair and write the "
                                   "restored image, checkpoint, training log and branch panels.")
    p.add_argument("--rgb", required=True, help="low-light RGB PNG (8 or 16 bit)")
    p.add_argument("--nir", required=True, help="aligned NIR PNG")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--iters", type=int, help="shorthand for --iterations")
    p.add_argument("--checkpoint", help=f"checkpoint path (default: OUT/{CHECKPOINT})")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8, help="PNG bit depth of outputs")
    p.add_argument("--progress-every", type=int, default=500, metavar="N", help="log progress every N iterations")
    add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", parents=[common], help="render a checkpoint at any resolution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", parents=[common], help="structure-NCC, and PSNR/SSIM/NCC against a ground truth")
    p.add_argument("--restored", required=True)
    p.add_argument("--nir", required=True)
    p.add_argument("--gt", help="clean ground truth (synthetic data)")
    p.add_argument("--out-json", help="also write the report as JSON")
    p.add_argument("--margin", type=int, default=16, help="border crop in pixels (default: 16)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic RGB/NIR pair with ground truth")
    ref, rdeg = synth.REFERENCE_SCENE, synth.REFERENCE_DEGRADE
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=ref.seed)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=(ref.height, ref.width))
    p.add_argument("--regions", type=int, default=ref.regions)
    p.add_argument("--texture-amplitude", type=float, default=ref.texture_amplitude)
    p.add_argument("--texture-band", type=float, nargs=2, metavar=("LO", "HI"), default=ref.texture_band,
                   help="texture frequency band in cycles per pixel")
    p.add_argument("--gain", type=float, default=rdeg.gain)
    p.add_argument("--read-noise", type=float, default=rdeg.read_noise)
    p.add_argument("--shot-noise", type=float, default=rdeg.shot_noise)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dwt", parents=[common], help="write the Haar subbands of an image for inspection")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dwt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (trainer.FitAborted, dc.NumericalError, FloatingPointError) as exc:
        print(f"nirfuse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (imaging.ImageError, CheckpointError, OSError) as exc:
        print(f"nirfuse: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, WaveletError, ValueError) as exc:
        print(f"nirfuse: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
