"""Command-line entry point: ``warpforge <subcommand> ...``.

Exit status is 0 on success, 1 for bad input or usage, 2 for numerical
failures (singular fits, RANSAC without a model, divergence).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import amoe, evaluation, homography, imaging, stitcher, tps_ffd
from ._parallel import worker_count
from .errors import InputError, NumericalError

log = logging.getLogger("warpforge")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _parse_hw(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise InputError(f"expected HxW, got {text!r}") from exc
    return h, w


def _parse_matrix(text: str) -> np.ndarray:
    if os.path.exists(text):
        with open(text, encoding="utf-8") as f:
            text = f.read()
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 9:
        raise InputError(f"homography needs 9 values, got {len(vals)}")
    return np.array(vals).reshape(3, 3)


def _write_text(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)


# ------------------------------------------------------------------ commands

def _config_from_args(args) -> stitcher.StitchConfig:
    values = stitcher.read_config_file(args.config) if args.config else {}
    for name in stitcher.LOSS_FIELDS + stitcher.RUN_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return stitcher.build_config(values)


def cmd_stitch(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.matches:
        raise InputError("a match file is required (--matches or matches = ... in --config)")
    i_ref = imaging.load_image(args.ref)
    i_tgt = imaging.load_image(args.tgt)
    h, w = i_ref.shape[:2]
    _, _, corr = stitcher.ingest_matches(cfg.matches, (w, h), (w, h))
    out = stitcher.stitch_full(cfg, i_ref, i_tgt, corr)
    imaging.save_image(args.out, out.panorama)
    if args.flow_prefix:
        imaging.save_flow(f"{args.flow_prefix}ref.wff", out.flow_ref)
        imaging.save_flow(f"{args.flow_prefix}tgt.wff", out.flow_tgt)
    _write_text(args.report, stitcher.report_json(out.report) + "\n")
    m = out.report["metrics"]
    print(f"mpsnr={m['mpsnr']} mssim={m['mssim']} iterations="
          f"{sum(s['iterations'] for s in out.report['stages'])}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    res = tps_ffd.parse_resolutions(args.resolutions)
    # the -mt rows use at least two workers, even on single-core hosts
    threads = (1,) if args.single_thread else (1, max(2, worker_count(args.threads)))
    rows = tps_ffd.bench_tps(res, U=args.u, V=args.v, repeats=args.repeats, threads=threads,
                             seed=args.seed)
    _write_text(args.out, tps_ffd.bench_csv(rows))
    return EXIT_OK


def cmd_metrics(args) -> int:
    a = imaging.load_image(args.ref)
    b = imaging.load_image(args.tgt)
    ma = imaging.load_image(args.ref_mask)[..., 0] if args.ref_mask else np.ones(a.shape[:2])
    mb = imaging.load_image(args.tgt_mask)[..., 0] if args.tgt_mask else np.ones(b.shape[:2])
    rep = evaluation.metric_report(a, b, imaging.overlap_mask(ma, mb))
    if args.csv:
        print(evaluation.CSV_HEADER)
        print(rep.csv_row())
    else:
        print(rep.as_lines())
    return EXIT_OK


def cmd_fuse_demo(args) -> int:
    f_s = np.load(args.fs)
    f_g = np.load(args.fg)
    if args.random_blob:
        rng = np.random.default_rng(args.seed)
        c = f_s.shape[0]
        router = amoe.RouterParams(rng.normal(0, 0.5, (3, 4 * c)), rng.normal(0, 0.5, 3))
        amoe.save_blob(args.blob, router, amoe.ExpertParams.random(c, rng))
    router, experts = amoe.load_blob(args.blob)
    w = amoe.route(router, f_s, f_g)
    fused = amoe.fuse(experts, w, f_s, f_g)
    if args.out:
        np.save(args.out, fused)
    print(f"w_s={w.w_s}\nw_g={w.w_g}\nw_h={w.w_h}\nreg_loss={amoe.reg_loss(w, args.lambda_e)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.base:
        base = imaging.load_image(args.base)
    else:
        h, w = _parse_hw(args.size)
        base = stitcher.make_texture(h, w, seed=args.seed, channels=args.channels)
    pair = stitcher.generate_synthetic_pair(
        base, seed=args.seed, homography_magnitude=args.homography_magnitude,
        tps_magnitude=args.tps_magnitude, n_points=args.points)
    os.makedirs(args.out_dir, exist_ok=True)
    j = lambda name: os.path.join(args.out_dir, name)  # noqa: E731
    imaging.save_image(j("ref.png"), pair.i_ref)
    imaging.save_image(j("tgt.png"), pair.i_tgt)
    imaging.save_flow(j("flow_gt.wff"), pair.flow)
    stitcher.write_matches(j("matches.txt"), pair.ref_points, pair.tgt_points)
    with open(j("H_gt.txt"), "w", encoding="utf-8") as f:
        f.write(" ".join(repr(float(v)) for v in pair.H.ravel()) + "\n")
    print(f"wrote {args.out_dir}: ref.png tgt.png matches.txt flow_gt.wff H_gt.txt "
          f"({len(pair.ref_points)} matches)", file=sys.stderr)
    return EXIT_OK


def cmd_warp(args) -> int:
    img = imaging.load_image(args.image)
    if (args.flow is None) == (args.homography is None):
        raise InputError("give exactly one of --flow or --homography")
    if args.flow:
        flow = imaging.load_flow(args.flow)
    else:
        h, w = _parse_hw(args.size) if args.size else img.shape[:2]
        flow = homography.homography_to_flow(_parse_matrix(args.homography), h, w)
    out, mask = imaging.warp_with_flow(img, flow, canvas=True)
    imaging.save_image(args.out, out)
    if args.mask_out:
        imaging.save_image(args.mask_out, mask)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _add_config_flags(p):
    defaults = stitcher.StitchConfig()
    p.add_argument("--config", help="key = value file; flags override it")
    for name in stitcher.LOSS_FIELDS:
        flag = "--" + name.lower().replace("_", "-")
        if name == "intra_mode":
            p.add_argument(flag, dest=name, choices=("as-written", "prose"))
        else:
            typ = type(getattr(defaults.loss, name))
            p.add_argument(flag, dest=name, type=typ, help=f"default {getattr(defaults.loss, name)}")
    for name in stitcher.RUN_FIELDS:
        flag = "--" + name.replace("_", "-")
        d = getattr(defaults, name)
        if name == "backend":
            p.add_argument(flag, dest=name, choices=("ffd", "vanilla"))
        elif name in ("smoothing", "matches"):
            p.add_argument(flag, dest=name, help=f"default {d}")
        else:
            p.add_argument(flag, dest=name, type=type(d), help=f"default {d}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="warpforge", description="TPS/FFD image stitching toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("stitch", help="stitch an image pair from matched keypoints")
    p.add_argument("--ref", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", required=True, help="panorama PNG")
    p.add_argument("--report", default="-", help="JSON run report (default stdout)")
    p.add_argument("--flow-prefix", help="also write <prefix>ref.wff and <prefix>tgt.wff")
    _add_config_flags(p)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("bench", help="vanilla vs FFD TPS evaluation benchmark (CSV)")
    p.add_argument("--resolutions", default="566x800,1329x2000", help="comma list of HxW")
    p.add_argument("--u", type=int, default=12)
    p.add_argument("--v", type=int, default=12)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--threads", type=int, default=0, help="threaded-variant workers (0 = auto)")
    p.add_argument("--single-thread", action="store_true", help="skip the -mt rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="mPSNR/mSSIM of two warped images on their overlap")
    p.add_argument("--ref", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--ref-mask")
    p.add_argument("--tgt-mask")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("fuse-demo", help="route and fuse two (c,h,w) .npy feature maps")
    p.add_argument("--fs", required=True, help="semantic feature map (.npy)")
    p.add_argument("--fg", required=True, help="geometric feature map (.npy)")
    p.add_argument("--blob", required=True, help="AMOE parameter blob")
    p.add_argument("--random-blob", action="store_true", help="write a seeded random blob first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-e", type=float, default=0.1)
    p.add_argument("--out", help="fused map (.npy)")
    p.set_defaults(func=cmd_fuse_demo)

    p = sub.add_parser("synth", help="generate a synthetic pair with ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--base", help="base image; default is a procedural texture")
    p.add_argument("--size", default="256x320", help="procedural base size HxW")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--homography-magnitude", type=float, default=0.05)
    p.add_argument("--tps-magnitude", type=float, default=0.0)
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("warp", help="backward-warp an image by a flow or a homography")
    p.add_argument("--image", required=True)
    p.add_argument("--flow", help="WFF1 flow file")
    p.add_argument("--homography", help="9 values (row-major) or a file holding them")
    p.add_argument("--size", help="output HxW for --homography (default: input size)")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out")
    p.set_defaults(func=cmd_warp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def cli(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
