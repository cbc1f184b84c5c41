"""Command-line entry point: ``codedstereo <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  Every run writes ``run.txt`` (configuration dump,
seed, versions, wall time) into its output directory.
"""

import argparse
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import kernels
from .config import RunConfig, dump_config, load_config
from .errors import (ConfigurationError, DataError, DomainError, NumericalError, ParseError,
                     UsageError)
from .fileio import (DEFAULT_CROP, load_mask, load_pfm, load_scene_manifest, read_png, save_mask, save_pfm,
                     write_png, write_psf_atlas)
from .geometry import TRADEOFF_HEADER, tradeoff_csv, tradeoff_curve
from .optics import PhaseMask, compute_psf_stack, make_cubic_mask
from .optimize import DEFAULT_LR
from .recon import (LossWeights, correspondence_mask, edof_reconstruct, estimate_nsr, per_disparity_curves,
                    psnr, ssim, epe, bad3, MetricReport)
from .render import CodedPair, render_stereo_pair
from .scenes import toy_scene_set
from .stereo import match_stereo

log = logging.getLogger("codedstereo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers


def _exposures(text):
    """``start:stop:count`` (inclusive, evenly spaced) or a comma list."""
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return list(np.linspace(float(a), float(b), int(n)))
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid exposure list {text!r}") from None


def _alpha(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha triple {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("alpha needs three comma-separated values")
    return vals


def _gamma(text):
    if text == "rgb-only":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid gamma {text!r}") from None


def _run_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "sigma", None) is not None:
        changes["sigma"] = args.sigma
    if getattr(args, "f_number", None) is not None:
        changes["optical"] = cfg.optical.with_(f_number=args.f_number)
    alpha = getattr(args, "alpha", None)
    gamma = getattr(args, "gamma", None)
    if alpha is not None or gamma is not None:
        if gamma == "rgb-only":
            changes["weights"] = LossWeights((0.0, 0.0, 0.0), 1.0)
        else:
            changes["weights"] = LossWeights(alpha if alpha is not None else cfg.weights.alpha,
                                             gamma if gamma is not None else cfg.weights.gamma)
    if changes:
        cfg = RunConfig(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, **changes})
    return cfg


def _out_dir(args):
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _mask_from_args(args, cfg):
    choice = getattr(args, "mask", None) or "flat"
    optical = cfg.optical
    if choice == "flat":
        return PhaseMask.flat(optical.mask_grid_size)
    if choice == "cubic":
        return make_cubic_mask(args.alpha_cubic, optical)
    if choice == "fisher":
        from .optimize import make_fisher_mask
        return make_fisher_mask(optical, seed=cfg.seed)[0]
    p = Path(choice)
    if not p.is_file():
        raise DataError(f"mask file not found: {p}")
    return load_mask(p)


def _scenes(args, cfg):
    manifest = getattr(args, "manifest", None) or cfg.manifest
    if manifest:
        rejected = []
        crop = DEFAULT_CROP if getattr(args, "crop", False) else None
        scenes = load_scene_manifest(manifest, cfg.optical, crop=crop,
                                     crop_seed=getattr(args, "crop_seed", None), rejected=rejected)
        for r in rejected:
            log.warning("%s", r)
        if not scenes:
            raise DataError("no usable scenes in manifest")
        return scenes
    return toy_scene_set(cfg.optical, count=getattr(args, "toy_count", 4), seed=cfg.seed)


def _versions():
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    out["zncc_backend"] = kernels.BACKEND
    return out


def _write_run_record(out, args, cfg, argv, wall):
    lines = [f"command = {' '.join(argv)}", f"seed = {cfg.seed}",
             f"started = {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(time.time() - wall))}",
             f"wall_time_s = {wall:.3f}"]
    lines += [f"version.{k} = {v}" for k, v in _versions().items()]
    lines += ["", dump_config(cfg)]
    (out / "run.txt").write_text("\n".join(lines))


def _coded_pair(args):
    left, right = read_png(args.left), read_png(args.right)
    if left.shape != right.shape:
        raise DataError(f"left/right shapes differ: {left.shape} vs {right.shape}")
    if left.ndim != 3:
        raise DataError("coded images must be RGB")
    return CodedPair(left, right, float(args.sigma or 0.0))


# --------------------------------------------------------------------------- subcommands


def cmd_psf(args, cfg, out):
    mask = _mask_from_args(args, cfg)
    stack = compute_psf_stack(mask, cfg.optical)
    paths = write_psf_atlas(out, stack)
    save_mask(out / "mask.txt", mask)
    print(f"wrote {len(paths) - 1} kernels and psf_moments.csv to {out}")


def cmd_render(args, cfg, out):
    mask = _mask_from_args(args, cfg)
    stack = compute_psf_stack(mask, cfg.optical)
    for i, scene in enumerate(_scenes(args, cfg)):
        pair = render_stereo_pair(scene.clamped(cfg.optical), mask, cfg.optical, cfg.sigma,
                                  seed=cfg.seed + i, stack=stack)
        write_png(out / f"{scene.id}_coded_left.png", pair.coded_left, 16)
        write_png(out / f"{scene.id}_coded_right.png", pair.coded_right, 16)
        print(f"{scene.id}: rendered {scene.shape[0]}x{scene.shape[1]}")


def cmd_stereo(args, cfg, out):
    pair = _coded_pair(args)
    st = match_stereo(pair.coded_left, pair.coded_right, cfg.optical, args.block_radius, args.max_disp)
    save_pfm(out / "disparity.pfm", st.disparity.astype(np.float32))
    write_png(out / "confidence.png", st.confidence, 16)
    _maybe_disparity_metrics(args, st.disparity, out)
    print(f"valid fraction {st.valid.mean():.3f}")


def _maybe_disparity_metrics(args, d_est, out):
    if not getattr(args, "truth_disp", None):
        return None
    d_true = load_pfm(args.truth_disp, channels=1)[0].astype(float)
    if d_true.shape != d_est.shape:
        raise DataError("ground-truth disparity shape differs from the estimate")
    m = correspondence_mask(d_true, args.block_radius)
    text = f"epe_px={epe(d_est, d_true, m)!r}\nbad3_pct={bad3(d_est, d_true, m)!r}\n"
    (out / "disparity_metrics.txt").write_text(text)
    return text


def cmd_recon(args, cfg, out):
    pair = _coded_pair(args)
    mask = _mask_from_args(args, cfg)
    stack = compute_psf_stack(mask, cfg.optical)
    nsr = args.nsr if args.nsr is not None else estimate_nsr(
        np.concatenate([pair.coded_left, pair.coded_right]), cfg.sigma)
    st = None
    if args.mode == "layered":
        if args.hint:
            hint = load_pfm(args.hint, channels=1)[0].astype(float)
        else:
            st = match_stereo(pair.coded_left, pair.coded_right, cfg.optical, args.block_radius)
            hint = (st.disparity, st.disparity_right)
        edof = edof_reconstruct(pair, stack, "layered", hint, nsr)
    else:
        edof = edof_reconstruct(pair, stack, "single", None, nsr)
    write_png(out / "edof_left.png", edof[0], 16)
    write_png(out / "edof_right.png", edof[1], 16)
    if st is not None:
        save_pfm(out / "disparity.pfm", st.disparity.astype(np.float32))
        write_png(out / "confidence.png", st.confidence, 16)
    if args.truth_left and args.truth_right:
        tl, tr = read_png(args.truth_left), read_png(args.truth_right)
        report = _texture_report(edof, (tl, tr), st, args, cfg)
        (out / "metrics.txt").write_text(report.to_text())
        (out / "curves.csv").write_text(report.curves_csv())
        print(report.to_text(), end="")


def _texture_report(edof, truth, st, args, cfg):
    pl, pr = psnr(edof[0], truth[0]), psnr(edof[1], truth[1])
    sl, sr = ssim(edof[0], truth[0]), ssim(edof[1], truth[1])
    levels = cfg.optical.disparity_levels
    e = b = float("nan")
    curve_p = curve_e = np.full(len(levels), np.nan)
    if args.truth_disp:
        d_true = load_pfm(args.truth_disp, channels=1)[0].astype(float)
        d_est = st.disparity if st is not None else d_true
        m = correspondence_mask(d_true, args.block_radius)
        e, b = epe(d_est, d_true, m), bad3(d_est, d_true, m)
        curve_p, curve_e = per_disparity_curves([edof], [truth], [d_est], [(d_true, d_true)], levels, [m])
    return MetricReport(0.5 * (pl + pr), 0.5 * (sl + sr), e, b, curve_p, curve_e, levels, pl, pr, sl, sr)


def cmd_optimize(args, cfg, out):
    from .optimize import optimize_mask, random_init

    scenes = _scenes(args, cfg)
    if args.init == "random":
        init = random_init(cfg.seed, grid_size=cfg.optical.mask_grid_size)
    else:
        args.mask = args.init
        init = _mask_from_args(args, cfg)
    report = optimize_mask(init, scenes, cfg.optical, cfg.weights, args.iters, args.lr, args.fd_step,
                           cfg.seed, cfg.sigma, batch_size=args.batch_size)
    save_mask(out / "mask.txt", report.final_mask)
    save_mask(out / "mask_last.txt", report.last_mask)
    (out / "report.csv").write_text(report.to_csv())
    _plot(out / "loss.png", [r.iteration for r in report.iterations],
          {"loss": [r.loss for r in report.iterations], "loss_disp": [r.loss_disp for r in report.iterations],
           "loss_rgb": [r.loss_rgb for r in report.iterations]}, "iteration", "loss")
    print(f"initial loss {report.initial_loss:.5f}, best {report.best_loss:.5f}")


def cmd_tradeoff(args, cfg, out):
    coc = args.coc if args.coc is not None else cfg.optical.sensor_pixel_pitch
    points = tradeoff_curve(cfg.optical, args.snr, args.exposures, coc)
    (out / "tradeoff.csv").write_text(tradeoff_csv(points))
    _plot(out / "tradeoff.png", [p.exposure for p in points],
          {"DOF (exact)": [p.dof for p in points], "DOF (approx.)": [p.dof_approx for p in points]},
          "exposure [s]", "depth of field [m]")
    print(TRADEOFF_HEADER)
    for p in points:
        print(",".join(f"{v:.6g}" for v in p.as_row()))


def cmd_evaluate(args, cfg, out):
    from .optimize import compare_masks, gamma_ablation

    scenes = _scenes(args, cfg)
    named = []
    for item in args.masks or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--masks entries are name=path, got {item!r}")
        named.append((name, _mask_from_args(argparse.Namespace(mask=path, alpha_cubic=args.alpha_cubic), cfg)))
    table = compare_masks(named, scenes, cfg.optical, cfg.weights, cfg.sigma, cfg.seed, args.threshold)
    (out / "comparison.txt").write_text(table.to_text())
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "curves.csv").write_text(table.curves_csv())
    lines = [f"threshold_db = {table.threshold_db:.3f}"]
    for r in table.rows:
        lines.append(f"dof_ratio[{r.name}] = {table.dof_ratio(r.name):.4g}")
    (out / "dof.txt").write_text("\n".join(lines) + "\n")
    print(table.to_text() + "\n".join(lines))
    if args.gammas:
        abl = gamma_ablation(args.gammas, scenes, cfg.optical, iters=args.iters, lr=args.lr,
                             sigma=cfg.sigma, seed=cfg.seed, alpha=cfg.weights.alpha)
        (out / "gamma_ablation.txt").write_text(abl.to_text())
        (out / "gamma_ablation.csv").write_text(abl.to_csv())
        print(abl.to_text(), end="")


def _plot(path, x, series, xlabel, ylabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, y in series.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    # Fixed metadata keeps the PNG byte-identical across runs.
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="codedstereo", description="Coded-aperture stereo simulation and mask optimisation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, stochastic=True):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        if stochastic:
            sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--f-number", type=float, help="override the configured f-number")
        sp.add_argument("-v", "--verbose", action="store_true")

    def mask_opts(sp):
        sp.add_argument("--mask", default="flat", help="flat, cubic, fisher or a mask file")
        sp.add_argument("--alpha", dest="alpha_cubic", type=float, default=30.0, help="cubic mask strength")

    def scene_opts(sp):
        sp.add_argument("--manifest", help="scene manifest (default: built-in toy scenes)")
        sp.add_argument("--toy-count", type=int, default=4)
        sp.add_argument("--crop", action="store_true", help="crop scenes to 384x768")
        sp.add_argument("--crop-seed", type=int, help="seeded crop position (default: centred)")

    sp = sub.add_parser("psf", help="compute and export the PSF stack of a mask")
    common(sp, stochastic=False)
    mask_opts(sp)
    sp.set_defaults(func=cmd_psf, seed=None)

    sp = sub.add_parser("render", help="render coded stereo pairs")
    common(sp)
    mask_opts(sp)
    scene_opts(sp)
    sp.add_argument("--sigma", type=float)
    sp.set_defaults(func=cmd_render)

    for name, func, helptext in (("stereo", cmd_stereo, "estimate disparity from a coded pair"),
                                 ("recon", cmd_recon, "reconstruct EDOF textures from a coded pair")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, stochastic=False)
        sp.add_argument("--left", required=True)
        sp.add_argument("--right", required=True)
        sp.add_argument("--block-radius", type=int, default=4)
        sp.add_argument("--truth-disp", help="ground-truth left disparity (PFM) for metrics")
        sp.add_argument("--sigma", type=float, help="noise level used for the Wiener NSR")
        if name == "stereo":
            sp.add_argument("--max-disp", type=int)
        else:
            mask_opts(sp)
            sp.add_argument("--mode", choices=("single", "layered"), default="layered")
            sp.add_argument("--hint", help="disparity hint PFM (default: estimated)")
            sp.add_argument("--nsr", type=float)
            sp.add_argument("--truth-left")
            sp.add_argument("--truth-right")
        sp.set_defaults(func=func, seed=None)

    sp = sub.add_parser("optimize", help="optimise a phase mask")
    common(sp)
    scene_opts(sp)
    sp.add_argument("--init", default="flat", help="flat, random, cubic or a mask file")
    sp.add_argument("--alpha-cubic", type=float, default=30.0)
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--lr", type=float, default=DEFAULT_LR)
    sp.add_argument("--fd-step", type=float, default=20e-9)
    sp.add_argument("--batch-size", type=int, default=1)
    sp.add_argument("--gamma", type=_gamma)
    sp.add_argument("--alpha", type=_alpha, help="disparity pyramid weights a1,a2,a3")
    sp.add_argument("--sigma", type=float)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("tradeoff", help="equal-SNR depth-of-field tradeoff curve")
    common(sp, stochastic=False)
    sp.add_argument("--snr", type=float, default=50.0, help="target SNR in dB")
    sp.add_argument("--exposures", type=_exposures, default=_exposures("1:16:16"),
                    help="start:stop:count or a comma list, in seconds")
    sp.add_argument("--coc", type=float, help="circle of confusion in meters (default: pixel pitch)")
    sp.set_defaults(func=cmd_tradeoff, seed=None)

    sp = sub.add_parser("evaluate", help="compare masks against conventional lenses")
    common(sp)
    scene_opts(sp)
    sp.add_argument("--masks", nargs="*", help="name=path (or name=cubic / name=flat)")
    sp.add_argument("--alpha-cubic", type=float, default=30.0)
    sp.add_argument("--threshold", type=float, help="PSNR threshold for DOF spans (default: calibrated)")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--gammas", type=_gamma, nargs="*", help="also run a gamma ablation")
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--lr", type=float, default=DEFAULT_LR)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        t0 = time.perf_counter()
        cfg = _run_config(args)
        out = _out_dir(args)
        args.func(args, cfg, out)
        _write_run_record(out, args, cfg, ["codedstereo"] + argv, time.perf_counter() - t0)
        return EXIT_OK
    except (UsageError, ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
