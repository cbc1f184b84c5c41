"""Phase-mask optimisation through the render -> match -> deconvolve pipeline.

Gradients are central finite differences in the Zernike coefficients with
common random numbers (every evaluation of one gradient uses the same
noise seed), fed to Adam.  Piston is frozen: a constant height offset
leaves every PSF unchanged.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, UsageError
from .optics import (NUM_COEFFICIENTS, OpticalConfig, PhaseMask, compute_psf_stack,
                     fisher_objective)
from .recon import (LossWeights, MetricReport, bad3, correspondence_mask, dof_from_curve,
                    edof_reconstruct, epe, estimate_nsr, loss_terms, per_disparity_curves, psnr, ssim)
from .render import _FFTConvolver, noise_sigma_for, render_stereo_pair
from .stereo import match_stereo

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_FD_STEP = 20e-9
# Per-coordinate Adam steps of 10 nm (about 70 nm L2 over 54 coefficients) stay
# inside the basin around the flat mask; 50 nm steps overshoot it.
DEFAULT_LR = 10e-9
FISHER_LR = 50e-9
RGB_ONLY = "rgb-only"


@dataclass(eq=False)
class Evaluation:
    loss: float
    loss_disp: float
    loss_rgb: float  # already multiplied by gamma
    report: MetricReport
    outputs: list = field(default_factory=list)  # (pair, stereo, edof) per scene with keep_outputs


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    loss_disp: float
    loss_rgb: float
    psnr: float
    epe: float
    step_l2: float


@dataclass(eq=False)
class OptimizeReport:
    iterations: list
    final_mask: PhaseMask
    last_mask: PhaseMask
    best_loss: float
    config_snapshot: dict
    seed: int
    initial_loss: float = float("nan")

    CSV_HEADER = "iter,loss,loss_disp,loss_rgb,psnr,epe,step_l2"

    def to_csv(self):
        rows = [self.CSV_HEADER]
        for r in self.iterations:
            rows.append(",".join(repr(float(v)) if i else str(v) for i, v in enumerate(
                (r.iteration, r.loss, r.loss_disp, r.loss_rgb, r.psnr, r.epe, r.step_l2))))
        return "\n".join(rows) + "\n"


def scene_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def evaluate_mask(mask, scenes, config=OpticalConfig(), weights=LossWeights(), sigma=0.02, seed=0,
                  block_radius=4, stack=None, keep_outputs=False, metrics=True):
    """Run the full pipeline on every scene and return the mean loss and metrics.

    Disparity terms are measured on left pixels whose true correspondence is
    inside the right image (and away from the matching-window border).
    Scene ``i`` is rendered with noise seed ``scene_seed(seed, i)``.
    ``metrics=False`` skips everything not needed for the loss (the report
    is then None).
    """
    if not scenes:
        raise UsageError("evaluate_mask needs at least one scene")
    if stack is None:
        stack = compute_psf_stack(mask, config)
    ld_sum = rgb_sum = 0.0
    edofs, truths, d_est, d_true, masks = [], [], [], [], []
    view_psnr, view_ssim, epes, bad3s = [], [], [], []
    outputs = []
    spectra = {}
    for i, scene in enumerate(scenes):
        scene = scene.clamped(config)
        if scene.shape not in spectra:
            spectra[scene.shape] = _FFTConvolver(scene.shape, stack.kernel_size).kernel_spectrum(stack.kernels)
        ks = spectra[scene.shape]
        pair = render_stereo_pair(scene, mask, config, sigma, scene_seed(seed, i), stack=stack, kernel_spectra=ks)
        st = match_stereo(pair.coded_left, pair.coded_right, config, block_radius)
        nsr = estimate_nsr(np.concatenate([pair.coded_left, pair.coded_right], axis=0), sigma)
        edof = edof_reconstruct(pair, stack, "layered", (st.disparity, st.disparity_right), nsr, ks)
        valid = correspondence_mask(scene.disparity_left, block_radius)
        truth = (scene.texture_left, scene.texture_right)
        ld, rgb = loss_terms(edof, truth, st.disparity, scene.disparity_left, weights, valid)
        if not (math.isfinite(ld) and math.isfinite(rgb)):
            raise NumericalError(f"non-finite loss on scene {scene.id!r}")
        ld_sum += ld
        rgb_sum += rgb
        if keep_outputs:
            outputs.append((pair, st, edof))
        if not metrics:
            continue
        edofs.append(edof)
        truths.append(truth)
        d_est.append(st.disparity)
        d_true.append((scene.disparity_left, scene.disparity_right))
        masks.append(valid)
        view_psnr += [psnr(edof[0], truth[0]), psnr(edof[1], truth[1])]
        view_ssim += [ssim(edof[0], truth[0]), ssim(edof[1], truth[1])]
        epes.append(epe(st.disparity, scene.disparity_left, valid))
        bad3s.append(bad3(st.disparity, scene.disparity_left, valid))
    n = len(scenes)
    loss_disp = ld_sum / n
    loss_rgb = weights.gamma * rgb_sum / n
    ev = Evaluation(loss_disp + loss_rgb, loss_disp, loss_rgb, None, outputs)
    if not metrics:
        return ev
    curve_psnr, curve_epe = per_disparity_curves(edofs, truths, d_est, d_true, config.disparity_levels, masks)
    report = MetricReport(
        psnr_db=float(np.mean(view_psnr)), ssim=float(np.mean(view_ssim)),
        epe_px=float(np.mean(epes)), bad3_pct=float(np.mean(bad3s)),
        per_disparity_psnr=curve_psnr, per_disparity_epe=curve_epe,
        levels=config.disparity_levels,
        psnr_left=float(np.mean(view_psnr[0::2])), psnr_right=float(np.mean(view_psnr[1::2])),
        ssim_left=float(np.mean(view_ssim[0::2])), ssim_right=float(np.mean(view_ssim[1::2])),
    )
    ev.report = report
    return ev


# --------------------------------------------------------------------------- gradients


def _threads():
    n = int(os.environ.get("CODEDSTEREO_THREADS", "1") or 1)
    return os.cpu_count() or 1 if n == 0 else max(1, n)


_WORKER = {}


def _init_worker(objective):
    _WORKER["objective"] = objective


def _call_worker(c):
    return _WORKER["objective"](c)


def _map(objective, points):
    workers = _threads()
    if workers <= 1 or len(points) < 2:
        return [objective(p) for p in points]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(objective,)) as ex:
        return list(ex.map(_call_worker, points))


class MaskObjective:
    """Picklable ``coefficients -> loss`` for a fixed scene batch and noise seed."""

    def __init__(self, scenes, config, weights, sigma, seed, grid_size=None, block_radius=4):
        self.scenes = list(scenes)
        self.config = config
        self.weights = weights
        self.sigma = sigma
        self.seed = seed
        self.grid_size = grid_size or config.mask_grid_size
        self.block_radius = block_radius

    def evaluate(self, coefficients, metrics=True):
        mask = PhaseMask.from_coefficients(coefficients, self.grid_size)
        return evaluate_mask(mask, self.scenes, self.config, self.weights, self.sigma, self.seed,
                             self.block_radius, metrics=metrics)

    def __call__(self, coefficients):
        return self.evaluate(coefficients, metrics=False).loss


def fd_gradient(mask, step=DEFAULT_FD_STEP, scenes=None, config=OpticalConfig(), weights=LossWeights(),
                sigma=0.02, seed=0, indices=None, objective=None):
    """Central-difference gradient of the loss w.r.t. the 55 Zernike coefficients.

    ``indices`` restricts the coefficients that are differentiated (others
    get 0).  The piston gradient is always 0.  ``objective`` overrides the
    pipeline loss with any ``coefficients -> float`` callable.
    """
    if not step > 0:
        raise UsageError(f"fd step must be > 0, got {step!r}")
    c = np.asarray(mask.coefficients, dtype=float)
    if c.shape != (NUM_COEFFICIENTS,):
        raise UsageError("fd_gradient needs a coefficient-backed mask with 55 coefficients")
    if objective is None:
        objective = MaskObjective(scenes, config, weights, sigma, seed, mask.grid_size)
    idx = [j for j in (range(1, NUM_COEFFICIENTS) if indices is None else indices) if j != 0]
    points = []
    for j in idx:
        for sgn in (1.0, -1.0):
            p = c.copy()
            p[j] += sgn * step
            points.append(p)
    values = _map(objective, points)
    g = np.zeros(NUM_COEFFICIENTS)
    for n, j in enumerate(idx):
        g[j] = (values[2 * n] - values[2 * n + 1]) / (2 * step)
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient at coefficients {c.tolist()}")
    return g


# --------------------------------------------------------------------------- Adam


class Adam:
    def __init__(self, size, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(lr, it, iters):
    return lr * 0.5 * (1 + math.cos(math.pi * it / iters))


def random_init(seed, scale=20e-9, grid_size=71):
    """Flat mask plus small seeded random non-piston coefficients."""
    rng = np.random.default_rng(seed)
    c = scale * rng.standard_normal(NUM_COEFFICIENTS)
    c[0] = 0.0
    return PhaseMask.from_coefficients(c, grid_size, "learned")


def _coefficients_of(mask):
    c = np.asarray(mask.coefficients, dtype=float)
    if c.size == 0 and not np.any(mask.height_map):
        return np.zeros(NUM_COEFFICIENTS)
    if c.shape != (NUM_COEFFICIENTS,):
        raise UsageError("initial mask must carry 55 Zernike coefficients (or be flat)")
    return c.copy()


def optimize_mask(init, scenes, config=OpticalConfig(), weights=LossWeights(), iters=50, lr=DEFAULT_LR,
                  fd_step=DEFAULT_FD_STEP, seed=0, sigma=0.02, batch_size=1, block_radius=4,
                  monitor_scenes=None, callback=None):
    """Adam over the Zernike coefficients with finite-difference gradients.

    Each iteration differentiates the loss on a mini-batch of ``batch_size``
    scenes taken round-robin in list order, with one noise seed shared by
    all of the iteration's gradient evaluations.  The logged loss is the
    full pipeline loss on ``monitor_scenes`` (default: all scenes) at the
    fixed seed ``seed``, so logged values are comparable across iterations;
    ``final_mask`` is the best logged mask and ``last_mask`` the mask after
    the last step.
    """
    if iters < 1:
        raise UsageError("iters must be >= 1")
    if lr < 0:
        raise UsageError("lr must be >= 0")
    scenes = list(scenes)
    if not scenes:
        raise UsageError("optimize_mask needs at least one scene")
    monitor_scenes = scenes if monitor_scenes is None else list(monitor_scenes)
    bs = max(1, min(int(batch_size), len(scenes)))
    c = _coefficients_of(init)
    piston = c[0]
    grid = init.grid_size
    adam = Adam(NUM_COEFFICIENTS, lr)
    monitor = MaskObjective(monitor_scenes, config, weights, sigma, seed, grid, block_radius)
    history = []
    best = (math.inf, c.copy())
    initial_loss = math.nan
    for it in range(iters):
        ev = monitor.evaluate(c)
        if not math.isfinite(ev.loss):
            raise NumericalError(f"non-finite loss at iteration {it}, coefficients {c.tolist()}")
        if it == 0:
            initial_loss = ev.loss
        if ev.loss < best[0]:
            best = (ev.loss, c.copy())
        if lr > 0:
            batch = [scenes[(it * bs + j) % len(scenes)] for j in range(bs)]
            objective = MaskObjective(batch, config, weights, sigma, scene_seed(seed, it + 1), grid, block_radius)
            try:
                g = fd_gradient(PhaseMask.from_coefficients(c, grid), fd_step, objective=objective)
            except NumericalError as exc:
                raise NumericalError(f"iteration {it}: {exc}") from None
            delta = adam.step(g, cosine_lr(lr, it, iters))
            delta[0] = 0.0
        else:
            delta = np.zeros_like(c)
        c = c + delta
        c[0] = piston
        rec = IterationRecord(it, ev.loss, ev.loss_disp, ev.loss_rgb, ev.report.psnr_db,
                              ev.report.epe_px, float(np.linalg.norm(delta)))
        history.append(rec)
        log.info("iter %d loss %.5f (disp %.5f rgb %.5f) psnr %.2f epe %.3f step %.3g",
                 it, rec.loss, rec.loss_disp, rec.loss_rgb, rec.psnr, rec.epe, rec.step_l2)
        if callback is not None:
            callback(rec, c)
    final = PhaseMask.from_coefficients(best[1], grid, "learned")
    last = PhaseMask.from_coefficients(c, grid, "learned")
    return OptimizeReport(history, final, last, best[0], config.as_dict(), seed, initial_loss)


def make_fisher_mask(config=OpticalConfig(), iters=30, lr=FISHER_LR, fd_step=DEFAULT_FD_STEP, seed=0,
                     init_scale=20e-9):
    """Maximise the Fisher depth objective of the PSF stack with the same Adam loop.

    Starts from a seeded small random mask (the flat mask is a stationary
    point of the symmetric objective).  Returns ``(mask, history)`` where the
    mask is the best one found.
    """
    grid = config.mask_grid_size

    def objective(coefficients):
        stack = compute_psf_stack(PhaseMask.from_coefficients(coefficients, grid), config)
        return -fisher_objective(stack, config)

    c = _coefficients_of(random_init(seed, init_scale, grid))
    adam = Adam(NUM_COEFFICIENTS, lr)
    best = (math.inf, c.copy())
    history = []
    for it in range(iters):
        value = objective(c)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite Fisher objective at iteration {it}")
        history.append(-value)
        if value < best[0]:
            best = (value, c.copy())
        g = fd_gradient(PhaseMask.from_coefficients(c, grid), fd_step, objective=objective)
        delta = adam.step(g, cosine_lr(lr, it, iters))
        delta[0] = 0.0
        c = c + delta
    value = objective(c)
    history.append(-value)
    if value < best[0]:
        best = (value, c.copy())
    return PhaseMask.from_coefficients(best[1], grid, "fisher"), history


# --------------------------------------------------------------------------- tables


@dataclass(eq=False)
class ComparisonRow:
    name: str
    sigma: float
    f_number: float
    evaluation: Evaluation
    dof: object = None


@dataclass(eq=False)
class ComparisonTable:
    rows: list
    threshold_db: float
    reference: str = "flat-F8"

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def dof_ratio(self, name, reference=None):
        ref = self.row(reference or self.reference).dof.depth_span
        span = self.row(name).dof.depth_span
        return span / ref if ref > 0 else (math.inf if span > 0 else float("nan"))

    def to_text(self):
        head = f"{'':<14}" + "".join(f"{r.name:>14}" for r in self.rows)
        lines = [head]
        for label, key, fmt in (("PSNR[dB]", "psnr_db", "{:.2f}"), ("SSIM", "ssim", "{:.3f}"),
                                ("EPE[px]", "epe_px", "{:.3f}"), ("3px[%]", "bad3_pct", "{:.2f}%")):
            lines.append(f"{label:<14}" + "".join(
                f"{fmt.format(getattr(r.evaluation.report, key)):>14}" for r in self.rows))
        lines.append(f"{'DOF[m]':<14}" + "".join(f"{r.dof.depth_span:>14.3f}" for r in self.rows))
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = ["name,sigma,f_number,psnr_db,ssim,epe_px,bad3_pct,dof_m,loss"]
        for r in self.rows:
            rep = r.evaluation.report
            lines.append(",".join([r.name] + [repr(float(v)) for v in (
                r.sigma, r.f_number, rep.psnr_db, rep.ssim, rep.epe_px, rep.bad3_pct,
                r.dof.depth_span, r.evaluation.loss)]))
        return "\n".join(lines) + "\n"

    def curves_csv(self):
        levels = self.rows[0].evaluation.report.levels
        head = ["disparity_px"] + [f"{r.name}_psnr" for r in self.rows] + [f"{r.name}_epe" for r in self.rows]
        lines = [",".join(head)]
        for i, d in enumerate(levels):
            vals = [float(d)] + [float(r.evaluation.report.per_disparity_psnr[i]) for r in self.rows] \
                + [float(r.evaluation.report.per_disparity_epe[i]) for r in self.rows]
            lines.append(",".join(repr(v) for v in vals))
        return "\n".join(lines) + "\n"


def calibrated_threshold(curves, quantile=0.5):
    """A PSNR threshold between the compared systems' curves (median of all finite values)."""
    vals = np.concatenate([np.asarray(c, float)[np.isfinite(c)] for c in curves])
    return float(np.quantile(vals, quantile))


def compare_masks(masks, scenes, config=OpticalConfig(), weights=LossWeights(), sigma=0.02, seed=0,
                  threshold_db=None, include_conventional=True, exposure=1.0):
    """Evaluate named masks next to conventional F/8 and F/32 lenses at equal exposure.

    ``masks`` is a list of ``(name, PhaseMask)``.  Conventional lenses are flat
    masks whose stop is set by the f-number; their noise follows
    :func:`noise_sigma_for` relative to ``sigma`` at the configured f-number.
    ``threshold_db=None`` calibrates the DOF threshold from the curves.
    """
    masks = list(masks)
    if not masks and not include_conventional:
        raise UsageError("compare_masks needs at least one mask")
    rows = []
    ref = (config.f_number, 1.0, 1.0, sigma)
    if include_conventional:
        for fn in (32.0, 8.0):
            cfg = config.with_(f_number=fn)
            s = noise_sigma_for(fn, exposure, 1.0, ref)
            ev = evaluate_mask(PhaseMask.flat(config.mask_grid_size), scenes, cfg, weights, s, seed)
            rows.append(ComparisonRow(f"flat-F{fn:g}", s, fn, ev))
    for name, mask in masks:
        s = noise_sigma_for(config.f_number, exposure, 1.0, ref)
        ev = evaluate_mask(mask, scenes, config, weights, s, seed)
        rows.append(ComparisonRow(name, s, config.f_number, ev))
    if threshold_db is None:
        threshold_db = calibrated_threshold([r.evaluation.report.per_disparity_psnr for r in rows])
    for r in rows:
        r.dof = dof_from_curve(r.evaluation.report.per_disparity_psnr, threshold_db, config)
    return ComparisonTable(rows, threshold_db, "flat-F8" if include_conventional else rows[0].name)


def weights_for_gamma(gamma, alpha=(1.0, 0.5, 0.25)):
    if gamma == RGB_ONLY:
        return LossWeights((0.0, 0.0, 0.0), 1.0)
    return LossWeights(alpha, float(gamma))


def gamma_ablation(gammas, scenes, config=OpticalConfig(), init=None, iters=50, lr=DEFAULT_LR,
                   fd_step=DEFAULT_FD_STEP, sigma=0.02, seed=0, eval_scenes=None, alpha=(1.0, 0.5, 0.25)):
    """Optimise one mask per gamma and tabulate the metrics of each result.

    ``gammas`` may contain the sentinel ``"rgb-only"`` (disparity weights all 0).
    All masks are evaluated with the default gamma=0.5 weights on ``eval_scenes``.
    """
    gammas = list(gammas)
    if not gammas:
        raise UsageError("gamma_ablation needs at least one gamma")
    for g in gammas:
        if g != RGB_ONLY and not (isinstance(g, (int, float)) and g >= 0):
            raise UsageError(f"invalid gamma {g!r}")
    init = init or PhaseMask.flat(config.mask_grid_size)
    results = []
    for g in gammas:
        rep = optimize_mask(init, scenes, config, weights_for_gamma(g, alpha), iters, lr, fd_step, seed, sigma)
        results.append((f"gamma={g}", rep.final_mask))
    table = compare_masks(results, eval_scenes or scenes, config, LossWeights(alpha, 0.5), sigma, seed,
                          include_conventional=False)
    return table
