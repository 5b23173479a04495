"""Variational EM drivers and the piecewise-constant baseline.

Every driver alternates an E-step over q with the kernel fixed and an M-step
over (ln variance, ln lengthscale) with q fixed, both by L-BFGS-B. The E-step
works on L_K^-1 mu and L_K^-1 L, which stay well scaled when K_RR is close to
singular. A step that would lower the bound is discarded, so bound trajectories
never decrease.
"""

import logging
import math
import time
from typing import NamedTuple

from panelgp.ArdKernel import ArdKernel, gram, psi_stack
from panelgp.FitResult import FitConfig, FitResult, StepIntensity, bin_overlaps
from panelgp.funcs import DataFormatError, FitDivergedError, NumericalError, cholesky
from panelgp.objective import LOG_FLOOR, PanelDesign, RecurrentDesign, gp3_terms, gp4c_terms
from panelgp.SparseVariationalGP import SparseVariationalGP, integrated_moments, posterior_moments, sample_function

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

logger = logging.getLogger(__name__)

# returned to the line search when not even the starting point can be evaluated
_PENALTY = 1e30
# rise of the backtracking quadratic, in units of the predicted decrease
_BACKTRACK = 4.0
DIAG_FLOOR = 1e-8
_MIN_INITIAL_VARIANCE = 1e-2
VARIATIONAL_BLOCKS = ("mu", "L")
HYPER_BLOCKS = ("log_variance", "log_lengthscale")


class _PanelProblem:
    def __init__(self, data, b, weighted=False):
        self.design = PanelDesign(data)
        self.b = b
        self.weights = np.ones(len(data)) if weighted else None
        self.windows = np.array([[s.window.start, s.window.end] for s in data], dtype=float).reshape(-1, 2)
        self.n_evaluations = 0

    def psi(self, gp):
        return self.design.psi(gp.kernel, gp.pseudo_inputs)

    def terms(self, gp, psi=None, gradient=False, hyper=True, whitened=False):
        self.n_evaluations += 1
        return gp4c_terms(gp, self.design, self.b, subject_weights=self.weights, psi=psi, gradient=gradient, hyper=hyper, whitened=whitened)

    def window_second_moments(self, gp):
        psi = psi_stack(gp.kernel, gp.pseudo_inputs, self.windows[:, 0], self.windows[:, 1])
        sq_mean, var = integrated_moments(gp, psi, self.windows[:, 1] - self.windows[:, 0])
        return sq_mean + var


class _RecurrentProblem:
    def __init__(self, data):
        self.design = RecurrentDesign(data)
        self.weights = None
        self.n_evaluations = 0

    def psi(self, gp):
        return self.design.psi(gp.kernel, gp.pseudo_inputs)

    def terms(self, gp, psi=None, gradient=False, hyper=True, whitened=False):
        self.n_evaluations += 1
        return gp3_terms(gp, self.design, psi=psi, gradient=gradient, hyper=hyper, whitened=whitened)


def closed_form_weights(second_moments, counts, floor):
    """Per-subject multipliers max(floor, total count / E_q int_window f^2)."""
    counts = np.asarray(counts, dtype=float)
    return np.maximum(floor, counts / np.maximum(np.asarray(second_moments, dtype=float), LOG_FLOOR))


def initial_state(domain, total_count, total_length, cfg):
    """Evenly spaced pseudo inputs, moment-matched variance, q close to a constant sqrt(gamma)."""
    if not domain.length > 0:
        raise ValueError("the data's domain {} has zero length".format(domain))
    pseudo = np.linspace(domain.start, domain.end, cfg.n_pseudo)
    variance = max(total_count / total_length, _MIN_INITIAL_VARIANCE) if total_length > 0 else _MIN_INITIAL_VARIANCE
    kernel = ArdKernel(variance, domain.length / 10.0)
    chol_k = cholesky(gram(kernel, pseudo, pseudo) + cfg.jitter * np.eye(cfg.n_pseudo))
    return SparseVariationalGP(pseudo, np.full(cfg.n_pseudo, math.sqrt(variance)), 0.1 * chol_k, kernel, cfg.jitter)


def _pack(gp):
    """E-step variables: the whitened mean L_K^-1 mu and the lower triangle of L_K^-1 L."""
    return np.concatenate([gp.white_mu, gp.white_chol[np.tril_indices(gp.size)]])


def _unpack(gp, x):
    R = gp.size
    W = np.zeros((R, R))
    W[np.tril_indices(R)] = x[R:]
    return gp.replace(mu=gp.chol_k @ x[:R], chol_sigma=np.tril(gp.chol_k @ W))


def _variational_bounds(R):
    rows, cols = np.tril_indices(R)
    return [(None, None)] * R + [(DIAG_FLOOR, None) if r == c else (None, None) for r, c in zip(rows, cols)]


def _bound_or_none(problem, gp):
    try:
        value, _ = problem.terms(gp)
    except NumericalError as e:
        logger.debug("bound not evaluable: %s", e)
        return None
    return value.total if np.isfinite(value.total) else None


class _GuardedObjective:
    """Negative bound for L-BFGS-B that survives points where the bound cannot be evaluated.

    Such a point gets the value and gradient of a quadratic through the last
    evaluable point that rises by ``_BACKTRACK`` times the predicted decrease,
    so the line search interpolates a step about ten times shorter instead of
    stopping.
    """

    def __init__(self, evaluate, stage):
        self.evaluate = evaluate
        self.stage = stage
        self.anchor = None

    def __call__(self, x):
        try:
            value, grad = self.evaluate(x)
        except (NumericalError, OverflowError, ValueError) as e:
            logger.debug("%s point rejected: %s", self.stage, e)
            return self._backtrack(x)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return self._backtrack(x)
        self.anchor = (np.array(x, dtype=float), float(value), np.asarray(grad, dtype=float))
        return value, grad

    def _backtrack(self, x):
        if self.anchor is None:
            return _PENALTY, np.zeros_like(x)
        x0, f0, g0 = self.anchor
        d = np.asarray(x, dtype=float) - x0
        dd = float(d @ d)
        if dd == 0.0:
            return _PENALTY, np.zeros_like(x)
        slope = float(g0 @ d)
        rise = _BACKTRACK * max(abs(slope), 1e-12 * max(abs(f0), 1.0))
        curvature = (rise - slope) / dd
        return f0 + rise, g0 + 2.0 * curvature * d


def _e_step(problem, gp, cfg):
    psi = problem.psi(gp)

    def negative_bound(x):
        value, grad = problem.terms(_unpack(gp, x), psi=psi, gradient=True, hyper=False, whitened=True)
        return -value.total, -grad.vector(VARIATIONAL_BLOCKS)

    objective = _GuardedObjective(negative_bound, "E-step")
    res = minimize(objective, _pack(gp), jac=True, method="L-BFGS-B", bounds=_variational_bounds(gp.size), options={"maxiter": cfg.inner_opt_iters})
    logger.debug("E-step: %s", res.message)
    return _unpack(gp, res.x)


def _m_step(problem, gp, cfg):
    def negative_bound(x):
        value, grad = problem.terms(gp.replace(kernel=ArdKernel.from_log(*x)), gradient=True, hyper=True)
        return -value.total, -grad.vector(HYPER_BLOCKS)

    objective = _GuardedObjective(negative_bound, "M-step")
    res = minimize(objective, gp.kernel.log_params, jac=True, method="L-BFGS-B", options={"maxiter": cfg.inner_opt_iters})
    logger.debug("M-step: %s", res.message)
    try:
        return gp.replace(kernel=ArdKernel.from_log(*res.x))
    except (NumericalError, OverflowError, ValueError):
        return gp


def _keep_better(problem, gp, current, candidate, step):
    """(state, bound, accepted) after comparing a step's candidate with the current state."""
    value = _bound_or_none(problem, candidate)
    if value is None or value < current:
        logger.warning("%s step rejected: bound %s < %.10g", step, value, current)
        return gp, current, False
    return candidate, value, True


def _update_weights(problem, gp, current, cfg):
    previous = problem.weights
    problem.weights = closed_form_weights(problem.window_second_moments(gp), problem.design.subject_counts, cfg.weight_floor)
    value = _bound_or_none(problem, gp)
    if value is None or value < current:
        logger.warning("weight update rejected: bound %s < %.10g", value, current)
        problem.weights = previous
        return current
    return value


def _run_vem(model, problem, gp, cfg, data):
    start = time.perf_counter()
    current = _bound_or_none(problem, gp)
    if current is None:
        raise FitDivergedError(0, float("nan"))
    trajectory = [current]
    hypers = [(gp.kernel.variance, gp.kernel.lengthscale)]
    converged = False
    iteration = 0
    logger.info("fitting %s: %d subjects, R=%d, initial bound %.6f", model, len(data), gp.size, current)

    for iteration in range(1, cfg.max_vem_iters + 1):
        previous = current
        gp, current, e_accepted = _keep_better(problem, gp, current, _e_step(problem, gp, cfg), "E")
        gp, current, m_accepted = _keep_better(problem, gp, current, _m_step(problem, gp, cfg), "M")
        if problem.weights is not None:
            current = _update_weights(problem, gp, current, cfg)
        if not np.isfinite(current):
            raise FitDivergedError(iteration, current)

        trajectory.append(current)
        hypers.append((gp.kernel.variance, gp.kernel.lengthscale))
        logger.info("iteration %d: bound %.6f, gamma %.4g, a %.4g", iteration, current, gp.kernel.variance, gp.kernel.lengthscale)
        if (current - previous) / max(abs(previous), 1.0) < cfg.rel_tol:
            # a rejected step would be proposed again unchanged, so stop without claiming convergence
            converged = e_accepted and m_accepted
            if not converged:
                logger.warning("stopping at iteration %d: a step was rejected and the bound did not improve", iteration)
            break

    wall_time = time.perf_counter() - start
    logger.info("%s fit finished after %d iterations in %.2fs", model, iteration, wall_time)
    return FitResult(
        model=model,
        domain=data.domain,
        config=cfg,
        gp=gp,
        bound_trajectory=trajectory,
        hyper_trajectory=hypers,
        weights=problem.weights,
        subject_ids=data.subject_ids if problem.weights is not None else (),
        wall_time=wall_time,
        converged=converged,
        iterations=iteration,
        n_evaluations=problem.n_evaluations,
    )


def _check_panel(data):
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    for s in data:
        for iv, m in s.records:
            if iv.length <= 0 and m > 0:
                raise DataFormatError("zero-length interval {} with count {}".format(iv, m), subject=s.id)


def fit_gp4c(data, cfg=FitConfig()):
    _check_panel(data)
    gp = initial_state(data.domain, data.total_count, data.total_length, cfg)
    return _run_vem("gp4c", _PanelProblem(data, cfg.b), gp, cfg, data)


def fit_gp4cw(data, cfg=FitConfig()):
    """GP4C with one multiplicative weight per subject, updated in closed form after every M-step."""
    _check_panel(data)
    gp = initial_state(data.domain, data.total_count, data.total_length, cfg)
    return _run_vem("gp4cw", _PanelProblem(data, cfg.b, weighted=True), gp, cfg, data)


def fit_gp3(data, cfg=FitConfig()):
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    gp = initial_state(data.domain, data.total_count, data.total_length, cfg)
    return _run_vem("gp3", _RecurrentProblem(data), gp, cfg, data)


def default_bin_count(data):
    return max(1, math.ceil(math.sqrt(sum(len(s.records) for s in data))))


def fit_piecewise_constant(data, n_bins=None, max_iters=500, rel_tol=0.0):
    """Panel-count MLE over step intensities on equal-width bins by multiplicative EM.

    Each sweep redistributes every interval's count over the bins it overlaps
    in proportion to their expected share, then divides by bin exposure.
    """
    _check_panel(data)
    n_bins = default_bin_count(data) if n_bins is None else n_bins
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1, got {}".format(n_bins))
    start = time.perf_counter()
    domain = data.domain
    edges = np.linspace(domain.start, domain.end, n_bins + 1)
    arrays = data.arrays()
    overlaps = bin_overlaps(edges, arrays.starts, arrays.ends)
    counts = arrays.counts.astype(float)
    exposure = overlaps.sum(axis=0)
    constant = float(np.sum(gammaln(counts + 1.0)))

    def loglik(rates):
        mean = overlaps @ rates
        positive = counts > 0
        return float(np.sum(counts[positive] * np.log(mean[positive])) - np.sum(mean)) - constant

    rates = np.where(exposure > 0, counts.sum() / max(float(exposure.sum()), LOG_FLOOR), 0.0)
    trajectory = [loglik(rates)]
    converged = False
    iteration = 0
    for iteration in range(1, max_iters + 1):
        mean = overlaps @ rates
        ratio = np.divide(counts, mean, out=np.zeros_like(counts), where=mean > 0)
        rates = np.divide(rates * (overlaps.T @ ratio), exposure, out=np.zeros_like(rates), where=exposure > 0)
        trajectory.append(loglik(rates))
        if rel_tol > 0 and abs(trajectory[-1] - trajectory[-2]) <= rel_tol * max(abs(trajectory[-2]), 1.0):
            converged = True
            break

    wall_time = time.perf_counter() - start
    logger.info("pwc fit: %d bins, %d iterations, log-likelihood %.6f", n_bins, iteration, trajectory[-1])
    return FitResult(
        model="pwc",
        domain=domain,
        config=FitConfig(n_bins=n_bins, pwc_iters=max_iters),
        step=StepIntensity(edges, rates),
        bound_trajectory=trajectory,
        wall_time=wall_time,
        converged=converged,
        iterations=iteration,
        n_evaluations=iteration,
    )


class IntensityBand(NamedTuple):
    x: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def predict_intensity(fit, grid, credible_mass=0.75, mc_samples=2000, seed=0, subject=None):
    """Posterior mean E_q[f^2] on a grid with an equal-tailed credible band from joint samples.

    ``subject`` scales everything by that subject's weight (GP4CW fits).
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if not 0.0 < credible_mass < 1.0:
        raise ValueError("credible_mass must lie in (0, 1), got {}".format(credible_mass))
    if np.any(np.diff(grid) < 0):
        raise ValueError("prediction grid must be sorted")
    tol = 1e-9 * max(1.0, fit.domain.length)
    if grid.size and (grid[0] < fit.domain.start - tol or grid[-1] > fit.domain.end + tol):
        raise ValueError("prediction grid leaves the fitted domain {}".format(fit.domain))
    scale = 1.0 if subject is None else fit.weight_of(subject)

    if fit.gp is None:
        mean = fit.step(grid) * scale
        return IntensityBand(grid, mean, mean.copy(), mean.copy())

    f_mean, f_var = posterior_moments(fit.gp, grid)
    mean = (f_mean**2 + f_var) * scale
    paths = sample_function(fit.gp, grid, seed, mc_samples) ** 2 * scale
    tail = 0.5 * (1.0 - credible_mass)
    lower, upper = np.quantile(paths, [tail, 1.0 - tail], axis=0)
    return IntensityBand(grid, mean, lower, upper)
