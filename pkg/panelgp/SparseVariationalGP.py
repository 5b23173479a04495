import dataclasses
import logging
from dataclasses import dataclass, field

from panelgp.ArdKernel import ArdKernel, gram, psi_matrix
from panelgp.funcs import NegativeVarianceError, cholesky, cholesky_escalating, make_rng

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
# negatives up to this (times max(1, scale)) are treated as roundoff
CLAMP_TOLERANCE = 1e-9
# whitened quantities lose about eps * cond(K) of relative accuracy
_CONDITION_SLACK = 100.0 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class SparseVariationalGP:
    """q(f_R) = N(mu, L L^T) at the pseudo inputs, prior N(0, K_RR + jitter I).

    The Cholesky factor L_K of the regularized K_RR is computed once at
    construction, together with the whitened state L_K^-1 mu and L_K^-1 L that
    every moment is computed from; instances are immutable and safe to share
    between threads.
    """

    pseudo_inputs: np.ndarray
    mu: np.ndarray
    chol_sigma: np.ndarray
    kernel: ArdKernel
    jitter: float = DEFAULT_JITTER
    chol_k: np.ndarray = field(init=False, repr=False, compare=False)
    k_inv: np.ndarray = field(init=False, repr=False, compare=False)
    white_mu: np.ndarray = field(init=False, repr=False, compare=False)
    white_chol: np.ndarray = field(init=False, repr=False, compare=False)
    roundoff: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        z = np.asarray(self.pseudo_inputs, dtype=float).reshape(-1)
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        L = np.tril(np.asarray(self.chol_sigma, dtype=float))
        if z.size == 0:
            raise ValueError("at least one pseudo input is needed")
        if np.any(np.diff(z) <= 0):
            raise ValueError("pseudo inputs must be strictly increasing")
        if mu.shape != z.shape or L.shape != (z.size, z.size):
            raise ValueError("mu must have length R and chol_sigma shape R x R (R = {})".format(z.size))
        if np.any(np.diag(L) <= 0):
            raise ValueError("diagonal of chol_sigma must be strictly positive")
        if not self.jitter > 0:
            raise ValueError("jitter must be positive, got {}".format(self.jitter))
        object.__setattr__(self, "pseudo_inputs", z)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "chol_sigma", L)
        K = self.k_matrix()
        chol_k = cholesky(K)
        eig = np.linalg.eigvalsh(K)
        condition = eig[-1] / max(eig[0], np.finfo(float).tiny)
        object.__setattr__(self, "chol_k", chol_k)
        object.__setattr__(self, "k_inv", scipy.linalg.cho_solve((chol_k, True), np.eye(z.size)))
        object.__setattr__(self, "white_mu", scipy.linalg.solve_triangular(chol_k, mu, lower=True))
        object.__setattr__(self, "white_chol", scipy.linalg.solve_triangular(chol_k, L, lower=True))
        object.__setattr__(self, "roundoff", max(CLAMP_TOLERANCE, _CONDITION_SLACK * condition))

    @classmethod
    def prior(cls, kernel, pseudo_inputs, jitter=DEFAULT_JITTER):
        """q equal to the prior: mu = 0, Sigma = K_RR + jitter I."""
        z = np.asarray(pseudo_inputs, dtype=float)
        K = gram(kernel, z, z) + jitter * np.eye(z.size)
        return cls(z, np.zeros(z.size), cholesky(K), kernel, jitter)

    @property
    def size(self):
        return self.pseudo_inputs.size

    @property
    def sigma(self):
        return self.chol_sigma @ self.chol_sigma.T

    def k_matrix(self):
        z = np.asarray(self.pseudo_inputs, dtype=float)
        return gram(self.kernel, z, z) + self.jitter * np.eye(z.size)

    def solve_k(self, rhs):
        return scipy.linalg.cho_solve((self.chol_k, True), rhs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def clamp_nonnegative(values, scale, what, tolerance=CLAMP_TOLERANCE):
    """Zero out negatives no larger than tolerance * max(1, scale); larger ones raise.

    ``scale`` is the magnitude of the terms that cancel and may be an array.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    bound = np.maximum(1.0, np.broadcast_to(np.asarray(scale, dtype=float), values.shape))
    excess = values + tolerance * bound
    if np.any(excess < 0):
        i = int(np.argmin(excess))
        raise NegativeVarianceError("{} of {} is below the roundoff tolerance {}".format(what, values.flat[i], -tolerance * bound.flat[i]))
    if np.any(values < -CLAMP_TOLERANCE * bound):
        logger.debug("clamping %s of %.3g to zero (ill-conditioned K_RR)", what, float(np.min(values)))
    return np.maximum(values, 0.0)


def _whitened_cross(gp, xs):
    return scipy.linalg.solve_triangular(gp.chol_k, gram(gp.kernel, gp.pseudo_inputs, xs), lower=True)


def posterior_moments(gp, xs):
    """Marginal mean and variance of f for an array of points.

    The variance is (gamma - |V_x|^2) + |W^T V_x|^2 with V_x = L_K^-1 k_x and
    W = L_K^-1 L, so the only cancellation is in the conditional prior part.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    V = _whitened_cross(gp, xs)
    mean = V.T @ gp.white_mu
    gamma = gp.kernel.variance
    residual = clamp_nonnegative(gamma - np.sum(V * V, axis=0), gamma, "conditional prior variance", gp.roundoff)
    explained = gp.white_chol.T @ V
    return mean, residual + np.sum(explained * explained, axis=0)


def posterior_moments_at(gp, x):
    mean, var = posterior_moments(gp, [x])
    return float(mean[0]), float(var[0])


def posterior_covariance(gp, xs):
    xs = np.asarray(xs, dtype=float).reshape(-1)
    V = _whitened_cross(gp, xs)
    explained = gp.white_chol.T @ V
    cov = gram(gp.kernel, xs, xs) - V.T @ V + explained.T @ explained
    return 0.5 * (cov + cov.T)


def whiten_stack(gp, psi):
    """L_K^-1 Psi_n L_K^-T for a stack of symmetric (N, R, R) matrices."""
    psi = np.asarray(psi, dtype=float)
    N, R, _ = psi.shape
    left = scipy.linalg.solve_triangular(gp.chol_k, psi.transpose(1, 0, 2).reshape(R, N * R), lower=True)
    left = left.reshape(R, N, R).transpose(1, 2, 0)
    both = scipy.linalg.solve_triangular(gp.chol_k, left.transpose(1, 0, 2).reshape(R, N * R), lower=True)
    white = both.reshape(R, N, R).transpose(1, 0, 2)
    return 0.5 * (white + white.transpose(0, 2, 1))


def integrated_moments(gp, psi, lengths):
    """Integrated squared mean and variance of f for a stack of Psi matrices (N, R, R).

    With P = L_K^-1 Psi L_K^-T the squared mean is m^T P m and the variance is
    (gamma |X| - tr P) + tr(W^T P W), where m and W are the whitened mean and
    Cholesky factor of q.
    """
    lengths = np.asarray(lengths, dtype=float).reshape(-1)
    if lengths.size == 0:
        return np.zeros(0), np.zeros(0)
    P = whiten_stack(gp, psi)
    m, W = gp.white_mu, gp.white_chol
    trace = np.einsum("nii->n", P)
    span = np.abs(trace)
    sq_mean = clamp_nonnegative(np.einsum("i,nij,j->n", m, P, m), span * float(m @ m), "integrated squared mean", gp.roundoff)
    prior_part = gp.kernel.variance * lengths
    residual = clamp_nonnegative(prior_part - trace, prior_part, "integrated conditional prior variance", gp.roundoff)
    explained = clamp_nonnegative(np.einsum("nij,ik,jk->n", P, W, W), span * float(np.sum(W * W)), "integrated explained variance", gp.roundoff)
    return sq_mean, residual + explained


def integrated_sqmean_and_var(gp, iv):
    psi = psi_matrix(gp.kernel, gp.pseudo_inputs, iv)[None]
    sq_mean, var = integrated_moments(gp, psi, [iv.length])
    return float(sq_mean[0]), float(var[0])


def integrated_second_moment(gp, iv):
    """E_q[int_iv f^2(x) dx]."""
    sq_mean, var = integrated_sqmean_and_var(gp, iv)
    return sq_mean + var


def sample_function(gp, grid, seed, count):
    """Joint draws of f on a sorted grid from q, shape (count, len(grid))."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if count < 1:
        raise ValueError("count must be at least 1, got {}".format(count))
    if np.any(np.diff(grid) < 0):
        raise ValueError("sampling grid must be sorted")
    mean, _ = posterior_moments(gp, grid)
    chol = cholesky_escalating(posterior_covariance(gp, grid))
    rng = make_rng(seed)
    z = rng.standard_normal((count, grid.size))
    return mean[None, :] + z @ chol.T


def kl_divergence(gp):
    """KL(N(mu, Sigma) || N(0, K_RR + jitter I))."""
    half_trace, half_mean = gp.white_chol, gp.white_mu
    logdet_k = 2.0 * np.sum(np.log(np.diag(gp.chol_k)))
    logdet_s = 2.0 * np.sum(np.log(np.diag(gp.chol_sigma)))
    kl = 0.5 * (np.sum(half_trace**2) + np.sum(half_mean**2) - gp.size + logdet_k - logdet_s)
    return max(float(kl), 0.0)
