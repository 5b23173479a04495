import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc

SQRT_PI = math.sqrt(math.pi)


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError("interval end points must be finite, got [{}, {}]".format(self.start, self.end))
        if self.start > self.end:
            raise ValueError("interval start {} is after its end {}".format(self.start, self.end))

    @property
    def length(self):
        return self.end - self.start

    def __str__(self):
        return "[{}, {}]".format(self.start, self.end)


@dataclass(frozen=True)
class ArdKernel:
    """Squared-exponential covariance variance * exp(-(x - x')^2 / (2 lengthscale^2))."""

    variance: float
    lengthscale: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive, got {}".format(self.variance))
        if not self.lengthscale > 0:
            raise ValueError("kernel lengthscale must be positive, got {}".format(self.lengthscale))

    @classmethod
    def from_log(cls, log_variance, log_lengthscale):
        return cls(math.exp(log_variance), math.exp(log_lengthscale))

    @property
    def log_params(self):
        return np.array([math.log(self.variance), math.log(self.lengthscale)])

    def __call__(self, xs, ys):
        return gram(self, xs, ys)


def kernel_eval(k, x, y):
    return k.variance * math.exp(-((x - y) ** 2) / (2.0 * k.lengthscale**2))


def _sqdist(xs, ys):
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    return (xs[:, None] - ys[None, :]) ** 2


def gram(k, xs, ys):
    return k.variance * np.exp(-_sqdist(xs, ys) / (2.0 * k.lengthscale**2))


def gram_log_lengthscale_derivative(k, xs, ys):
    """d gram / d ln(lengthscale); d gram / d ln(variance) is the gram itself."""
    d2 = _sqdist(xs, ys)
    return k.variance * np.exp(-d2 / (2.0 * k.lengthscale**2)) * d2 / k.lengthscale**2


def _erf_diff(lo, hi):
    # erf(hi) - erf(lo) without cancellation when both arguments sit in one tail
    return np.where(
        lo > 0,
        erfc(lo) - erfc(hi),
        np.where(hi < 0, erfc(-hi) - erfc(-lo), erf(hi) - erf(lo)),
    )


def psi_entry(k, z_i, z_j, iv):
    """int over iv of k(z_i, x) k(x, z_j) dx in closed form."""
    a = k.lengthscale
    centre = 0.5 * (z_i + z_j)
    lo = (iv.start - centre) / a
    hi = (iv.end - centre) / a
    scale = k.variance**2 * math.exp(-((z_i - z_j) ** 2) / (4.0 * a * a)) * SQRT_PI * a / 2.0
    return float(scale * _erf_diff(np.float64(lo), np.float64(hi)))


def psi_stack(k, pseudo, starts, ends, with_derivatives=False):
    """Psi matrices for many intervals at once, shape (N, R, R).

    With ``with_derivatives`` also returns d Psi / d ln(lengthscale);
    d Psi / d ln(variance) is 2 Psi.
    """
    z = np.asarray(pseudo, dtype=float).reshape(-1)
    starts = np.asarray(starts, dtype=float).reshape(-1)
    ends = np.asarray(ends, dtype=float).reshape(-1)
    a = k.lengthscale
    delta2 = (z[:, None] - z[None, :]) ** 2
    centre = 0.5 * (z[:, None] + z[None, :])
    envelope = k.variance**2 * np.exp(-delta2 / (4.0 * a * a))
    lo = (starts[:, None, None] - centre[None]) / a
    hi = (ends[:, None, None] - centre[None]) / a
    psi = envelope[None] * (SQRT_PI * a / 2.0) * _erf_diff(lo, hi)
    if not with_derivatives:
        return psi
    boundary = hi * np.exp(-hi * hi) - lo * np.exp(-lo * lo)
    d_log_a = psi * (delta2 / (2.0 * a * a) + 1.0)[None] - envelope[None] * a * boundary
    return psi, d_log_a


def psi_matrix(k, pseudo, iv):
    return psi_stack(k, pseudo, [iv.start], [iv.end])[0]
