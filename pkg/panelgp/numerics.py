"""Special functions and the scalar bound machinery for E[ln y^2] with y Gaussian.

``g_m(y) = sum_j Poisson(j; y) * digamma(j + m)`` is the central object:
for y ~ N(mu, sigma^2) and phi = (mu / sigma)^2,

    E[ln y^2] = ln(2 sigma^2) + g_{1/2}(phi / 2)

and ``ln(mu^2 + b sigma^2) - C - ln 2`` is a lower bound for every b in [0, 1].
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import dawsn, polygamma

EULER = float(np.euler_gamma)
LN2 = math.log(2.0)

# above this Poisson mean the series start weight exp(-y) approaches underflow
ASYMPTOTIC_SWITCH = 700.0

_DIGAMMA_SHIFT = 10.0
_DIGAMMA_ASYMPTOTIC = (
    (2, -1.0 / 12.0),
    (4, 1.0 / 120.0),
    (6, -1.0 / 252.0),
    (8, 1.0 / 240.0),
    (10, -1.0 / 132.0),
    (12, 691.0 / 32760.0),
    (14, -1.0 / 12.0),
)


def digamma(x):
    """psi(x) for x > 0 by upward recurrence to x >= 10 and the asymptotic series.

    Accepts a scalar or an array; scalars come back as float.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    y = arr.copy()
    shift = np.zeros_like(y)
    small = y < _DIGAMMA_SHIFT
    while np.any(small):
        shift[small] -= 1.0 / y[small]
        y[small] += 1.0
        small = y < _DIGAMMA_SHIFT
    inv2 = 1.0 / (y * y)
    series = np.zeros_like(y)
    power = np.ones_like(y)
    for _, coef in _DIGAMMA_ASYMPTOTIC:
        power = power * inv2
        series += coef * power
    value = np.log(y) - 0.5 / y + series + shift
    if np.ndim(x) == 0:
        return float(value)
    return value


def _g_asymptotic(m, y):
    # moment expansion of E[psi(J + m)], J ~ Poisson(y), around x = y + m
    x = y + m
    central = (
        (2, y),
        (3, y),
        (4, 3.0 * y * y + y),
        (5, 10.0 * y * y + y),
        (6, 15.0 * y**3 + 25.0 * y * y + y),
    )
    value = digamma(x)
    for order, moment in central:
        value += float(polygamma(order, x)) * moment / math.factorial(order)
    return value


def g_m(m, y, tol=1e-12):
    """Poisson-weighted digamma series g_m(y) = sum_j e^-y y^j / j! * psi(j + m)."""
    if not m > 0:
        raise ValueError("g_m needs m > 0, got {}".format(m))
    if not y >= 0:
        raise ValueError("g_m needs y >= 0, got {}".format(y))
    if y > ASYMPTOTIC_SWITCH:
        return _g_asymptotic(m, y)

    weight = math.exp(-y)
    psi = digamma(m)
    total = weight * psi
    j = 0
    while True:
        psi += 1.0 / (j + m)
        j += 1
        weight *= y / j
        total += weight * psi
        # weights are unimodal in j, so the tail is only bounded past the mode
        if j > y and weight * max(abs(psi), 1.0) < tol:
            break
    return total


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)
_DAWSON_SPLIT = 8.0
_DAWSON_TAIL = tuple((k, math.prod(range(1, 2 * k, 2)) / 2.0 ** (k + 1)) for k in range(1, 9))


def _dawson_quadrature(x):
    s = 0.5 * x[:, None] * (_GL_NODES[None, :] + 1.0)
    return 0.5 * x * (dawsn(s) @ _GL_WEIGHTS)


def _dawson_tail_antiderivative(s):
    value = 0.5 * np.log(s)
    for k, coef in _DAWSON_TAIL:
        value -= coef / (2.0 * k) * s ** (-2.0 * k)
    return value


_DAWSON_AT_SPLIT = float(_dawson_quadrature(np.array([_DAWSON_SPLIT]))[0])


def _dawson_integral(x):
    """int_0^x D(s) ds for x >= 0 (D is Dawson's integral)."""
    out = np.empty_like(x)
    small = x <= _DAWSON_SPLIT
    if np.any(small):
        out[small] = _dawson_quadrature(x[small])
    if np.any(~small):
        out[~small] = _DAWSON_AT_SPLIT + _dawson_tail_antiderivative(x[~small]) - _dawson_tail_antiderivative(_DAWSON_SPLIT)
    return out


_PSI_HALF = -EULER - 2.0 * LN2


def g_half(y):
    """Vectorized g_{1/2}(y) = psi(1/2) + 4 int_0^sqrt(y) D(s) ds.

    Uses d/dy g_{1/2}(y) = 2 D(sqrt y) / sqrt y, which follows from Kummer's
    transformation of the Poisson series of 1 / (j + 1/2).
    """
    arr = np.asarray(y, dtype=float)
    if np.any(arr < 0):
        raise ValueError("g_half needs y >= 0")
    flat = arr.reshape(-1)
    value = (_PSI_HALF + 4.0 * _dawson_integral(np.sqrt(flat))).reshape(arr.shape)
    if np.ndim(y) == 0:
        return float(value)
    return value


def g_half_derivative(y):
    arr = np.asarray(y, dtype=float)
    if np.any(arr < 0):
        raise ValueError("g_half_derivative needs y >= 0")
    root = np.sqrt(arr)
    tiny = arr < 1e-12
    safe = np.where(tiny, 1.0, root)
    value = np.where(tiny, 2.0 * (1.0 - 2.0 * arr / 3.0), 2.0 * dawsn(safe) / safe)
    if np.ndim(y) == 0:
        return float(value)
    return value


def expected_log_square(mu, sigma):
    """E[ln y^2] for y ~ N(mu, sigma^2)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive, got {}".format(sigma))
    phi = (mu / sigma) ** 2
    return math.log(2.0 * sigma * sigma) + g_m(0.5, phi / 2.0)


def G_gap(neg_half_phi):
    """G(-phi/2), the confluent-hypergeometric term with g_{1/2}(phi/2) = -G(-phi/2) - 2 ln 2 - C."""
    if neg_half_phi > 0:
        raise ValueError("G_gap is evaluated at -phi/2 <= 0, got {}".format(neg_half_phi))
    return -g_m(0.5, -neg_half_phi) - 2.0 * LN2 - EULER


def lower_bound_log_square(mu, sigma, b):
    """ln(mu^2 + b sigma^2) - C - ln 2, a lower bound of E[ln y^2] for b in [0, 1]."""
    if not sigma > 0:
        raise ValueError("sigma must be positive, got {}".format(sigma))
    if not 0.0 <= b <= 1.0:
        raise ValueError("b must lie in [0, 1], got {}".format(b))
    arg = mu * mu + b * sigma * sigma
    if arg <= 0:
        raise ValueError("ln(mu^2 + b sigma^2) is undefined for mu = 0 and b = 0")
    return math.log(arg) - EULER - LN2


def h_gap(phi, b):
    """Bound minus truth, ln(phi + b) + G(-phi/2)."""
    if not phi >= 0:
        raise ValueError("phi must be nonnegative, got {}".format(phi))
    if not 0.0 <= b <= 1.0:
        raise ValueError("b must lie in [0, 1], got {}".format(b))
    if phi == 0 and b == 0:
        raise ValueError("h_gap is undefined at phi = 0 with b = 0")
    return math.log(phi + b) + G_gap(-phi / 2.0)


@dataclass(frozen=True, eq=False)
class GapGrid:
    phi_values: np.ndarray
    b_values: np.ndarray
    variances: np.ndarray = field(repr=False)

    def __post_init__(self):
        phi = np.asarray(self.phi_values, dtype=float)
        bs = np.asarray(self.b_values, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if phi.size == 0 or bs.size == 0:
            raise ValueError("GapGrid needs nonempty phi and b grids")
        if np.any(phi <= 0) or np.any(np.diff(phi) <= 0):
            raise ValueError("phi_values must be positive and strictly increasing")
        if np.any(bs < 0) or np.any(bs > 1) or np.any(np.diff(bs) <= 0):
            raise ValueError("b_values must lie in [0, 1] and be strictly increasing")
        if var.shape != bs.shape or not np.all(np.isfinite(var)) or np.any(var < 0):
            raise ValueError("variances needs one finite nonnegative entry per b")
        object.__setattr__(self, "phi_values", phi)
        object.__setattr__(self, "b_values", bs)
        object.__setattr__(self, "variances", var)

    @property
    def b_star(self):
        return float(self.b_values[int(np.argmin(self.variances))])


def default_phi_grid():
    return np.logspace(-6.0, 6.0, 5000)


def default_b_grid():
    return np.linspace(0.0, 1.0, 50)


def select_b(phi_grid, b_grid):
    """Pick the b whose gap h(phi, b) varies least over the phi grid (population variance)."""
    # sorted and deduplicated, so argmin breaks ties toward the smallest b
    phi = np.unique(np.asarray(phi_grid, dtype=float))
    bs = np.unique(np.asarray(b_grid, dtype=float))
    if phi.size == 0 or bs.size == 0:
        raise ValueError("select_b needs nonempty grids")
    if np.any(bs < 0) or np.any(bs > 1):
        raise ValueError("b grid must lie within [0, 1]")
    if phi[0] <= 0:
        raise ValueError("phi grid must be positive")

    # G(-phi/2) does not depend on b
    G = np.array([G_gap(-p / 2.0) for p in phi])
    variances = []
    for b in bs:
        variances.append(float(np.var(np.log(phi + b) + G)))
    grid = GapGrid(phi, bs, np.array(variances))
    return grid.b_star, grid
