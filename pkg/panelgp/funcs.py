import logging

import numpy as np
import scipy.linalg
from msgpack import packb, unpackb
from scipy.integrate import simpson

logger = logging.getLogger(__name__)


class PanelGPError(Exception):
    pass


class DataFormatError(PanelGPError, ValueError):
    def __init__(self, reason, row=None, column=None, subject=None):
        self.reason = reason
        self.row = row
        self.column = column
        self.subject = subject
        where = []
        if row is not None:
            where.append("row {}".format(row))
        if column is not None:
            where.append("column '{}'".format(column))
        if subject is not None:
            where.append("subject '{}'".format(subject))
        prefix = ", ".join(where)
        super().__init__("{}: {}".format(prefix, reason) if prefix else reason)


class NumericalError(PanelGPError, ArithmeticError):
    pass


class FactorizationError(NumericalError):
    pass


class DegenerateIntervalError(NumericalError):
    pass


class NegativeVarianceError(NumericalError):
    pass


class FitDivergedError(NumericalError):
    def __init__(self, iteration, value):
        self.iteration = iteration
        self.value = value
        super().__init__("non-finite bound {} at vEM iteration {}".format(value, iteration))


def msg_unpack(data):
    return unpackb(data, raw=False, strict_map_key=False)


def msg_pack(data):
    # doubles are kept as doubles: fitted states must reload bit for bit
    serialized = packb(data, use_single_float=False, use_bin_type=True)
    return serialized, len(serialized)


def make_rng(seed):
    """Counter-based generator (Philox) so streams are reproducible from the seed alone."""
    return np.random.Generator(np.random.Philox(int(seed)))


def simpson_nodes(start, end, quad_points):
    if quad_points < 3 or quad_points % 2 == 0:
        raise ValueError("quad_points must be odd and >= 3, got {}".format(quad_points))
    return np.linspace(start, end, quad_points)


def simpson_integral(fn, start, end, quad_points):
    """Simpson's rule of a vectorized function over [start, end]."""
    if end <= start:
        return 0.0
    xs = simpson_nodes(start, end, quad_points)
    return float(simpson(np.asarray(fn(xs), dtype=float), x=xs))


def cholesky(matrix):
    try:
        return scipy.linalg.cholesky(matrix, lower=True)
    except np.linalg.LinAlgError as e:
        raise FactorizationError("matrix is not positive definite: {}".format(e)) from e


def cholesky_escalating(cov, attempts=5, start=1e-6, stop=1e-4):
    """Cholesky of a near-singular covariance, adding relative jitter until it factorizes."""
    scale = max(float(np.mean(np.diag(cov))), 1e-300)
    eye = np.eye(cov.shape[0])
    for jitter in np.geomspace(start, stop, attempts):
        try:
            return scipy.linalg.cholesky(cov + jitter * scale * eye, lower=True)
        except np.linalg.LinAlgError:
            logger.debug("cholesky failed with relative jitter %.3g", jitter)
    raise FactorizationError("covariance of size {} not factorizable with jitter up to {}".format(cov.shape[0], stop))
