"""Power-law fits against compute, the efficiency-leverage (EL) law, and
wind-tunnel experiment planning.

All logarithms are natural. Fits minimize a Huber penalty on log-space
residuals with multi-start BFGS (see :mod:`sparse_forge.optim`).
"""
from dataclasses import asdict, dataclass, field
import csv
import itertools
import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_count, check_positive
from .exceptions import InvalidInputError
from .optim import _huber_unchecked, multistart_bfgs

DEFAULT_DELTA = 1e-3
DEFAULT_SATURATION = 255.0
NEAR_OPTIMAL_TOLERANCE = 0.0025


@dataclass(frozen=True)
class PowerLawFit:
    """``y(C) = coefficient * C ** exponent``."""

    coefficient: float
    exponent: float
    residual: float = 0.0

    def __post_init__(self):
        if not (self.coefficient > 0 and math.isfinite(self.coefficient)):
            raise InvalidInputError(f"coefficient must be positive, got {self.coefficient}")
        if not math.isfinite(self.exponent):
            raise InvalidInputError("exponent must be finite")

    def __call__(self, compute):
        return self.coefficient * np.power(compute, self.exponent)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ArchPoint:
    compute: float
    activation_ratio: float
    granularity: float
    observed: float = float("nan")

    def __post_init__(self):
        check_arch(self.compute, self.activation_ratio, self.granularity)


@dataclass(frozen=True)
class ElLawParams:
    a: float
    d: float
    beta: float
    gamma: float
    saturation: float = DEFAULT_SATURATION
    residual: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("a", "d", "beta", "gamma", "saturation"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")
        if self.saturation <= 0:
            raise InvalidInputError("saturation must be > 0")

    @property
    def coefficients(self):
        return np.array([self.a, self.d, self.beta, self.gamma])

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class WindTunnelEntry:
    flops_per_token: float
    train_tokens: float
    learning_rate: float
    batch_size: int
    total_compute: float


@dataclass(frozen=True)
class WindTunnelPlan:
    entries: tuple

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class AllocationPrediction:
    flops_per_token: float
    tokens: float
    adjusted: bool


def check_arch(compute, activation_ratio, granularity):
    compute = np.asarray(compute, dtype=np.float64)
    activation_ratio = np.asarray(activation_ratio, dtype=np.float64)
    granularity = np.asarray(granularity, dtype=np.float64)
    if not np.all(np.isfinite(compute)) or np.any(compute <= 0):
        raise InvalidInputError("compute must be finite and > 0")
    if np.any(~(activation_ratio > 0)) or np.any(activation_ratio > 1):
        raise InvalidInputError("activation ratio must lie in (0, 1]")
    if not np.all(np.isfinite(granularity)) or np.any(granularity < 1):
        raise InvalidInputError("granularity must be >= 1")


def near_optimal(losses, tolerance=NEAR_OPTIMAL_TOLERANCE):
    """Mask of losses within ``tolerance`` (relative) of the minimum."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise InvalidInputError("losses must not be empty")
    return losses <= losses.min() * (1.0 + tolerance)


# -- fitting ---------------------------------------------------------------


def _whitened_huber_fit(design, target, starts, delta):
    """Minimize sum huber(target - design @ theta) over theta.

    BFGS runs on ``phi = R @ theta`` where ``design = Q @ R``; the objective is
    unchanged but the coordinates are orthonormal, which keeps the
    finite-difference gradients and the line search well scaled.
    """
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise InvalidInputError("design is degenerate: not enough spread in the inputs")

    def objective(phis):
        res = target[None, :] - phis @ q.T
        return _huber_unchecked(res, delta).sum(axis=1)

    phi_starts = [r @ np.asarray(s, dtype=np.float64) for s in starts]
    best = multistart_bfgs(objective, phi_starts)
    theta = np.linalg.solve(r, best.x)
    return theta, float(best.fun)


def fit_power_law(points, delta=DEFAULT_DELTA):
    """Fit ``value = coefficient * compute ** exponent`` to ``(compute, value)`` pairs."""
    delta = check_positive(delta, "delta")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInputError("points must be a sequence of (compute, value) pairs")
    if len(pts) < 2:
        raise InvalidInputError(f"need at least 2 points, got {len(pts)}")
    if not np.all(np.isfinite(pts)) or np.any(pts <= 0):
        raise InvalidInputError("computes and values must be finite and > 0")
    log_c, log_y = np.log(pts[:, 0]), np.log(pts[:, 1])
    design = np.column_stack([np.ones_like(log_c), log_c])

    # 3x3 grid: exponent in {-0.5, 0, 0.5}; intercept puts the line through
    # the data centroid, shifted by -1, 0, +1 in log space.
    starts = []
    for e in (-0.5, 0.0, 0.5):
        for off in (-1.0, 0.0, 1.0):
            starts.append((log_y.mean() - e * log_c.mean() + off, e))
    (log_k, exponent), residual = _whitened_huber_fit(design, log_y, starts, delta)
    return PowerLawFit(float(math.exp(log_k)), float(exponent), residual)


def _el_design(compute, activation_ratio, granularity, saturation):
    log_a_hat = np.log(saturated_activation(activation_ratio, saturation))
    log_c, log_g = np.log(compute), np.log(granularity)
    features = np.column_stack([np.ones_like(log_c), log_c, log_g, log_g**2])
    return log_a_hat[:, None] * features


def fit_el_law(points, delta=DEFAULT_DELTA, saturation=DEFAULT_SATURATION):
    """Fit ``(a, d, beta, gamma)`` of the EL law to measured leverage values.

    ``points`` are :class:`ArchPoint` with ``observed`` holding the measured
    EL; the saturation constant is held fixed.
    """
    delta = check_positive(delta, "delta")
    saturation = check_positive(saturation, "saturation")
    points = list(points)
    if len(points) < 5:
        raise InvalidInputError(f"need at least 5 points, got {len(points)}")
    arr = np.array(
        [(p.compute, p.activation_ratio, p.granularity, p.observed) for p in points], dtype=np.float64
    )
    check_arch(arr[:, 0], arr[:, 1], arr[:, 2])
    for col, name in ((0, "compute"), (1, "activation_ratio"), (2, "granularity")):
        if np.unique(arr[:, col]).size < 2:
            raise InvalidInputError(f"points must span at least 2 distinct {name} values")
    if not np.all(np.isfinite(arr[:, 3])) or np.any(arr[:, 3] <= 0):
        raise InvalidInputError("observed EL values must be finite and > 0")

    design = _el_design(arr[:, 0], arr[:, 1], arr[:, 2], saturation)
    target = np.log(arr[:, 3])
    # columns are ordered (a, d, beta, gamma)
    grid = (-1.0, 0.0, 1.0)
    scales = np.array([1.0, 0.01, 0.1, 0.1])
    starts = [scales * np.array(g) for g in itertools.product(grid, repeat=4)]
    theta, residual = _whitened_huber_fit(design, target, starts, delta)
    a, d, beta, gamma = (float(t) for t in theta)
    return ElLawParams(a, d, beta, gamma, saturation, residual)


# -- prediction ------------------------------------------------------------


def saturated_activation(activation_ratio, saturation=DEFAULT_SATURATION):
    """``(S + 1) / (S * A + 1)``: 1 at A = 1, rising toward S + 1 as A -> 0."""
    a = np.asarray(activation_ratio, dtype=np.float64)
    return (saturation + 1.0) / (saturation * a + 1.0)


def el_exponent(params, compute, granularity):
    log_g = np.log(granularity)
    return params.a + params.d * np.log(compute) + params.gamma * log_g**2 + params.beta * log_g


def el_predict(params, arch):
    """Efficiency leverage of one architecture point."""
    check_arch(arch.compute, arch.activation_ratio, arch.granularity)
    a_hat = saturated_activation(arch.activation_ratio, params.saturation)
    return float(a_hat ** el_exponent(params, arch.compute, arch.granularity))


def el_predict_many(params, compute, activation_ratio, granularity):
    compute, activation_ratio, granularity = np.broadcast_arrays(
        np.asarray(compute, dtype=np.float64),
        np.asarray(activation_ratio, dtype=np.float64),
        np.asarray(granularity, dtype=np.float64),
    )
    check_arch(compute, activation_ratio, granularity)
    a_hat = saturated_activation(activation_ratio, params.saturation)
    return a_hat ** el_exponent(params, compute, granularity)


def predict_hparams(lr_fit, bs_fit, compute):
    """Learning rate and (integer, rounded-up) batch size at ``compute``."""
    compute = check_positive(compute, "compute")
    lr = float(lr_fit(compute))
    batch = max(1, math.ceil(float(bs_fit(compute))))
    return lr, batch


def predict_allocation(m_fit, d_fit, compute, tolerance=0.01):
    compute = check_positive(compute, "compute")
    m = float(m_fit(compute))
    d = float(d_fit(compute))
    if abs(m * d - compute) > tolerance * compute:
        return AllocationPrediction(m, compute / m, True)
    return AllocationPrediction(m, d, False)


def _invert_monotone(fit, target):
    """Compute C with ``fit(C) == target`` by bisection on log C."""
    lo, hi = -1.0, 1.0
    f = lambda lc: float(fit(math.exp(lc)))  # noqa: E731
    while f(lo) > target:
        lo *= 2.0
        if lo < -7e2:
            raise InvalidInputError(f"allocation law cannot reach {target}")
    while f(hi) < target:
        hi *= 2.0
        if hi > 7e2:
            raise InvalidInputError(f"allocation law cannot reach {target}")
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    # pick whichever endpoint lands closer
    return min((math.exp(lo), math.exp(hi)), key=lambda c: abs(float(fit(c)) - target))


def plan_wind_tunnel(min_flops_per_token, max_flops_per_token, n_models, lr_fit, bs_fit, m_fit, d_fit=None):
    """Geometrically spaced ladder of model sizes with their compute budgets.

    Each size is mapped back to the compute budget where the allocation law
    ``m_fit`` prescribes it; tokens are that budget divided by the size, so
    ``flops_per_token * train_tokens == total_compute`` holds for every entry.
    ``d_fit`` is accepted for symmetry with :func:`predict_allocation`.
    """
    n_models = check_count(n_models, "n_models", minimum=2)
    lo = check_positive(min_flops_per_token, "min_flops_per_token")
    hi = check_positive(max_flops_per_token, "max_flops_per_token")
    if not lo < hi:
        raise InvalidInputError("min_flops_per_token must be < max_flops_per_token")
    if not m_fit.exponent > 0:
        raise InvalidInputError("allocation law must have a positive exponent to be invertible")

    ratio = (hi / lo) ** (1.0 / (n_models - 1))
    sizes = [lo * ratio**i for i in range(n_models - 1)] + [hi]
    entries = []
    for size in sizes:
        compute = _invert_monotone(m_fit, size)
        tokens = compute / size
        lr, batch = predict_hparams(lr_fit, bs_fit, compute)
        entries.append(WindTunnelEntry(size, tokens, lr, batch, size * tokens))
    return WindTunnelPlan(tuple(entries))


# -- sklearn-style estimators ---------------------------------------------


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_power_law`.

    ``X`` is a single column of compute values and ``y`` the target
    quantity (learning rate, batch size, tokens, ...).
    """

    def __init__(self, delta=DEFAULT_DELTA):
        self.delta = delta

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=2, y_numeric=True)
        if X.shape[1] != 1:
            raise InvalidInputError(f"expected one feature (compute), got {X.shape[1]}")
        fit = fit_power_law(np.column_stack([X[:, 0], y]), delta=self.delta)
        self.fit_ = fit
        self.coefficient_ = fit.coefficient
        self.exponent_ = fit.exponent
        self.residual_ = fit.residual
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        return self.fit_(X[:, 0])


class EfficiencyLeverageRegressor(RegressorMixin, BaseEstimator):
    """Estimator for the EL law; columns of ``X`` are
    ``(compute, activation_ratio, granularity)`` and ``y`` is measured EL."""

    def __init__(self, delta=DEFAULT_DELTA, saturation=DEFAULT_SATURATION):
        self.delta = delta
        self.saturation = saturation

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=5, y_numeric=True)
        if X.shape[1] != 3:
            raise InvalidInputError("expected columns (compute, activation_ratio, granularity)")
        points = [ArchPoint(c, a, g, o) for (c, a, g), o in zip(X, y)]
        self.params_ = fit_el_law(points, delta=self.delta, saturation=self.saturation)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return el_predict_many(self.params_, X[:, 0], X[:, 1], X[:, 2])


# -- file formats ----------------------------------------------------------

POWER_HEADER = ["compute", "value"]
EL_HEADER = ["compute", "activation_ratio", "granularity", "observed"]
PLAN_HEADER = ["flops_per_token", "train_tokens", "learning_rate", "batch_size", "total_compute"]


def _read_csv(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        if [h.strip() for h in got] != header:
            raise InvalidInputError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InvalidInputError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: non-numeric field") from None
    return rows


def read_power_points(path):
    return [tuple(r) for r in _read_csv(path, POWER_HEADER)]


def read_el_points(path):
    return [ArchPoint(*r) for r in _read_csv(path, EL_HEADER)]


def write_plan_csv(plan, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(PLAN_HEADER)
    for e in plan:
        writer.writerow([repr(e.flops_per_token), repr(e.train_tokens), repr(e.learning_rate), e.batch_size, repr(e.total_compute)])
