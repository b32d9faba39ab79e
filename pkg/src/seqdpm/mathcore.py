"""
Linear algebra helpers and closed-form normal-inverse-Wishart predictives.

Every density here is returned in log space.  The predictive scale of an
occupied component, ``B * (Omega + 0.5 * D)``, is handled through a cached
lower Cholesky factor of ``M = Omega + 0.5 * D``; adding one point changes
``M`` by a positive rank-one term, so the factor is updated in O(p^2) and
refreshed from the raw statistics every ``recompute_period`` updates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)

PIVOT_FLOOR = 1e-12
DEFAULT_RECOMPUTE_PERIOD = 32
_LOG_2PI = math.log(2.0 * math.pi)


class FactorizationError(np.linalg.LinAlgError):
    """A matrix that should be positive definite failed to factorize."""

    def __init__(self, name: str, matrix: np.ndarray):
        super().__init__(f"{name} is not positive definite (shape {matrix.shape})")
        self.name = name
        self.matrix = matrix


def cholesky_lower(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise FactorizationError(name, a) from None
    if not np.all(np.diag(L) > 0.0):
        raise FactorizationError(name, a)
    return L


def logdet_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.log(np.diag(L)).sum())


def chol_rank1_update(L: np.ndarray, x: np.ndarray) -> np.ndarray | None:
    """Return the lower factor of ``L L' + x x'``.

    Works on copies.  Returns ``None`` when a pivot would drop to or below
    ``PIVOT_FLOOR``; callers then refactorize from scratch.
    """
    L = L.copy()
    x = np.array(x, dtype=float)
    p = L.shape[0]
    for k in range(p):
        lkk = L[k, k]
        r = math.sqrt(lkk * lkk + x[k] * x[k])
        if not r > PIVOT_FLOOR:
            return None
        c = r / lkk
        s = x[k] / lkk
        L[k, k] = r
        if k + 1 < p:
            L[k + 1:, k] = (L[k + 1:, k] + s * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - s * L[k + 1:, k]
    return L


def _as_points(x, p: int | None = None) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    arr = np.atleast_1d(arr)
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a vector or an (n, p) array, got shape {np.shape(x)}")
    if p is not None and arr.shape[1] != p:
        raise ValueError(f"dimension mismatch: got {arr.shape[1]}, expected {p}")
    return arr, single


def logsumexp(a, axis=None):
    """log(sum(exp(a))) along ``axis``; all -inf gives -inf."""
    a = np.asarray(a, dtype=float)
    if axis is None:
        m = a.max()
        if not math.isfinite(m):
            return float(m) if m > 0 or m != m else -math.inf
        return m + math.log(np.exp(a - m).sum())
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def _t_const(df: float, p: int, logdet: float) -> float:
    return (math.lgamma(0.5 * (df + p)) - math.lgamma(0.5 * df)
            - 0.5 * p * math.log(df * math.pi) - 0.5 * logdet)


def _mahalanobis_one(L: np.ndarray, v: np.ndarray) -> float:
    if L.shape[0] == 1:
        z = float(v[0]) / float(L[0, 0])
        return z * z  # python floats overflow to inf quietly
    z = solve_triangular(L, v, lower=True, check_finite=False)
    return float(z @ z)


def mvt_logpdf_chol(x, df: float, loc: np.ndarray, L: np.ndarray, logdet: float | None = None):
    """Multivariate Student-t log density given the scale's lower Cholesky factor."""
    p = L.shape[0]
    if logdet is None:
        logdet = logdet_from_chol(L)
    const = _t_const(df, p, logdet)
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1 and x.size == p:
        maha = _mahalanobis_one(L, x.reshape(p) - loc)
        return const - 0.5 * (df + p) * math.log1p(maha / df)
    pts, single = _as_points(x, p)
    z = solve_triangular(L, (pts - loc).T, lower=True, check_finite=False)
    maha = np.einsum("ij,ij->j", z, z)
    out = const - 0.5 * (df + p) * np.log1p(maha / df)
    return float(out[0]) if single else out


def mvt_logpdf(x, df: float, loc, scale):
    """Log density of the multivariate Student-t distribution.

    Parameters
    ----------
    x : array_like, shape (p,) or (n, p)
    df : float
        Degrees of freedom, > 0.
    loc : array_like, shape (p,)
    scale : array_like, shape (p, p)
        Symmetric positive-definite scale matrix.

    Returns
    -------
    float or ndarray of shape (n,)
    """
    if not df > 0:
        raise ValueError(f"df must be positive, got {df}")
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    loc = np.atleast_1d(np.asarray(loc, dtype=float))
    if scale.shape != (loc.size, loc.size):
        raise ValueError(f"dimension mismatch: loc {loc.shape} vs scale {scale.shape}")
    L = cholesky_lower(scale, "t scale")
    return mvt_logpdf_chol(x, df, loc, L)


def mvn_logpdf_chol(x, loc: np.ndarray, L: np.ndarray, logdet: float | None = None):
    p = L.shape[0]
    pts, single = _as_points(x, p)
    if logdet is None:
        logdet = logdet_from_chol(L)
    z = solve_triangular(L, (pts - loc).T, lower=True, check_finite=False)
    out = -0.5 * (p * _LOG_2PI + logdet + np.einsum("ij,ij->j", z, z))
    return float(out[0]) if single else out


@dataclass(frozen=True, eq=False)
class NiwPrior:
    """Normal-inverse-Wishart base measure (lam, kappa, omega, nu)."""

    lam: np.ndarray
    kappa: float
    omega: np.ndarray
    nu: float

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float)).copy()
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float)).copy()
        p = lam.size
        if omega.shape != (p, p):
            raise ValueError(f"omega must be {p}x{p}, got {omega.shape}")
        if not np.allclose(omega, omega.T, rtol=0, atol=1e-12 * max(1.0, np.abs(omega).max())):
            raise ValueError("omega must be symmetric")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not 2.0 * self.nu - p + 1.0 > 0:
            raise ValueError(f"need 2*nu - p + 1 > 0, got nu={self.nu}, p={p}")
        cholesky_lower(omega, "omega")
        lam.flags.writeable = False
        omega.flags.writeable = False
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "nu", float(self.nu))

    @classmethod
    def default(cls, p: int) -> "NiwPrior":
        """lam = 0, kappa = 0.25, nu = p + 2, omega = (nu - (p + 1) / 2) I."""
        nu = p + 2.0
        return cls(np.zeros(p), 0.25, (nu - 0.5 * (p + 1)) * np.eye(p), nu)

    @property
    def dim(self) -> int:
        return self.lam.size

    @cached_property
    def omega_chol(self) -> np.ndarray:
        return cholesky_lower(self.omega, "omega")

    @cached_property
    def omega_logdet(self) -> float:
        return logdet_from_chol(self.omega_chol)

    def new_params(self) -> tuple[float, np.ndarray, float]:
        """(d0, a0, B0) of the new-cluster predictive."""
        p = self.dim
        d0 = 2.0 * self.nu - p + 1.0
        b0 = 2.0 * (self.kappa + 1.0) / (self.kappa * d0)
        return d0, self.lam, b0

    def __eq__(self, other):
        if not isinstance(other, NiwPrior):
            return NotImplemented
        return (self.kappa == other.kappa and self.nu == other.nu
                and np.array_equal(self.lam, other.lam) and np.array_equal(self.omega, other.omega))

    __hash__ = object.__hash__


@dataclass(eq=False)
class _Factor:
    prior: NiwPrior
    chol: np.ndarray  # lower factor of omega + 0.5 * D
    logdet: float
    stale: int
    jittered: bool = False


@dataclass(eq=False)
class ComponentStats:
    """Sufficient statistics of one mixture component.

    Treated as an immutable value: ``stats_add`` returns a new object, so
    the same instance may be shared by many particles.
    """

    count: int
    mean: np.ndarray
    scatter: np.ndarray
    _factor: _Factor | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, p: int) -> "ComponentStats":
        return cls(0, np.zeros(p), np.zeros((p, p)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def staleness(self) -> int | None:
        return None if self._factor is None else self._factor.stale

    @property
    def jittered(self) -> bool:
        return self._factor is not None and self._factor.jittered

    def same_values(self, other: "ComponentStats") -> bool:
        return (self.count == other.count and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.scatter, other.scatter))

    def predictive_factor(self, prior: NiwPrior) -> _Factor:
        f = self._factor
        if f is None or f.prior is not prior:
            f = _fresh_factor(self, prior)
            self._factor = f
        return f


def _prior_term(stats: ComponentStats, prior: NiwPrior) -> tuple[np.ndarray, np.ndarray]:
    """(a, D) of an occupied component."""
    n = stats.count
    k = prior.kappa
    a = (k * prior.lam + n * stats.mean) / (k + n)
    diff = prior.lam - stats.mean
    D = stats.scatter + (k * n / (k + n)) * np.outer(diff, diff)
    return a, D


def predictive_matrix(stats: ComponentStats, prior: NiwPrior) -> np.ndarray:
    """omega + 0.5 * D, symmetrized."""
    _, D = _prior_term(stats, prior)
    M = prior.omega + 0.5 * D
    return 0.5 * (M + M.T)


def _fresh_factor(stats: ComponentStats, prior: NiwPrior) -> _Factor:
    M = predictive_matrix(stats, prior)
    jittered = False
    try:
        L = cholesky_lower(M, "predictive scale")
    except FactorizationError:
        # omega should keep M positive definite; reaching here means severe drift
        M = M + 1e-10 * np.trace(prior.omega) * np.eye(M.shape[0])
        L = cholesky_lower(M, "predictive scale")
        jittered = True
        log.warning("predictive scale needed jitter (count=%d)", stats.count)
    return _Factor(prior, L, logdet_from_chol(L), 0, jittered)


def stats_add(stats: ComponentStats, theta, prior: NiwPrior | None = None,
              recompute_period: int = DEFAULT_RECOMPUTE_PERIOD) -> ComponentStats:
    """Absorb one point into a component, returning new statistics.

    An empty component becomes ``{1, theta, 0}``.  Otherwise the running mean
    and scatter follow the one-point update; the scatter uses the rank-one
    form ``S + n/(n+1) (theta - mean)(theta - mean)'``, which is the same
    quantity as ``S + theta theta' + n mean mean' - (n+1) mean' mean''`` without
    the cancellation.

    When ``prior`` is given and the parent carries a factor for that prior,
    the factor is carried forward by a rank-one update.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    p = stats.dim
    if theta.shape != (p,):
        raise ValueError(f"dimension mismatch: got {theta.shape}, expected ({p},)")
    n = stats.count
    if n == 0:
        new = ComponentStats(1, theta.copy(), np.zeros((p, p)))
        parent_chol = None if prior is None else prior.omega_chol
        a_old = None if prior is None else prior.lam
    else:
        delta = theta - stats.mean
        mean = stats.mean + delta / (n + 1)
        S = stats.scatter + (n / (n + 1.0)) * np.outer(delta, delta)
        S = 0.5 * (S + S.T)
        new = ComponentStats(n + 1, mean, S)
        f = stats._factor
        if prior is not None and f is not None and f.prior is prior:
            parent_chol = f.chol
            a_old = (prior.kappa * prior.lam + n * stats.mean) / (prior.kappa + n)
        else:
            parent_chol = None

    if prior is not None:
        stale = 1 if n == 0 else (stats._factor.stale + 1 if parent_chol is not None else None)
        if parent_chol is None or stale >= recompute_period:
            new._factor = _fresh_factor(new, prior)
        else:
            kn = prior.kappa + n
            v = math.sqrt(0.5 * kn / (kn + 1.0)) * (theta - a_old)
            L = chol_rank1_update(parent_chol, v)
            if L is None:
                new._factor = _fresh_factor(new, prior)
            else:
                new._factor = _Factor(prior, L, logdet_from_chol(L), stale)
    return new


def stats_from_batch(points) -> ComponentStats:
    """Two-pass mean and scatter of a nonempty set of points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise ValueError("stats_from_batch needs at least one point")
    mean = pts.mean(axis=0)
    c = pts - mean
    S = c.T @ c
    return ComponentStats(pts.shape[0], mean, 0.5 * (S + S.T))


def predictive_new(theta, prior: NiwPrior):
    """Log predictive density of opening a new cluster at ``theta``."""
    d0, a0, b0 = prior.new_params()
    L = math.sqrt(b0) * prior.omega_chol
    logdet = prior.dim * math.log(b0) + prior.omega_logdet
    return mvt_logpdf_chol(theta, d0, a0, L, logdet)


def existing_params(stats: ComponentStats, prior: NiwPrior) -> tuple[float, np.ndarray, float, np.ndarray]:
    """(d, a, B, D) of the predictive for an occupied component."""
    if stats.count < 1:
        raise ValueError("predictive of an empty component is undefined")
    n = stats.count
    p = prior.dim
    d = 2.0 * prior.nu + n - p + 1.0
    a, D = _prior_term(stats, prior)
    B = 2.0 * (prior.kappa + n + 1.0) / ((prior.kappa + n) * d)
    return d, a, B, D


def predictive_existing(theta, stats: ComponentStats, prior: NiwPrior):
    """Log predictive density of ``theta`` joining an occupied component."""
    if stats.count < 1:
        raise ValueError("predictive of an empty component is undefined")
    n = stats.count
    p = prior.dim
    k = prior.kappa
    d = 2.0 * prior.nu + n - p + 1.0
    a = (k * prior.lam + n * stats.mean) / (k + n)
    B = 2.0 * (k + n + 1.0) / ((k + n) * d)
    f = stats.predictive_factor(prior)
    L = math.sqrt(B) * f.chol
    return mvt_logpdf_chol(theta, d, a, L, p * math.log(B) + f.logdet)


def plugin_params(stats: ComponentStats, prior: NiwPrior) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean Gaussian (mu, Sigma) of an occupied component.

    ``Sigma = (omega + 0.5 D) / (nu + n/2 - (p+1)/2)``, the inverse-Wishart
    mean consistent with the t predictive above.
    """
    d, a, B, D = existing_params(stats, prior)
    denom = prior.nu + 0.5 * stats.count - 0.5 * (prior.dim + 1)
    if not denom > 0:
        raise ValueError("plug-in covariance undefined: nu + n/2 - (p+1)/2 <= 0")
    M = prior.omega + 0.5 * D
    return a, 0.5 * (M + M.T) / denom


def plugin_logpdf(x, stats: ComponentStats, prior: NiwPrior):
    mu, sigma = plugin_params(stats, prior)
    return mvn_logpdf_chol(x, mu, cholesky_lower(sigma, "plug-in covariance"))
