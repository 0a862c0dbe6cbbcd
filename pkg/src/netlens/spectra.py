"""Eigen-analysis of layer activations.

Activations of a conv layer ``(N, C, H, W)`` become an ``(N*H*W) x C``
observation matrix (one row per sample and spatial position); dense
activations ``(N, F)`` are used as they are. The spectrum is that of the
feature covariance, centred by default, or of the uncentred Gram matrix
``A^T A / m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from netlens.errors import ContractError, DegenerateSpectrumError, DivergentFitError, NumericError
from netlens.network import ActivationTrace
from netlens.prng import SplitMix64

EIGEN_FLOOR = 1e-12
LOW_CONFIDENCE_N = 30
FAMILIES = ("pareto", "exponential", "lognormal", "normal")


@dataclass
class EigenSpectrum:
    layer: str
    eigenvalues: np.ndarray  # ascending
    m: int
    d: int


@dataclass
class ParetoFit:
    alpha: float
    xm: float
    n: int
    ks_statistic: float


@dataclass
class FamilyFit:
    family: str
    params: dict
    ks_statistic: float
    error: str | None = None


@dataclass
class FitReport:
    fits: list[FamilyFit]  # ascending KS, failed families last
    n: int
    low_confidence: bool = field(default=False)

    @property
    def best(self) -> FamilyFit:
        return self.fits[0]


def activation_matrix(trace: ActivationTrace, layer: str) -> np.ndarray:
    if layer not in trace:
        raise KeyError(f"layer {layer!r} not in trace")
    a = np.asarray(trace[layer], dtype=np.float64)
    if a.ndim == 4:
        return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])
    if a.ndim == 2:
        return a
    raise ContractError(f"layer {layer!r} activations have unsupported rank {a.ndim}")


def covariance(a: np.ndarray, centered: bool = True) -> np.ndarray:
    m = a.shape[0]
    if centered:
        if m < 2:
            raise ContractError("centred covariance needs at least two observations")
        a = a - a.mean(axis=0)
        return a.T @ a / (m - 1)
    return a.T @ a / m


def eig_sym(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, Q)`` with eigenvalues ascending and orthonormal
    eigenvectors in the columns of ``Q``. Sweeps stop once the largest
    off-diagonal magnitude falls below ``tol * ||M||_F``.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"eig_sym needs a square matrix, got shape {a.shape}")
    frob = float(np.linalg.norm(a))
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-8 * max(frob, 1.0):
        raise ContractError("eig_sym input is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    threshold = tol * frob
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if n < 2 or np.max(np.abs(a[off_mask])) <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * cp - s * cq, s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * rp - s * rq, s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        if np.max(np.abs(a[off_mask])) > threshold:
            raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def layer_spectrum(trace: ActivationTrace, layer: str, centered: bool = True) -> EigenSpectrum:
    a = activation_matrix(trace, layer)
    w, _ = eig_sym(covariance(a, centered))
    return EigenSpectrum(layer, w, a.shape[0], a.shape[1])


def nearest_rank(n: int, permille: int) -> int:
    """1-based nearest-rank index ``ceil(q * n)`` for ``q = permille / 1000``, clamped to [1, n]."""
    return min(max(-(-permille * n // 1000), 1), n)


def condition_number(spectrum: EigenSpectrum | np.ndarray) -> float:
    """|lambda at the 99.9th percentile| / |lambda at the 90th|, nearest rank."""
    lam = np.sort(np.asarray(getattr(spectrum, "eigenvalues", spectrum), dtype=np.float64))
    n = lam.size
    if n == 0:
        raise ContractError("empty spectrum")
    hi = abs(lam[nearest_rank(n, 999) - 1])
    lo = abs(lam[nearest_rank(n, 900) - 1])
    if lo < EIGEN_FLOOR:
        raise DegenerateSpectrumError(f"90th-percentile eigenvalue {lo:.3g} is numerically zero")
    return float(hi / lo)


def symmetrize_density(spectrum: EigenSpectrum | np.ndarray, bins: int):
    """Histogram of the multiset {lambda} U {-lambda} on [-max|lambda|, max|lambda|].

    Non-negative copies are binned on the right half and mirrored, so a value
    on an interior edge goes to the outer bin on both sides and the result is
    exactly even. Returns ``(edges, masses)`` with masses summing to 1.
    """
    lam = np.asarray(getattr(spectrum, "eigenvalues", spectrum), dtype=np.float64)
    if lam.size == 0:
        raise ContractError("empty spectrum")
    if bins < 2:
        raise ContractError("need at least two bins")
    mag = np.abs(lam)
    top = float(mag.max())
    t = (mag + top) / (2.0 * top) * bins if top > 0 else np.full(mag.shape, bins / 2.0)
    right = np.minimum(np.floor(t).astype(np.int64), bins - 1)
    counts = np.bincount(right, minlength=bins) + np.bincount(bins - 1 - right, minlength=bins)
    edges = np.linspace(-top, top, bins + 1)
    return edges, counts / (2.0 * lam.size)


# ---------------------------------------------------------------- fitting

def sample_pareto(n: int, alpha: float, xm: float = 1.0, seed: int = 0) -> np.ndarray:
    """Inverse-CDF Pareto draws ``xm * (1 - u) ** (-1 / alpha)``."""
    u = SplitMix64(seed).uniform(n)
    return xm * (1.0 - u) ** (-1.0 / alpha)


def _prepare(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[x > EIGEN_FLOOR]
    if x.size < 2:
        raise ContractError(f"need at least 2 samples above {EIGEN_FLOOR}, got {x.size}")
    return np.sort(x)


def ks_statistic(sorted_x: np.ndarray, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance of the empirical CDF from ``cdf``."""
    n = sorted_x.size
    f = cdf(sorted_x)
    d_plus = np.max(np.arange(1, n + 1) / n - f)
    d_minus = np.max(f - np.arange(n) / n)
    return float(min(max(d_plus, d_minus, 0.0), 1.0))


def _pareto_mle(x: np.ndarray) -> tuple[float, float]:
    xm = float(x[0])
    s = float(np.sum(np.log(x / xm)))
    if not s > 0.0:
        raise DivergentFitError("all samples equal the minimum; Pareto shape diverges")
    return x.size / s, xm


def fit_pareto(samples) -> ParetoFit:
    """Maximum-likelihood Pareto fit with ``x_m = min(samples)``."""
    x = _prepare(samples)
    alpha, xm = _pareto_mle(x)
    ks = ks_statistic(x, lambda v: 1.0 - (xm / v) ** alpha)
    return ParetoFit(alpha, xm, x.size, ks)


def _fit_family(family: str, x: np.ndarray) -> FamilyFit:
    if family == "pareto":
        alpha, xm = _pareto_mle(x)
        return FamilyFit(family, {"alpha": alpha, "xm": xm}, ks_statistic(x, lambda v: 1.0 - (xm / v) ** alpha))
    if family == "exponential":
        loc = float(x[0])
        scale = float(x.mean() - loc)
        if not scale > 0.0:
            raise DivergentFitError("zero spread")
        dist = stats.expon(loc=loc, scale=scale)
        return FamilyFit(family, {"loc": loc, "scale": scale}, ks_statistic(x, dist.cdf))
    if family == "lognormal":
        logs = np.log(x)
        mu, sigma = float(logs.mean()), float(logs.std())
        if not sigma > 0.0:
            raise DivergentFitError("zero spread")
        dist = stats.lognorm(s=sigma, scale=math.exp(mu))
        return FamilyFit(family, {"mu": mu, "sigma": sigma}, ks_statistic(x, dist.cdf))
    if family == "normal":
        mu, sigma = float(x.mean()), float(x.std())
        if not sigma > 0.0:
            raise DivergentFitError("zero spread")
        dist = stats.norm(loc=mu, scale=sigma)
        return FamilyFit(family, {"mu": mu, "sigma": sigma}, ks_statistic(x, dist.cdf))
    raise ContractError(f"unknown family {family!r}")


def fit_best_distribution(samples, families=FAMILIES) -> FitReport:
    """MLE-fit every family and rank by KS distance; failed fits rank last."""
    x = _prepare(samples)
    fits = []
    for family in families:
        try:
            fits.append(_fit_family(family, x))
        except (DivergentFitError, FloatingPointError) as exc:
            fits.append(FamilyFit(family, {}, math.inf, error=str(exc)))
    fits.sort(key=lambda f: (f.error is not None, f.ks_statistic))
    return FitReport(fits, x.size, low_confidence=x.size < LOW_CONFIDENCE_N)
