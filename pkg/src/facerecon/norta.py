"""NORTA: random vectors with prescribed marginals and covariance from uniform inputs.

Pipeline: uniform z -> standard normal Phi^-1(z) -> correlated a = M Phi^-1(z)
-> b'_i = F_i^-1(Phi(a_i)). The base correlation is matched pairwise so that
the transformed pair has the target covariance, repaired to the nearest
correlation matrix if the matched matrix is not positive semi-definite, then
factored.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .errors import (CheckpointError, InfeasibleCovarianceError, NonConvergenceError,
                     NonMonotoneCovarianceError)

EPS = 1e-12
GH_NODES = 64
DENSE_NODES, DENSE_LIMIT = 851, 8.5
FORMAT, VERSION = "facerecon-norta", 1


class Marginal:
    """A univariate law given by name + parameters, with cdf and quantile function."""

    FAMILIES = ("normal", "uniform", "exponential", "empirical")

    def __init__(self, name, **params):
        if name not in self.FAMILIES:
            raise ValueError(f"unknown marginal family {name!r}; expected one of {self.FAMILIES}")
        self.name = name
        self.params = params
        if name == "normal":
            self._dist = stats.norm(params.get("loc", 0.0), params.get("scale", 1.0))
        elif name == "uniform":
            lo, hi = params.get("low", 0.0), params.get("high", 1.0)
            if not hi > lo:
                raise ValueError("uniform marginal needs high > low")
            self._dist = stats.uniform(lo, hi - lo)
        elif name == "exponential":
            self._dist = stats.expon(scale=params.get("scale", 1.0))
        else:
            x = np.sort(np.asarray(params["samples"], dtype=np.float64))
            if len(x) < 2 or not np.all(np.isfinite(x)):
                raise ValueError("empirical marginal needs >= 2 finite samples")
            self._x = x
            self._p = (np.arange(len(x)) + 0.5) / len(x)
            self._dist = None
        if self._dist is not None and not np.all(np.isfinite(self._dist.std())):
            raise ValueError(f"{name} marginal must have a finite second moment")

    def ppf(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self._dist is not None:
            return self._dist.ppf(u)
        return np.interp(u, self._p, self._x)

    def from_normal(self, a):
        """``F^-1(Phi(a))``, using the upper tail for a > 0 so that Phi(a) never rounds to 1."""
        a = np.asarray(a, dtype=np.float64)
        if self._dist is None:
            return self.ppf(ndtr(a))
        return np.where(a > 0, self._dist.isf(ndtr(-np.abs(a))), self._dist.ppf(ndtr(-np.abs(a))))

    def cdf(self, x):
        """Right-continuous cdf consistent with ``ppf`` (empirical: linear between knots, atoms at the ends)."""
        x = np.asarray(x, dtype=np.float64)
        if self._dist is not None:
            return self._dist.cdf(x)
        inside = np.interp(x, self._x, self._p)
        return np.where(x < self._x[0], 0.0, np.where(x >= self._x[-1], 1.0, inside))

    def to_dict(self):
        d = {"name": self.name}
        d.update({k: (np.asarray(v).tolist() if k == "samples" else float(v)) for k, v in self.params.items()})
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("name"), **d)

    def __repr__(self):
        p = {k: v for k, v in self.params.items() if k != "samples"}
        return f"Marginal({self.name!r}, {p})"


def _gh():
    x, w = np.polynomial.hermite.hermgauss(GH_NODES)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def _dense():
    # composite trapezoid on normal scores: the empirical quantile has kinks that Gauss-Hermite
    # integrates poorly (percent-level variance errors at 64 nodes)
    x = np.linspace(-DENSE_LIMIT, DENSE_LIMIT, DENSE_NODES)
    w = np.exp(-0.5 * x * x)
    return x, w / w.sum()


def _rule(*marginals):
    """Normal-score nodes and weights (summing to 1) suited to ``marginals``."""
    return _dense() if any(m.name == "empirical" for m in marginals) else _gh()


def transformed_moments(marginal):
    """Mean and variance of F^-1(Phi(a)), a ~ N(0, 1), by quadrature on normal scores."""
    x, w = _rule(marginal)
    g = marginal.from_normal(x)
    m = w @ g
    return float(m), float(w @ (g - m) ** 2)


def pair_covariance(rho, mi, mj):
    """Cov(F_i^-1(Phi(a_i)), F_j^-1(Phi(a_j))) for standard normals with correlation ``rho``."""
    x, w = _rule(mi, mj)
    gi = mi.from_normal(x)
    mean_i, mean_j = w @ gi, w @ mj.from_normal(x)
    a2 = rho * x[:, None] + np.sqrt(max(0.0, 1.0 - rho * rho)) * x[None, :]
    gj = mj.from_normal(a2)
    return float(w @ (gi[:, None] * gj) @ w - mean_i * mean_j)


def _match_pair(target, mi, mj, tol=1e-12, grid=41):
    rhos = np.linspace(-1.0, 1.0, grid)
    curve = np.array([pair_covariance(r, mi, mj) for r in rhos])
    scale = max(abs(curve[0]), abs(curve[-1]), 1e-300)
    if np.any(np.diff(curve) < -1e-9 * scale):
        raise NonMonotoneCovarianceError(f"pair covariance is not monotone in rho for {mi} and {mj}")
    lo_c, hi_c = curve[0], curve[-1]
    slack = 1e-9 * scale
    if not (lo_c - slack <= target <= hi_c + slack):
        raise InfeasibleCovarianceError(
            f"target covariance {target:.6g} outside attainable range [{lo_c:.6g}, {hi_c:.6g}] "
            f"for {mi} and {mj}")
    lo, hi = -1.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pair_covariance(mid, mi, mj) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _check_sigma(sigma_b, marginals, rtol=1e-2):
    s = np.asarray(sigma_b, dtype=np.float64)
    k = len(marginals)
    if s.shape != (k, k):
        raise ValueError(f"covariance must be {k}x{k}, got {s.shape}")
    if not np.allclose(s, s.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    if np.any(np.diag(s) <= 0):
        raise ValueError("covariance diagonal must be positive")
    for i, m in enumerate(marginals):
        var = transformed_moments(m)[1]
        if abs(s[i, i] - var) > rtol * var:
            raise InfeasibleCovarianceError(
                f"diagonal entry {i} ({s[i, i]:.6g}) disagrees with the variance of {m} ({var:.6g})")
    return s


def match_base_correlation(sigma_b, marginals):
    """Base normal correlation Lambda_a reproducing ``sigma_b`` after the marginal transforms."""
    s = _check_sigma(sigma_b, marginals)
    k = len(marginals)
    lam = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            lam[i, j] = lam[j, i] = _match_pair(s[i, j], marginals[i], marginals[j])
    return lam


def is_psd(a, tol=1e-10):
    return float(np.linalg.eigvalsh(a).min()) >= -tol


def _proj_psd(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.maximum(w, 0.0)) @ v.T


def repair_correlation(lam, tol=1e-8, max_iter=1000):
    """Nearest correlation matrix in Frobenius norm (alternating projections with Dykstra's correction).

    Returns ``(sigma_a, repaired)``; a PSD input is returned unchanged with
    ``repaired=False``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or not np.allclose(lam, lam.T, atol=1e-12):
        raise ValueError("correlation input must be a symmetric square matrix")
    if not np.allclose(np.diag(lam), 1.0, atol=1e-12):
        raise ValueError("correlation input must have unit diagonal")
    if is_psd(lam):
        return lam, False
    y = lam.copy()
    ds = np.zeros_like(lam)
    change = np.inf
    for _ in range(max_iter):
        r = y - ds
        x = _proj_psd(r)
        ds = x - r
        y_new = x.copy()
        np.fill_diagonal(y_new, 1.0)
        change = np.abs(y_new - y).max()
        y = y_new
        if change < tol:
            break
    else:
        raise NonConvergenceError(f"nearest-correlation iteration did not converge in {max_iter} steps",
                                  residual=float(change))
    # clean-up: the last iterate has unit diagonal but may be PSD only to ~tol
    x = _proj_psd(y)
    d = 1.0 / np.sqrt(np.diag(x))
    out = x * d[:, None] * d[None, :]
    out = (out + out.T) / 2
    np.fill_diagonal(out, 1.0)
    return out, True


def factor(sigma_a, pivot_tol=1e-12, check_tol=1e-10):
    """Lower-triangular ``M`` with ``M @ M.T == sigma_a``; zero pivots allowed for semi-definite input."""
    s = np.asarray(sigma_a, dtype=np.float64)
    k = len(s)
    m = np.zeros_like(s)
    for j in range(k):
        d = s[j, j] - m[j, :j] @ m[j, :j]
        if d < -check_tol:
            raise NonConvergenceError(f"matrix is not positive semi-definite (pivot {j} = {d:.3g})",
                                      residual=float(-d))
        if d <= pivot_tol:
            continue
        m[j, j] = np.sqrt(d)
        m[j + 1:, j] = (s[j + 1:, j] - m[j + 1:, :j] @ m[j, :j]) / m[j, j]
    resid = float(np.abs(m @ m.T - s).max())
    if resid >= check_tol:
        raise NonConvergenceError(f"factorisation residual {resid:.3g} exceeds {check_tol:g}", residual=resid)
    return m


@dataclass
class NortaModel:
    marginals: list
    sigma_b: np.ndarray
    lambda_a: np.ndarray
    sigma_a: np.ndarray
    m: np.ndarray
    adjusted: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.marginals)

    def to_dict(self):
        return {"format": FORMAT, "version": VERSION, "marginals": [m.to_dict() for m in self.marginals],
                "sigma_b": self.sigma_b.tolist(), "lambda_a": self.lambda_a.tolist(),
                "sigma_a": self.sigma_a.tolist(), "m": self.m.tolist(), "adjusted": self.adjusted,
                "meta": self.meta}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
        return Path(path)

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise CheckpointError(f"cannot read NORTA model {path}: {e}") from e
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise CheckpointError(f"{path}: expected {FORMAT} v{VERSION}, "
                                  f"found {d.get('format')!r} v{d.get('version')!r}")
        return cls([Marginal.from_dict(m) for m in d["marginals"]], np.array(d["sigma_b"]),
                   np.array(d["lambda_a"]), np.array(d["sigma_a"]), np.array(d["m"]), d["adjusted"],
                   d.get("meta", {}))


def fit(sigma_b, marginals):
    """Match, repair if needed, and factor."""
    marginals = list(marginals)
    lam = match_base_correlation(sigma_b, marginals)
    sigma_a, adjusted = repair_correlation(lam)
    return NortaModel(marginals, np.asarray(sigma_b, dtype=np.float64), lam, sigma_a, factor(sigma_a), adjusted)


def uniform_inputs(n, k, seed):
    return np.random.default_rng(seed).random((n, k))


def sample(model, z):
    """Map uniform inputs ``z`` of shape ``(n, k)`` to vectors with the model's marginals."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    if z.shape[1] != model.k:
        raise ValueError(f"z must have {model.k} columns, got {z.shape[1]}")
    if not np.all(np.isfinite(z)) or z.min() < 0.0 or z.max() > 1.0:
        raise ValueError("uniform inputs must lie in [0, 1]")
    a = ndtri(np.clip(z, EPS, 1.0 - EPS)) @ model.m.T
    return np.stack([mg.from_normal(a[:, i]) for i, mg in enumerate(model.marginals)], axis=1)


def covariance_from_correlation(corr, marginals):
    """Target covariance with the marginals' own variances on the diagonal."""
    sd = np.sqrt([transformed_moments(m)[1] for m in marginals])
    return np.asarray(corr, dtype=np.float64) * sd[:, None] * sd[None, :]
