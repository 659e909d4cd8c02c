"""Randomised feasible NORTA cases shared by the unit and acceptance suites."""
import numpy as np

from facerecon.norta import Marginal, pair_covariance, transformed_moments

FAMILIES = [lambda r: Marginal("normal", loc=r.normal(), scale=r.uniform(0.5, 2)),
            lambda r: Marginal("uniform", low=-r.uniform(0, 1), high=r.uniform(0.5, 2)),
            lambda r: Marginal("exponential", scale=r.uniform(0.5, 2)),
            lambda r: Marginal("empirical", samples=r.gamma(2.0, size=400))]


def norta_case(case):
    """(marginals, sigma_b, base correlation, sample seed); feasible by construction."""
    r = np.random.default_rng(1000 + case)
    k = int(r.integers(2, 6))
    marginals = [FAMILIES[int(r.integers(0, 4))](r) for _ in range(k)]
    g = r.normal(size=(k, k + 1))
    lam = g @ g.T
    d = np.sqrt(np.diag(lam))
    lam = lam / d[:, None] / d[None, :]
    sigma_b = np.diag([transformed_moments(m)[1] for m in marginals])
    for i in range(k):
        for j in range(i + 1, k):
            sigma_b[i, j] = sigma_b[j, i] = pair_covariance(lam[i, j], marginals[i], marginals[j])
    return marginals, sigma_b, lam, 2000 + case


def covariance_within_se(b, sigma_b, n_se=3.0):
    n = len(b)
    c = b - b.mean(axis=0)
    emp = c.T @ c / (n - 1)
    se = (c[:, :, None] * c[:, None, :]).std(axis=0) / np.sqrt(n)
    return bool(np.all(np.abs(emp - sigma_b) <= n_se * se))
