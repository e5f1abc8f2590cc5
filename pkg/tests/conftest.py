"""Shared builders for small synthetic problems.

Most tests want a tiny, well-conditioned instance of the whole model: a
random forward map with moderate predictors, counts drawn from the model,
and a full-rank Gaussian prior.  The helpers here keep those instances
small enough that dense oracles (eigendecompositions, quadrature, grid
searches) stay cheap.
"""

import numpy as np
import pytest

from pvga import ForwardOperator, GaussianState, PoissonData, PriorSpec


def random_operator(rng, n, m, scale=0.6):
    A = scale * rng.standard_normal((n, m)) / np.sqrt(m)
    return ForwardOperator.from_dense(A)


def random_prior(rng, m, alpha=None):
    """Full-rank prior with a random well-conditioned precision factor."""
    L = np.tril(0.3 * rng.standard_normal((m, m)), -1) + np.diag(rng.uniform(0.8, 1.6, m))
    mu0 = 0.3 * rng.standard_normal(m)
    return PriorSpec(mu0, L, alpha if alpha is not None else float(rng.uniform(0.5, 2.0)))


def random_spd(rng, m, scale=1.0):
    Q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    lam = rng.uniform(0.3, 2.0, m) * scale
    return (Q * lam) @ Q.T


def random_state(rng, m, cov_scale=1.0):
    return GaussianState(0.5 * rng.standard_normal(m), random_spd(rng, m, cov_scale))


def random_problem(rng, m=None, n=None, alpha=None):
    """Returns (A, data, prior) with counts sampled from the model itself."""
    m = m if m is not None else int(rng.integers(2, 7))
    n = n if n is not None else int(rng.integers(2, 9))
    A = random_operator(rng, n, m)
    prior = random_prior(rng, m, alpha=alpha)
    x = prior.mu0 + 0.5 * rng.standard_normal(m)
    y = rng.poisson(np.exp(np.clip(A.matvec(x), -20, 3.5)))
    return A, PoissonData(y), prior


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
