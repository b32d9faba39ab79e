import math

import numpy as np
import pytest
from scipy.special import gammaln

from seqdpm.mathcore import NiwPrior


def random_spd(rng, p, scale=1.0):
    a = rng.normal(size=(p, p))
    return scale * (a @ a.T / p + 0.5 * np.eye(p))


def random_prior(rng, p):
    nu = p + 0.5 + 3 * rng.random()
    return NiwPrior(rng.normal(size=p), 0.1 + 2 * rng.random(), random_spd(rng, p), nu)


def nig_log_marginal(x, prior: NiwPrior) -> float:
    """log p(x_1..x_n) for 1-D data under mu|s2 ~ N(lam, s2/kappa), s2 ~ IG(nu, omega).

    Textbook normal-inverse-gamma evidence; written out separately from the
    package so it can act as an oracle.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    lam, kappa, a0, b0 = float(prior.lam[0]), prior.kappa, prior.nu, float(prior.omega[0, 0])
    if n == 0:
        return 0.0
    xbar = x.mean()
    kn = kappa + n
    an = a0 + n / 2
    bn = b0 + 0.5 * np.sum((x - xbar) ** 2) + kappa * n * (xbar - lam) ** 2 / (2 * kn)
    return float(gammaln(an) - gammaln(a0) + a0 * math.log(b0) - an * math.log(bn)
                 + 0.5 * math.log(kappa / kn) - 0.5 * n * math.log(2 * math.pi))


def toy_true_density(grid, variance=True):
    from seqdpm.samplers import TOY_MEANS, TOY_SPREADS, TOY_WEIGHTS
    from scipy.stats import norm
    out = np.zeros_like(grid)
    for w, m, s in zip(TOY_WEIGHTS, TOY_MEANS, TOY_SPREADS):
        out += w * norm.pdf(grid, m, math.sqrt(s) if variance else s)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
