"""
Synthetic experiments: a 1-D three-mode toy stream and two Bayesian linear
regression families whose posteriors are handed over as sample batches.

Every experiment draws from its own named random stream, so experiment ``i``
is identical no matter how many others are generated or in which order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .seeding import named_rng

TOY_WEIGHTS = (0.3, 0.5, 0.2)
TOY_MEANS = (-2.0, 0.0, 2.5)
TOY_SPREADS = (0.4, 0.3, 0.3)
CASES = ("toy", "case1", "case2")


@dataclass(eq=False)
class SampleBatch:
    """Posterior draws of one experiment, one draw per row."""

    id: str
    samples: np.ndarray
    label: str | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"batch {self.id!r} needs an (n >= 1, p >= 1) sample matrix, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"batch {self.id!r} contains non-finite samples")
        self.samples = s
        self.id = str(self.id)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


@dataclass
class SimScenario:
    case: str = "case1"
    p: int = 50
    n_experiments: int = 100
    n_classes: int = 10
    eta: float = 0.0
    obs_range: tuple[int, int] = (10, 15)
    mcmc_draws: int = 500
    seed: int = 0
    coef_range: tuple[float, float] = (-3.0, 3.0)
    noise_var: float = 1.0
    burn_in: int = 500
    lasso_rule: str = "agree"
    # toy only
    n_per_mode: int = 300
    proportional: bool = False
    toy_variance: bool = True

    @classmethod
    def for_case(cls, case: str, **overrides) -> "SimScenario":
        if case == "case1":
            base = cls(case="case1")
        elif case == "case2":
            base = cls(case="case2", p=100, n_experiments=164, n_classes=20, obs_range=(20, 30),
                       coef_range=(-2.0, 2.0))
        elif case == "toy":
            base = cls(case="toy", p=1, n_experiments=3, n_classes=3)
        else:
            raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
        return replace(base, **overrides)

    def validate(self) -> None:
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.case == "toy":
            if self.n_per_mode < 1:
                raise ValueError("n_per_mode must be >= 1")
            return
        if self.p < 1 or self.mcmc_draws < 1:
            raise ValueError("p and mcmc_draws must be >= 1")
        if not 1 <= self.n_classes <= self.n_experiments:
            raise ValueError("need 1 <= n_classes <= n_experiments")
        lo, hi = self.obs_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad obs_range {self.obs_range}")
        if self.lasso_rule not in ("agree", "verbatim"):
            raise ValueError(f"unknown lasso_rule {self.lasso_rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def toy_batches(n_per_mode: int = 300, seed: int = 0, proportional: bool = False,
                variance: bool = True) -> list[SampleBatch]:
    """One batch per mode of 0.3 N(-2, .4) + 0.5 N(0, .3) + 0.2 N(2.5, .3).

    With ``proportional`` the batch sizes are ``round(3 * n_per_mode * w)``
    for the mode weights ``w``, so the pooled stream follows the mixture.
    ``variance`` reads the second parameter as a variance (else a standard
    deviation).
    """
    if n_per_mode < 1:
        raise ValueError("n_per_mode must be >= 1")
    out = []
    for i, (w, m, s) in enumerate(zip(TOY_WEIGHTS, TOY_MEANS, TOY_SPREADS)):
        n = max(1, int(round(3 * n_per_mode * w))) if proportional else n_per_mode
        sd = math.sqrt(s) if variance else s
        rng = named_rng(seed, "simulation", i)
        out.append(SampleBatch(f"toy_{i + 1}", rng.normal(m, sd, size=(n, 1)), f"mode_{i + 1}"))
    return out


def class_labels(n_experiments: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced random class assignment in which every class is used."""
    return rng.permutation(np.arange(n_experiments) % n_classes)


def _class_setup(scenario: SimScenario, seed: int):
    rng = named_rng(seed, "simulation-classes")
    lo, hi = scenario.coef_range
    betas = rng.uniform(lo, hi, size=(scenario.n_classes, scenario.p))
    labels = class_labels(scenario.n_experiments, scenario.n_classes, rng)
    return rng, betas, labels


def conjugate_posterior(X: np.ndarray, y: np.ndarray, prior_mean: np.ndarray,
                        noise_var: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and lower Cholesky factor of the posterior *precision*.

    Model ``y ~ N(X beta, noise_var I)``, prior ``beta ~ N(prior_mean, I)``.
    """
    A = X.T @ X / noise_var + np.eye(X.shape[1])
    R = np.linalg.cholesky(A)
    rhs = X.T @ y / noise_var + prior_mean
    mean = solve_triangular(R.T, solve_triangular(R, rhs, lower=True), lower=False)
    return mean, R


def gen_case1(scenario: SimScenario, seed: int | None = None,
              data_noise_var: float | None = None) -> tuple[list[SampleBatch], list[str]]:
    """Conjugate regression experiments with prior mean ``eta * beta0``.

    Draws are exact posterior samples.  ``data_noise_var`` overrides the
    noise used to generate ``y`` (the model always assumes variance 1).
    """
    scenario.validate()
    seed = scenario.seed if seed is None else seed
    _, betas, labels = _class_setup(scenario, seed)
    noise = scenario.noise_var if data_noise_var is None else data_noise_var
    lo, hi = scenario.obs_range
    batches, out_labels = [], []
    for i in range(scenario.n_experiments):
        rng = named_rng(seed, "simulation", i)
        beta0 = betas[labels[i]]
        n_obs = int(rng.integers(lo, hi + 1))
        X = rng.standard_normal((n_obs, scenario.p))
        y = X @ beta0 + math.sqrt(noise) * rng.standard_normal(n_obs)
        mean, R = conjugate_posterior(X, y, scenario.eta * beta0)
        z = rng.standard_normal((scenario.p, scenario.mcmc_draws))
        draws = mean[:, None] + solve_triangular(R.T, z, lower=False)
        label = f"class_{labels[i]:02d}"
        batches.append(SampleBatch(f"exp_{i:03d}", draws.T, label))
        out_labels.append(label)
    return batches, out_labels


def lasso_penalties(sparse: np.ndarray, eta: float, rng: np.random.Generator,
                    rule: str = "agree") -> np.ndarray:
    """Per-coordinate Laplace rates (1 or 10) given the true sparsity mask.

    ``rule="agree"``: each coordinate gets the value that matches its true
    status (10 where sparse, 1 where active) with probability ``eta`` and the
    other value otherwise.  ``rule="verbatim"``: sparse coordinates get 1
    w.p. ``eta`` and active coordinates get 10 w.p. ``eta``.
    """
    sparse = np.asarray(sparse, dtype=bool)
    hit = rng.random(sparse.size) < eta
    matching = np.where(sparse, 10.0, 1.0)
    other = np.where(sparse, 1.0, 10.0)
    if rule == "agree":
        return np.where(hit, matching, other)
    if rule == "verbatim":
        return np.where(hit, other, matching)
    raise ValueError(f"unknown rule {rule!r}")


def bayesian_lasso_gibbs(X: np.ndarray, y: np.ndarray, lam: np.ndarray, n_draws: int,
                         rng: np.random.Generator, burn_in: int = 500) -> np.ndarray:
    """Gibbs sampler for the Bayesian lasso with per-coordinate rates.

    Hierarchy: ``beta_j | tau_j^2, sigma^2 ~ N(0, sigma^2 tau_j^2)``,
    ``tau_j^2 ~ Exp(lam_j^2 / 2)``, ``p(sigma^2) ∝ 1/sigma^2``.  Returns an
    ``(n_draws, p)`` array of beta draws after ``burn_in`` sweeps.
    """
    n, p = X.shape
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (p,))
    XtX = X.T @ X
    Xty = X.T @ y
    inv_tau2 = np.ones(p)
    sigma2 = 1.0
    beta = np.zeros(p)
    out = np.empty((n_draws, p))
    shape = 0.5 * (n + p)
    for it in range(burn_in + n_draws):
        A = XtX + np.diag(inv_tau2)
        R = np.linalg.cholesky(A)
        m = solve_triangular(R.T, solve_triangular(R, Xty, lower=True), lower=False)
        beta = m + math.sqrt(sigma2) * solve_triangular(R.T, rng.standard_normal(p), lower=False)
        resid = y - X @ beta
        rate = 0.5 * (resid @ resid + beta @ (inv_tau2 * beta))
        sigma2 = rate / rng.gamma(shape)
        absb = np.maximum(np.abs(beta), 1e-12)
        inv_tau2 = rng.wald(np.sqrt(lam**2 * sigma2) / absb, lam**2)
        if not (np.all(np.isfinite(beta)) and np.isfinite(sigma2) and np.all(np.isfinite(inv_tau2))):
            raise FloatingPointError(f"Gibbs sampler diverged at iteration {it}")
        if it >= burn_in:
            out[it - burn_in] = beta
    return out


def gen_case2(scenario: SimScenario, seed: int | None = None) -> tuple[list[SampleBatch], list[str]]:
    """Sparse regression experiments under a Bayesian lasso prior.

    Each class has a true coefficient vector with a random number (half to
    nine tenths of ``p``) of exact zeros; ``eta`` sets how often the
    per-coordinate penalty agrees with that pattern.
    """
    scenario.validate()
    seed = scenario.seed if seed is None else seed
    rng, betas, labels = _class_setup(scenario, seed)
    p = scenario.p
    sparse_masks = np.zeros((scenario.n_classes, p), dtype=bool)
    for c in range(scenario.n_classes):
        n_zero = int(rng.integers(p // 2, max(p // 2, int(0.9 * p)) + 1))
        sparse_masks[c, rng.choice(p, size=n_zero, replace=False)] = True
    betas[sparse_masks] = 0.0
    lo, hi = scenario.obs_range
    batches, out_labels = [], []
    for i in range(scenario.n_experiments):
        erng = named_rng(seed, "simulation", i)
        c = labels[i]
        n_obs = int(erng.integers(lo, hi + 1))
        X = erng.standard_normal((n_obs, p))
        y = X @ betas[c] + math.sqrt(scenario.noise_var) * erng.standard_normal(n_obs)
        lam = lasso_penalties(sparse_masks[c], scenario.eta, erng, scenario.lasso_rule)
        draws = bayesian_lasso_gibbs(X, y, lam, scenario.mcmc_draws, erng, scenario.burn_in)
        label = f"class_{c:02d}"
        batches.append(SampleBatch(f"exp_{i:03d}", draws, label))
        out_labels.append(label)
    return batches, out_labels


def simulate(scenario: SimScenario) -> list[SampleBatch]:
    scenario.validate()
    if scenario.case == "toy":
        return toy_batches(scenario.n_per_mode, scenario.seed, scenario.proportional,
                           scenario.toy_variance)
    if scenario.case == "case1":
        return gen_case1(scenario)[0]
    return gen_case2(scenario)[0]
