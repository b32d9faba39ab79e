"""
A single Chinese-restaurant partition hypothesis and its propagation.

Particles are immutable values: ``propagate`` builds a new particle that
shares every untouched ``ComponentStats`` (and every untouched assignment
vector) with its parent, so cloning during resampling costs a list copy.
"""
from __future__ import annotations

import math

import numpy as np

from .mathcore import (
    DEFAULT_RECOMPUTE_PERIOD,
    ComponentStats,
    NiwPrior,
    logsumexp,
    predictive_existing,
    predictive_new,
    stats_add,
)

MODES = ("map", "sample")


class Particle:
    """Components, absorbed-sample total and per-experiment assignment counts.

    ``xi[e][c]`` counts the samples of experiment ``e`` allocated to
    component ``c``; vectors may be shorter than ``components`` (missing
    trailing entries are zero).
    """

    __slots__ = ("components", "total", "xi")

    def __init__(self, components=(), total: int = 0, xi: dict | None = None):
        self.components: tuple[ComponentStats, ...] = tuple(components)
        self.total = int(total)
        self.xi: dict[str, np.ndarray] = {} if xi is None else dict(xi)

    @property
    def k(self) -> int:
        return sum(1 for c in self.components if c.count > 0)

    @property
    def counts(self) -> np.ndarray:
        return np.array([c.count for c in self.components], dtype=np.int64)

    def assignment_counts(self, experiment: str) -> np.ndarray:
        """ξ vector of ``experiment`` padded to the component count."""
        out = np.zeros(len(self.components), dtype=np.int64)
        v = self.xi.get(experiment)
        if v is not None:
            out[:v.size] = v
        return out

    def validate(self, experiment_sizes: dict[str, int] | None = None) -> None:
        counts = self.counts
        if counts.sum() != self.total:
            raise AssertionError(f"component counts sum to {counts.sum()}, total is {self.total}")
        xi_sum = np.zeros(len(self.components), dtype=np.int64)
        for e, v in self.xi.items():
            if v.size > len(self.components) or np.any(v < 0):
                raise AssertionError(f"malformed assignment vector for {e!r}")
            xi_sum[:v.size] += v
            if experiment_sizes is not None and v.sum() != experiment_sizes.get(e, -1):
                raise AssertionError(f"xi for {e!r} sums to {v.sum()}")
        if not np.array_equal(xi_sum, counts):
            raise AssertionError("assignment counts disagree with component counts")
        for c in self.components:
            if c.count == 0 and (np.any(c.scatter != 0)):
                raise AssertionError("empty component with nonzero scatter")

    def __repr__(self):
        return f"Particle(k={self.k}, total={self.total}, experiments={len(self.xi)})"


def _existing_score(comp: ComponentStats, theta, prior, memo):
    if memo is None:
        return predictive_existing(theta, comp, prior)
    key = id(comp)
    val = memo.get(key)
    if val is None:
        val = memo[key] = predictive_existing(theta, comp, prior)
    return val


def _allocation(particle: Particle, theta, prior: NiwPrior, alpha: float, memo=None):
    idx = [c for c, comp in enumerate(particle.components) if comp.count > 0]
    scores = np.empty(len(idx) + 1)
    for j, c in enumerate(idx):
        comp = particle.components[c]
        scores[j] = math.log(comp.count) + _existing_score(comp, theta, prior, memo)
    if memo is None or "new" not in memo:
        new = predictive_new(theta, prior)
        if memo is not None:
            memo["new"] = new
    else:
        new = memo["new"]
    scores[-1] = math.log(alpha) + new
    return idx, scores


def _check_theta(theta, prior: NiwPrior) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (prior.dim,):
        raise ValueError(f"dimension mismatch: got {theta.shape}, expected ({prior.dim},)")
    return theta


def allocation_scores(particle: Particle, theta, prior: NiwPrior, alpha: float,
                      memo: dict | None = None) -> np.ndarray:
    """Log unnormalized allocation probabilities.

    One entry per occupied component (``log n_c`` plus its predictive), then
    the new-cluster entry ``log alpha`` plus the prior predictive.  ``memo``
    caches predictive values for one fixed ``theta`` across particles that
    share components.
    """
    theta = _check_theta(theta, prior)
    return _allocation(particle, theta, prior, alpha, memo)[1]


def particle_predictive(particle: Particle, theta, prior: NiwPrior, alpha: float,
                        memo: dict | None = None) -> float:
    """log p(theta | particle) under the CRP mixture."""
    theta = _check_theta(theta, prior)
    _, scores = _allocation(particle, theta, prior, alpha, memo)
    return float(logsumexp(scores) - math.log(alpha + particle.total))


def propagate(particle: Particle, theta, experiment: str, prior: NiwPrior, alpha: float,
              mode: str = "map", rng: np.random.Generator | None = None,
              memo: dict | None = None,
              recompute_period: int = DEFAULT_RECOMPUTE_PERIOD) -> Particle:
    """Allocate ``theta`` and return the updated particle.

    ``mode="map"`` takes the highest-scoring allocation, ties going to the
    lowest component index (a new cluster loses every tie).  ``mode="sample"``
    draws the allocation from the normalized scores using ``rng``.
    """
    theta = _check_theta(theta, prior)
    idx, scores = _allocation(particle, theta, prior, alpha, memo)
    return _propagate_scored(particle, theta, experiment, idx, scores, prior, mode, rng,
                             recompute_period, memo)


def choose_allocation(scores: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> int:
    if mode == "map":
        return int(np.argmax(scores))
    if mode == "sample":
        if rng is None:
            raise ValueError("mode='sample' needs an rng")
        cum = np.cumsum(np.exp(scores - scores.max()))
        return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), cum.size - 1)
    raise ValueError(f"unknown allocation mode {mode!r}")


def _added(comp: ComponentStats | None, theta, prior, recompute_period, memo):
    # the same component grown by the same theta is shared between particles
    key = ("add", None if comp is None else id(comp))
    out = None if memo is None else memo.get(key)
    if out is None:
        base = ComponentStats.empty(prior.dim) if comp is None else comp
        out = stats_add(base, theta, prior, recompute_period)
        if memo is not None:
            memo[key] = out
    return out


def _propagate_scored(particle, theta, experiment, idx, scores, prior, mode, rng,
                      recompute_period, memo=None):
    choice = choose_allocation(scores, mode, rng)
    comps = list(particle.components)
    if choice == len(idx):
        c = len(comps)
        comps.append(_added(None, theta, prior, recompute_period, memo))
    else:
        c = idx[choice]
        comps[c] = _added(comps[c], theta, prior, recompute_period, memo)

    xi = dict(particle.xi)
    old = xi.get(experiment)
    vec = np.zeros(max(c + 1, 0 if old is None else old.size), dtype=np.int64)
    if old is not None:
        vec[:old.size] = old
    vec[c] += 1
    xi[experiment] = vec
    return Particle(comps, particle.total + 1, xi)
