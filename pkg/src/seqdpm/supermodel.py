"""
The particle-learning ensemble over experiment posterior samples.

Each incoming sample is handled in two steps: every particle is weighted by
its marginal predictive of the sample and N particles are resampled in
proportion, then the sample is allocated within each survivor.  Particles
are immutable, so a particle drawn several times is stored once; in MAP
mode the propagation of such a particle is also computed once.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .mathcore import (
    DEFAULT_RECOMPUTE_PERIOD,
    NiwPrior,
    cholesky_lower,
    logsumexp,
    mvn_logpdf_chol,
    plugin_params,
    predictive_existing,
)
from .particle import MODES, Particle, _allocation, _propagate_scored
from .samplers import SampleBatch
from .seeding import named_rng

FORMAT_VERSION = 1
RESAMPLERS = ("multinomial", "systematic")
WEIGHTINGS = ("normalized", "raw")
KERNELS = ("gaussian", "student")


@dataclass
class DpmConfig:
    n_particles: int = 100
    alpha: float = 2.0
    prior: NiwPrior | None = None  # None: NiwPrior.default(dim)
    mode: str = "map"
    resampler: str = "multinomial"
    seed: int = 0
    recompute_period: int = DEFAULT_RECOMPUTE_PERIOD

    def validate(self) -> None:
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise ValueError(f"n_particles must be a positive integer, got {self.n_particles}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.resampler not in RESAMPLERS:
            raise ValueError(f"resampler must be one of {RESAMPLERS}, got {self.resampler!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.recompute_period < 1:
            raise ValueError("recompute_period must be >= 1")


@dataclass
class ExperimentRecord:
    id: str
    label: str | None
    n_samples: int


@dataclass
class RetrievalRanking:
    query_id: str
    entries: list[tuple[str, float]]
    flagged: list[str] = field(default_factory=list)  # candidates scored -inf

    @property
    def ids(self) -> list[str]:
        return [e for e, _ in self.entries]

    def to_csv(self, top_k: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "experiment_id", "log_rho"])
        rows = self.entries if top_k <= 0 else self.entries[:top_k]
        for r, (eid, s) in enumerate(rows, 1):
            w.writerow([r, eid, repr(float(s))])
        return buf.getvalue()


def resample_indices(log_weights: np.ndarray, n: int, rng: np.random.Generator,
                     method: str = "multinomial") -> np.ndarray:
    """Draw ``n`` ancestor indices in proportion to ``exp(log_weights)``.

    Returned indices are sorted ascending.
    """
    lw = np.asarray(log_weights, dtype=float)
    m = lw.max()
    if not np.isfinite(m):
        raise ValueError("all resampling weights are -inf or non-finite")
    w = np.exp(lw - m)
    w /= w.sum()
    if method == "multinomial":
        counts = rng.multinomial(n, w)
        return np.repeat(np.arange(w.size), counts)
    if method == "systematic":
        positions = (rng.random() + np.arange(n)) / n
        cum = np.cumsum(w)
        cum[-1] = 1.0
        return np.minimum(np.searchsorted(cum, positions, side="right"), w.size - 1)
    raise ValueError(f"unknown resampler {method!r}")


class Supermodel:
    """N-particle Dirichlet-process mixture fitted by particle learning."""

    def __init__(self, dim: int, config: DpmConfig | None = None):
        config = DpmConfig() if config is None else config
        config.validate()
        if int(dim) != dim or dim < 1:
            raise ValueError(f"dim must be a positive integer, got {dim}")
        self.dim = int(dim)
        self.prior = config.prior if config.prior is not None else NiwPrior.default(self.dim)
        if self.prior.dim != self.dim:
            raise ValueError(f"prior dimension {self.prior.dim} != model dimension {self.dim}")
        self.config = config
        self.format_version = FORMAT_VERSION
        empty = Particle()
        self.particles: list[Particle] = [empty] * config.n_particles
        self.registry: list[ExperimentRecord] = []
        self.resample_rng = named_rng(config.seed, "resampling")
        self.allocation_rng = named_rng(config.seed, "allocation")

    # -- bookkeeping ---------------------------------------------------------

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    @property
    def total(self) -> int:
        return self.particles[0].total

    @property
    def experiment_ids(self) -> list[str]:
        return [r.id for r in self.registry]

    def record(self, experiment_id: str) -> ExperimentRecord:
        for r in self.registry:
            if r.id == experiment_id:
                return r
        raise KeyError(experiment_id)

    def n_distinct_particles(self) -> int:
        return len({id(p) for p in self.particles})

    def component_counts(self) -> np.ndarray:
        return np.array([p.k for p in self.particles])

    def validate(self) -> None:
        sizes = {r.id: r.n_samples for r in self.registry}
        if len(sizes) != len(self.registry):
            raise AssertionError("duplicate experiment ids in registry")
        totals = {p.total for p in self.particles}
        if len(totals) != 1:
            raise AssertionError(f"particles disagree on total: {sorted(totals)}")
        if totals.pop() != sum(sizes.values()):
            raise AssertionError("particle total differs from ingested sample count")
        for p in {id(p): p for p in self.particles}.values():
            p.validate(sizes)
            for c in p.components:
                if c.dim != self.dim:
                    raise AssertionError("component dimension mismatch")

    def _unique(self):
        """(distinct particles, multiplicity) in first-seen order."""
        seen: dict[int, int] = {}
        uniq: list[Particle] = []
        mult: list[int] = []
        for p in self.particles:
            j = seen.get(id(p))
            if j is None:
                seen[id(p)] = len(uniq)
                uniq.append(p)
                mult.append(1)
            else:
                mult[j] += 1
        return uniq, np.array(mult, dtype=float)

    # -- ingestion -----------------------------------------------------------

    def ingest_batch(self, batch: SampleBatch) -> "Supermodel":
        """Stream every sample of ``batch`` through the ensemble.

        The model is left untouched if any error is raised.
        """
        if batch.dim != self.dim:
            raise ValueError(f"batch {batch.id!r} has dimension {batch.dim}, model has {self.dim}")
        if any(r.id == batch.id for r in self.registry):
            raise ValueError(f"experiment {batch.id!r} already ingested")
        if batch.n == 0:
            raise ValueError(f"batch {batch.id!r} is empty")

        cfg = self.config
        prior, alpha, period = self.prior, cfg.alpha, cfg.recompute_period
        n = cfg.n_particles
        rs_state = self.resample_rng.bit_generator.state
        al_state = self.allocation_rng.bit_generator.state
        particles = self.particles
        try:
            log_alpha_total = math.log(alpha + particles[0].total)
            for j, theta in enumerate(batch.samples):
                memo: dict = {}
                scored: dict[int, tuple] = {}
                logw = np.empty(n)
                for t, part in enumerate(particles):
                    sc = scored.get(id(part))
                    if sc is None:
                        idx, scores = _allocation(part, theta, prior, alpha, memo)
                        sc = scored[id(part)] = (idx, scores, logsumexp(scores) - log_alpha_total)
                    logw[t] = sc[2]
                if not np.isfinite(logw.max()):
                    raise FloatingPointError(
                        f"sample {j} of {batch.id!r} has -inf predictive under every particle")
                ancestors = resample_indices(logw, n, self.resample_rng, cfg.resampler)
                new: list[Particle] = []
                done: dict[int, Particle] = {}
                for a in ancestors:
                    part = particles[a]
                    idx, scores, _ = scored[id(part)]
                    if cfg.mode == "map":
                        child = done.get(id(part))
                        if child is None:
                            child = done[id(part)] = _propagate_scored(
                                part, theta, batch.id, idx, scores, prior, "map", None, period, memo)
                    else:
                        child = _propagate_scored(part, theta, batch.id, idx, scores, prior,
                                                  "sample", self.allocation_rng, period, memo)
                    new.append(child)
                particles = new
                log_alpha_total = math.log(alpha + particles[0].total)
        except BaseException:
            self.resample_rng.bit_generator.state = rs_state
            self.allocation_rng.bit_generator.state = al_state
            raise
        self.particles = particles
        self.registry.append(ExperimentRecord(batch.id, batch.label, batch.n))
        return self

    # -- retrieval -----------------------------------------------------------

    def _component_logpdf(self, comp, points, kernel, memo):
        val = memo.get(id(comp))
        if val is None:
            if kernel == "gaussian":
                mu, sigma = plugin_params(comp, self.prior)
                val = mvn_logpdf_chol(points, mu, cholesky_lower(sigma, "plug-in covariance"))
            else:
                val = predictive_existing(points, comp, self.prior)
            memo[id(comp)] = val
        return val

    def _check_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1 and self.dim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ValueError(f"points must have shape (n, {self.dim}), got {np.shape(points)}")
        return pts

    def particle_log_rho(self, query, candidates=None, weighting: str = "normalized",
                         kernel: str = "gaussian") -> tuple[list[str], np.ndarray]:
        """Per-particle log relevance of each candidate.

        Returns ``(candidate ids in registry order, array of shape (N, L))``.
        Row ``t`` holds ``sum_j log sum_k w_k f(q_j | component k of particle t)``
        with ``w_k`` the candidate's assignment counts, divided by its sample
        count when ``weighting="normalized"``.
        """
        if weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        pts = self._check_points(query.samples if isinstance(query, SampleBatch) else query)
        known = {r.id: r for r in self.registry}
        if candidates is None:
            cand = [r.id for r in self.registry]
        else:
            cand_set = set(candidates)
            missing = cand_set - known.keys()
            if missing:
                raise KeyError(f"unknown candidate experiments: {sorted(missing)}")
            cand = [r.id for r in self.registry if r.id in cand_set]

        uniq, _ = self._unique()
        memo: dict = {}
        per_unique = np.empty((len(uniq), len(cand)))
        for u, part in enumerate(uniq):
            occupied = [c for c, comp in enumerate(part.components) if comp.count > 0]
            if occupied:
                logf = np.column_stack([
                    np.atleast_1d(self._component_logpdf(part.components[c], pts, kernel, memo))
                    for c in occupied])
            for l, eid in enumerate(cand):
                xi = part.assignment_counts(eid)[occupied] if occupied else np.zeros(0)
                nz = np.flatnonzero(xi)
                if nz.size == 0:
                    per_unique[u, l] = -np.inf
                    continue
                w = xi[nz].astype(float)
                if weighting == "normalized":
                    w = w / known[eid].n_samples
                per_unique[u, l] = logsumexp(logf[:, nz] + np.log(w), axis=1).sum()
        index = {id(p): u for u, p in enumerate(uniq)}
        rows = np.array([index[id(p)] for p in self.particles])
        return cand, per_unique[rows]

    def score_query(self, query, candidates=None, weighting: str = "normalized",
                    kernel: str = "gaussian", query_id: str | None = None) -> RetrievalRanking:
        """Rank stored experiments by relevance to ``query``.

        Per-particle log scores are combined by log-mean-exp over the
        ensemble.  Sorted descending; ties keep registry order and ``-inf``
        candidates come last and are flagged.
        """
        if query_id is None:
            query_id = query.id if isinstance(query, SampleBatch) else "query"
        cand, per = self.particle_log_rho(query, candidates, weighting, kernel)
        if per.shape[1] == 0:
            return RetrievalRanking(query_id, [], [])
        scores = logsumexp(per, axis=0) - math.log(per.shape[0])
        order = sorted(range(len(cand)), key=lambda i: (-scores[i], i))
        entries = [(cand[i], float(scores[i])) for i in order]
        flagged = [e for e, s in entries if s == -np.inf]
        return RetrievalRanking(query_id, entries, flagged)

    def density_at(self, points) -> np.ndarray:
        """Ensemble-averaged plug-in mixture density at each point."""
        if self.total == 0:
            raise ValueError("density of an empty model is undefined")
        pts = self._check_points(points)
        memo: dict = {}
        per: dict[int, np.ndarray] = {}
        dens = np.zeros(pts.shape[0])
        # accumulate one term per particle, in order, so that the result does
        # not depend on which particles happen to share storage
        for part in self.particles:
            val = per.get(id(part))
            if val is None:
                comps = [c for c in part.components if c.count > 0]
                logf = np.column_stack([np.atleast_1d(self._component_logpdf(c, pts, "gaussian", memo))
                                        for c in comps])
                logw = np.log([c.count / part.total for c in comps])
                val = per[id(part)] = np.exp(logsumexp(logf + logw, axis=1))
            dens += val
        return dens / self.n_particles

    def __repr__(self):
        return (f"Supermodel(dim={self.dim}, N={self.n_particles}, experiments={len(self.registry)}, "
                f"total={self.total})")


def new_supermodel(dim: int, config: DpmConfig | None = None) -> Supermodel:
    return Supermodel(dim, config)
