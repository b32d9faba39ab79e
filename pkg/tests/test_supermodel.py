import math

import numpy as np
import pytest
from scipy import integrate, stats

from seqdpm import DpmConfig, SampleBatch, Supermodel, new_supermodel, toy_batches
from seqdpm.mathcore import NiwPrior, logsumexp, plugin_params, stats_from_batch
from seqdpm.particle import Particle, allocation_scores, particle_predictive, propagate
from seqdpm.supermodel import resample_indices


def batch(eid, pts, label=None):
    return SampleBatch(eid, np.asarray(pts, dtype=float).reshape(len(pts), -1), label)


# -- construction ----------------------------------------------------------------------

def test_default_prior_rule():
    m1 = new_supermodel(1)
    assert m1.prior.nu == 3 and m1.prior.omega[0, 0] == 2.0
    m5 = new_supermodel(5)
    assert m5.prior.nu == 7
    np.testing.assert_array_equal(m5.prior.omega, 4 * np.eye(5))
    assert m1.n_particles == 100 and m1.config.alpha == 2.0 and m1.config.mode == "map"


@pytest.mark.parametrize("bad", [dict(n_particles=0), dict(alpha=0.0), dict(mode="greedy"),
                                 dict(resampler="stratified"), dict(recompute_period=0)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        new_supermodel(1, DpmConfig(**bad))


def test_prior_dimension_must_match():
    with pytest.raises(ValueError):
        new_supermodel(2, DpmConfig(prior=NiwPrior.default(3)))


# -- resampling --------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["multinomial", "systematic"])
def test_resampling_is_unbiased(method):
    rng = np.random.default_rng(5)
    w = np.array([0.1, 0.5, 0.0, 0.4])
    with np.errstate(divide="ignore"):
        lw = np.log(w) + 123.0
    counts = np.zeros(4)
    reps = 4000
    for _ in range(reps):
        counts += np.bincount(resample_indices(lw, 10, rng, method), minlength=4)
    np.testing.assert_allclose(counts / (reps * 10), w, atol=0.01)
    assert counts[2] == 0


def test_systematic_resampling_has_low_variance():
    rng = np.random.default_rng(0)
    lw = np.log([0.25, 0.25, 0.5])
    for _ in range(200):
        c = np.bincount(resample_indices(lw, 8, rng, "systematic"), minlength=3)
        assert np.all(np.abs(c - 8 * np.array([0.25, 0.25, 0.5])) <= 1)


def test_resampling_rejects_all_neg_inf():
    with pytest.raises(ValueError):
        resample_indices(np.full(3, -np.inf), 3, np.random.default_rng(0))


# -- ingestion ------------------------------------------------------------------------------

def test_first_single_sample_batch():
    m = new_supermodel(1)
    m.ingest_batch(batch("a", [0.5]))
    assert all(p.k == 1 and p.total == 1 for p in m.particles)
    assert [r.id for r in m.registry] == ["a"] and m.registry[0].n_samples == 1


def test_single_particle_equals_hand_trace():
    prior = NiwPrior.default(1)
    pts = [0.3, -1.7, 0.4, 2.9]
    m = new_supermodel(1, DpmConfig(n_particles=1))
    m.ingest_batch(batch("e", pts))

    # hand trace with explicit argmax over composed scores
    comps, counts = [], []
    for x in pts:
        s = [math.log(n) + _pred(c, x, prior) for c, n in zip(comps, counts)]
        s.append(math.log(2.0) + _new(x, prior))
        j = int(np.argmax(s))
        if j == len(comps):
            comps.append([x])
            counts.append(1)
        else:
            comps[j].append(x)
            counts[j] += 1
    part = m.particles[0]
    np.testing.assert_array_equal(part.counts, counts)
    for c, members in zip(part.components, comps):
        np.testing.assert_allclose(c.mean, [np.mean(members)], atol=1e-14)
        np.testing.assert_allclose(c.scatter, [[np.sum((np.array(members) - np.mean(members)) ** 2)]],
                                   atol=1e-13)


def _new(x, prior):
    # t_{2nu-p+1}(x | lam, B0 * omega), p = 1
    d0 = 2 * prior.nu
    b0 = 2 * (prior.kappa + 1) / (prior.kappa * d0)
    return stats.t(d0, prior.lam[0], math.sqrt(b0 * prior.omega[0, 0])).logpdf(x)


def _pred(members, x, prior):
    xs = np.array(members)
    n, k, lam = xs.size, prior.kappa, prior.lam[0]
    d = 2 * prior.nu + n
    a = (k * lam + xs.sum()) / (k + n)
    B = 2 * (k + n + 1) / ((k + n) * d)
    D = np.sum((xs - xs.mean()) ** 2) + k * n / (k + n) * (lam - xs.mean()) ** 2
    return stats.t(d, a, math.sqrt(B * (prior.omega[0, 0] + 0.5 * D))).logpdf(x)


def test_ingest_matches_manual_particle_learning():
    # re-implement one step of weigh / resample / propagate with the same streams
    cfg = DpmConfig(n_particles=7, mode="sample", seed=9)
    m = new_supermodel(1, cfg)
    pts = np.random.default_rng(1).normal(size=25)
    m.ingest_batch(batch("e", pts))

    from seqdpm.seeding import named_rng
    rs, al = named_rng(9, "resampling"), named_rng(9, "allocation")
    parts = [Particle()] * 7
    prior = m.prior
    for x in pts:
        lw = np.array([particle_predictive(p, [x], prior, 2.0) for p in parts])
        anc = resample_indices(lw, 7, rs, "multinomial")
        parts = [propagate(parts[a], [x], "e", prior, 2.0, mode="sample", rng=al) for a in anc]
    for got, ref in zip(m.particles, parts):
        np.testing.assert_array_equal(got.counts, ref.counts)
        np.testing.assert_array_equal(got.xi["e"], ref.xi["e"])


def test_particles_share_totals_and_validate():
    m = new_supermodel(2, DpmConfig(n_particles=20, mode="sample", seed=4))
    rng = np.random.default_rng(0)
    for i in range(3):
        m.ingest_batch(batch(f"e{i}", rng.normal(i * 3, 1, size=(15, 2))))
        m.validate()
    assert {p.total for p in m.particles} == {45}


def test_ingest_errors_leave_model_untouched():
    m = new_supermodel(1, DpmConfig(n_particles=5, mode="sample"))
    m.ingest_batch(batch("a", [0.0, 0.1]))
    parts, reg = list(m.particles), list(m.registry)
    rs = m.resample_rng.bit_generator.state
    with pytest.raises(ValueError):
        m.ingest_batch(batch("a", [1.0]))
    with pytest.raises(ValueError):
        m.ingest_batch(batch("b", [[1.0, 2.0]]))
    with pytest.raises(FloatingPointError):
        m.ingest_batch(batch("c", [0.2, 1e200]))
    assert m.particles == parts and m.registry == reg
    assert m.resample_rng.bit_generator.state == rs
    with pytest.raises(ValueError):
        SampleBatch("d", np.zeros((0, 1)))


def test_map_mode_reproducible():
    def build():
        m = new_supermodel(1)
        for b in toy_batches(60, seed=2):
            m.ingest_batch(b)
        return m
    a, b = build(), build()
    q = toy_batches(20, seed=8)[0]
    assert a.score_query(q).entries == b.score_query(q).entries
    np.testing.assert_array_equal(a.density_at(np.linspace(-4, 4, 9)), b.density_at(np.linspace(-4, 4, 9)))


# -- retrieval ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_mode_model():
    rng = np.random.default_rng(21)
    m = new_supermodel(1, DpmConfig(n_particles=30, mode="sample", seed=1))
    m.ingest_batch(batch("neg", rng.normal(-5, 0.3, 40)))
    m.ingest_batch(batch("pos", rng.normal(5, 0.3, 40)))
    m.ingest_batch(batch("mid", rng.normal(0, 0.3, 40)))
    return m


def test_separated_query_ranks_matching_experiment_first(two_mode_model):
    q = batch("q", np.random.default_rng(3).normal(-5, 0.3, 10))
    r = two_mode_model.score_query(q)
    assert r.ids[0] == "neg"
    assert sorted(r.ids) == ["mid", "neg", "pos"]
    assert all(np.isfinite(s) for _, s in r.entries)


def test_single_stored_experiment_is_returned():
    m = new_supermodel(1, DpmConfig(n_particles=3))
    pts = [0.1, 0.3, -0.2]
    m.ingest_batch(batch("only", pts))
    r = m.score_query(batch("q", pts))
    assert r.ids == ["only"] and np.isfinite(r.entries[0][1])


def test_score_is_additive_over_query_halves(two_mode_model):
    q = np.random.default_rng(4).normal(0.5, 3, size=(12, 1))
    _, full = two_mode_model.particle_log_rho(q)
    _, a = two_mode_model.particle_log_rho(q[:5])
    _, b = two_mode_model.particle_log_rho(q[5:])
    np.testing.assert_allclose(a + b, full, atol=1e-10)


def test_score_matches_direct_formula(two_mode_model):
    m = two_mode_model
    q = np.array([[-4.0], [0.2], [4.4]])
    cand, per = m.particle_log_rho(q)
    t = 3
    part = m.particles[t]
    for l, eid in enumerate(cand):
        xi = part.assignment_counts(eid) / m.record(eid).n_samples
        tot = 0.0
        for x in q[:, 0]:
            dens = 0.0
            for c, w in zip(part.components, xi):
                if w > 0:
                    mu, sig = plugin_params(c, m.prior)
                    dens += w * stats.norm(mu[0], math.sqrt(sig[0, 0])).pdf(x)
            tot += math.log(dens)
        assert per[t, l] == pytest.approx(tot, abs=1e-10)
    ranking = m.score_query(q)
    ref = logsumexp(per, axis=0) - math.log(per.shape[0])
    for eid, s in ranking.entries:
        assert s == pytest.approx(ref[cand.index(eid)], abs=1e-12)


def test_candidate_order_does_not_matter(two_mode_model):
    q = batch("q", [0.1, -0.3, 0.5])
    a = two_mode_model.score_query(q, ["pos", "mid", "neg"])
    b = two_mode_model.score_query(q, ["neg", "pos", "mid"])
    assert a.entries == b.entries
    c = two_mode_model.score_query(q, ["pos", "neg"])
    assert sorted(c.ids) == ["neg", "pos"]


def test_unknown_candidate_is_an_error(two_mode_model):
    with pytest.raises(KeyError):
        two_mode_model.score_query(batch("q", [0.0]), ["nope"])


def test_raw_weighting_and_student_kernel_run(two_mode_model):
    q = batch("q", [-5.1, -4.8])
    for kw in (dict(weighting="raw"), dict(kernel="student")):
        assert two_mode_model.score_query(q, **kw).ids[0] == "neg"


def test_zero_mass_candidate_is_flagged_and_last():
    m = new_supermodel(1, DpmConfig(n_particles=2))
    m.ingest_batch(batch("a", [0.0, 0.1]))
    m.registry.append(type(m.registry[0])("ghost", None, 3))  # registered but never assigned
    r = m.score_query(batch("q", [0.0]))
    assert r.ids == ["a", "ghost"] and r.flagged == ["ghost"]
    assert r.entries[-1][1] == -np.inf


def test_ties_keep_registry_order():
    m = new_supermodel(1, DpmConfig(n_particles=1))
    m.ingest_batch(batch("x", [0.0]))
    m.ingest_batch(batch("y", [0.0]))  # joins the same component: identical weights
    r = m.score_query(batch("q", [1.0]), ["y", "x"])
    assert r.entries[0][1] == r.entries[1][1]
    assert r.ids == ["x", "y"]


def test_ranking_csv_format(two_mode_model):
    r = two_mode_model.score_query(batch("q", [5.0]))
    lines = r.to_csv(top_k=2).splitlines()
    assert lines[0] == "rank,experiment_id,log_rho"
    assert len(lines) == 3 and lines[1].startswith("1,pos,")
    assert len(r.to_csv().splitlines()) == 4


# -- density ----------------------------------------------------------------------------------

def test_single_component_density_is_plugin_gaussian():
    m = new_supermodel(1, DpmConfig(n_particles=1))
    pts = [0.2]
    m.ingest_batch(batch("a", pts))
    assert m.particles[0].k == 1
    mu, sig = plugin_params(stats_from_batch(np.array(pts)[:, None]), m.prior)
    grid = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(m.density_at(grid), stats.norm(mu[0], math.sqrt(sig[0, 0])).pdf(grid),
                               rtol=1e-12)


def test_density_integrates_to_one():
    m = new_supermodel(1, DpmConfig(n_particles=20, mode="sample", seed=3))
    for b in toy_batches(60, seed=1, proportional=True):
        m.ingest_batch(b)
    val, _ = integrate.quad(lambda x: float(m.density_at([x])[0]), -30, 30, limit=200)
    assert abs(val - 1) < 0.02
    grid = np.arange(-15, 15, 0.01)
    assert abs(m.density_at(grid).sum() * 0.01 - 1) < 0.02


def test_density_of_empty_model_is_an_error():
    with pytest.raises(ValueError):
        new_supermodel(1).density_at([0.0])
