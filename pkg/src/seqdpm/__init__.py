"""Sequential Dirichlet-process supermodel for retrieving experiments from posterior samples."""
from .mathcore import ComponentStats, NiwPrior, mvt_logpdf, predictive_existing, predictive_new, stats_add, stats_from_batch
from .particle import Particle, allocation_scores, particle_predictive, propagate
from .samplers import SampleBatch, SimScenario, gen_case1, gen_case2, toy_batches
from .supermodel import DpmConfig, ExperimentRecord, RetrievalRanking, Supermodel, new_supermodel

__version__ = "0.1.0"
