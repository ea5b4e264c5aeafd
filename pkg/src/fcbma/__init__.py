"""Categorical factor collapsing for GLMs, with BIC-weighted model averaging."""

__version__ = "0.1.0"

from .bma import Ensemble, SimilarityMatrix, averaged_occurrence, averaged_prediction, coclustering, posterior_weights
from .data import ColumnRoles, Dataset, DataError, derive_severity, ingest
from .glm import FittedModel, GLMError, ModelTemplate, Problem, RankDeficiencyError, apply_scheme, fit, predict
from .metrics import EvalReport, ccc, evaluate, gini, kl_divergence, ks_test, rmse, split, wasserstein1
from .partition import (ConstraintSet, Partition, PartitionError, PartitionSpace, bell, canonicalize,
                        count_constrained, enumerate_partitions, neighbors, random_partition, repair)
from .scheme import CollapsingScheme
from .search import (Evaluator, GAConfig, SAConfig, SearchError, SearchResult, exhaustive_search, ga_search,
                     sa_search, top_k)

__all__ = [name for name in dir() if not name.startswith("_")]
