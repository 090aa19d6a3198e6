"""Scalable Gaussian-process regression toolkit.

Exact GP regression, sparse inducing-point approximations (SoR, DTC, FITC,
PIC, VFE, SVGP) and local product-of-experts aggregations (PoE, GPoE, BCM,
RBCM), plus a benchmark harness with SMSE/MSLL metrics and a CLI.
"""

from .aggregation import (BETA_RULES, ExpertEnsemble, Partition, aggregate,
                          aggregate_distributions, fit_experts, partition_kmeans,
                          partition_random, predict_aggregated, predict_local)
from .data import Dataset, NormStats, apply_normalization, generate_sinc, load_csv, normalize, split
from .exceptions import ConfigError, DimensionError, NumericalError
from .full import PredictiveDistribution, TrainedFullGP, fit, nlml, predict
from .kernel import Hyperparameters, KernelMatrix, chol_with_jitter, kernel_gradients, kernel_matrix, se_ard
from .metrics import msll, smse
from .optimize import OptTrace, check_gradient, minimize_deterministic, minimize_stochastic
from .sparse import InducingSet, SparseModel, build_sparse, fit_sparse, nystrom, sparse_evidence, sparse_predict
from .svgp import (SvgpConfig, SvgpModel, VariationalState, elbo, fit_svgp,
                   optimal_variational_state, svgp_predict)

__version__ = "0.1.0"
