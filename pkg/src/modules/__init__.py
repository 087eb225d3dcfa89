from .block_summary import BlockSummaryModule
from .graph import EdgeCovariates, MultiplexGraph
from .model import BlockParameters, CovariateBlockParameters
from .vem import FitResult, fit, fit_covariates
