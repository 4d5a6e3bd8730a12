"""Probabilistic integral circuits materialized as tensorized quadrature circuits."""
from .checkpoint import ModelConfig
from .estimator import QPCDensityEstimator, YCoCgTransformer
from .neural import MlpConfig
from .pic import MergeMode, rg_to_pic
from .qpc import QpcModel, build_circuit, count_params
from .region_graph import RegionGraph, build_quad_rg

__all__ = ["MergeMode", "MlpConfig", "ModelConfig", "QPCDensityEstimator", "QpcModel", "RegionGraph",
           "YCoCgTransformer", "build_circuit", "build_quad_rg", "count_params", "rg_to_pic"]
__version__ = "0.1.0"
