"""Treed-DAG multivariate spatial regression (SpamTrees)."""

from .covariance import (InducedCov, NodeFactors, NotPositiveDefinite, ThetaParams,
                         compute_factors, cov_matrix, cross_cov, induced_cov, node_factors)
from .treegraph import (ExpandedLocation, NodeId, TreedDag, build_tree, cherry_pick,
                        color_levels, common_descendants, concestor_and_paths)

__version__ = "0.1.0"

__all__ = [
    "ExpandedLocation", "NodeId", "TreedDag", "build_tree", "cherry_pick", "color_levels",
    "common_descendants", "concestor_and_paths", "ThetaParams", "NodeFactors",
    "NotPositiveDefinite", "cross_cov", "cov_matrix", "node_factors", "compute_factors",
    "induced_cov", "InducedCov",
]
