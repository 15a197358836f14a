"""Eigen-expansions of Hilbert-space-valued processes indexed by an interval.

Flows are observed on a uniform midpoint grid of an interval and projected
onto the first ``m`` vectors of an orthonormal basis of the ambient Hilbert
space.  The package estimates the operator-valued covariance kernel, extracts
its eigensystem by a dense eigensolve or by a thin SVD of the data matrix,
and checks the spectral identities (Mercer series, trace identity, uniform
truncation error) on the discretized objects.
"""

from .core import (
    BasisTruncation,
    DiscreteKernel,
    EigenSystem,
    FlowEnsemble,
    FlowSample,
    Grid,
    ScoreMatrix,
    l2_inner,
    stack,
    unstack,
)

__version__ = "0.1.0"

__all__ = [
    "BasisTruncation",
    "DiscreteKernel",
    "EigenSystem",
    "FlowEnsemble",
    "FlowSample",
    "Grid",
    "ScoreMatrix",
    "l2_inner",
    "stack",
    "unstack",
    "__version__",
]
