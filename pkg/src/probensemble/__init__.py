"""Asynchronous probability-level ensembling over a publish/subscribe broker.

Clients publish per-sample class-probability vectors; a server fuses them
(mean, accuracy-weighted, stacking, or simplex weights found by a genetic
algorithm or particle swarm), broadcasts the fused distribution back, and
clients refine their local models by distilling against it. A
parameter-exchange baseline with identical byte accounting allows direct
communication-cost comparisons.
"""

from .core import SIMPLEX_TOL, accuracy, macro_f1, validate_simplex, weighted_f1
from .errors import ProbEnsembleError
from .wire import SERVER_ID

__all__ = [
    "SIMPLEX_TOL",
    "SERVER_ID",
    "ProbEnsembleError",
    "accuracy",
    "macro_f1",
    "validate_simplex",
    "weighted_f1",
]

__version__ = "0.1.0"
