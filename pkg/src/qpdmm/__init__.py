"""Privacy-preserving distributed optimization with adaptive differential quantization."""

from .graph import Graph, generate_geometric_graph, incidence_sign, is_connected
from .optimizer import OptimizerConfig, RunResult, run
from .problem import ConsensusProblem, LeastSquaresProblem, global_optimum
from .quantizer import QuantizerConfig

__all__ = [
    "ConsensusProblem",
    "Graph",
    "LeastSquaresProblem",
    "OptimizerConfig",
    "QuantizerConfig",
    "RunResult",
    "generate_geometric_graph",
    "global_optimum",
    "incidence_sign",
    "is_connected",
    "run",
]
