"""Forward-only meta-learning of prototypical networks with evolution strategies."""

from .es import ESConfig, GradientEstimate, Population
from .nncore import EmbeddingNet, ParamVector

__all__ = ["ESConfig", "EmbeddingNet", "GradientEstimate", "ParamVector", "Population"]
__version__ = "0.1.0"
