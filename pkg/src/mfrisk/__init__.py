"""Mean-field model of systemic risk: bistable agents with cooperative reversion."""
from .model import GroupSpec, HetModelParams, InvalidParams, ModelParams

__all__ = ["GroupSpec", "HetModelParams", "InvalidParams", "ModelParams"]
__version__ = "0.1.0"
