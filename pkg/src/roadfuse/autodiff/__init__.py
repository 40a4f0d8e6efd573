from .graph import Graph, Param, Tensor
from .gradcheck import NonFiniteError, grad_check

__all__ = ["Graph", "Param", "Tensor", "grad_check", "NonFiniteError"]
