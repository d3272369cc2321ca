from .autodiff import (
    ContractError,
    DimensionError,
    DomainError,
    Node,
    Tape,
    as_matrix,
    backward,
)
from .optim import OptimizerState, adam, optimizer_step, sgd

__all__ = [
    "ContractError",
    "DimensionError",
    "DomainError",
    "Node",
    "OptimizerState",
    "Tape",
    "adam",
    "as_matrix",
    "backward",
    "optimizer_step",
    "sgd",
]
