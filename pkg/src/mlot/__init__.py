"""Multi-source latent optimal transport barycenters.

Submodules: ``autodiff`` (reverse-mode tensors), ``oracle`` (exact and
entropic OT references), ``objective`` (transport costs, maximin and dual
functionals, duality gaps), ``nets`` (maps, potentials, checkpoints),
``synth`` (data generators), ``restore`` (toy restoration pipeline),
``train``/``diagnostics``/``cli`` (orchestration).
"""

from .autodiff import Tensor, grad_check, grad_of, no_grad
from .config import TrainConfig, load_config, parse_config_text
from .errors import (
    CheckpointError,
    ContractError,
    ConvergenceError,
    DegenerateInputError,
    DimensionError,
    MlotError,
    NonFiniteError,
    NumericalAbort,
    OracleInputError,
)
from .objective import DualityGapReport, MlotConfig, SourceBatch
from .oracle import DiscreteDistribution, GaussianSpec, solve_discrete_ot

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ContractError",
    "ConvergenceError",
    "DegenerateInputError",
    "DimensionError",
    "DiscreteDistribution",
    "DualityGapReport",
    "GaussianSpec",
    "MlotConfig",
    "MlotError",
    "NonFiniteError",
    "NumericalAbort",
    "OracleInputError",
    "SourceBatch",
    "Tensor",
    "TrainConfig",
    "grad_check",
    "grad_of",
    "load_config",
    "no_grad",
    "parse_config_text",
    "solve_discrete_ot",
]
