from .lmmse import GaussianBelief, SingularModelError, extrinsic, gaussian_product, lmmse_a
from .messages import ModuleBResult, SparsityPrior, module_b
from .em import (
    EStepResult,
    MStepResult,
    TurboProblem,
    TurboResult,
    e_step,
    m_step,
    reconstruct_channels,
    run_turbo,
    surrogate_gradient,
    surrogate_objective,
)

__all__ = [
    "GaussianBelief",
    "SingularModelError",
    "extrinsic",
    "gaussian_product",
    "lmmse_a",
    "ModuleBResult",
    "SparsityPrior",
    "module_b",
    "EStepResult",
    "MStepResult",
    "TurboProblem",
    "TurboResult",
    "e_step",
    "m_step",
    "reconstruct_channels",
    "run_turbo",
    "surrogate_gradient",
    "surrogate_objective",
]
