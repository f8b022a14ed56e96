"""Gradient descent on a two-layer exponential-activation network and
empirical checks of its over-parameterized convergence bounds."""

from .datamodel import (
    Dataset,
    HyperParams,
    KernelMatrix,
    NetworkState,
    ParameterDomainError,
    PreconditionError,
    RangeError,
    StructuralError,
    TrainTrace,
    gen_dataset,
    init_paired,
    init_standard,
)
from .kernel import fro_norm, h_cts_closed, h_cts_mc, h_dis, inf_norm, lambda_min, spectral_norm
from .training import forward, gd_step, gradient, loss, train

__version__ = "0.1.0"
