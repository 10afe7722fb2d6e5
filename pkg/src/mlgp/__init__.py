"""Multi-linear Gaussian processes, Tucker tensor regression and learning curves."""

from .exceptions import (
    ConvergenceError,
    DataFormatError,
    DegenerateSubspaceError,
    DimensionError,
    NumericalError,
    OptimizationError,
)
from .kernels import KernelFamily, KernelSpec, KronChain, gram_matrix, kernel_eval, kron, utilde_row
from .model import (
    MLGPModel,
    MultiTaskDataset,
    PosteriorPredictive,
    TrainConfig,
    fit,
    kl_objective,
    mle_subspace_angle,
    nll_dense,
    nll_grad,
    nll_woodbury,
    predict,
    stationarity_residual,
)
from .tensreg import TuckerModel, als_fit, principal_angles, tensreg_predict, tucker_reconstruct
from .curves import (
    CurveProblem,
    CurveResult,
    bayes_error_exact,
    benchmark_problem,
    build_lambda_prime,
    lc_simulate,
    lc_theory_multi,
    lc_theory_single,
    lowrank_truncate,
    lowrank_truncate_modes,
)
from .synth import SynthConfig, synth_generate
from .estimators import MLGPRegressor, TuckerRegressor

__version__ = "0.1.0"
