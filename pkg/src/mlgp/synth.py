"""Synthetic data drawn from the MLGP prior."""

from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec
from .model import MLGPModel, MultiTaskDataset, build_utilde

__all__ = ["SynthConfig", "SynthResult", "synth_generate"]

# MLGPModel needs strictly positive noise; noiseless data get this floor.
NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    Parameters
    ----------
    mode_dims : tuple of int
        ``(T_1, ..., T_M)``; ``T_1`` is the input dimension.
    ranks : tuple of int
    n_per_task : int or sequence of int
        Samples per task; a sequence gives one count per task.
    noise_var : float or sequence of float
        Zero is allowed.
    core_amp : float
        Variance of every core entry.
    n_outputs : int
        Independent core draws sharing the design, one per output column.
    feature_kernel : KernelSpec, optional
        If set, inputs are scalars uniform on ``[0, 1]`` mapped through the
        kernel feature map; otherwise ``x ~ N(0, I)``.
    """

    mode_dims: tuple
    ranks: tuple
    n_per_task: object = 10
    noise_var: object = 0.01
    core_amp: float = 1.0
    n_outputs: int = 1
    feature_kernel: KernelSpec = field(default=None)

    def __post_init__(self):
        mode_dims = tuple(int(t) for t in self.mode_dims)
        ranks = tuple(int(r) for r in self.ranks)
        if len(mode_dims) < 2 or len(ranks) != len(mode_dims):
            raise ValueError("need >= 2 modes with one rank each")
        for T, R in zip(mode_dims, ranks):
            if not 1 <= R <= T:
                raise ValueError(f"rank {R} must lie in [1, {T}]")
        n_tasks = int(np.prod(mode_dims[1:]))
        counts = np.ravel(np.asarray(self.n_per_task, dtype=float))
        if counts.size == 1:
            counts = np.full(n_tasks, counts[0])
        if counts.shape != (n_tasks,) or np.any(counts < 0) or np.any(counts != np.floor(counts)):
            raise ValueError(f"n_per_task must be one non-negative integer or {n_tasks} of them")
        noise = np.ravel(np.asarray(self.noise_var, dtype=float))
        if noise.size == 1:
            noise = np.full(n_tasks, noise[0])
        if noise.shape != (n_tasks,) or np.any(noise < 0) or not np.all(np.isfinite(noise)):
            raise ValueError(f"noise_var must be one non-negative value or {n_tasks} of them")
        if not float(self.core_amp) > 0:
            raise ValueError("core_amp must be positive")
        if int(self.n_outputs) < 1:
            raise ValueError("n_outputs must be >= 1")
        kern = self.feature_kernel
        if isinstance(kern, dict):
            kern = KernelSpec.from_dict(kern)
        object.__setattr__(self, "mode_dims", mode_dims)
        object.__setattr__(self, "ranks", ranks)
        object.__setattr__(self, "n_per_task", tuple(int(c) for c in counts))
        object.__setattr__(self, "noise_var", tuple(float(v) for v in noise))
        object.__setattr__(self, "core_amp", float(self.core_amp))
        object.__setattr__(self, "n_outputs", int(self.n_outputs))
        object.__setattr__(self, "feature_kernel", kern)


@dataclass(frozen=True)
class SynthResult:
    dataset: MultiTaskDataset
    model: MLGPModel
    core: np.ndarray  # (prod R, P), column-major over ranks
    latent: np.ndarray  # noiseless targets, (N, P)


def synth_generate(config, seed=0):
    """Draw orthonormal factors, a core ``vec(S) ~ N(0, core_amp I)`` and noisy targets.

    Returns
    -------
    SynthResult
        The dataset, the generating model, the core draws and the noiseless
        targets ``Utilde vec(S)``.
    """
    rng = np.random.default_rng(seed)
    factors = [np.linalg.qr(rng.standard_normal((T, R)))[0] for T, R in zip(config.mode_dims, config.ranks)]
    noise = np.maximum(np.array(config.noise_var), NOISE_FLOOR)
    model = MLGPModel(config.mode_dims, config.ranks, factors, noise, config.core_amp,
                      feature_kernel=config.feature_kernel)
    counts = np.array(config.n_per_task)
    tasks = np.repeat(np.arange(counts.size), counts)
    N = tasks.size
    if config.feature_kernel is None:
        X = rng.standard_normal((N, config.mode_dims[0]))
    else:
        X = rng.uniform(0.0, 1.0, size=(N, 1))
    core = np.sqrt(config.core_amp) * rng.standard_normal((model.rank, config.n_outputs))
    eps = rng.standard_normal((N, config.n_outputs))
    blank = MultiTaskDataset(model.task_shape, X, np.zeros((N, config.n_outputs)), tasks)
    latent = build_utilde(model, blank) @ core
    Y = latent + np.sqrt(np.array(config.noise_var))[tasks, None] * eps
    data = MultiTaskDataset(model.task_shape, X, Y, tasks)
    return SynthResult(data, model, core, latent)
