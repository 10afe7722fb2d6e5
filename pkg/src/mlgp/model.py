"""Multi-linear Gaussian process: likelihood, gradients, training, prediction.

Covariance of the latent function at observations ``(x_n, t_n)``::

    K = core_amp * Utilde @ Utilde.T,   Utilde = phi(X) (U_M (x) ... (x) U_1)

where row ``n`` of ``Utilde`` is :func:`mlgp.kernels.utilde_row` and task
``t`` maps to ``(t_2, ..., t_M)`` in row-major order.  Observation noise is
diagonal with one variance per task.

Targets may carry several independent output columns ``Y`` of shape
``(N, P)`` that share the covariance; ``P = 1`` is ordinary GP regression.
"""

from dataclasses import dataclass, field, replace
from functools import reduce
import string

import numpy as np
from scipy import linalg

from .exceptions import (
    DegenerateSubspaceError,
    DimensionError,
    NumericalError,
    OptimizationError,
)
from .kernels import KernelSpec, feature_map, robust_cholesky
from .optimize import minimize_lbfgs

__all__ = [
    "MultiTaskDataset",
    "MLGPModel",
    "TrainConfig",
    "PosteriorPredictive",
    "ModelGradient",
    "build_utilde",
    "gaussian_nll_dense",
    "nll_dense",
    "nll_woodbury",
    "nll_grad",
    "fit",
    "init_model",
    "predict",
    "stationarity_residual",
    "stationarity_residual_from",
    "principal_output_utilde",
    "output_subspace",
    "mle_subspace_angle",
    "kl_objective",
]

LOG_2PI = np.log(2.0 * np.pi)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiTaskDataset:
    """Observations from ``prod(task_shape)`` tasks.

    Parameters
    ----------
    task_shape : tuple of int
        ``(T_2, ..., T_M)``.
    X : ndarray, shape (N, D)
    Y : ndarray, shape (N,) or (N, P)
        Stored as a 2-D array.
    tasks : ndarray of int, shape (N,)
        Flat task id per row; ``t = t_2 * T_3 + t_3`` for three modes.
    """

    task_shape: tuple
    X: np.ndarray
    Y: np.ndarray
    tasks: np.ndarray

    def __post_init__(self):
        task_shape = tuple(int(t) for t in self.task_shape)
        if not task_shape or min(task_shape) < 1:
            raise DimensionError(f"invalid task shape {task_shape}")
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        tasks = np.asarray(self.tasks)
        if tasks.size and not np.all(np.equal(np.mod(tasks, 1), 0)):
            raise ValueError("task ids must be integers")
        tasks = tasks.astype(np.int64).ravel()
        if not (X.shape[0] == Y.shape[0] == tasks.shape[0]):
            raise DimensionError(
                f"row counts differ: X {X.shape[0]}, Y {Y.shape[0]}, tasks {tasks.shape[0]}"
            )
        n_tasks = int(np.prod(task_shape))
        if tasks.size and (tasks.min() < 0 or tasks.max() >= n_tasks):
            bad = int(tasks[(tasks < 0) | (tasks >= n_tasks)][0])
            raise IndexError(f"task id {bad} outside [0, {n_tasks})")
        if not np.all(np.isfinite(Y)):
            raise ValueError("targets contain NaN or inf")
        object.__setattr__(self, "task_shape", task_shape)
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "Y", _readonly(Y))
        tasks.setflags(write=False)
        object.__setattr__(self, "tasks", tasks)

    @classmethod
    def from_blocks(cls, task_shape, blocks):
        """Build from ``{task: (X_t, y_t)}``."""
        Xs, Ys, ts = [], [], []
        for t in sorted(blocks):
            Xt, yt = blocks[t]
            Xt = np.atleast_2d(np.asarray(Xt, dtype=float))
            yt = np.asarray(yt, dtype=float)
            Xs.append(Xt)
            Ys.append(yt.reshape(Xt.shape[0], -1))
            ts.append(np.full(Xt.shape[0], t))
        return cls(task_shape, np.vstack(Xs), np.vstack(Ys), np.concatenate(ts))

    @property
    def n_tasks(self):
        return int(np.prod(self.task_shape))

    @property
    def n_samples(self):
        return self.X.shape[0]

    @property
    def n_outputs(self):
        return self.Y.shape[1]

    @property
    def y(self):
        """Targets as a vector when there is one output column."""
        return self.Y[:, 0] if self.n_outputs == 1 else self.Y

    @property
    def counts(self):
        """``n_t`` for every task, zeros included."""
        return np.bincount(self.tasks, minlength=self.n_tasks)

    def index_map(self, t):
        return tuple(int(i) for i in np.unravel_index(t, self.task_shape))

    def task_indices(self):
        """Per-mode task indices, shape ``(M - 1, N)``."""
        return np.array(np.unravel_index(self.tasks, self.task_shape)).reshape(
            len(self.task_shape), -1
        )

    def blocks(self):
        return {
            t: (self.X[self.tasks == t], self.y[self.tasks == t])
            for t in range(self.n_tasks)
        }

    def subset(self, rows):
        rows = np.asarray(rows)
        return MultiTaskDataset(self.task_shape, self.X[rows], self.Y[rows], self.tasks[rows])


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 500
    grad_tol: float = 1e-6
    seed: int = 0
    tie_noise: bool = False
    reorthonormalize: bool = True
    init_scale: float = 1.0

    def __post_init__(self):
        if int(self.max_iters) <= 0:
            raise ValueError("max_iters must be positive")
        if not float(self.grad_tol) > 0:
            raise ValueError("grad_tol must be positive")
        if not float(self.init_scale) > 0:
            raise ValueError("init_scale must be positive")


@dataclass(frozen=True, eq=False)
class MLGPModel:
    """Parameters of a multi-linear GP.

    ``factors[m]`` has shape ``(T_m, R_m)``.  The factor actually used in the
    covariance is ``factors[m] * scales[m]``; after re-orthonormalization the
    factors are orthonormal and the per-mode singular values sit in
    ``scales``.
    """

    mode_dims: tuple
    ranks: tuple
    factors: tuple
    noise_vars: np.ndarray
    core_amp: float = 1.0
    scales: tuple = None
    feature_kernel: KernelSpec = None
    fit_info: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        mode_dims = tuple(int(t) for t in self.mode_dims)
        ranks = tuple(int(r) for r in self.ranks)
        if len(mode_dims) < 2 or len(ranks) != len(mode_dims):
            raise DimensionError(f"need >= 2 modes with matching ranks, got {mode_dims}, {ranks}")
        for T, R in zip(mode_dims, ranks):
            if not 1 <= R <= T:
                raise ValueError(f"rank {R} must lie in [1, {T}]")
        factors = tuple(_readonly(U) for U in self.factors)
        if len(factors) != len(mode_dims):
            raise DimensionError("one factor per mode is required")
        for m, (U, T, R) in enumerate(zip(factors, mode_dims, ranks)):
            if U.shape != (T, R):
                raise DimensionError(f"factor {m + 1} has shape {U.shape}, expected {(T, R)}")
        scales = self.scales
        if scales is None:
            scales = tuple(np.ones(R) for R in ranks)
        scales = tuple(_readonly(np.ravel(s)) for s in scales)
        for s, R in zip(scales, ranks):
            if s.shape != (R,):
                raise DimensionError("scales must have one entry per rank")
        noise = _readonly(np.ravel(self.noise_vars))
        n_tasks = int(np.prod(mode_dims[1:]))
        if noise.size == 1:
            noise = _readonly(np.full(n_tasks, noise[0]))
        if noise.shape != (n_tasks,):
            raise DimensionError(f"need {n_tasks} noise variances, got {noise.size}")
        if not np.all(noise > 0):
            raise ValueError("noise variances must be positive")
        if not float(self.core_amp) > 0:
            raise ValueError("core_amp must be positive")
        kern = self.feature_kernel
        if isinstance(kern, dict):
            kern = KernelSpec.from_dict(kern)
        object.__setattr__(self, "mode_dims", mode_dims)
        object.__setattr__(self, "ranks", ranks)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "noise_vars", noise)
        object.__setattr__(self, "core_amp", float(self.core_amp))
        object.__setattr__(self, "feature_kernel", kern)

    def __eq__(self, other):
        if not isinstance(other, MLGPModel):
            return NotImplemented
        return (
            self.mode_dims == other.mode_dims
            and self.ranks == other.ranks
            and self.core_amp == other.core_amp
            and self.feature_kernel == other.feature_kernel
            and np.array_equal(self.noise_vars, other.noise_vars)
            and all(np.array_equal(a, b) for a, b in zip(self.factors, other.factors))
            and all(np.array_equal(a, b) for a, b in zip(self.scales, other.scales))
        )

    __hash__ = None

    @property
    def n_modes(self):
        return len(self.mode_dims)

    @property
    def task_shape(self):
        return self.mode_dims[1:]

    @property
    def rank(self):
        return int(np.prod(self.ranks))

    @property
    def effective_factors(self):
        return tuple(U * s for U, s in zip(self.factors, self.scales))

    def phi(self, X):
        return feature_map(X, self.feature_kernel, self.mode_dims[0])

    def task_covariance(self, m):
        """``K_m = U_m U_m^T`` for mode ``m`` (0-based; 0 is the feature mode)."""
        E = self.effective_factors[m]
        return E @ E.T

    def tucker_weights(self, core):
        """Weight tensor ``W = S x_1 U_1 ... x_M U_M`` for a core draw ``S``."""
        W = np.asarray(core, dtype=float).reshape(self.ranks)
        for m, E in enumerate(self.effective_factors):
            W = np.moveaxis(np.tensordot(E, W, axes=([1], [m])), 0, m)
        return W

    def to_dict(self):
        return {
            "mode_dims": list(self.mode_dims),
            "ranks": list(self.ranks),
            "factors": [U.tolist() for U in self.factors],
            "scales": [s.tolist() for s in self.scales],
            "noise_vars": self.noise_vars.tolist(),
            "core_amp": self.core_amp,
            "feature_kernel": None if self.feature_kernel is None else self.feature_kernel.to_dict(),
            "convention": "mode1-fastest",
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("convention", "mode1-fastest") != "mode1-fastest":
            raise ValueError(f"unsupported Kronecker convention {d['convention']!r}")
        return cls(
            mode_dims=d["mode_dims"],
            ranks=d["ranks"],
            factors=[np.array(U, dtype=float) for U in d["factors"]],
            noise_vars=d["noise_vars"],
            core_amp=d["core_amp"],
            scales=d.get("scales"),
            feature_kernel=d.get("feature_kernel"),
        )


@dataclass(frozen=True)
class PosteriorPredictive:
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class ModelGradient:
    """Gradient of the negative log marginal likelihood.

    ``factors`` are derivatives w.r.t. the effective factors; the noise and
    amplitude entries are w.r.t. their logarithms.
    """

    factors: list
    log_noise_vars: np.ndarray
    log_core_amp: float

    def ravel(self):
        return np.concatenate(
            [g.ravel() for g in self.factors] + [self.log_noise_vars, [self.log_core_amp]]
        )


# ---------------------------------------------------------------------------
# design matrix
# ---------------------------------------------------------------------------


def _check_compatible(model, data):
    if tuple(data.task_shape) != tuple(model.task_shape):
        raise DimensionError(
            f"dataset task shape {data.task_shape} != model task shape {model.task_shape}"
        )


def _mode_rows(model, X, task_idx, factors=None):
    """Per-mode row blocks ``A_m`` with ``Utilde[n] = kron(A_M[n], ..., A_1[n])``."""
    factors = model.effective_factors if factors is None else factors
    Phi = model.phi(X)
    if Phi.shape[1] != model.mode_dims[0]:
        raise DimensionError(
            f"features have dimension {Phi.shape[1]}, model expects {model.mode_dims[0]}"
        )
    rows = [Phi @ factors[0]]
    for m in range(1, model.n_modes):
        rows.append(factors[m][task_idx[m - 1]])
    return Phi, rows


def _row_kron(rows):
    """Row-wise Kronecker product of ``rows[::-1]`` (first entry fastest)."""
    out = rows[-1]
    for A in rows[-2::-1]:
        out = (out[:, :, None] * A[:, None, :]).reshape(out.shape[0], -1)
    return out


def build_utilde(model, data):
    """``Utilde = phi(X) (U_M (x) ... (x) U_1)``, shape ``(N, prod R_m)``."""
    _check_compatible(model, data)
    _, rows = _mode_rows(model, data.X, data.task_indices())
    return _row_kron(rows)


def _noise_diag(model, data):
    return model.noise_vars[data.tasks]


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def gaussian_nll_dense(K, noise_diag, Y):
    """``-log N(Y; 0, K + diag(noise))`` summed over the columns of ``Y``."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    C = np.asarray(K, dtype=float) + np.diag(np.asarray(noise_diag, dtype=float))
    N, P = Y.shape
    L, _ = robust_cholesky(C)
    alpha = linalg.cho_solve((L, True), Y)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return 0.5 * np.sum(Y * alpha) + 0.5 * P * logdet + 0.5 * N * P * LOG_2PI


def nll_dense(model, data):
    """Negative log marginal likelihood via a Cholesky of the full ``N x N`` covariance."""
    if data.n_samples < 1:
        raise DimensionError("need at least one observation")
    U = build_utilde(model, data)
    return gaussian_nll_dense(model.core_amp * U @ U.T, _noise_diag(model, data), data.Y)


def _compress_targets(Y):
    """Return ``F`` with ``F F^T = Y Y^T`` and at most ``N`` columns."""
    N, P = Y.shape
    if P <= N:
        return Y
    R = linalg.qr(Y.T, mode="r")[0]
    return R.T


@dataclass
class _Woodbury:
    """Quantities shared by the low-rank likelihood, gradient and predictor."""

    B: np.ndarray
    d: np.ndarray
    Bd: np.ndarray
    L: np.ndarray
    W: np.ndarray
    alpha: np.ndarray
    nll: float

    def Minv(self):
        return linalg.cho_solve((self.L, True), np.eye(self.L.shape[0]))


def _woodbury(B, d, F, P):
    """Low-rank-plus-diagonal solve for ``C = B B^T + diag(d)``.

    ``F`` is a factor of the target Gram matrix (``F F^T = Y Y^T``) and ``P``
    the number of output columns it stands for.
    """
    N, R = B.shape
    Bd = B / d[:, None]
    M = np.eye(R) + B.T @ Bd
    try:
        L, _ = robust_cholesky(M)
    except NumericalError as exc:
        raise NumericalError(f"inner {R}x{R} factorization failed: {exc}") from None
    W = linalg.cho_solve((L, True), Bd.T @ F)
    alpha = F / d[:, None] - Bd @ W
    logdet = np.sum(np.log(d)) + 2.0 * np.sum(np.log(np.diag(L)))
    nll = 0.5 * np.sum(F * alpha) + 0.5 * P * logdet + 0.5 * N * P * LOG_2PI
    return _Woodbury(B, d, Bd, L, W, alpha, float(nll))


def nll_woodbury(model, data):
    """Negative log marginal likelihood in ``O(N R^2 + R^3)``.

    Uses ``(B B^T + D)^{-1} = D^{-1} - D^{-1} B (I + B^T D^{-1} B)^{-1} B^T D^{-1}``
    and ``det(B B^T + D) = det(D) det(I + B^T D^{-1} B)`` with
    ``B = sqrt(core_amp) Utilde``.
    """
    if data.n_samples < 1:
        raise DimensionError("need at least one observation")
    B = np.sqrt(model.core_amp) * build_utilde(model, data)
    return _woodbury(B, _noise_diag(model, data), _compress_targets(data.Y), data.n_outputs).nll


def _einsum_contract(n_modes):
    """Subscripts contracting a gradient tensor with all row blocks but one."""
    letters = string.ascii_letters[: n_modes]
    # tensor axes are (n, R_M, ..., R_1); rows[k] belongs to mode k + 1
    tensor = "z" + letters[::-1]
    specs = []
    for keep in range(n_modes):
        operands = [tensor] + ["z" + letters[k] for k in range(n_modes) if k != keep]
        specs.append(",".join(operands) + "->z" + letters[keep])
    return specs


def _nll_and_grad(model, data, F=None, factors=None, noise=None, core_amp=None):
    factors = model.effective_factors if factors is None else factors
    noise = model.noise_vars if noise is None else noise
    core_amp = model.core_amp if core_amp is None else core_amp
    task_idx = data.task_indices()
    Phi, rows = _mode_rows(model, data.X, task_idx, factors)
    s = np.sqrt(core_amp)
    B = s * _row_kron(rows)
    d = noise[data.tasks]
    F = _compress_targets(data.Y) if F is None else F
    P = data.n_outputs
    wb = _woodbury(B, d, F, P)
    CinvB = wb.Bd @ wb.Minv()
    GB = P * CinvB - wb.alpha @ (wb.alpha.T @ B)
    diag_cinv = 1.0 / d - np.sum(CinvB * wb.Bd, axis=1)
    g_d = 0.5 * (P * diag_cinv - np.sum(wb.alpha**2, axis=1))
    g_log_noise = np.bincount(data.tasks, weights=g_d * d, minlength=data.n_tasks)
    g_log_amp = 0.5 * np.sum(GB * B)

    n_modes = model.n_modes
    GU = (s * GB).reshape([B.shape[0]] + list(model.ranks[::-1]))
    g_factors = []
    for keep, spec in enumerate(_einsum_contract(n_modes)):
        others = [rows[k] for k in range(n_modes) if k != keep]
        g_rows = np.einsum(spec, GU, *others, optimize=True)
        if keep == 0:
            g_factors.append(Phi.T @ g_rows)
        else:
            g = np.zeros_like(factors[keep])
            np.add.at(g, task_idx[keep - 1], g_rows)
            g_factors.append(g)
    return wb.nll, ModelGradient(g_factors, g_log_noise, float(g_log_amp))


def nll_grad(model, data):
    """Negative log likelihood and its analytic gradient.

    Returns
    -------
    nll : float
    grad : ModelGradient
    """
    _check_compatible(model, data)
    if data.n_samples < 1:
        raise DimensionError("need at least one observation")
    return _nll_and_grad(model, data)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def init_model(data, mode_dims, ranks, config=TrainConfig(), feature_kernel=None):
    """Starting point used by :func:`fit`.

    Factors are orthonormal bases from a QR of a seeded Gaussian matrix
    times ``init_scale``; each task starts at half its target variance.
    """
    rng = np.random.default_rng(config.seed)
    factors = []
    for T, R in zip(mode_dims, ranks):
        Q, _ = np.linalg.qr(rng.standard_normal((T, R)))
        factors.append(config.init_scale * Q)
    Y = data.Y
    global_var = max(float(np.var(Y)), 1e-12)
    counts = data.counts
    noise = np.full(data.n_tasks, global_var / 2.0)
    for t in np.flatnonzero(counts >= 2):
        v = float(np.var(Y[data.tasks == t]))
        if v > 0:
            noise[t] = v / 2.0
    if config.tie_noise:
        noise[:] = global_var / 2.0
    return MLGPModel(mode_dims, ranks, factors, noise, 1.0, feature_kernel=feature_kernel)


def _reorthonormalize(model):
    """Move each factor to an orthonormal basis, keeping singular values as scales.

    ``E_m = Q_m S_m V_m^T``; dropping ``V_m`` is a right rotation of the
    design by ``(x) V_m``, which leaves the covariance unchanged.
    """
    Qs, Ss = [], []
    for E in model.effective_factors:
        Q, S, _ = np.linalg.svd(E, full_matrices=False)
        Qs.append(Q)
        Ss.append(S)
    return replace(model, factors=tuple(Qs), scales=tuple(Ss))


def fit(data, mode_dims, ranks, config=TrainConfig(), feature_kernel=None, init=None):
    """Maximize the marginal likelihood with L-BFGS.

    Parameters
    ----------
    data : MultiTaskDataset
    mode_dims, ranks : sequence of int
        ``mode_dims[0]`` is the feature dimension after ``phi``.
    config : TrainConfig
    feature_kernel : KernelSpec, optional
    init : MLGPModel, optional
        Starting point; defaults to :func:`init_model`.

    Returns
    -------
    MLGPModel
        ``fit_info`` holds the objective trace and the termination status.
    """
    mode_dims = tuple(int(t) for t in mode_dims)
    ranks = tuple(int(r) for r in ranks)
    if tuple(data.task_shape) != mode_dims[1:]:
        raise DimensionError(f"dataset task shape {data.task_shape} != mode dims {mode_dims[1:]}")
    if data.n_samples < 1:
        raise DimensionError("need at least one observation")
    model0 = init if init is not None else init_model(data, mode_dims, ranks, config, feature_kernel)
    shapes = [(T, R) for T, R in zip(mode_dims, ranks)]
    sizes = [T * R for T, R in shapes]
    n_tasks = data.n_tasks
    F = _compress_targets(data.Y)

    def unpack(theta):
        parts = np.split(theta, np.cumsum(sizes))
        factors = [p.reshape(sh) for p, sh in zip(parts[:-1], shapes)]
        rest = parts[-1]
        if config.tie_noise:
            noise = np.full(n_tasks, np.exp(rest[0]))
        else:
            noise = np.exp(rest[:n_tasks])
        return factors, noise, float(np.exp(rest[-1]))

    def objective(theta):
        factors, noise, amp = unpack(theta)
        if not (np.all(np.isfinite(noise)) and np.all(noise > 0) and 0 < amp < np.inf):
            return np.inf, None
        with np.errstate(all="ignore"):
            f, g = _nll_and_grad(model0, data, F, factors, noise, amp)
        g_noise = g.log_noise_vars
        if config.tie_noise:
            g_noise = np.array([g_noise.sum()])
        return f, np.concatenate([x.ravel() for x in g.factors] + [g_noise, [g.log_core_amp]])

    log_noise = np.log(model0.noise_vars)
    if config.tie_noise:
        log_noise = log_noise[:1]
    theta0 = np.concatenate(
        [E.ravel() for E in model0.effective_factors] + [log_noise, [np.log(model0.core_amp)]]
    )
    try:
        res = minimize_lbfgs(objective, theta0, max_iters=config.max_iters, grad_tol=config.grad_tol)
    except FloatingPointError as exc:
        raise OptimizationError(f"initial model has a non-finite likelihood: {exc}", model0)
    factors, noise, amp = unpack(res.x)
    info = {
        "nll": res.fun,
        "n_iter": res.n_iter,
        "status": res.status,
        "converged": res.converged,
        "grad_norm": float(np.max(np.abs(res.grad))),
        "trace": res.trace,
    }
    model = MLGPModel(mode_dims, ranks, factors, noise, amp, feature_kernel=model0.feature_kernel)
    if res.status == "stalled" and res.n_iter <= 1 and info["grad_norm"] > config.grad_tol:
        raise OptimizationError("line search made no progress from the initial model", model)
    if config.reorthonormalize:
        model = _reorthonormalize(model)
    return replace(model, fit_info=info)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(model, data, X_star, tasks_star):
    """Posterior mean and variance of the latent function at query points.

    Parameters
    ----------
    model : MLGPModel
    data : MultiTaskDataset
        Training data; may be empty, in which case the prior is returned.
    X_star : ndarray, shape (n_star, D)
    tasks_star : ndarray of int, shape (n_star,)

    Returns
    -------
    PosteriorPredictive
        ``mean`` has shape ``(n_star,)`` for single-output data and
        ``(n_star, P)`` otherwise; ``variance`` has shape ``(n_star,)``.
    """
    _check_compatible(model, data)
    X_star = np.asarray(X_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[:, None]
    tasks_star = np.asarray(tasks_star, dtype=np.int64).ravel()
    n_tasks = int(np.prod(model.task_shape))
    if tasks_star.size and (tasks_star.min() < 0 or tasks_star.max() >= n_tasks):
        raise IndexError(f"query task ids must lie in [0, {n_tasks})")
    if tasks_star.shape[0] != X_star.shape[0]:
        raise DimensionError("one task id per query row is required")
    idx_star = np.array(np.unravel_index(tasks_star, model.task_shape)).reshape(
        len(model.task_shape), -1
    )
    s = np.sqrt(model.core_amp)
    _, rows_star = _mode_rows(model, X_star, idx_star)
    B_star = s * _row_kron(rows_star)
    prior_var = np.sum(B_star**2, axis=1)
    P = data.n_outputs
    if data.n_samples == 0:
        mean = np.zeros((X_star.shape[0], P))
        var = prior_var
    else:
        B = s * build_utilde(model, data)
        wb = _woodbury(B, _noise_diag(model, data), data.Y, P)
        mean = B_star @ wb.W
        # posterior weight covariance in whitened coordinates is M^{-1}
        V = linalg.solve_triangular(wb.L, B_star.T, lower=True)
        var = np.sum(V**2, axis=0)
    var = np.clip(var, 0.0, None)
    if P == 1:
        mean = mean[:, 0]
    return PosteriorPredictive(mean, var)


# ---------------------------------------------------------------------------
# equivalence diagnostics
# ---------------------------------------------------------------------------


def stationarity_residual_from(Utilde, noise_diag, Y):
    """``||S_y C^{-1} U - U||_F / ||U||_F`` with ``C = U U^T + D``.

    ``S_y = Y Y^T / P`` is the output second-moment matrix (``y y^T`` for a
    single output column).  ``Utilde`` should already include the core
    amplitude.
    """
    U = np.asarray(Utilde, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    norm = np.linalg.norm(U)
    if norm == 0:
        raise DegenerateSubspaceError("Utilde is identically zero")
    d = np.asarray(noise_diag, dtype=float)
    wb = _woodbury(U, d, Y, Y.shape[1])
    lhs = Y @ (wb.alpha.T @ U) / Y.shape[1]
    return float(np.linalg.norm(lhs - U) / norm)


def stationarity_residual(model, data):
    """Relative violation of the stationary-point condition at ``model``."""
    B = np.sqrt(model.core_amp) * build_utilde(model, data)
    return stationarity_residual_from(B, _noise_diag(model, data), data.Y)


def output_subspace(Y, rank):
    """Top-``rank`` eigenpairs of ``S_y = Y Y^T / P``, largest first."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not np.any(Y):
        raise DegenerateSubspaceError("targets are identically zero")
    N, P = Y.shape
    if rank > N:
        raise DimensionError(f"rank {rank} exceeds the number of observations {N}")
    # eigenvectors of Y Y^T from the thin SVD of Y, padded with an orthonormal
    # completion if P < rank
    Uy, sv, _ = np.linalg.svd(Y, full_matrices=True)
    evals = np.zeros(N)
    evals[: sv.size] = sv**2 / P
    return evals[:rank], Uy[:, :rank]


def principal_output_utilde(Y, noise_var, rank, rotation=None):
    """Construct ``U_y (Lambda_y - sigma^2)_+^{1/2} V^T``.

    This is the maximizer of the likelihood over unstructured ``N x rank``
    designs with homoscedastic noise ``noise_var``.  Negative entries of
    ``Lambda_y - sigma^2`` are clamped at zero.
    """
    evals, vecs = output_subspace(Y, rank)
    sig = np.sqrt(np.clip(evals - float(noise_var), 0.0, None))
    U = vecs * sig
    if rotation is not None:
        U = U @ np.asarray(rotation, dtype=float).T
    return U


def _orth(A, tol=1e-10):
    Q, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0 or s[-1] < tol * s[0]:
        raise DegenerateSubspaceError("basis is rank deficient")
    return Q


def mle_subspace_angle(model, data):
    """Largest principal angle between ``span(Utilde)`` and the top output subspace."""
    U = build_utilde(model, data)
    R = U.shape[1]
    if R > data.n_samples:
        raise DimensionError("rank exceeds the number of observations")
    _, vecs = output_subspace(data.Y, R)
    return float(np.max(linalg.subspace_angles(_orth(U), vecs)))


def kl_objective(K, D, S):
    """``log det[(K + D) S^{-1}] + tr[(K + D)^{-1} S]``; minimal (``= n``) at ``K + D = S``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    D = np.asarray(D, dtype=float)
    if D.ndim == 1:
        D = np.diag(D)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    C = K + D
    try:
        Lc = linalg.cholesky(C, lower=True)
        Ls = linalg.cholesky(S, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("K + D and S must be positive definite") from None
    logdet = 2.0 * (np.sum(np.log(np.diag(Lc))) - np.sum(np.log(np.diag(Ls))))
    return float(logdet + np.trace(linalg.cho_solve((Lc, True), S)))
