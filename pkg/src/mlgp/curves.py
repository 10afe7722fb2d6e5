"""Average-case learning curves for multi-task MLGP.

The data-dependent part of the kernel has a finite eigen-expansion
``sum_i lambda_i psi_i(x) psi_i(x')`` and task correlations are
``K_2 (x) ... (x) K_M``.  In weight space the prior covariance is

    Lambda' = (K_2 (x) ... (x) K_M) (x) diag(lambda)

with the task index slow and the eigenfunction index fast, so the projector
onto task ``t`` selects one contiguous block of ``k`` coordinates.

Simulation draws ``psi_i(x) = x_i`` with ``x ~ N(0, I_k)``, which gives
``E[psi_i psi_j] = delta_ij``.

A problem produced by :func:`lowrank_truncate` keeps the untruncated task
covariance in ``reference_task_cov``.  Its learning curve is the Bayes error
of the rank-``r`` model plus the approximation gap
``tr P_t (Lambda'_ref - Lambda'_r)``, the part of the prior variance that the
truncated model cannot represent.  :func:`mismatch_error` gives the error of
the truncated learner on data from the reference prior instead.
"""

from dataclasses import dataclass, field, replace
import csv
import io

import numpy as np
from scipy import linalg

from .exceptions import ConvergenceError, DimensionError, NumericalError
from .kernels import KronChain, robust_cholesky

__all__ = [
    "CurveProblem",
    "CurveResult",
    "LambdaPrime",
    "rho_matrix",
    "ar1_matrix",
    "power_spectrum",
    "benchmark_problem",
    "build_lambda_prime",
    "allocate",
    "sample_design",
    "bayes_error_exact",
    "mismatch_error",
    "lc_theory_single",
    "lc_theory_multi",
    "lc_simulate",
    "lowrank_truncate",
    "lowrank_truncate_modes",
]

FIXED_POINT_DAMPING = 0.5
FIXED_POINT_TOL = 1e-9
FIXED_POINT_MAX_ITERS = 10_000


def rho_matrix(n, rho):
    """``n x n`` correlation matrix with ``rho`` off the diagonal."""
    K = np.full((n, n), float(rho))
    np.fill_diagonal(K, 1.0)
    return K


def power_spectrum(k=10, decay=2.0):
    """``lambda_i = i^-decay`` normalized to sum to one."""
    lam = np.arange(1, k + 1, dtype=float) ** (-float(decay))
    return lam / lam.sum()


@dataclass(frozen=True)
class CurveProblem:
    """Inputs to the learning-curve theory and simulation.

    Parameters
    ----------
    spectrum : ndarray, shape (k,)
        Strictly positive, sorted in descending order.
    task_factors : tuple of ndarray
        ``(K_2, ..., K_M)``; after truncation a single dense matrix.
    noise_vars : ndarray, shape (T,) or scalar
    allocation : ndarray, shape (T,), optional
        Relative share of samples per task (uniform by default).
    task_shape : tuple of int, optional
        Defaults to the factor sizes.
    rank_r : int, optional
        Truncation rank, set by :func:`lowrank_truncate`.
    reference_task_cov : ndarray, optional
        Task covariance the data are generated from, when it differs from the
        learner's.
    """

    spectrum: np.ndarray
    task_factors: tuple
    noise_vars: np.ndarray = 0.1
    allocation: np.ndarray = None
    task_shape: tuple = None
    rank_r: int = None
    reference_task_cov: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.spectrum, dtype=float).ravel()
        if lam.size == 0 or np.any(lam <= 0):
            raise ValueError("spectrum must be non-empty and strictly positive")
        if np.any(np.diff(lam) > 0):
            raise ValueError("spectrum must be sorted in descending order")
        factors = tuple(np.atleast_2d(np.asarray(K, dtype=float)) for K in self.task_factors)
        if not factors:
            raise DimensionError("at least one task factor is required")
        for K in factors:
            if K.shape[0] != K.shape[1] or not np.allclose(K, K.T, atol=1e-12):
                raise ValueError("task factors must be symmetric")
            if np.linalg.eigvalsh(K)[0] < -1e-8 * max(1.0, np.abs(K).max()):
                raise ValueError("task factors must be positive semidefinite")
        if self.task_shape is None:
            task_shape = tuple(K.shape[0] for K in factors)
        else:
            task_shape = tuple(int(t) for t in self.task_shape)
        T = int(np.prod(task_shape))
        if int(np.prod([K.shape[0] for K in factors])) != T:
            raise DimensionError("task factors do not match the task shape")
        noise = np.asarray(self.noise_vars, dtype=float).ravel()
        if noise.size == 1:
            noise = np.full(T, noise[0])
        if noise.shape != (T,) or np.any(noise <= 0):
            raise ValueError(f"need {T} positive noise variances")
        alloc = np.ones(T) if self.allocation is None else np.asarray(self.allocation, dtype=float).ravel()
        if alloc.shape != (T,) or np.any(alloc < 0) or alloc.sum() <= 0:
            raise ValueError(f"allocation must be {T} non-negative weights")
        alloc = alloc / alloc.sum()
        ref = self.reference_task_cov
        if ref is not None:
            ref = np.asarray(ref, dtype=float)
            if ref.shape != (T, T):
                raise DimensionError("reference task covariance has the wrong shape")
        object.__setattr__(self, "spectrum", lam)
        object.__setattr__(self, "task_factors", factors)
        object.__setattr__(self, "task_shape", task_shape)
        object.__setattr__(self, "noise_vars", noise)
        object.__setattr__(self, "allocation", alloc)
        object.__setattr__(self, "reference_task_cov", ref)

    @property
    def n_tasks(self):
        return int(np.prod(self.task_shape))

    @property
    def k(self):
        return self.spectrum.size

    def task_cov(self):
        """Learner's task covariance ``K_2 (x) ... (x) K_M``."""
        return KronChain(self.task_factors).materialize()

    def true_task_cov(self):
        return self.task_cov() if self.reference_task_cov is None else self.reference_task_cov

    def approximation_gap(self):
        """``tr P_t (Lambda'_ref - Lambda')`` per task; zero without a reference."""
        if self.reference_task_cov is None:
            return np.zeros(self.n_tasks)
        diff = np.diag(self.reference_task_cov) - np.diag(self.task_cov())
        return np.clip(diff, 0.0, None) * self.spectrum.sum()

    def prior_error(self):
        """``tr(P_t Lambda')`` under the data-generating prior, per task."""
        return np.diag(self.true_task_cov()) * self.spectrum.sum()


@dataclass
class CurveResult:
    grid: np.ndarray
    theory: np.ndarray
    sim_mean: np.ndarray
    sim_se: np.ndarray
    replicates: int
    seed: int
    failures: int = 0
    errors: np.ndarray = field(default=None, repr=False)

    def task_average(self):
        """Task-averaged ``(theory, sim_mean, sim_se)``; the SE is over replicates."""
        th = self.theory.mean(axis=1)
        if self.errors is None:
            return th, self.sim_mean.mean(axis=1), None
        avg = self.errors.mean(axis=2)
        n = avg.shape[0]
        se = avg.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(avg.shape[1])
        mean = avg.mean(axis=0)
        same = np.all(avg == avg[:1], axis=0)
        mean[same] = avg[0][same]
        se[same] = 0.0
        return th, mean, se

    def rows(self):
        """One ``(N, task, theory, sim_mean, sim_se, replicates)`` tuple per grid point and task."""
        out = []
        for g, N in enumerate(self.grid):
            for t in range(self.theory.shape[1]):
                sm = None if self.sim_mean is None else self.sim_mean[g, t]
                se = None if self.sim_se is None else self.sim_se[g, t]
                out.append((N, t, self.theory[g, t], sm, se, self.replicates))
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "task", "theory", "sim_mean", "sim_se", "replicates"])
        for N, t, th, sm, se, reps in self.rows():
            w.writerow([_fmt(N), t, repr(float(th)), "" if sm is None else repr(float(sm)),
                        "" if se is None else repr(float(se)), reps])
        return buf.getvalue()


def _fmt(N):
    N = float(N)
    return str(int(N)) if N.is_integer() else repr(N)


def ar1_matrix(n, rho):
    """``n x n`` correlation matrix with entries ``rho^|i - j|``."""
    idx = np.arange(n)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


def benchmark_problem(rho, modes=3, noise_var=0.05, k=10, decay=2.0, n_tasks=16,
                      structure="ar1"):
    """Identical-task benchmark with ``n_tasks`` tasks and correlation ``rho``.

    ``modes=2`` uses one ``n_tasks x n_tasks`` factor; ``modes=3`` uses two
    ``sqrt(n_tasks)``-sized factors.  ``structure`` picks the factor form:
    ``"exchangeable"`` (``rho`` everywhere off the diagonal) or ``"ar1"``
    (``rho^|i - j|``, whose eigenvalues are distinct for ``0 < rho < 1``).
    """
    make = {"exchangeable": rho_matrix, "ar1": ar1_matrix}.get(structure)
    if make is None:
        raise ValueError(f"unknown structure {structure!r}")
    if modes == 2:
        factors = (make(n_tasks, rho),)
    elif modes == 3:
        side = int(round(np.sqrt(n_tasks)))
        if side * side != n_tasks:
            raise ValueError("three modes need a square number of tasks")
        factors = (make(side, rho), make(side, rho))
    else:
        raise ValueError("modes must be 2 or 3")
    return CurveProblem(power_spectrum(k, decay), factors, noise_var)


@dataclass(frozen=True)
class LambdaPrime:
    """Weight-space prior ``Lambda'`` and the task projectors.

    ``projectors[t]`` is the 0/1 diagonal of ``P_t = (x)_m P_{t_m} (x) I_k``.
    """

    chain: KronChain
    projectors: np.ndarray

    def dense(self):
        return self.chain.materialize()


def build_lambda_prime(problem, reference=False):
    """``Lambda' = (x)_m K_m (x) Lambda`` as a Kronecker chain plus task projectors."""
    if reference and problem.reference_task_cov is not None:
        factors = (problem.reference_task_cov,)
    else:
        factors = problem.task_factors
    chain = KronChain(list(factors) + [np.diag(problem.spectrum)])
    T, k = problem.n_tasks, problem.k
    proj = np.kron(np.eye(T), np.ones(k))
    return LambdaPrime(chain, proj)


def _prior_factor(task_cov, spectrum, tol=1e-12):
    """``L`` with ``L L^T = task_cov (x) diag(spectrum)``, dropping null directions."""
    w, V = np.linalg.eigh(task_cov)
    keep = w > tol * max(w.max(), 0.0)
    Lt = V[:, keep] * np.sqrt(w[keep])
    return np.kron(Lt, np.diag(np.sqrt(spectrum)))


def allocate(total, weights):
    """Integer per-task counts summing to ``total`` (largest-remainder rounding)."""
    total = int(total)
    raw = total * np.asarray(weights, dtype=float)
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def sample_design(problem, counts, rng):
    """Draw ``psi(x)`` features for ``counts[t]`` points of every task.

    Returns
    -------
    features : ndarray, shape (N, k)
    tasks : ndarray of int, shape (N,)
    """
    counts = np.asarray(counts, dtype=int)
    tasks = np.repeat(np.arange(problem.n_tasks), counts)
    return rng.standard_normal((tasks.size, problem.k)), tasks


def _design_times(features, tasks, L, k):
    """``Psi @ L`` where ``Psi[j, t_j * k + i] = features[j, i]``."""
    Lb = L.reshape(-1, k, L.shape[1])
    return np.einsum("ji,jiq->jq", features, Lb[tasks])


def _check_design(problem, features, tasks):
    features = np.atleast_2d(np.asarray(features, dtype=float))
    tasks = np.asarray(tasks, dtype=int).ravel()
    if features.shape[0] != tasks.size:
        raise DimensionError("one task id per feature row is required")
    if tasks.size and features.shape[1] != problem.k:
        raise DimensionError(f"features need {problem.k} columns")
    if tasks.size and (tasks.min() < 0 or tasks.max() >= problem.n_tasks):
        raise IndexError(f"task ids must lie in [0, {problem.n_tasks})")
    return features, tasks


def _posterior_system(problem, features, tasks):
    L = _prior_factor(problem.task_cov(), problem.spectrum)
    d = problem.noise_vars[tasks]
    Phi = _design_times(features, tasks, L, problem.k)
    A = Phi.T @ (Phi / d[:, None])
    try:
        Lg, _ = robust_cholesky(np.eye(L.shape[1]) + A)
    except NumericalError as exc:
        raise NumericalError(f"Bayes error factorization failed: {exc}") from None
    return L, d, Phi, A, Lg


def bayes_error_exact(problem, features, tasks):
    """Bayes error of every task for one realized design.

    ``eps_t = tr P_t Lambda' - tr P_t Lambda' Psi^T (D + Psi Lambda' Psi^T)^{-1} Psi Lambda'``,
    computed as ``tr P_t L (I + L^T Psi^T D^-1 Psi L)^-1 L^T`` with
    ``L L^T = Lambda'``.  For a truncated problem the approximation gap is
    added (see :meth:`CurveProblem.approximation_gap`).

    Parameters
    ----------
    problem : CurveProblem
    features : ndarray, shape (N, k)
        ``psi(x)`` of every training input.
    tasks : ndarray of int, shape (N,)

    Returns
    -------
    ndarray, shape (T,)
    """
    features, tasks = _check_design(problem, features, tasks)
    if tasks.size == 0:
        return problem.prior_error()
    T, k = problem.n_tasks, problem.k
    L, _, _, _, Lg = _posterior_system(problem, features, tasks)
    V = linalg.solve_triangular(Lg, L.T, lower=True)
    err = np.sum(V**2, axis=0).reshape(T, k).sum(axis=1)
    return np.maximum(err, 0.0) + problem.approximation_gap()


def mismatch_error(problem, features, tasks):
    """Expected squared error of the learner's posterior mean under the reference prior.

    With learner prior ``Lambda_r`` and gain ``H = Lambda_r Psi^T (Psi Lambda_r Psi^T + D)^-1``
    the error covariance is ``(I - H Psi) Lambda' (I - H Psi)^T + H D H^T``.
    Equals :func:`bayes_error_exact` when the learner's prior is the
    reference one, and is never below the reference problem's Bayes error.
    """
    features, tasks = _check_design(problem, features, tasks)
    if tasks.size == 0:
        return problem.prior_error()
    T, k = problem.n_tasks, problem.k
    L, d, Phi, A, Lg = _posterior_system(problem, features, tasks)
    Psi = np.zeros((tasks.size, T * k))
    Psi[np.arange(tasks.size)[:, None], tasks[:, None] * k + np.arange(k)] = features
    Ginv = linalg.cho_solve((Lg, True), np.eye(L.shape[1]))
    J = L @ (Ginv @ (Phi.T @ (Psi / d[:, None])))
    Z = (np.eye(T * k) - J) @ _prior_factor(problem.true_task_cov(), problem.spectrum)
    LG = L @ Ginv
    diag = np.sum(Z**2, axis=1) + np.einsum("iq,qr,ir->i", LG, A, LG)
    return np.maximum(diag.reshape(T, k).sum(axis=1), 0.0)


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------


def _single_rhs(lam, noise, N, eps, mode):
    c = noise + eps
    if N == 0:
        return lam.sum()
    if mode == "full_rank":
        return np.sum(1.0 / (1.0 / lam + N / c))
    return lam.sum() - np.sum(lam**2 / (c / N + lam))


def _damped_fixed_point(rhs, eps0, damping, tol, max_iters):
    eps = np.array(eps0, dtype=float)
    clipped = False
    for it in range(1, max_iters + 1):
        new = (1.0 - damping) * eps + damping * rhs(eps)
        if np.any(new < 0):
            clipped = True
            new = np.maximum(new, 0.0)
        if np.max(np.abs(new - eps)) <= tol:
            return new, it, clipped
        eps = new
    raise ConvergenceError(f"fixed point did not converge in {max_iters} iterations", last=eps)


def lc_theory_single(spectrum, noise_var, N, mode="full_rank", damping=FIXED_POINT_DAMPING,
                     tol=FIXED_POINT_TOL, max_iters=FIXED_POINT_MAX_ITERS):
    """Single-task learning curve from the scalar self-consistency equation.

    ``mode="full_rank"``:      ``eps = tr(Lambda^-1 + N/(sigma^2 + eps) I)^-1``
    ``mode="rank_deficient"``: ``eps = tr Lambda - tr((sigma^2 + eps)/N I + Lambda)^-1 Lambda^2``
    """
    lam = np.asarray(spectrum, dtype=float).ravel()
    if N < 0:
        raise ValueError("N must be non-negative")
    if not noise_var > 0:
        raise ValueError("noise variance must be positive")
    if mode not in ("full_rank", "rank_deficient"):
        raise ValueError(f"unknown mode {mode!r}")
    if N == 0:
        return float(lam.sum())
    eps, _, _ = _damped_fixed_point(
        lambda e: _single_rhs(lam, noise_var, N, e, mode), lam.sum(), damping, tol, max_iters
    )
    return float(eps)


def _auto_mode(lp_eigs):
    return "rank_deficient" if lp_eigs.min() < 1e-12 * lp_eigs.max() else "full_rank"


def _multi_rhs_factory(task_cov, lam, noise, mode):
    T, k = task_cov.shape[0], lam.size
    Lp = np.kron(task_cov, np.diag(lam))
    if mode == "full_rank":
        Lp_inv = np.linalg.inv(Lp)
        Lp_inv = 0.5 * (Lp_inv + Lp_inv.T)

        def rhs(eps, n):
            a = np.repeat(n / (noise + eps), k)
            G = np.linalg.inv(Lp_inv + np.diag(a))
            return np.diag(G).reshape(T, k).sum(axis=1)
    else:
        def rhs(eps, n):
            sa = np.sqrt(np.repeat(n / (noise + eps), k))
            inner = np.eye(T * k) + sa[:, None] * Lp * sa[None, :]
            Li, _ = robust_cholesky(inner)
            V = linalg.solve_triangular(Li, sa[:, None] * Lp, lower=True)
            return (np.diag(Lp) - np.sum(V**2, axis=0)).reshape(T, k).sum(axis=1)
    return rhs, Lp


def _allocations(problem, grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        return grid, grid[:, None] * problem.allocation[None, :]
    if grid.ndim == 2 and grid.shape[1] == problem.n_tasks:
        return grid.sum(axis=1), grid
    raise DimensionError("grid must hold totals or one allocation row per grid point")


def lc_theory_multi(problem, grid, mode="auto", damping=FIXED_POINT_DAMPING,
                    tol=FIXED_POINT_TOL, max_iters=FIXED_POINT_MAX_ITERS, return_info=False):
    """Per-task learning curves from the coupled self-consistency equations.

    ``eps_t = tr P_t (Lambda'^-1 + sum_s n_s / (sigma_s^2 + eps_s) P_s)^-1``,
    or the equivalent Woodbury form when ``Lambda'`` is singular.  For a
    truncated problem the approximation gap ``tr P_t (Lambda'_ref - Lambda')``
    is added to the learning curve of the rank-``r`` model.

    Parameters
    ----------
    problem : CurveProblem
    grid : ndarray
        Either total sample sizes (split by ``problem.allocation``) or an
        array of per-task allocations with one row per grid point.
    mode : {"auto", "full_rank", "rank_deficient"}

    Returns
    -------
    eps : ndarray, shape (n_grid, T)
    info : dict, only if ``return_info``
    """
    totals, allocs = _allocations(problem, grid)
    if np.any(allocs < 0):
        raise ValueError("allocations must be non-negative")
    task_cov = problem.task_cov()
    lam = problem.spectrum
    gap = problem.approximation_gap()
    noise = problem.noise_vars
    if mode == "auto":
        mode = _auto_mode(np.kron(np.linalg.eigvalsh(task_cov), lam))
    if mode not in ("full_rank", "rank_deficient"):
        raise ValueError(f"unknown mode {mode!r}")
    rhs, Lp = _multi_rhs_factory(task_cov, lam, noise, mode)
    prior = np.diag(Lp).reshape(problem.n_tasks, lam.size).sum(axis=1)
    out = np.empty_like(allocs)
    iters, clipped = [], False
    for g, n in enumerate(allocs):
        if not np.any(n > 0):
            out[g] = prior
            iters.append(0)
            continue
        eps, it, cl = _damped_fixed_point(lambda e: rhs(e, n), prior, damping, tol, max_iters)
        out[g] = eps
        iters.append(it)
        clipped |= cl
    out = out + gap
    # no data anywhere: exactly the prior error
    out[~np.any(allocs > 0, axis=1)] = problem.prior_error()
    if return_info:
        return out, {"mode": mode, "iterations": iters, "clipped": clipped, "totals": totals}
    return out


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def lc_simulate(problem, grid, replicates=50, seed=0, assignment="random", theory=True):
    """Monte Carlo learning curves next to the theory.

    Each replicate draws one nested design from its own stream
    ``default_rng([seed, replicate])``: grid point ``N`` uses the first ``N``
    samples, and results do not depend on the order replicates run in.

    Parameters
    ----------
    problem : CurveProblem
    grid : sequence of int
        Total sample sizes.
    replicates : int
    seed : int
    assignment : {"random", "fixed"}
        ``"random"`` draws the task of every sample from ``problem.allocation``
        and compares with the theory at the expected allocation ``N * w``.
        ``"fixed"`` splits samples by :func:`allocate` and evaluates the
        theory on the same integer counts.
    theory : bool
        Skip the theory solve when False (``theory`` is then NaN).

    Returns
    -------
    CurveResult
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if assignment not in ("random", "fixed"):
        raise ValueError(f"unknown assignment {assignment!r}")
    grid = np.asarray(grid, dtype=float).ravel()
    if np.any(grid < 0) or np.any(grid != np.floor(grid)):
        raise ValueError("simulation grid must hold non-negative integers")
    T, k = problem.n_tasks, problem.k
    n_max = int(grid.max()) if grid.size else 0
    if assignment == "fixed":
        counts = np.array([allocate(N, problem.allocation) for N in grid])
    errors = np.full((replicates, grid.size, T), np.nan)
    failures = 0
    for r in range(replicates):
        rng = np.random.default_rng([int(seed), r])
        if assignment == "random":
            labels = rng.choice(T, size=n_max, p=problem.allocation)
            feats = rng.standard_normal((n_max, k))
        else:
            per_task = counts.max(axis=0)
            labels = np.repeat(np.arange(T), per_task)
            feats = rng.standard_normal((labels.size, k))
        try:
            for g, N in enumerate(grid.astype(int)):
                if assignment == "random":
                    sel = np.arange(N)
                else:
                    start = np.concatenate([[0], np.cumsum(per_task)[:-1]])
                    sel = np.concatenate([start[t] + np.arange(counts[g, t]) for t in range(T)])
                errors[r, g] = bayes_error_exact(problem, feats[sel], labels[sel])
        except NumericalError:
            errors[r] = np.nan
            failures += 1
    good = errors[~np.isnan(errors[:, 0, 0])]
    n_ok = good.shape[0]
    if n_ok == 0:
        raise NumericalError("every simulation replicate failed")
    mean = good.mean(axis=0)
    se = good.std(axis=0, ddof=1) / np.sqrt(n_ok) if n_ok > 1 else np.zeros_like(mean)
    # identical draws (e.g. N = 0): exact value, zero spread
    same = np.all(good == good[:1], axis=0)
    mean[same] = good[0][same]
    se[same] = 0.0
    if not theory:
        th = np.full_like(mean, np.nan)
    elif assignment == "fixed":
        th = lc_theory_multi(problem, counts)
    else:
        th = lc_theory_multi(problem, grid)
    return CurveResult(grid, th, mean, se, replicates, int(seed), failures, good)


def lowrank_truncate(problem, r):
    """Replace the task covariance by its best rank-``r`` PSD approximation.

    The original covariance is kept as the data-generating reference.
    """
    K = problem.task_cov()
    w, V = np.linalg.eigh(K)
    w, V = w[::-1], V[:, ::-1]
    full_rank = int(np.sum(w > 1e-10 * w[0]))
    if not 1 <= int(r) <= full_rank:
        raise ValueError(f"truncation rank must lie in [1, {full_rank}], got {r}")
    r = int(r)
    Kr = (V[:, :r] * w[:r]) @ V[:, :r].T
    Kr = 0.5 * (Kr + Kr.T)
    ref = problem.true_task_cov()
    return replace(problem, task_factors=(Kr,), rank_r=r, reference_task_cov=ref)


def lowrank_truncate_modes(problem, ranks):
    """Truncate every task factor ``K_m`` to its top-``R_m`` eigenspace.

    Keeps the Kronecker structure, so the total rank is ``prod R_m``; this is
    the low-rank variant of a model with one factor per task mode, as opposed
    to :func:`lowrank_truncate`, which truncates the flattened task covariance.
    """
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(problem.task_factors):
        raise DimensionError(f"need {len(problem.task_factors)} ranks, got {len(ranks)}")
    factors = []
    for K, R in zip(problem.task_factors, ranks):
        w, V = np.linalg.eigh(K)
        w, V = w[::-1], V[:, ::-1]
        full_rank = int(np.sum(w > 1e-10 * w[0]))
        if not 1 <= R <= full_rank:
            raise ValueError(f"mode rank must lie in [1, {full_rank}], got {R}")
        Kr = (V[:, :R] * w[:R]) @ V[:, :R].T
        factors.append(0.5 * (Kr + Kr.T))
    return replace(problem, task_factors=tuple(factors), rank_r=int(np.prod(ranks)),
                   reference_task_cov=problem.true_task_cov())
