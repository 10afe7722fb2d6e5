"""Tucker-constrained multi-task tensor regression fitted by ALS.

Task ``t`` owns the weight vector ``w_t = W[:, t_2, ..., t_M]`` with
``(t_2, ..., t_M)`` the row-major unravelling of ``t``; a prediction is
``<x, w_t>``.  The weight tensor is kept in Tucker form
``W = S x_1 U_1 x_2 U_2 ... x_M U_M`` with orthonormal ``U_m``.
"""

from dataclasses import dataclass, field
import warnings

import numpy as np
from scipy import linalg

from .exceptions import DegenerateSubspaceError, DimensionError

__all__ = [
    "TuckerModel",
    "tucker_reconstruct",
    "mode_product",
    "unfold",
    "als_fit",
    "tensreg_predict",
    "tensreg_objective",
    "principal_angles",
]


def mode_product(T, U, mode):
    """``T x_mode U``: multiply mode ``mode`` of ``T`` by the matrix ``U``."""
    U = np.asarray(U, dtype=float)
    if U.shape[1] != T.shape[mode]:
        raise DimensionError(f"factor with {U.shape[1]} columns cannot act on mode of size {T.shape[mode]}")
    return np.moveaxis(np.tensordot(U, T, axes=([1], [mode])), 0, mode)


def unfold(T, mode):
    """Mode-``mode`` unfolding, shape ``(T.shape[mode], -1)``."""
    return np.moveaxis(T, mode, 0).reshape(T.shape[mode], -1)


def tucker_reconstruct(S, *factors):
    """``W = S x_1 U_1 x_2 U_2 ...``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != len(factors):
        raise DimensionError(f"core has {S.ndim} modes but {len(factors)} factors were given")
    W = S
    for m, U in enumerate(factors):
        W = mode_product(W, U, m)
    return W


@dataclass(frozen=True, eq=False)
class TuckerModel:
    core: np.ndarray
    factors: tuple
    rank_deficient: bool = False
    objective_trace: list = field(default_factory=list, repr=False)

    def __eq__(self, other):
        if not isinstance(other, TuckerModel):
            return NotImplemented
        return (
            self.rank_deficient == other.rank_deficient
            and np.array_equal(self.core, other.core)
            and len(self.factors) == len(other.factors)
            and all(np.array_equal(a, b) for a, b in zip(self.factors, other.factors))
        )

    __hash__ = None

    @property
    def ranks(self):
        return self.core.shape

    @property
    def mode_dims(self):
        return tuple(U.shape[0] for U in self.factors)

    @property
    def weights(self):
        return tucker_reconstruct(self.core, *self.factors)

    def task_weights(self):
        """Matrix whose column ``t`` is ``w_t`` (shape ``(T_1, prod T_m)``)."""
        W = self.weights
        return W.reshape(W.shape[0], -1)

    def to_dict(self):
        return {
            "core_shape": list(self.core.shape),
            "core": self.core.ravel().tolist(),
            "factors": [U.tolist() for U in self.factors],
            "rank_deficient": bool(self.rank_deficient),
            "convention": "mode1-fastest",
        }

    @classmethod
    def from_dict(cls, d):
        core = np.array(d["core"], dtype=float).reshape(d["core_shape"])
        factors = tuple(np.array(U, dtype=float) for U in d["factors"])
        return cls(core, factors, bool(d.get("rank_deficient", False)))


def _selectors(data):
    """Per-mode row blocks of the "input" to each factor: ``X`` and task indices."""
    return data.X, data.task_indices()


def _mode_rows(X, task_idx, factors):
    rows = [X @ factors[0]]
    for m in range(1, len(factors)):
        rows.append(factors[m][task_idx[m - 1]])
    return rows


def _contract_except(S, rows, keep):
    """``c[n, r_keep] = sum_{r_other} S[r] prod_{k != keep} rows[k][n, r_k]``."""
    out = np.broadcast_to(S, (rows[0].shape[0],) + S.shape)
    # contract from the last mode so axis positions stay valid
    for k in range(len(rows) - 1, -1, -1):
        if k == keep:
            continue
        out = np.einsum("n...i,ni->n...", np.moveaxis(out, k + 1, -1), rows[k])
    return out


def _predict_rows(S, rows):
    return np.sum(_contract_except(S, rows, 0) * rows[0], axis=1)


def tensreg_objective(model, data, ridge):
    X, task_idx = _selectors(data)
    rows = _mode_rows(X, task_idx, model.factors)
    resid = data.y - _predict_rows(model.core, rows)
    return float(resid @ resid + ridge * np.sum(model.core**2))


def _lstsq(A, b):
    sol, _, rank, _ = linalg.lstsq(A, b, lapack_driver="gelsd")
    return sol, rank < A.shape[1]


def _psd_sqrt(G):
    w, V = np.linalg.eigh(G)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _initial_weights(data, dims):
    """Task-wise minimum-norm least squares, folded into a tensor."""
    T1 = dims[0]
    cols = np.zeros((T1, data.n_tasks))
    y = data.y
    for t in np.flatnonzero(data.counts):
        rows = data.tasks == t
        cols[:, t] = linalg.lstsq(data.X[rows], y[rows])[0]
    return cols.reshape(dims)


def als_fit(data, ranks, sweeps=20, ridge=None, seed=0, tol=0.0):
    """Fit a Tucker-constrained linear multi-task model by alternating least squares.

    Minimizes ``sum_{t,i} (y_ti - <x_ti, w_t>)^2 + ridge ||S||^2``.  Each
    block update (the core, or one factor) is an exact regularized least
    squares solve; factors are QR-retracted afterwards with the triangular
    part absorbed into the core, which leaves ``W`` and the objective
    unchanged.

    Parameters
    ----------
    data : MultiTaskDataset
        Single-output data; ``X`` has ``T_1`` columns.
    ranks : sequence of int
        ``(R_1, ..., R_M)``.
    sweeps : int
    ridge : float, optional
        Defaults to ``1e-8 * N``.
    seed : int
        Only used if the spectral initialization is degenerate.
    tol : float
        Stop early when a sweep improves the objective by less than
        ``tol`` (relative).

    Returns
    -------
    TuckerModel
    """
    if data.n_outputs != 1:
        raise DimensionError("tensor regression takes a single output column")
    N = data.n_samples
    if N < 1:
        raise DimensionError("need at least one observation")
    dims = (data.X.shape[1],) + tuple(data.task_shape)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims):
        raise DimensionError(f"need {len(dims)} ranks, got {len(ranks)}")
    for T, R in zip(dims, ranks):
        if not 1 <= R <= T:
            raise ValueError(f"rank {R} must lie in [1, {T}]")
    ridge = 1e-8 * N if ridge is None else float(ridge)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")

    X, task_idx = _selectors(data)
    y = data.y
    n_modes = len(dims)

    # spectral start: HOSVD of the task-wise least-squares tensor
    W0 = _initial_weights(data, dims)
    factors = []
    rng = np.random.default_rng(seed)
    for m, R in enumerate(ranks):
        Um = np.linalg.svd(unfold(W0, m), full_matrices=False)[0][:, :R]
        if Um.shape[1] < R or not np.any(W0):
            Um = np.linalg.qr(rng.standard_normal((dims[m], R)))[0]
        factors.append(Um)
    S = W0
    for m, U in enumerate(factors):
        S = mode_product(S, U.T, m)

    deficient = False
    sqrt_ridge = np.sqrt(ridge)

    def update_core(S):
        rows = _mode_rows(X, task_idx, factors)
        design = rows[-1]
        for A in rows[-2::-1]:
            design = (design[:, :, None] * A[:, None, :]).reshape(N, -1)
        R = design.shape[1]
        if ridge > 0:
            A = np.vstack([design, sqrt_ridge * np.eye(R)])
            b = np.concatenate([y, np.zeros(R)])
        else:
            A, b = design, y
        s, bad = _lstsq(A, b)
        # design columns follow vec_F(S): mode 1 fastest
        return s.reshape(ranks, order="F"), bad

    def update_factor(S, m):
        rows = _mode_rows(X, task_idx, factors)
        c = _contract_except(S, rows, m)
        Tm, Rm = dims[m], ranks[m]
        if m == 0:
            design = (X[:, :, None] * c[:, None, :]).reshape(N, Tm * Rm)
        else:
            design = np.zeros((N, Tm, Rm))
            design[np.arange(N), task_idx[m - 1]] = c
            design = design.reshape(N, Tm * Rm)
        if ridge > 0:
            Sm = unfold(S, m)
            pen = np.kron(np.eye(Tm), _psd_sqrt(Sm @ Sm.T))
            A = np.vstack([design, sqrt_ridge * pen])
            b = np.concatenate([y, np.zeros(pen.shape[0])])
        else:
            A, b = design, y
        u, bad = _lstsq(A, b)
        Um = u.reshape(Tm, Rm)
        Q, Rr = np.linalg.qr(Um)
        return Q, mode_product(S, Rr, m), bad

    def objective(S):
        rows = _mode_rows(X, task_idx, factors)
        resid = y - _predict_rows(S, rows)
        return float(resid @ resid + ridge * np.sum(S**2))

    S, bad = update_core(S)
    deficient |= bad
    trace = [objective(S)]
    for _ in range(int(sweeps)):
        for m in range(n_modes):
            factors[m], S, bad = update_factor(S, m)
            deficient |= bad
            S, bad = update_core(S)
            deficient |= bad
        trace.append(objective(S))
        if tol > 0 and trace[-2] - trace[-1] <= tol * max(abs(trace[-2]), 1e-300):
            break
    if deficient and ridge == 0:
        warnings.warn("rank-deficient normal equations; solved with a pseudo-inverse", RuntimeWarning)
    return TuckerModel(S, tuple(factors), bool(deficient and ridge == 0), trace)


def tensreg_predict(model, X, tasks):
    """``y_hat = <x, w_t>`` for each query row."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    tasks = np.asarray(tasks, dtype=np.int64).ravel()
    task_shape = model.mode_dims[1:]
    n_tasks = int(np.prod(task_shape))
    if tasks.size and (tasks.min() < 0 or tasks.max() >= n_tasks):
        raise IndexError(f"task ids must lie in [0, {n_tasks})")
    if X.shape[1] != model.mode_dims[0]:
        raise DimensionError(f"queries have {X.shape[1]} features, model expects {model.mode_dims[0]}")
    Wt = model.task_weights()
    return np.einsum("nd,dn->n", X, Wt[:, tasks])


def principal_angles(A, B, tol=1e-10):
    """Principal angles between ``span(A)`` and ``span(B)``, ascending, in radians.

    Small angles are resolved from sines rather than ``arccos`` of the
    cosines, which keeps them accurate near zero.
    """
    # a 1-D input is a single basis vector
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A[:, None] if A.ndim == 1 else A
    B = B[:, None] if B.ndim == 1 else B
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f"bases live in different spaces: {A.shape[0]} vs {B.shape[0]} rows")
    for M in (A, B):
        s = np.linalg.svd(M, compute_uv=False)
        if s.size == 0 or s[0] == 0 or s[-1] < tol * s[0]:
            raise DegenerateSubspaceError("basis is rank deficient")
    return np.sort(np.clip(linalg.subspace_angles(A, B), 0.0, np.pi / 2))
