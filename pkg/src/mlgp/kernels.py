"""Base kernels and Kronecker-product helpers.

Ordering convention used everywhere in the package: in a Kronecker chain
``[A_1, ..., A_M]`` the *last* factor varies fastest in the row and column
index, which is exactly :func:`numpy.kron` applied left to right.  The MLGP
covariance chain is therefore written ``[U_M, ..., U_2, U_1]`` so that the
feature mode (mode 1) is the fastest index, matching column-major
vectorization of a Tucker core.
"""

from dataclasses import dataclass
from enum import Enum
from functools import reduce

import numpy as np
from scipy import linalg

from .exceptions import DimensionError, NumericalError

__all__ = [
    "KernelFamily",
    "KernelSpec",
    "KronChain",
    "kernel_eval",
    "gram_matrix",
    "kron",
    "kron_chain_matvec",
    "utilde_row",
    "feature_map",
    "robust_cholesky",
]

# Refuse to materialize anything larger than this many entries.
MAX_ELEMENTS = 2**28


class KernelFamily(str, Enum):
    LINEAR = "linear"
    SQEXP = "sqexp"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class KernelSpec:
    """Scalar base kernel with parameters ``(a, b, c)``.

    * linear: ``a + b (x - c)(x' - c)``
    * sqexp: ``a exp(-(x - x')^2 / (2c))``
    * periodic: ``a exp(-sin^2(pi |x - x'|) / c)``

    ``b`` is only used by the linear family.
    """

    family: KernelFamily
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        for name in ("a", "b", "c"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"kernel parameter {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.family is not KernelFamily.LINEAR:
            if self.a <= 0:
                raise ValueError(f"{self.family.value} kernel needs a > 0, got {self.a}")
            if self.c <= 0:
                raise ValueError(f"{self.family.value} kernel needs c > 0, got {self.c}")

    def to_dict(self):
        return {"family": self.family.value, "a": self.a, "b": self.b, "c": self.c}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], d.get("a", 1.0), d.get("b", 1.0), d.get("c", 1.0))


def _evaluate(spec, x, xp):
    if spec.family is KernelFamily.LINEAR:
        return spec.a + spec.b * (x - spec.c) * (xp - spec.c)
    if spec.family is KernelFamily.SQEXP:
        return spec.a * np.exp(-((x - xp) ** 2) / (2.0 * spec.c))
    return spec.a * np.exp(-np.sin(np.pi * np.abs(x - xp)) ** 2 / spec.c)


def kernel_eval(spec, x, xp):
    """Evaluate the base kernel on two scalars."""
    return float(_evaluate(spec, float(x), float(xp)))


def gram_matrix(spec, points):
    """Return ``G[i, j] = k(points[i], points[j])``."""
    points = np.asarray(points, dtype=float).ravel()
    if points.size == 0:
        raise DimensionError("gram_matrix needs at least one point")
    G = _evaluate(spec, points[:, None], points[None, :])
    # exact symmetry; the formulas are symmetric but rounding in (x-c)(x'-c) is not
    return 0.5 * (G + G.T)


def _check_size(rows, cols):
    if rows * cols > MAX_ELEMENTS:
        raise DimensionError(
            f"Kronecker product of size {rows}x{cols} exceeds {MAX_ELEMENTS} entries"
        )


def kron(A, B):
    """Kronecker product ``A (x) B``; ``B`` is the fast index."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise DimensionError("kron operands must be non-empty")
    _check_size(A.shape[0] * B.shape[0], A.shape[1] * B.shape[1])
    return np.kron(A, B)


@dataclass(frozen=True)
class KronChain:
    """Lazy Kronecker product ``factors[0] (x) factors[1] (x) ...``."""

    factors: tuple

    def __init__(self, factors):
        mats = tuple(np.atleast_2d(np.asarray(f, dtype=float)) for f in factors)
        if not mats:
            raise DimensionError("KronChain needs at least one factor")
        object.__setattr__(self, "factors", mats)

    @property
    def shape(self):
        rows = int(np.prod([f.shape[0] for f in self.factors]))
        cols = int(np.prod([f.shape[1] for f in self.factors]))
        return rows, cols

    def materialize(self):
        _check_size(*self.shape)
        return reduce(np.kron, self.factors)

    def matvec(self, v):
        return kron_chain_matvec(self, v)

    def __matmul__(self, v):
        return self.matvec(v)


def kron_chain_matvec(chain, v):
    """Multiply a :class:`KronChain` with a vector without materializing it.

    ``v`` is reshaped so that its first axis matches the first factor (the
    slowest index); each factor is then applied along its own axis.
    """
    if not isinstance(chain, KronChain):
        chain = KronChain(chain)
    v = np.asarray(v, dtype=float)
    rows, cols = chain.shape
    if v.ndim != 1 or v.shape[0] != cols:
        raise DimensionError(f"vector of length {v.shape} does not match chain with {cols} columns")
    t = v.reshape([f.shape[1] for f in chain.factors])
    for axis, A in enumerate(chain.factors):
        t = np.moveaxis(np.tensordot(A, t, axes=([1], [axis])), 0, axis)
    return t.reshape(rows)


def utilde_row(U_factors, task_idx, phi_x):
    """One row of ``phi(X) (U_M (x) ... (x) U_1)`` for a single observation.

    Parameters
    ----------
    U_factors : sequence of ndarray
        ``[U_1, ..., U_M]``, with ``U_1`` acting on the feature vector.
    task_idx : sequence of int
        ``(t_2, ..., t_M)``; row ``t_m`` of ``U_m`` is selected.
    phi_x : ndarray, shape (T_1,)
        Feature vector of the observation.

    Returns
    -------
    row : ndarray, shape (prod R_m,)
    """
    U_factors = [np.atleast_2d(np.asarray(U, dtype=float)) for U in U_factors]
    phi_x = np.asarray(phi_x, dtype=float).ravel()
    task_idx = tuple(int(t) for t in task_idx)
    if len(task_idx) != len(U_factors) - 1:
        raise DimensionError(
            f"expected {len(U_factors) - 1} task indices, got {len(task_idx)}"
        )
    if phi_x.shape[0] != U_factors[0].shape[0]:
        raise DimensionError(
            f"feature vector has length {phi_x.shape[0]}, U_1 has {U_factors[0].shape[0]} rows"
        )
    pieces = []
    for U, t in zip(U_factors[:0:-1], task_idx[::-1]):
        if not 0 <= t < U.shape[0]:
            raise IndexError(f"task index {t} out of range for factor with {U.shape[0]} rows")
        pieces.append(U[t])
    pieces.append(phi_x @ U_factors[0])
    return reduce(np.kron, pieces)


def feature_map(X, spec=None, n_features=None):
    """Finite feature map ``phi``.

    With ``spec=None`` this is the identity.  Otherwise the inputs must be
    scalar and ``phi(x)_j = k(x, z_j)`` for ``n_features`` anchors ``z_j``
    evenly spaced on ``[0, 1]``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if spec is None:
        return X
    if X.shape[1] != 1:
        raise DimensionError("a kernel feature map needs scalar inputs (one column)")
    if n_features is None or n_features < 1:
        raise DimensionError("a kernel feature map needs n_features >= 1")
    anchors = np.linspace(0.0, 1.0, int(n_features))
    return _evaluate(spec, X, anchors[None, :])


def robust_cholesky(A, max_tries=10):
    """Lower Cholesky factor of a symmetric PSD matrix with adaptive jitter.

    Jitter starts at ``1e-10 * trace(A) / n`` and doubles at most
    ``max_tries`` times.

    Returns
    -------
    L : ndarray
        Lower-triangular factor.
    jitter : float
        Diagonal jitter that was added (0.0 if none was needed).
    """
    A = np.asarray(A, dtype=float)
    try:
        return linalg.cholesky(A, lower=True, check_finite=True), 0.0
    except (linalg.LinAlgError, ValueError):
        pass
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix contains non-finite entries")
    n = A.shape[0]
    jitter = max(1e-10 * np.trace(A) / n, np.finfo(float).tiny)
    eye = np.eye(n)
    for _ in range(max_tries + 1):
        try:
            return linalg.cholesky(A + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalError(f"Cholesky failed with jitter up to {jitter / 2.0:.3g}")
