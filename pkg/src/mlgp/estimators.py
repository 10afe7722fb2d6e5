"""scikit-learn style wrappers.

Both estimators take ``X`` whose first column is the flat task id and whose
remaining columns are the inputs.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .kernels import KernelSpec
from .model import MultiTaskDataset, TrainConfig, fit, predict
from .tensreg import als_fit, tensreg_predict

__all__ = ["MLGPRegressor", "TuckerRegressor", "split_task_column"]


def split_task_column(X, n_tasks):
    """Split ``X`` into integer task ids and the input block."""
    X = check_array(X, ensure_min_features=2)
    tasks = X[:, 0]
    if not np.all(tasks == np.floor(tasks)):
        raise ValueError("the first column must hold integer task ids")
    tasks = tasks.astype(np.int64)
    if tasks.min() < 0 or tasks.max() >= n_tasks:
        raise IndexError(f"task ids must lie in [0, {n_tasks})")
    return tasks, X[:, 1:]


def _dataset(X, y, task_shape):
    tasks, inputs = split_task_column(X, int(np.prod(task_shape)))
    y = check_array(y, ensure_2d=False, dtype=float)
    if y.shape[0] != inputs.shape[0]:
        raise ValueError(f"X has {inputs.shape[0]} rows but y has {y.shape[0]}")
    return MultiTaskDataset(task_shape, inputs, y, tasks)


class MLGPRegressor(RegressorMixin, BaseEstimator):
    """Multi-linear GP regressor trained by marginal likelihood.

    Parameters
    ----------
    mode_dims : tuple of int
        ``(T_1, T_2, ..., T_M)``.  ``T_1`` is the number of input columns,
        or the feature-map size when ``feature_kernel`` is given.
    ranks : tuple of int
    feature_kernel : KernelSpec or dict, optional
    max_iters, grad_tol, seed, tie_noise, reorthonormalize, init_scale
        See :class:`mlgp.model.TrainConfig`.
    """

    def __init__(self, mode_dims=(1, 1), ranks=(1, 1), feature_kernel=None, max_iters=500,
                 grad_tol=1e-6, seed=0, tie_noise=False, reorthonormalize=True, init_scale=1.0):
        self.mode_dims = mode_dims
        self.ranks = ranks
        self.feature_kernel = feature_kernel
        self.max_iters = max_iters
        self.grad_tol = grad_tol
        self.seed = seed
        self.tie_noise = tie_noise
        self.reorthonormalize = reorthonormalize
        self.init_scale = init_scale

    def fit(self, X, y):
        mode_dims = tuple(int(t) for t in self.mode_dims)
        data = _dataset(X, y, mode_dims[1:])
        kern = self.feature_kernel
        if isinstance(kern, dict):
            kern = KernelSpec.from_dict(kern)
        config = TrainConfig(self.max_iters, self.grad_tol, self.seed, self.tie_noise,
                             self.reorthonormalize, self.init_scale)
        self.model_ = fit(data, mode_dims, self.ranks, config, feature_kernel=kern)
        self.train_data_ = data
        self.n_features_in_ = data.X.shape[1] + 1
        return self

    def predict(self, X, return_std=False):
        """Posterior mean; with ``return_std`` also the latent standard deviation."""
        check_is_fitted(self, "model_")
        tasks, inputs = split_task_column(X, self.train_data_.n_tasks)
        post = predict(self.model_, self.train_data_, inputs, tasks)
        if return_std:
            return post.mean, np.sqrt(post.variance)
        return post.mean


class TuckerRegressor(RegressorMixin, BaseEstimator):
    """Linear multi-task regression with a Tucker-constrained weight tensor.

    Parameters
    ----------
    task_shape : tuple of int
        ``(T_2, ..., T_M)``.
    ranks : tuple of int
        ``(R_1, ..., R_M)``; ``R_1`` applies to the input dimension.
    sweeps, ridge, tol, seed
        See :func:`mlgp.tensreg.als_fit`.
    """

    def __init__(self, task_shape=(1,), ranks=(1, 1), sweeps=20, ridge=None, tol=0.0, seed=0):
        self.task_shape = task_shape
        self.ranks = ranks
        self.sweeps = sweeps
        self.ridge = ridge
        self.tol = tol
        self.seed = seed

    def fit(self, X, y):
        data = _dataset(X, y, tuple(int(t) for t in self.task_shape))
        self.model_ = als_fit(data, self.ranks, self.sweeps, self.ridge, self.seed, self.tol)
        self.n_features_in_ = data.X.shape[1] + 1
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        tasks, inputs = split_task_column(X, int(np.prod(self.model_.mode_dims[1:])))
        return tensreg_predict(self.model_, inputs, tasks)
