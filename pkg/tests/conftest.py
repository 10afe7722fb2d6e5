import numpy as np
import pytest

from mlgp.model import MLGPModel, MultiTaskDataset, build_utilde, nll_woodbury
from mlgp.tensreg import tucker_reconstruct


def random_instance(rng, n_modes=3, n_samples=30, n_outputs=1, hetero=True):
    """Random non-orthonormal model and data with ``n_modes`` modes."""
    dims = tuple(int(v) for v in rng.integers(2, 5, size=n_modes))
    ranks = tuple(int(rng.integers(1, T + 1)) for T in dims)
    n_tasks = int(np.prod(dims[1:]))
    factors = [rng.standard_normal((T, R)) for T, R in zip(dims, ranks)]
    noise = rng.uniform(0.3, 2.0, n_tasks) if hetero else np.full(n_tasks, 0.7)
    model = MLGPModel(dims, ranks, factors, noise, float(rng.uniform(0.5, 2.0)))
    X = rng.standard_normal((n_samples, dims[0]))
    tasks = rng.integers(0, n_tasks, n_samples)
    Y = rng.standard_normal((n_samples, n_outputs))
    return model, MultiTaskDataset(dims[1:], X, Y, tasks)


def planted(seed, dims, ranks, n_per, n_outputs, snr):
    """Data from an orthonormal MLGP with signal-to-noise ratio ``snr``."""
    rng = np.random.default_rng(seed)
    U = [np.linalg.qr(rng.standard_normal((T, R)))[0] for T, R in zip(dims, ranks)]
    n_tasks = int(np.prod(dims[1:]))
    tasks = np.repeat(np.arange(n_tasks), n_per)
    X = rng.standard_normal((tasks.size, dims[0]))
    truth = MLGPModel(dims, ranks, U, np.ones(n_tasks), 1.0)
    Ut = build_utilde(truth, MultiTaskDataset(dims[1:], X, np.zeros(tasks.size), tasks))
    F = Ut @ rng.standard_normal((Ut.shape[1], n_outputs))
    nv = np.mean(np.sum(Ut**2, axis=1)) / snr
    Y = F + np.sqrt(nv) * rng.standard_normal(F.shape)
    data = MultiTaskDataset(dims[1:], X, Y, tasks)
    return data, MLGPModel(dims, ranks, U, np.full(n_tasks, nv), 1.0)


def planted_tucker(seed, dims=(5, 3, 4), ranks=(2, 2, 2), noise=0.0, n=None):
    """Linear multi-task data from a Tucker weight tensor with orthonormal factors."""
    rng = np.random.default_rng(seed)
    U = [np.linalg.qr(rng.standard_normal((T, R)))[0] for T, R in zip(dims, ranks)]
    W = tucker_reconstruct(rng.standard_normal(ranks), *U)
    n_tasks = int(np.prod(dims[1:]))
    N = n or 10 * int(np.prod(ranks)) * max(dims)
    tasks = rng.integers(0, n_tasks, N)
    X = rng.standard_normal((N, dims[0]))
    y = np.einsum("nd,dn->n", X, W.reshape(dims[0], -1)[:, tasks]) + noise * rng.standard_normal(N)
    return MultiTaskDataset(dims[1:], X, y, tasks), W


def monotone(trace):
    t = np.asarray(trace)
    return bool(np.all(np.diff(t) <= 1e-12 * np.abs(t[:-1]) + 1e-14))


def with_params(model, factors=None, noise=None, amp=None):
    return MLGPModel(
        model.mode_dims,
        model.ranks,
        model.effective_factors if factors is None else factors,
        model.noise_vars if noise is None else noise,
        model.core_amp if amp is None else amp,
        feature_kernel=model.feature_kernel,
    )


def fd_gradient_errors(model, data, grad, h=1e-5, floor=1e-8):
    """Relative errors of every analytic gradient entry against central differences."""
    errs = []

    def rel(fd, an):
        return abs(fd - an) / max(abs(fd), floor)

    E = [np.array(e) for e in model.effective_factors]
    for k, Ek in enumerate(E):
        for idx in np.ndindex(Ek.shape):
            Ep = [e.copy() for e in E]
            Em = [e.copy() for e in E]
            Ep[k][idx] += h
            Em[k][idx] -= h
            fd = (nll_woodbury(with_params(model, factors=Ep), data)
                  - nll_woodbury(with_params(model, factors=Em), data)) / (2 * h)
            errs.append(rel(fd, grad.factors[k][idx]))
    for t in range(model.noise_vars.size):
        up = model.noise_vars.copy()
        dn = model.noise_vars.copy()
        up[t] *= np.exp(h)
        dn[t] *= np.exp(-h)
        fd = (nll_woodbury(with_params(model, noise=up), data)
              - nll_woodbury(with_params(model, noise=dn), data)) / (2 * h)
        errs.append(rel(fd, grad.log_noise_vars[t]))
    fd = (nll_woodbury(with_params(model, amp=model.core_amp * np.exp(h)), data)
          - nll_woodbury(with_params(model, amp=model.core_amp * np.exp(-h)), data)) / (2 * h)
    errs.append(rel(fd, grad.log_core_amp))
    return np.array(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
