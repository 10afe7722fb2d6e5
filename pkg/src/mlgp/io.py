"""File formats: dataset CSV, curve CSV, model JSON; all writes are atomic.

Dataset CSV
    Header ``task,y,x1,...,xD`` with a flat task id, or ``g2,...,gM,y,x1,...``
    with one index per task mode (row-major: ``t = g2 * T3 + g3``).  Several
    output columns are written ``y1,...,yP``.

Floats are written with ``repr``, the shortest string that reads back to
the same double.
"""

import csv
import io as _io
import json
import os
import tempfile

import numpy as np

from .exceptions import DataFormatError
from .model import MLGPModel, MultiTaskDataset
from .tensreg import TuckerModel

__all__ = [
    "atomic_write_text",
    "load_dataset",
    "save_dataset",
    "dataset_to_csv",
    "save_json",
    "load_json",
    "model_document",
    "model_from_document",
]


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and ``os.replace``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _num(v):
    return repr(float(v))


def dataset_to_csv(data, explicit_modes=False):
    P = data.n_outputs
    ycols = ["y"] if P == 1 else [f"y{p + 1}" for p in range(P)]
    xcols = [f"x{d + 1}" for d in range(data.X.shape[1])]
    if explicit_modes:
        tcols = [f"g{m + 2}" for m in range(len(data.task_shape))]
        tids = data.task_indices().T
    else:
        tcols = ["task"]
        tids = data.tasks[:, None]
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(tcols + ycols + xcols)
    for t, y, x in zip(tids, data.Y, data.X):
        w.writerow([str(int(i)) for i in t] + [_num(v) for v in y] + [_num(v) for v in x])
    return buf.getvalue()


def save_dataset(data, path, explicit_modes=False):
    atomic_write_text(path, dataset_to_csv(data, explicit_modes))


def _parse_header(header, n_modes):
    header = [h.strip() for h in header]
    if header and header[0] == "task":
        tcols = 1
    elif header[: n_modes] == [f"g{m + 2}" for m in range(n_modes)]:
        tcols = n_modes
    else:
        raise DataFormatError("line 1: header must start with 'task' or 'g2,...'")
    rest = header[tcols:]
    ycols = [i for i, h in enumerate(rest) if h == "y" or (h[:1] == "y" and h[1:].isdigit())]
    if not ycols or ycols != list(range(len(ycols))):
        raise DataFormatError("line 1: expected target column(s) 'y' or 'y1,...' after the task columns")
    xcols = rest[len(ycols):]
    if not xcols or xcols != [f"x{d + 1}" for d in range(len(xcols))]:
        raise DataFormatError("line 1: expected input columns 'x1,...,xD' after the targets")
    return tcols, len(ycols), len(xcols)


def load_dataset(path, task_shape):
    """Read a dataset CSV.

    Parameters
    ----------
    path : str or path-like
    task_shape : tuple of int
        ``(T_2, ..., T_M)``; tasks without rows get ``n_t = 0``.

    Raises
    ------
    FileNotFoundError
    DataFormatError
        Malformed rows, non-finite targets or out-of-range task ids; the
        message names the line.
    """
    task_shape = tuple(int(t) for t in task_shape)
    n_tasks = int(np.prod(task_shape))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("line 1: file is empty") from None
        tcols, P, D = _parse_header(header, len(task_shape))
        width = tcols + P + D
        tasks, Y, X = [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataFormatError(f"line {line}: expected {width} fields, got {len(row)}")
            try:
                tid = [int(c) for c in row[:tcols]]
                vals = [float(c) for c in row[tcols:]]
            except ValueError as exc:
                raise DataFormatError(f"line {line}: {exc}") from None
            if tcols == 1:
                t = tid[0]
            else:
                if any(not 0 <= g < T for g, T in zip(tid, task_shape)):
                    raise DataFormatError(f"line {line}: task index {tid} outside {task_shape}")
                t = int(np.ravel_multi_index(tid, task_shape))
            if not 0 <= t < n_tasks:
                raise DataFormatError(f"line {line}: task id {t} outside [0, {n_tasks})")
            y = vals[:P]
            if not np.all(np.isfinite(y)):
                raise DataFormatError(f"line {line}: target is not finite")
            if not np.all(np.isfinite(vals[P:])):
                raise DataFormatError(f"line {line}: input is not finite")
            tasks.append(t)
            Y.append(y)
            X.append(vals[P:])
    X = np.array(X, dtype=float).reshape(-1, D)
    Y = np.array(Y, dtype=float).reshape(-1, P)
    return MultiTaskDataset(task_shape, X, Y, np.array(tasks, dtype=np.int64))


def _dumps(doc):
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_json(doc, path):
    atomic_write_text(path, _dumps(doc))


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from None


def model_document(model, config=None, extra=None):
    """JSON-ready document for an :class:`MLGPModel` or :class:`TuckerModel`."""
    if isinstance(model, MLGPModel):
        doc = {"type": "mlgp", "model": model.to_dict()}
        if model.fit_info is not None:
            info = model.fit_info
            doc["fit"] = {k: info[k] for k in ("nll", "n_iter", "status", "converged", "grad_norm")}
    elif isinstance(model, TuckerModel):
        doc = {"type": "tucker", "model": model.to_dict()}
        doc["fit"] = {"objective_trace": list(model.objective_trace)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    if config is not None:
        doc["config"] = config
    if extra:
        doc.update(extra)
    return doc


def model_from_document(doc):
    kind = doc.get("type")
    if kind == "mlgp":
        return MLGPModel.from_dict(doc["model"])
    if kind == "tucker":
        return TuckerModel.from_dict(doc["model"])
    raise DataFormatError(f"unknown model type {kind!r}")
