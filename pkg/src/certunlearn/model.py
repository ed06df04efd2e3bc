"""Parameter vectors, datasets, retain/forget splits and empirical-loss assembly.

Parameters are plain 1-D ``float64`` numpy arrays that have been validated by
:func:`as_params` (finite, read-only). Per-sample losses and gradients come
from a :class:`LossModel`; the empirical quantities here average them in a
fixed index order so that repeated runs are bit-identical.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvaluationError(ValueError):
    """A loss or gradient evaluation produced a non-finite value."""


class SplitError(ValueError):
    """Invalid retain/forget partition."""


def as_params(values, copy: bool = True) -> np.ndarray:
    """Validate ``values`` as a parameter vector and return a read-only array."""
    theta = (np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)).reshape(-1)
    if theta.size == 0:
        raise ValueError("parameter vector must have dim >= 1")
    if not np.all(np.isfinite(theta)):
        bad = int(np.flatnonzero(~np.isfinite(theta))[0])
        raise EvaluationError(f"parameter vector has non-finite entry at index {bad}")
    theta.flags.writeable = False
    return theta


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered samples: feature rows ``X`` (n x p) and labels ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx])

    def fingerprint(self) -> int:
        """Order-sensitive 64-bit content hash (little-endian canonical bytes)."""
        h = hashlib.blake2b(digest_size=8)
        h.update(np.array(self.X.shape, dtype="<u8").tobytes())
        h.update(self.X.astype("<f8").tobytes())
        h.update(self.y.astype("<f8").tobytes())
        return int.from_bytes(h.digest(), "little")

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(self.n_features)] + ["label"])
            for row, label in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(label))])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Load a CSV with a header row, features then label in each row."""
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{path}: no samples")
        width = len(rows[0])
        if width < 2:
            raise ValueError(f"{path}: need at least one feature column and a label")
        body = []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            body.append([float(v) for v in row])
        arr = np.array(body, dtype=np.float64)
        return cls(arr[:, :-1], arr[:, -1])


@dataclass(frozen=True)
class SplitSpec:
    """Forget set ``Z`` as a strictly increasing tuple of indices into ``D``."""

    forget_indices: tuple = field(default=())

    def __post_init__(self):
        idx = tuple(int(i) for i in self.forget_indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise SplitError("forget indices must be strictly increasing")
        if idx and idx[0] < 0:
            raise SplitError(f"forget index {idx[0]} out of range")
        object.__setattr__(self, "forget_indices", idx)

    @property
    def m(self) -> int:
        return len(self.forget_indices)

    @classmethod
    def of(cls, indices) -> "SplitSpec":
        return cls(tuple(sorted(set(int(i) for i in indices))))

    @classmethod
    def last(cls, n: int, m: int) -> "SplitSpec":
        """Forget the final ``m`` samples."""
        return cls(tuple(range(n - m, n)))

    def validate(self, n: int) -> None:
        if self.forget_indices and self.forget_indices[-1] >= n:
            raise SplitError(f"forget index {self.forget_indices[-1]} out of range for n={n}")
        if self.m >= n:
            raise SplitError("empty retain set: m must be < n")


def split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Return ``(retain, forget)`` preserving the original relative order."""
    spec.validate(data.n)
    mask = np.ones(data.n, dtype=bool)
    mask[list(spec.forget_indices)] = False
    return data.subset(np.flatnonzero(mask)), data.subset(np.flatnonzero(~mask))


class LossModel:
    """Per-sample loss and gradient oracle.

    Subclasses implement :meth:`losses` and :meth:`grads`, both vectorised
    over the rows of a dataset. Constants (L, G, mu, f*) are attached by the
    problem definitions, not by the model itself, because most of them are
    certified over a data- and trajectory-dependent region.
    """

    name = "loss"
    dim: int

    def losses(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _ordered_mean(rows: np.ndarray) -> np.ndarray:
    # cumsum is strictly sequential in row order; np.sum may use pairwise blocks.
    return np.cumsum(rows, axis=0)[-1] / rows.shape[0]


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        first = int(np.flatnonzero(bad.reshape(values.shape[0], -1).any(axis=1))[0])
        raise EvaluationError(f"non-finite {what} at sample index {first}")


def empirical_loss(model: LossModel, data: Dataset, theta) -> float:
    """Mean per-sample loss, summed in index order."""
    theta = as_params(theta, copy=False)
    vals = np.asarray(model.losses(theta, data.X, data.y), dtype=np.float64)
    _check_finite(vals, "loss")
    return float(_ordered_mean(vals.reshape(-1, 1))[0])


def empirical_grad(model: LossModel, data: Dataset, theta) -> np.ndarray:
    """Mean per-sample gradient, summed in index order."""
    theta = as_params(theta, copy=False)
    g = np.asarray(model.grads(theta, data.X, data.y), dtype=np.float64)
    _check_finite(g, "gradient")
    return _ordered_mean(g)


class CountingModel(LossModel):
    """Wraps a model and counts per-sample gradient and loss evaluations."""

    def __init__(self, inner: LossModel):
        self.inner = inner
        self.name = inner.name
        self.dim = inner.dim
        self.grad_evals = 0
        self.loss_evals = 0

    def losses(self, theta, X, y):
        self.loss_evals += X.shape[0]
        return self.inner.losses(theta, X, y)

    def grads(self, theta, X, y):
        self.grad_evals += X.shape[0]
        return self.inner.grads(theta, X, y)

    def reset(self) -> None:
        self.grad_evals = 0
        self.loss_evals = 0

    def __getattr__(self, item):
        return getattr(self.inner, item)
