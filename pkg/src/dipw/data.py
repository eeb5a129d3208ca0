"""Core data containers, validation and CSV ingestion."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray


class DipwError(Exception):
    """Base class for all package errors."""


class SchemaError(DipwError):
    """A required column is missing or the file layout is wrong."""


class DataError(DipwError):
    """Non-finite values or unparsable entries."""


class DegenerateTreatmentError(DataError):
    """Treatment vector is not binary or one arm is empty."""


def logistic(u):
    """Standard logistic function ``1 / (1 + exp(-u))``.

    Evaluated branch-wise so that neither ``exp(u)`` nor ``exp(-u)`` overflows.
    Accepts scalars or arrays.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Dataset:
    """Covariates ``X`` (first column the intercept), outcome ``Y``, treatment ``T``."""

    X: NDArray
    Y: NDArray
    T: NDArray
    feature_names: Optional[list] = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        Y = np.ascontiguousarray(self.Y, dtype=float).reshape(-1)
        T = np.asarray(self.T)
        if X.ndim != 2:
            raise DataError("X must be a 2-d array")
        n, p = X.shape
        if n < 2 or p < 2:
            raise DataError(f"need n >= 2 and p >= 2, got n={n}, p={p}")
        if Y.shape[0] != n or T.reshape(-1).shape[0] != n:
            raise DataError("X, Y and T must have the same number of rows")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite covariate at row {r}, column {c}")
        if not np.all(np.isfinite(Y)):
            r = int(np.argwhere(~np.isfinite(Y))[0, 0])
            raise DataError(f"non-finite outcome at row {r}")
        T = T.reshape(-1).astype(float)
        bad = np.flatnonzero((T != 0.0) & (T != 1.0))
        if bad.size:
            raise DegenerateTreatmentError(
                f"treatment must be 0/1; row {int(bad[0])} has value {T[bad[0]]!r}"
            )
        if np.any(X[:, 0] != 1.0):
            r = int(np.flatnonzero(X[:, 0] != 1.0)[0])
            raise DataError(f"column 0 of X must be the intercept (all ones); row {r} is not")
        if self.feature_names is not None and len(self.feature_names) != p:
            raise SchemaError("feature_names must have one entry per column of X")
        for arr in (X, Y, T):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "T", T)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", list(self.feature_names))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def require_both_arms(self) -> None:
        n1 = int(self.T.sum())
        if n1 == 0 or n1 == self.n:
            raise DegenerateTreatmentError(
                "both treatment groups must be non-empty "
                f"(treated={n1}, control={self.n - n1})"
            )

    def with_outcome(self, Y) -> "Dataset":
        return Dataset(self.X, Y, self.T, self.feature_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.Y[idx], self.T[idx], self.feature_names)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "feature_names": self.feature_names,
            "X": self.X.tolist(),
            "Y": self.Y.tolist(),
            "T": [int(t) for t in self.T],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Dataset":
        X = np.asarray(doc["X"], dtype=float).reshape(doc["n"], doc["p"])
        return cls(X, np.asarray(doc["Y"], float), np.asarray(doc["T"], float),
                   doc.get("feature_names"))


@dataclass(frozen=True)
class PropensityFit:
    """Fitted propensity model: coefficients, clipped probabilities and tuning."""

    gamma_hat: NDArray
    pi_hat: NDArray
    lam: float = 0.0
    clip: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        pi = np.asarray(self.pi_hat, dtype=float)
        if np.any(pi < self.clip) or np.any(pi > 1.0 - self.clip):
            raise ValueError("pi_hat must lie in [clip, 1 - clip]")
        object.__setattr__(self, "pi_hat", pi)
        object.__setattr__(self, "gamma_hat", np.asarray(self.gamma_hat, dtype=float))

    @classmethod
    def from_gamma(cls, X, gamma_hat, lam=0.0, clip=0.01) -> "PropensityFit":
        pi = clip_probabilities(logistic(np.asarray(X) @ np.asarray(gamma_hat)), clip)
        return cls(np.asarray(gamma_hat, dtype=float), pi, lam, clip)

    @classmethod
    def forced(cls, pi, clip=0.01) -> "PropensityFit":
        """Inject a fixed propensity vector, bypassing any model fit."""
        pi = clip_probabilities(np.asarray(pi, dtype=float), clip)
        return cls(np.full(1, np.nan), pi, float("nan"), clip)

    def n_clipped(self) -> int:
        return int(np.sum((self.pi_hat <= self.clip) | (self.pi_hat >= 1.0 - self.clip)))


def clip_probabilities(pi, clip: float):
    return np.clip(pi, clip, 1.0 - clip)


@dataclass(frozen=True)
class FoldPlan:
    """``B`` pairs of complementary index sets; the second of each pair has size ``n // 2``."""

    n: int
    pairs: tuple = field(default_factory=tuple)

    @property
    def B(self) -> int:
        return len(self.pairs)

    def folds(self):
        """Yield ``(k, I_k, complement)`` for ``k = 0 .. 2B-1``."""
        for b, (odd, even) in enumerate(self.pairs):
            yield 2 * b, odd, even
            yield 2 * b + 1, even, odd

    @classmethod
    def random(cls, n: int, B: int, rng: np.random.Generator) -> "FoldPlan":
        pairs = []
        for _ in range(B):
            perm = rng.permutation(n)
            even = np.sort(perm[: n // 2])
            odd = np.sort(perm[n // 2:])
            pairs.append((odd, even))
        return cls(n, tuple(pairs))

    @classmethod
    def balanced(cls, n: int, B: int) -> "FoldPlan":
        """Deterministic splits from the rows of a Sylvester-Hadamard matrix."""
        m = 1
        while m < n or m < 2 * B + 2:
            m *= 2
        H = np.array([[1]])
        while H.shape[0] < m:
            H = np.block([[H, H], [H, -H]])
        pairs = []
        for b in range(B):
            row = H[b + 1, :n]
            order = np.argsort(-row, kind="stable")
            even = np.sort(order[: n // 2])
            odd = np.setdiff1d(np.arange(n), even)
            pairs.append((odd, even))
        return cls(n, tuple(pairs))


def load_csv(path, y_col: str, t_col: str, add_intercept: bool = True) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Every column other than ``y_col`` and ``t_col`` becomes a covariate, in file
    order. With ``add_intercept`` a column of ones is prepended.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row expected") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    for col in (y_col, t_col):
        if col not in header:
            raise SchemaError(f"{path}: column {col!r} not found in header {header}")
    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {i + 1} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: cannot parse {cell!r} at row {i + 1}, column {header[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite value at row {i + 1}, column {header[j]!r}")
            values[i, j] = v
    iy, it = header.index(y_col), header.index(t_col)
    T = values[:, it]
    bad = np.flatnonzero((T != 0.0) & (T != 1.0))
    if bad.size:
        raise DegenerateTreatmentError(
            f"{path}: treatment column {t_col!r} must be 0/1; row {int(bad[0]) + 1} has {T[bad[0]]:g}"
        )
    if T.size and (T.min() == T.max()):
        raise DegenerateTreatmentError(f"{path}: treatment column {t_col!r} has a single class")
    cov_idx = [j for j in range(len(header)) if j not in (iy, it)]
    X = values[:, cov_idx]
    names = [header[j] for j in cov_idx]
    if add_intercept:
        X = np.column_stack([np.ones(len(rows)), X])
        names = ["(intercept)"] + names
    return Dataset(X, values[:, iy], T, names)


def write_csv(data: Dataset, path, y_col: str = "y", t_col: str = "t",
              drop_intercept: bool = True) -> None:
    """Write ``data`` in the layout read by :func:`load_csv` (17 significant digits)."""
    names = data.feature_names or [f"x{j}" for j in range(data.p)]
    X, names = (data.X[:, 1:], names[1:]) if drop_intercept else (data.X, names)
    rows = [[repr(float(y)), str(int(t))] + [repr(float(v)) for v in x]
            for y, t, x in zip(data.Y, data.T, X)]
    atomic_write_text(path, _csv_text([y_col, t_col] + list(names), rows))


def _csv_text(header: Sequence[str], rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
