"""Closed-form ordinary least squares with an intercept and a ridge fallback."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg


class OLSError(ValueError):
    pass


class InsufficientDataError(OLSError):
    pass


class DataError(OLSError):
    pass


@dataclass(frozen=True)
class OLSFit:
    coefficients: np.ndarray  # [intercept, slope_1, ..., slope_p]
    residual_mse: float
    r_squared: float
    n: int
    p: int
    regularized: bool = False

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coefficients"] = [float(c) for c in self.coefficients]
        return d

    def to_json(self) -> str:
        d = self.to_dict()
        return json.dumps({k: d[k] for k in ("coefficients", "residual_mse", "r_squared", "regularized")})


def _as_design(design, n: int | None = None) -> np.ndarray:
    X = np.asarray(design, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if (n is None or X.size == n) else X.reshape(1, -1)
    if X.ndim != 2:
        raise DataError(f"design must be 1-d or 2-d, got shape {X.shape}")
    return X


def fit(design, target, ridge_eps: float = 1e-8) -> OLSFit:
    """Least squares of ``target`` on ``[1 | design]``.

    Rank is read off a column-pivoted QR.  A rank-deficient design (duplicated
    or all-zero columns, e.g. dead ReLU units) is solved from the normal
    equations with ``ridge_eps`` added to the diagonal and flagged
    ``regularized``.  ``residual_mse`` is normalized by n, not n - p.
    """
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    n = y.size
    X = _as_design(design, n)
    if X.shape[0] != n:
        raise DataError(f"design has {X.shape[0]} rows, target has {n}")
    if n < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in design or target")
    p = X.shape[1]
    A = np.hstack([np.ones((n, 1)), X])

    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    regularized = rank < A.shape[1]
    if not regularized:
        beta = np.empty(A.shape[1])
        beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
    else:
        G = A.T @ A
        G[np.diag_indices_from(G)] += ridge_eps
        beta = scipy.linalg.solve(G, A.T @ y, assume_a="pos")

    resid = y - A @ beta
    sse = float(resid @ resid)
    centered = y - y.mean()
    sst = float(centered @ centered)
    r2 = 0.0 if sst == 0.0 else 1.0 - sse / sst
    return OLSFit(beta, sse / n, r2, n, p, regularized)


def predict(fit_: OLSFit, design) -> np.ndarray:
    X = _as_design(design)
    if X.shape[1] != fit_.p:
        if fit_.p == 1 and X.shape[0] == 1:
            X = X.T
        else:
            raise DataError(f"design has {X.shape[1]} columns, fit expects {fit_.p}")
    return fit_.intercept + X @ fit_.slopes


class Refit(NamedTuple):
    ate: float
    mse_y: float
    fit: OLSFit


def ate_from_refit(activations, t, y) -> Refit:
    """Regress y on [activations | t]; the t coefficient is the effect estimate."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    n = t.size
    A = np.asarray(activations, dtype=np.float64)
    if A.size == 0:
        A = np.zeros((n, 0))
    A = A.reshape(n, -1)
    if n <= A.shape[1] + 2:
        raise InsufficientDataError(f"need n > k + 2, got n={n}, k={A.shape[1]}")
    f = fit(np.hstack([A, t[:, None]]), y)
    return Refit(float(f.coefficients[-1]), f.residual_mse, f)
