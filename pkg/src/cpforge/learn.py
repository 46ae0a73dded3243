"""L2-regularised linear classifiers under the logistic or square loss."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset

LOSSES = ("logistic", "square")
DEFAULT_GRID = tuple(10.0 ** k for k in range(-5, 5))


def max_workers() -> int:
    """Worker cap from CPFORGE_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("CPFORGE_THREADS", "1")))
    except ValueError:
        return 1


def phi(z: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "logistic":
        return np.logaddexp(0.0, -z)
    if loss_kind == "square":
        return (1.0 - z) ** 2
    raise ValueError(f"unknown loss {loss_kind!r}")


def phi_prime(z: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "logistic":
        return -0.5 * (1.0 - np.tanh(0.5 * z))  # -1 / (1 + e^z), overflow-free
    if loss_kind == "square":
        return -2.0 * (1.0 - z)
    raise ValueError(f"unknown loss {loss_kind!r}")


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    intercept: float
    lam: float
    loss_kind: str
    converged: bool = True
    n_iter: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)) or not np.isfinite(self.intercept):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "weights", w)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.intercept

    def to_dict(self) -> dict:
        return {"weights": [float(v) for v in self.weights], "intercept": float(self.intercept),
                "lambda": float(self.lam), "loss": self.loss_kind}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearModel":
        return cls(np.asarray(doc["weights"], dtype=float), float(doc["intercept"]),
                   float(doc["lambda"]), doc["loss"])


def save_model(path, model: LinearModel) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> LinearModel:
    return LinearModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _objective(X, y, w, b, lam, loss_kind):
    z = y * (X @ w + b)
    return float(np.mean(phi(z, loss_kind)) + lam * (w @ w))


def _gradient(X, y, w, b, lam, loss_kind):
    z = y * (X @ w + b)
    g = phi_prime(z, loss_kind) * y / len(y)
    return X.T @ g + 2.0 * lam * w, float(np.sum(g))


def fit_arrays(X, y, loss_kind: str = "logistic", lam: float = 0.0, max_iter: int = 10000,
               tol: float = 1e-8, fit_intercept: bool = True, w0=None, b0: float = 0.0
               ) -> LinearModel:
    """Gradient descent from theta = 0 (or w0, b0) with Armijo backtracking.

    The trial step is the Barzilai-Borwein length of the previous move, so each
    iteration still only descends along the negative gradient.
    """
    if loss_kind not in LOSSES:
        raise ValueError(f"unknown loss {loss_kind!r}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.zeros(X.shape[1]) if w0 is None else np.array(w0, dtype=float)
    b = float(b0)
    f = _objective(X, y, w, b, lam, loss_kind)
    gw, gb = _gradient(X, y, w, b, lam, loss_kind)
    if not fit_intercept:
        gb = 0.0
    step = 1.0
    it = 0
    converged = False
    while True:
        gnorm = max(np.max(np.abs(gw)) if gw.size else 0.0, abs(gb))
        if gnorm <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        gg = float(gw @ gw + gb * gb)
        t = step
        while True:
            w_new, b_new = w - t * gw, b - t * gb
            f_new = _objective(X, y, w_new, b_new, lam, loss_kind)
            if f_new <= f - 0.5 * t * gg or t < 1e-20:
                break
            t *= 0.5
        gw_new, gb_new = _gradient(X, y, w_new, b_new, lam, loss_kind)
        if not fit_intercept:
            gb_new = 0.0
        sw, sb = w_new - w, b_new - b
        yw, yb = gw_new - gw, gb_new - gb
        sy = float(sw @ yw + sb * yb)
        step = float(sw @ sw + sb * sb) / sy if sy > 1e-300 else 2.0 * t
        if f_new > f:  # line search bottomed out; keep the old point
            break
        w, b, f, gw, gb = w_new, b_new, f_new, gw_new, gb_new
        it += 1
    return LinearModel(w, b, float(lam), loss_kind, converged, it)


def train(ds: Dataset, loss_kind: str = "logistic", lam: float = 0.0, max_iter: int = 10000,
          tol: float = 1e-8, fit_intercept: bool = True) -> LinearModel:
    """Minimise (1/m) sum phi(y (theta'x + b)) + lam |theta|^2; b is not regularised."""
    return fit_arrays(ds.observations, ds.labels, loss_kind, lam, max_iter, tol, fit_intercept)


def phi_risk(model: LinearModel, ds: Dataset, loss_kind: str | None = None) -> float:
    z = ds.labels * model.decision(ds.observations)
    return float(np.mean(phi(z, loss_kind or model.loss_kind)))


def zero_one_error(model: LinearModel, ds: Dataset) -> float:
    """Fraction of rows with y h(x) <= 0 (a zero score counts as an error)."""
    return float(np.mean(ds.labels * model.decision(ds.observations) <= 0))


def fold_indices(m: int, folds: int, seed=0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return np.array_split(rng.permutation(m), folds)


def cross_validate(ds: Dataset, loss_kind: str = "logistic", grid=DEFAULT_GRID, folds: int = 5,
                   seed=0, max_iter: int = 10000, tol: float = 1e-8) -> float:
    """lambda with the lowest mean validation 0/1 error; ties go to the smaller lambda."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty lambda grid")
    if ds.m < folds:
        raise ValueError(f"m={ds.m} is smaller than the number of folds ({folds})")
    if len(grid) == 1:
        return grid[0]
    X, y = ds.observations, ds.labels
    parts = fold_indices(ds.m, folds, seed)

    def score(lam):
        errs = []
        for k in range(folds):
            val = parts[k]
            tr = np.concatenate([parts[j] for j in range(folds) if j != k])
            mdl = fit_arrays(X[tr], y[tr], loss_kind, lam, max_iter, tol)
            errs.append(np.mean(y[val] * mdl.decision(X[val]) <= 0))
        return float(np.mean(errs))

    with ThreadPoolExecutor(max_workers()) as pool:
        scores = list(pool.map(score, grid))
    best = min(range(len(grid)), key=lambda k: (scores[k], grid[k]))
    return grid[best]
