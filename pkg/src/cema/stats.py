"""Self-contained numerics: regularised logistic regression, stratified
cross-validated feature weights, percentile bootstrap intervals.

Own implementations, no external solver, so results are deterministic and
portable across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class FitError(ValueError):
    pass


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float,
                  lam: float) -> float:
    """Mean logistic loss plus lam * ||w||^2 / 2 (intercept unpenalised)."""
    z = X @ w + b
    # log(1 + exp(-s*z)) computed stably
    s = 2.0 * y - 1.0
    m = np.maximum(-s * z, 0.0)
    loss = float(np.mean(m + np.log(np.exp(-m) + np.exp(-s * z - m))))
    return loss + 0.5 * lam * float(w @ w)


def logistic_gradient(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float,
                      lam: float) -> tuple[np.ndarray, float]:
    """Analytic gradient of the regularised mean logistic loss."""
    n = len(y)
    p = _sigmoid(X @ w + b)
    diff = (p - y) / n
    gw = X.T @ diff + lam * w
    gb = float(np.sum(diff))
    return gw, gb


def fit_logistic(X: np.ndarray, y: np.ndarray, lam: float = 1.0,
                 tol: float = 1e-8, max_iter: int = 200) -> tuple[np.ndarray, float]:
    """L2-regularised logistic regression by damped Newton with line search.

    Returns (weights, intercept); converges to gradient norm below ``tol``.
    Falls back to gradient steps when the Newton system is ill-conditioned.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise FitError("X must be (n, m) with matching y")
    if len(y) < 2:
        raise FitError("need at least 2 rows")
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise FitError("y must be binary 0/1")
    if len(classes) < 2:
        raise FitError("both classes must be present")
    if lam < 0:
        raise FitError("lambda must be >= 0")
    n, m = X.shape
    w = np.zeros(m)
    b = math.log(y.mean() / (1.0 - y.mean())) if 0 < y.mean() < 1 else 0.0
    loss = logistic_loss(X, y, w, b, lam)
    for _ in range(max_iter):
        gw, gb = logistic_gradient(X, y, w, b, lam)
        gnorm = math.sqrt(float(gw @ gw) + gb * gb)
        if gnorm < tol:
            break
        p = _sigmoid(X @ w + b)
        r = np.maximum(p * (1.0 - p), 1e-12) / n
        Xa = np.concatenate([X, np.ones((n, 1))], axis=1)
        H = Xa.T @ (Xa * r[:, None])
        H[:m, :m] += lam * np.eye(m)
        H[np.diag_indices_from(H)] += 1e-10
        g = np.concatenate([gw, [gb]])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        # backtracking line search on the damped Newton direction
        t = 1.0
        for _ in range(40):
            w2 = w - t * step[:m]
            b2 = b - t * float(step[m])
            new_loss = logistic_loss(X, y, w2, b2, lam)
            if new_loss <= loss - 1e-12 * t or new_loss < loss:
                break
            t *= 0.5
        else:
            break
        w, b, loss = w2, b2, new_loss
    return w, float(b)


def stratified_folds(y: np.ndarray, folds: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """Index arrays of ``folds`` stratified folds; both classes in each."""
    y = np.asarray(y)
    idx0 = np.flatnonzero(y == 0)
    idx1 = np.flatnonzero(y == 1)
    if min(len(idx0), len(idx1)) < folds:
        raise FitError(f"class too small to stratify into {folds} folds")
    rng.shuffle(idx0)
    rng.shuffle(idx1)
    out: list[list[int]] = [[] for _ in range(folds)]
    for src in (idx0, idx1):
        for i, j in enumerate(src):
            out[i % folds].append(int(j))
    return [np.array(sorted(f)) for f in out]


def cv_importance(X: np.ndarray, y: np.ndarray, folds: int = 5,
                  repeats: int = 7, lam: float = 1.0,
                  seed: int = 0) -> np.ndarray:
    """Per-feature weight samples over folds x repeats training splits.

    Each repeat re-shuffles the stratified fold assignment; each fold's
    held-out part is dropped and the model is fitted on the rest.  Returns an
    array of shape (folds * repeats, n_features).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) < folds:
        raise FitError("need at least `folds` rows")
    samples = []
    for rep in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence((seed & 0x7FFFFFFF, 0xCF, rep)))
        for fold in stratified_folds(y, folds, rng):
            mask = np.ones(len(y), dtype=bool)
            mask[fold] = False
            if len(np.unique(y[mask])) < 2:
                raise FitError("training split lost a class")
            w, _ = fit_logistic(X[mask], y[mask], lam)
            samples.append(w)
    return np.asarray(samples)


def bootstrap_ci(samples, level: float = 0.95, resamples: int = 1000,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``samples``."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.size == 0:
        raise FitError("bootstrap needs at least one sample")
    if arr.size == 1:
        return float(arr[0]), float(arr[0])
    rng = np.random.default_rng(np.random.SeedSequence((seed & 0x7FFFFFFF, 0xB0)))
    idx = rng.integers(0, arr.size, size=(resamples, arr.size))
    means = arr[idx].mean(axis=1)
    lo_q = (1.0 - level) / 2.0
    lo = float(np.quantile(means, lo_q))
    hi = float(np.quantile(means, 1.0 - lo_q))
    return lo, hi
