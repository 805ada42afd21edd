"""
Per-attribute regression: normalization, correlation-based feature
selection, elastic-net coordinate descent and a cross-validated
(lambda, alpha) grid search.

The penalized objective minimized by fit_elastic_net is

    1/(2n) * ||y - b0 - X b||^2 + lambda * (alpha * ||b||_1 + (1 - alpha)/2 * ||b||^2)

with the intercept b0 left unpenalized.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from errors import ConsistencyError, DataError, DomainError, FormatError, NumericError, SchemaError
from utils import stage_rng

logger = logging.getLogger('efi.learn')

MODEL_FORMAT = "efi-elastic-net"
MODEL_VERSION = 1

DEFAULT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(1, 11))
DEFAULT_LAMBDA_COUNT = 50
DEFAULT_LAMBDA_RATIO = 1e-3
DEFAULT_FOLDS = 5
DEFAULT_KEEP_FRACTION = 0.4375
DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 10000

R2_FLOOR = -1e9
ALPHA_FLOOR = 0.01
_ZERO_STD = 1e-12
_TIE = 1e-12


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    feature_names: tuple
    targets: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        targets = np.asarray(self.targets, dtype=float).ravel()
        if rows.shape[1] != len(self.feature_names):
            raise ConsistencyError(
                f"Design matrix has {rows.shape[1]} columns but {len(self.feature_names)} feature names"
            )
        if rows.shape[0] != targets.shape[0]:
            raise ConsistencyError(f"Design matrix has {rows.shape[0]} rows but {targets.shape[0]} targets")
        if rows.shape[0] < 2:
            raise DataError(f"At least 2 samples are required, got {rows.shape[0]}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def p(self):
        return self.rows.shape[1]

    def take(self, index):
        return DesignMatrix(self.rows[index], self.feature_names, self.targets[index])

    def with_columns(self, names):
        lookup = {name: i for i, name in enumerate(self.feature_names)}
        cols = [lookup[name] for name in names]
        return DesignMatrix(self.rows[:, cols], tuple(names), self.targets)


@dataclass(frozen=True)
class Normalizer:
    """Column means and population standard deviations of the retained features."""

    feature_names: tuple
    means: tuple
    stds: tuple
    input_names: tuple = ()
    dropped: tuple = ()

    def subset(self, names):
        lookup = {name: i for i, name in enumerate(self.feature_names)}
        idx = [lookup[name] for name in names]
        return Normalizer(tuple(names), tuple(self.means[i] for i in idx),
                          tuple(self.stds[i] for i in idx), tuple(names), ())


@dataclass(frozen=True)
class ElasticNetModel:
    intercept: float
    coefficients: tuple
    lambda_: float
    alpha: float
    selected_features: tuple
    converged: bool = True
    sweeps: int = 0
    feature_means: Optional[tuple] = None
    feature_stds: Optional[tuple] = None
    attribute: str = ""

    def __post_init__(self):
        if len(self.coefficients) != len(self.selected_features):
            raise ConsistencyError(
                f"{len(self.coefficients)} coefficients for {len(self.selected_features)} selected features"
            )
        if not 0 <= self.alpha <= 1:
            raise DomainError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda_ < 0:
            raise DomainError(f"lambda must be >= 0, got {self.lambda_}")

    def predict_normalized(self, rows):
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(1, -1)
        if not self.selected_features:
            return np.full(rows.shape[0], self.intercept)
        return self.intercept + rows @ np.asarray(self.coefficients, dtype=float)

    def predict(self, rows):
        """Predict from raw feature values ordered like selected_features"""
        rows = np.asarray(rows, dtype=float)
        if self.feature_means is not None:
            rows = (rows - np.asarray(self.feature_means)) / np.asarray(self.feature_stds)
        return self.predict_normalized(rows)


@dataclass(frozen=True)
class GridPoint:
    lambda_: float
    alpha: float
    mean_rmse: float
    mean_r2: float


@dataclass(frozen=True)
class CVReport:
    grid: tuple
    best: tuple
    folds: int
    fold_sizes: tuple = ()

    def __post_init__(self):
        if self.folds < 2:
            raise DomainError(f"Cross-validation needs k >= 2, got {self.folds}")

    @property
    def best_point(self):
        lam, alpha = self.best
        for point in self.grid:
            if point.lambda_ == lam and point.alpha == alpha:
                return point
        raise ConsistencyError("Best grid point is missing from the CV grid")

    def to_frame(self):
        return pd.DataFrame(
            [(g.lambda_, g.alpha, g.mean_rmse, g.mean_r2) for g in self.grid],
            columns=["lambda", "alpha", "mean_rmse", "mean_r2"],
        )


@dataclass
class TrainingResult:
    attribute: str
    model: ElasticNetModel
    report: CVReport
    n_plots: int
    n_features: int
    dropped: tuple = field(default_factory=tuple)


def fit_normalizer(rows, feature_names=None):
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    n, p = rows.shape
    if n < 2:
        raise DataError(f"Normalizer needs at least 2 rows, got {n}")
    if feature_names is None:
        feature_names = tuple(f"x{j}" for j in range(p))
    feature_names = tuple(feature_names)
    if len(feature_names) != p:
        raise ConsistencyError(f"{p} columns but {len(feature_names)} feature names")

    means = rows.mean(axis=0)
    stds = rows.std(axis=0)
    keep = stds > _ZERO_STD * np.maximum(1.0, np.abs(means))
    dropped = tuple(name for name, k in zip(feature_names, keep) if not k)
    if dropped:
        logger.info(f"Dropping {len(dropped)} zero-variance features: {', '.join(dropped)}")
    return Normalizer(
        feature_names=tuple(name for name, k in zip(feature_names, keep) if k),
        means=tuple(float(m) for m in means[keep]),
        stds=tuple(float(s) for s in stds[keep]),
        input_names=feature_names,
        dropped=dropped,
    )


def apply_normalizer(norm, rows, feature_names=None):
    """Standardize the retained columns; `rows` columns are labelled by feature_names (default: the fitting names)"""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    names = tuple(feature_names) if feature_names is not None else norm.input_names
    lookup = {name: i for i, name in enumerate(names)}
    missing = [name for name in norm.feature_names if name not in lookup]
    if missing:
        raise SchemaError(f"Feature '{missing[0]}' is missing from the rows being normalized")
    cols = [lookup[name] for name in norm.feature_names]
    return (rows[:, cols] - np.asarray(norm.means)) / np.asarray(norm.stds)


def _pearson(rows, targets):
    xc = rows - rows.mean(axis=0)
    yc = targets - targets.mean()
    denom = np.sqrt((xc * xc).sum(axis=0) * (yc @ yc))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, (xc.T @ yc) / np.where(denom > 0, denom, 1.0), 0.0)
    return corr


def select_features(X, keep_fraction=DEFAULT_KEEP_FRACTION):
    """Keep the ceil(p * keep_fraction) columns most correlated (in |r|) with the target"""
    if not 0 < keep_fraction <= 1:
        raise DomainError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    keep_count = min(X.p, math.ceil(X.p * keep_fraction - 1e-9))
    if keep_count >= X.p:
        return X
    strength = np.abs(_pearson(X.rows, X.targets))
    ranked = sorted(range(X.p), key=lambda j: (-strength[j], X.feature_names[j]))
    kept = sorted(ranked[:keep_count])
    logger.debug(f"Selected {keep_count} of {X.p} features")
    return X.with_columns([X.feature_names[j] for j in kept])


def soft_threshold(z, gamma):
    """sign(z) * max(|z| - gamma, 0), elementwise over arrays"""
    if np.any(np.asarray(gamma) < 0):
        raise DomainError(f"Threshold must be >= 0, got {gamma}")
    shrunk = np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)
    return float(shrunk) if np.ndim(shrunk) == 0 else shrunk


def objective(X, intercept, coefficients, lambda_, alpha):
    beta = np.asarray(coefficients, dtype=float)
    resid = X.targets - intercept - X.rows @ beta
    penalty = alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * (beta @ beta)
    return float(resid @ resid / (2 * X.n) + lambda_ * penalty)


def _check_finite(X):
    if not (np.all(np.isfinite(X.rows)) and np.all(np.isfinite(X.targets))):
        raise NumericError("Design matrix or targets contain non-finite values")


def _coordinate_descent(xt, targets, weights, l1, l2, beta, intercept, tol, max_sweeps, check_objective):
    """
    Cyclic coordinate descent on B problems at once, one per column of
    `weights` (0/1 row masks) with per-column penalties `l1`, `l2`.

    `beta` (p x B) and `intercept` (B,) are updated in place and serve as the
    warm start. Sweeps alternate between the full coordinate set and the
    nonzero rows of `beta`; convergence needs a full sweep whose largest
    change across all columns is below `tol`. Returns (converged, sweeps).
    """
    p = xt.shape[0]
    counts = weights.sum(axis=0)
    z = (xt * xt) @ weights / counts
    xw = xt[:, :, None] * weights[None, :, :]
    resid = weights * (targets[:, None] - intercept[None, :] - xt.T @ beta)

    def current_objective():
        penalty = l1 * np.abs(beta).sum(axis=0) + 0.5 * l2 * (beta * beta).sum(axis=0)
        return (resid * resid).sum(axis=0) / (2 * counts) + penalty

    previous = current_objective() if check_objective else None
    full = True
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        rows = range(p) if full else np.flatnonzero(np.any(beta != 0, axis=1))
        max_delta = 0.0
        for j in rows:
            old = beta[j]
            rho = xt[j] @ resid / counts + z[j] * old
            denom = z[j] + l2
            shrunk = soft_threshold(rho, l1)
            new = np.where(z[j] > 0, shrunk / np.where(denom > 0, denom, 1.0), old)
            delta = new - old
            if np.any(delta):
                resid -= xw[j] * delta
                beta[j] = new
                max_delta = max(max_delta, float(np.abs(delta).max()))
        shift = resid.sum(axis=0) / counts
        if np.any(shift):
            intercept += shift
            resid -= weights * shift
            max_delta = max(max_delta, float(np.abs(shift).max()))

        if check_objective:
            current = current_objective()
            rising = current > previous + 1e-12 * np.maximum(1.0, np.abs(previous))
            if np.any(rising):
                b = int(np.flatnonzero(rising)[0])
                raise NumericError(f"Objective increased from {previous[b]!r} to {current[b]!r} at sweep {sweep}")
            previous = current

        if max_delta < tol:
            if full:
                return True, sweep
            full = True
        else:
            full = False
    return False, sweep


def fit_elastic_net(X, lambda_, alpha, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS, check_objective=False,
                    warm_start=None):
    """
    Coordinate descent from b = 0 and b0 = mean(y), or from `warm_start`
    (a model over the same features).

    Each coordinate update is b_j <- S(rho_j, lambda*alpha) / (z_j + lambda*(1 - alpha))
    with rho_j = x_j.r/n + z_j*b_j and z_j = x_j.x_j/n. The intercept is
    re-centered on the residual after every sweep. Stops when the largest
    change in a full sweep is below `tol`; hitting `max_sweeps` flags the
    model as not converged.
    """
    if lambda_ < 0:
        raise DomainError(f"lambda must be >= 0, got {lambda_}")
    if not 0 <= alpha <= 1:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    _check_finite(X)

    n, p = X.n, X.p
    xt = np.ascontiguousarray(X.rows.T)
    l1 = lambda_ * alpha
    l2 = lambda_ * (1 - alpha)

    if warm_start is None:
        beta = np.zeros((p, 1))
        intercept = np.array([X.targets.mean()])
        rho0 = xt @ (X.targets - intercept[0]) / n
        if p == 0 or (l1 > 0 and np.all(np.abs(rho0) <= l1)):
            return ElasticNetModel(float(intercept[0]), tuple(0.0 for _ in range(p)), float(lambda_),
                                   float(alpha), X.feature_names, True, 0)
    else:
        if tuple(warm_start.selected_features) != tuple(X.feature_names):
            raise ConsistencyError("Warm start model was fitted on different features")
        beta = np.array(warm_start.coefficients, dtype=float).reshape(p, 1)
        intercept = np.array([warm_start.intercept], dtype=float)

    converged, sweeps = _coordinate_descent(
        xt, X.targets, np.ones((n, 1)), np.array([l1]), np.array([l2]), beta, intercept,
        tol, max_sweeps, check_objective,
    )
    if not converged:
        logger.warning(
            f"Coordinate descent did not converge in {max_sweeps} sweeps (lambda={lambda_:.6g}, alpha={alpha})"
        )
    return ElasticNetModel(float(intercept[0]), tuple(float(b) for b in beta[:, 0]), float(lambda_), float(alpha),
                           X.feature_names, converged, sweeps)


def fit_path(X, alpha, lambdas, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
    """One model per lambda, each fit warm-started from the previous one"""
    models = []
    previous = None
    for lam in lambdas:
        previous = fit_elastic_net(X, lam, alpha, tol, max_sweeps, warm_start=previous)
        models.append(previous)
    return models


def lambda_max(X, alpha):
    a = alpha if alpha > 0 else ALPHA_FLOOR
    centered = X.targets - X.targets.mean()
    xt = np.ascontiguousarray(X.rows.T)
    grads = np.array([abs(xt[j] @ centered) / X.n for j in range(X.p)]) if X.p else np.zeros(1)
    return float(grads.max() / a)


def lambda_path(X, alpha, count=DEFAULT_LAMBDA_COUNT, ratio=DEFAULT_LAMBDA_RATIO):
    """Log-spaced lambdas from lambda_max down to ratio * lambda_max"""
    if count < 2:
        raise DomainError(f"Lambda path needs at least 2 points, got {count}")
    if not 0 < ratio < 1:
        raise DomainError(f"Lambda ratio must be in (0, 1), got {ratio}")
    top = lambda_max(X, alpha)
    if top <= np.finfo(float).tiny:
        return [float(np.finfo(float).resolution)] * count
    return [float(v) for v in np.geomspace(top, top * ratio, count)]


def fold_assignments(n, k, seed=0):
    """Row i of a seeded permutation goes to fold i mod k"""
    if k < 2:
        raise DomainError(f"Cross-validation needs k >= 2, got {k}")
    if n < k:
        raise DataError(f"Cannot split {n} samples into {k} folds")
    perm = stage_rng(seed, "cv").permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def rmse(y, yhat):
    y, yhat = _paired(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r2(y, yhat):
    y, yhat = _paired(y, yhat)
    ss_res = float(((y - yhat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        return 0.0 if ss_res == 0 else R2_FLOOR
    return max(1.0 - ss_res / ss_tot, R2_FLOOR)


def _paired(y, yhat):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape or y.size == 0:
        raise ConsistencyError(f"Cannot compare {y.size} observations with {yhat.size} predictions")
    return y, yhat


def _pick_best(grid):
    """
    Index of the minimum mean RMSE; near-ties go to the larger lambda, then
    the larger alpha.
    """
    lowest = min(g.mean_rmse for g in grid)
    tied = [i for i, g in enumerate(grid) if g.mean_rmse <= lowest + _TIE * max(1.0, lowest)]
    return max(tied, key=lambda i: (grid[i].lambda_, grid[i].alpha))


def cv_grid_search(X, alphas=DEFAULT_ALPHAS, lambda_count=DEFAULT_LAMBDA_COUNT, k=DEFAULT_FOLDS, seed=0,
                   lambda_ratio=DEFAULT_LAMBDA_RATIO, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS,
                   check_objective=False):
    """
    K-fold grid search over alphas and each alpha's lambda path (computed
    on all rows). Returns the model refit on all rows at the best point.

    Every (alpha, fold) problem plus one all-rows problem per alpha is
    solved as a single batch, walking down the lambda paths together and
    warm-starting each step from the previous one. The all-rows column at
    the chosen step is the refit model.
    """
    _check_finite(X)
    folds = fold_assignments(X.n, k, seed)
    tests = [np.flatnonzero(folds == f) for f in range(k)]
    paths = [lambda_path(X, alpha, lambda_count, lambda_ratio) for alpha in alphas]

    width = k + 1
    weights = np.ones((X.n, len(alphas) * width))
    for a in range(len(alphas)):
        for f in range(k):
            weights[:, a * width + f] = folds != f
    alpha_of = np.repeat(np.asarray(alphas, dtype=float), width)
    xt = np.ascontiguousarray(X.rows.T)
    beta = np.zeros((X.p, weights.shape[1]))
    intercept = weights.T @ X.targets / weights.sum(axis=0)

    points = [[None] * lambda_count for _ in alphas]
    refits = [[None] * lambda_count for _ in alphas]
    slow = 0
    for t in range(lambda_count):
        lam = np.repeat([path[t] for path in paths], width)
        converged, sweeps = _coordinate_descent(xt, X.targets, weights, lam * alpha_of, lam * (1 - alpha_of),
                                                beta, intercept, tol, max_sweeps, check_objective)
        slow += not converged
        for a, alpha in enumerate(alphas):
            errors, scores = [], []
            for f, test_idx in enumerate(tests):
                c = a * width + f
                predicted = intercept[c] + X.rows[test_idx] @ beta[:, c]
                errors.append(rmse(X.targets[test_idx], predicted))
                scores.append(r2(X.targets[test_idx], predicted))
            points[a][t] = GridPoint(paths[a][t], float(alpha), float(np.mean(errors)), float(np.mean(scores)))
            c = a * width + k
            refits[a][t] = ElasticNetModel(float(intercept[c]), tuple(float(b) for b in beta[:, c]),
                                           float(paths[a][t]), float(alpha), X.feature_names, converged, sweeps)
    if slow:
        logger.warning(f"{slow} of {lambda_count} lambda steps stopped at max_sweeps={max_sweeps}")

    grid = [point for row in points for point in row]
    best = _pick_best(grid)
    model = refits[best // lambda_count][best % lambda_count]
    report = CVReport(tuple(grid), (grid[best].lambda_, grid[best].alpha), k,
                      tuple(int((folds == f).sum()) for f in range(k)))
    return model, report


def train_attribute(attribute, rows, feature_names, targets, alphas=DEFAULT_ALPHAS,
                    lambda_count=DEFAULT_LAMBDA_COUNT, lambda_ratio=DEFAULT_LAMBDA_RATIO, k=DEFAULT_FOLDS,
                    keep_fraction=DEFAULT_KEEP_FRACTION, seed=0, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS,
                    check_objective=False):
    """
    Normalize, select and grid-search one attribute.

    Normalization and selection see every plot row before cross-validation
    splits them, so CV scores are mildly optimistic.
    """
    norm = fit_normalizer(rows, feature_names)
    X = DesignMatrix(apply_normalizer(norm, rows, feature_names), norm.feature_names, targets)
    selected = select_features(X, keep_fraction)
    model, report = cv_grid_search(selected, alphas, lambda_count, k, seed, lambda_ratio, tol, max_sweeps,
                                   check_objective)

    scaling = norm.subset(selected.feature_names)
    model = replace(model, feature_means=scaling.means, feature_stds=scaling.stds, attribute=attribute)
    best = report.best_point
    logger.info(
        f"{attribute}: lambda={best.lambda_:.6g} alpha={best.alpha} cv_rmse={best.mean_rmse:.4f} "
        f"cv_r2={best.mean_r2:.4f} ({selected.p} of {len(feature_names)} features, "
        f"{sum(1 for b in model.coefficients if b != 0)} nonzero)"
    )
    if not model.converged:
        logger.warning(f"{attribute}: final fit did not converge")
    return TrainingResult(attribute, model, report, X.n, selected.p, norm.dropped)


def _train_job(job):
    return train_attribute(**job)


def train_attributes(jobs, workers=1):
    """Train one model per job dict; with workers > 1 attributes run in separate processes"""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(job) for job in jobs]


def save_model(model, path, dropped=()):
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "attribute": model.attribute,
        "lambda": model.lambda_,
        "alpha": model.alpha,
        "intercept": model.intercept,
        "selected_features": list(model.selected_features),
        "coefficients": list(model.coefficients),
        "normalizer": {
            "means": list(model.feature_means) if model.feature_means is not None else None,
            "stds": list(model.feature_stds) if model.feature_stds is not None else None,
            "dropped": list(dropped),
        },
        "converged": model.converged,
        "sweeps": model.sweeps,
    }
    with open(path, "w") as f:
        json.dump(document, f, indent=2)


def load_model(path):
    with open(path) as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path} is not a model document: {e}")
    if document.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: unexpected format {document.get('format')!r}")
    if document.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {document.get('version')!r}")
    try:
        scaling = document["normalizer"]
        means = scaling.get("means")
        stds = scaling.get("stds")
        return ElasticNetModel(
            intercept=float(document["intercept"]),
            coefficients=tuple(float(b) for b in document["coefficients"]),
            lambda_=float(document["lambda"]),
            alpha=float(document["alpha"]),
            selected_features=tuple(document["selected_features"]),
            converged=bool(document.get("converged", True)),
            sweeps=int(document.get("sweeps", 0)),
            feature_means=tuple(float(m) for m in means) if means is not None else None,
            feature_stds=tuple(float(s) for s in stds) if stds is not None else None,
            attribute=document.get("attribute", ""),
        )
    except KeyError as e:
        raise FormatError(f"{path}: model document is missing '{e.args[0]}'")
