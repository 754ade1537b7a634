"""Preoperative risk model: additive logistic regression on natural cubic spline
bases, ridge-penalized and fitted by IRLS, with the penalty chosen by
stratified cross-validated AUROC."""
from __future__ import annotations

import json

import numpy as np
from scipy.special import expit

from .cohort import stratified_folds
from .errors import DegenerateOutcome, MissingColumn, NonConvergence
from .evaluation import auc_score

MODEL_VERSION = 1
DEFAULT_LAMBDA_GRID = (0.3, 1.0, 3.0, 10.0, 30.0, 100.0)
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8


def natural_spline_columns(x, knots):
    """Truncated-power natural cubic spline basis without the constant.

    Returns ``len(knots) - 1`` columns: ``x`` followed by ``d_k - d_{K-1}``
    for the first ``K - 2`` knots.  The fit is linear beyond the boundary knots.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(knots, dtype=np.float64)
    last = k[-1]

    def d(j):
        return (np.maximum(x - k[j], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - k[j])

    cols = [x]
    d_pen = d(len(k) - 2)
    for j in range(len(k) - 2):
        cols.append(d(j) - d_pen)
    return np.column_stack(cols)


class SplineBasis:
    """Per-feature basis: natural cubic with quantile knots, linear, or dropped (constant)."""

    def __init__(self, feature, kind, knots=(), center=(), scale=()):
        self.feature = feature
        self.kind = kind
        self.knots = np.asarray(knots, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @property
    def df(self):
        return int(self.center.size)

    @classmethod
    def fit(cls, feature, x, df=4):
        x = np.asarray(x, dtype=np.float64)
        uniq = np.unique(x)
        if uniq.size < 2:
            return cls(feature, "constant")
        knots = np.unique(np.percentile(x, np.linspace(0, 100, df + 1), method="linear"))
        if uniq.size <= 2 or knots.size < 3:
            basis = cls(feature, "linear")
            raw = x[:, None]
        else:
            basis = cls(feature, "natural_cubic", knots)
            raw = natural_spline_columns(x, knots)
        center = raw.mean(axis=0)
        scale = raw.std(axis=0)
        good = scale > 0
        scale[~good] = 1.0
        basis.center = center
        basis.scale = scale
        return basis

    def raw(self, x):
        if self.kind == "natural_cubic":
            return natural_spline_columns(x, self.knots)
        if self.kind == "linear":
            return np.asarray(x, dtype=np.float64)[:, None]
        return np.empty((len(x), 0))

    def transform(self, x):
        return (self.raw(x) - self.center) / self.scale

    def to_dict(self):
        return {"feature": self.feature, "kind": self.kind, "knots": self.knots.tolist(),
                "center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["kind"], d["knots"], d["center"], d["scale"])


def penalized_objective(beta, Z, y, lam):
    """Negative log-likelihood plus ``lam/2 * ||beta[1:]||^2`` and its gradient.

    ``Z`` carries the intercept in column 0, which is not penalized.
    """
    eta = Z @ beta
    # log(1 + e^eta) computed stably
    nll = float(np.sum(np.logaddexp(0.0, eta) - y * eta))
    pen = 0.5 * lam * float(beta[1:] @ beta[1:])
    grad = Z.T @ (expit(eta) - y)
    grad[1:] += lam * beta[1:]
    return nll + pen, grad


def deviance(beta, Z, y):
    eta = Z @ beta
    return 2.0 * float(np.sum(np.logaddexp(0.0, eta) - y * eta))


def irls(Z, y, lam, max_iter=IRLS_MAX_ITER, tol=IRLS_TOL, beta0=None):
    """Penalized Newton-Raphson (IRLS) with step halving.

    Returns ``(beta, n_iter)``.
    """
    n, m = Z.shape
    y = np.asarray(y, dtype=np.float64)
    beta = np.zeros(m) if beta0 is None else np.array(beta0, dtype=np.float64)
    if beta0 is None:
        p = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        beta[0] = np.log(p / (1 - p))
    penalty = np.full(m, lam)
    penalty[0] = 0.0
    obj, grad = penalized_objective(beta, Z, y, lam)
    for it in range(1, max_iter + 1):
        mu = expit(Z @ beta)
        w = np.maximum(mu * (1 - mu), 1e-10)
        H = (Z * w[:, None]).T @ Z + np.diag(penalty)
        H[np.diag_indices(m)] += 1e-10
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = beta - t * step
            new_obj, new_grad = penalized_objective(cand, Z, y, lam)
            if new_obj <= obj or t < 1e-10:
                break
            t *= 0.5
        rel = abs(obj - new_obj) / max(abs(new_obj), 1e-12)
        beta, obj, grad = cand, new_obj, new_grad
        if rel < tol:
            return beta, it
    if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 1e6:
        raise NonConvergence(f"IRLS diverged (lambda={lam})")
    raise NonConvergence(f"IRLS did not converge in {max_iter} iterations (lambda={lam})")


class PreopModel:
    def __init__(self, columns, bases, intercept, coefs, lam, cv_table=None, oof_scores=None):
        self.columns = list(columns)
        self.bases = bases
        self.intercept = float(intercept)
        self.coefs = [np.asarray(c, dtype=np.float64) for c in coefs]
        self.lam = float(lam)
        self.cv_table = cv_table or []
        # out-of-fold training scores at the selected lambda (for stacking)
        self.oof_scores = None if oof_scores is None else np.asarray(oof_scores)
        self.fitted = True

    def linear_predictor(self, X):
        eta = np.full(X.shape[0], self.intercept)
        for j, (b, c) in enumerate(zip(self.bases, self.coefs)):
            if c.size:
                eta += b.transform(X[:, j]) @ c
        return eta

    def predict(self, matrix):
        return predict_preop(self, matrix)

    def to_json(self):
        return json.dumps({
            "version": MODEL_VERSION, "kind": "additive_logistic_natural_spline",
            "columns": self.columns, "lambda": self.lam, "intercept": self.intercept,
            "bases": [b.to_dict() for b in self.bases],
            "coefficients": [c.tolist() for c in self.coefs],
            "cv_table": self.cv_table,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported preop model version {d.get('version')}")
        return cls(d["columns"], [SplineBasis.from_dict(b) for b in d["bases"]],
                   d["intercept"], d["coefficients"], d["lambda"], d["cv_table"])


def _design(bases, X):
    blocks = [np.ones((X.shape[0], 1))]
    blocks += [b.transform(X[:, j]) for j, b in enumerate(bases)]
    return np.column_stack(blocks)


def _fit_fixed(columns, X, y, lam, df):
    bases = [SplineBasis.fit(c, X[:, j], df) for j, c in enumerate(columns)]
    Z = _design(bases, X)
    beta, _ = irls(Z, y, lam)
    coefs, pos = [], 1
    for b in bases:
        coefs.append(beta[pos:pos + b.df])
        pos += b.df
    return PreopModel(columns, bases, beta[0], coefs, lam)


def fit_preop(train, outcome, lam_grid=DEFAULT_LAMBDA_GRID, folds=5, seed=0, df=4, columns=None):
    """Select the ridge penalty by stratified k-fold CV AUROC, then refit on all rows.

    ``train`` is a :class:`~periop_aki.features.FeatureMatrix`; ``outcome`` is
    an outcome name or a boolean vector.
    """
    columns = list(train.columns if columns is None else columns)
    X = train.select(columns).X
    y = train.outcomes[outcome] if isinstance(outcome, str) else np.asarray(outcome)
    y = y.astype(np.float64)
    n1 = int(y.sum())
    if n1 == 0 or n1 == y.size:
        raise DegenerateOutcome("preop model needs both outcome classes")
    if y.size < folds * 10 or min(n1, y.size - n1) < folds:
        raise DegenerateOutcome(f"too few rows for {folds}-fold CV")
    lam_grid = list(lam_grid)
    if not lam_grid:
        raise ValueError("empty lambda grid")

    fold_id = stratified_folds(y.astype(bool), folds, seed)
    table = []
    oof_by_lam = {}
    for lam in lam_grid:
        oof = np.empty(y.size)
        aucs = []
        for k in range(folds):
            tr, va = fold_id != k, fold_id == k
            m = _fit_fixed(columns, X[tr], y[tr], lam, df)
            oof[va] = expit(m.linear_predictor(X[va]))
            aucs.append(auc_score(oof[va], y[va]))
        oof_by_lam[lam] = oof
        table.append({"lambda": float(lam), "fold_aucs": aucs, "mean_auc": float(np.mean(aucs))})
    best = max(range(len(lam_grid)), key=lambda i: (table[i]["mean_auc"], -i))
    lam = lam_grid[best]
    model = _fit_fixed(columns, X, y, lam, df)
    model.cv_table = table
    model.oof_scores = oof_by_lam[lam]
    return model


def predict_preop(model, matrix):
    try:
        X = matrix.select(model.columns).X
    except ValueError as exc:
        missing = [c for c in model.columns if c not in matrix.columns]
        raise MissingColumn(missing[0] if missing else str(exc)) from None
    return expit(model.linear_predictor(X))
