"""The four-model comparison: intraop-only, preop-only, proposed (stacked) and full."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RowMisalignment
from .evaluation import youden_cutoff
from .features import FeatureMatrix
from .forest import (DEFAULT_GRID, ForestConfig, ForestModel, GridResult, expand_grid,
                     f_test_screen, fit_forest, grid_search)
from .preop import DEFAULT_LAMBDA_GRID, PreopModel, fit_preop, predict_preop

PREOP_SCORE = "preop_score"


@dataclass
class SuiteSettings:
    forest_grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    spline_df: int = 4
    folds: int = 5
    seed: int = 0
    jobs: int = 1
    models: tuple = ("intraop_only", "preop_only", "proposed", "full")


@dataclass
class ForestStage:
    """Screen + forest fitted on one feature set, with its training-time cutoff."""

    name: str
    candidates: list
    grid: GridResult
    selected: list
    model: ForestModel | None
    cutoff: float
    constant: float = 0.5

    def predict(self, matrix: FeatureMatrix):
        if self.model is None:
            return np.full(len(matrix), self.constant)
        return self.model.predict_proba(matrix.select(self.selected).X)


def fit_forest_stage(name, train: FeatureMatrix, y, settings: SuiteSettings):
    cells = expand_grid(settings.forest_grid)
    grid = grid_search(train.X, y, cells, settings.folds, settings.seed, train.columns,
                       jobs=settings.jobs)
    best = grid.best
    screen = f_test_screen(train.X, y, best["alpha"], train.columns)
    cutoff = youden_cutoff(grid.oof_scores, y)
    if not screen.selected:
        return ForestStage(name, list(train.columns), grid, [], None, cutoff, float(np.mean(y)))
    cfg = ForestConfig(best["n_trees"], best["max_features"], best["min_samples_leaf"],
                       best["max_depth"], seed=settings.seed)
    model = fit_forest(train.select(screen.selected).X, y, cfg, columns=screen.selected,
                       jobs=settings.jobs)
    return ForestStage(name, list(train.columns), grid, screen.selected, model, cutoff)


@dataclass
class ComparisonSuite:
    preop: PreopModel | None
    preop_cutoff: float | None
    stages: dict  # name -> ForestStage

    def predict(self, preop_matrix: FeatureMatrix, intraop_matrix: FeatureMatrix):
        if preop_matrix.ids != intraop_matrix.ids:
            raise RowMisalignment("preop and intraop matrices are not row-aligned")
        out = {}
        pre_scores = predict_preop(self.preop, preop_matrix) if self.preop else None
        if pre_scores is not None and self.preop_cutoff is not None:
            out["preop_only"] = pre_scores
        for name, stage in self.stages.items():
            out[name] = stage.predict(_stage_matrix(name, preop_matrix, intraop_matrix, pre_scores))
        return out

    def cutoffs(self):
        c = {name: s.cutoff for name, s in self.stages.items()}
        if self.preop_cutoff is not None:
            c["preop_only"] = self.preop_cutoff
        return c


def _stage_matrix(name, preop_matrix, intraop_matrix, preop_scores):
    if name == "intraop_only":
        return intraop_matrix
    if name == "proposed":
        return intraop_matrix.with_column(PREOP_SCORE, preop_scores, "preop_model", "probability")
    if name == "full":
        X = np.column_stack([intraop_matrix.X, preop_matrix.X])
        cols = intraop_matrix.columns + preop_matrix.columns
        return FeatureMatrix(list(intraop_matrix.ids), cols, X, dict(intraop_matrix.outcomes),
                             None, intraop_matrix.manifest + preop_matrix.manifest)
    raise ValueError(f"unknown model {name!r}")


def train_comparison_suite(preop_matrix: FeatureMatrix, intraop_matrix: FeatureMatrix, outcome,
                           settings: SuiteSettings | None = None, preop_scores=None):
    """Fit the comparison models on training rows.

    The proposed model receives the preoperative score as a feature.  On the
    training rows that score is the out-of-fold prediction of the preop model
    (``preop_scores`` if given, else the CV by-product of :func:`fit_preop`),
    so the forest never sees in-sample preop scores.
    """
    settings = settings or SuiteSettings()
    if preop_matrix.ids != intraop_matrix.ids:
        raise RowMisalignment("preop and intraop matrices are not row-aligned")
    y = preop_matrix.outcomes[outcome] if isinstance(outcome, str) else np.asarray(outcome)
    y = y.astype(bool)

    preop = None
    preop_cutoff = None
    need_preop = {"preop_only", "proposed"} & set(settings.models)
    if need_preop:
        preop = fit_preop(preop_matrix, y, settings.lambda_grid, settings.folds,
                          settings.seed, settings.spline_df)
        if preop_scores is None:
            preop_scores = preop.oof_scores
        preop_cutoff = youden_cutoff(preop.oof_scores, y)

    stages = {}
    for name in ("intraop_only", "proposed", "full"):
        if name not in settings.models:
            continue
        train = _stage_matrix(name, preop_matrix, intraop_matrix, preop_scores)
        stages[name] = fit_forest_stage(name, train, y, settings)
    if "preop_only" not in settings.models:
        preop_keep = preop if "proposed" in stages else None
        return ComparisonSuite(preop_keep, None, stages)
    return ComparisonSuite(preop, preop_cutoff, stages)
