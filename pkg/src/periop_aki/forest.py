"""Random forest of Gini CART trees, univariate F-test screening and CV grid search."""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numba
import numpy as np
from scipy.stats import f as f_dist

from .cohort import stratified_folds
from .errors import DegenerateOutcome, MissingColumn
from .evaluation import auc_score

MODEL_VERSION = 1
# relative slack under which two split scores count as tied
TIE_EPS = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_features: object = "sqrt"  # "sqrt" | "log2" | "all" | fraction in (0, 1]
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        mf = self.max_features
        if isinstance(mf, str):
            if mf not in ("sqrt", "log2", "all"):
                raise ValueError(f"unknown max_features {mf!r}")
        elif not 0.0 < float(mf) <= 1.0:
            raise ValueError("fractional max_features must lie in (0, 1]")

    def n_candidates(self, n_features):
        mf = self.max_features
        if mf == "sqrt":
            k = int(math.sqrt(n_features))
        elif mf == "log2":
            k = int(math.log2(n_features)) if n_features > 0 else 0
        elif mf == "all":
            k = n_features
        else:
            k = int(float(mf) * n_features)
        return max(1, min(n_features, k))


@numba.njit(cache=True, nogil=True)
def _best_split(X, y, idx, feats, min_leaf):
    """Best (feature, threshold, score) over ``feats`` for node rows ``idx``.

    score = sum over children of (n0^2 + n1^2) / n, i.e. the weighted Gini
    impurity subtracted from n; larger is better.  ``feats`` must be sorted
    so the strict comparison keeps the lowest feature, then lowest threshold.
    """
    m = idx.size
    best_f = -1
    best_t = 0.0
    best_s = -1.0
    n1_total = 0
    for i in range(m):
        n1_total += y[idx[i]]
    vals = np.empty(m)
    ys = np.empty(m, dtype=np.int64)
    for f in feats:
        for i in range(m):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        for i in range(m):
            ys[i] = y[idx[order[i]]]
        c1 = 0
        for i in range(m - 1):
            c1 += ys[i]
            nl = i + 1
            if sv[i] == sv[i + 1]:
                continue
            if nl < min_leaf or m - nl < min_leaf:
                continue
            c0 = nl - c1
            nr = m - nl
            r1 = n1_total - c1
            r0 = nr - r1
            s = (c0 * c0 + c1 * c1) / nl + (r0 * r0 + r1 * r1) / nr
            if s > best_s + TIE_EPS * max(abs(best_s), 1.0):
                best_s = s
                best_f = f
                thr = 0.5 * (sv[i] + sv[i + 1])
                if thr >= sv[i + 1]:
                    thr = sv[i]
                best_t = thr
    return best_f, best_t, best_s


@numba.njit(cache=True, nogil=True)
def _build_tree(X, y, sample_idx, n_cand, min_leaf, max_depth, seed):
    np.random.seed(seed)
    p = X.shape[1]
    cap = 2 * sample_idx.size + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    n_node = np.zeros(cap, dtype=np.int64)
    gain = np.zeros(cap)

    # stack of (node id, start, end, depth) into a shared index buffer
    buf = sample_idx.copy()
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = buf.size
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    perm = np.arange(p)
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        idx = buf[lo:hi]
        m = hi - lo
        n1 = 0
        for i in range(m):
            n1 += y[idx[i]]
        value[node] = n1 / m
        n_node[node] = m
        if n1 == 0 or n1 == m or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        # partial Fisher-Yates draw of the candidate features
        for i in range(n_cand):
            j = i + np.random.randint(0, p - i)
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        feats = np.sort(perm[:n_cand].copy())
        f, t, s = _best_split(X, y, idx, feats, min_leaf)
        if f < 0:
            continue
        # partition idx in place: left rows first
        go_left = np.empty(m, dtype=np.bool_)
        nl = 0
        for i in range(m):
            go_left[i] = X[idx[i], f] <= t
            if go_left[i]:
                nl += 1
        tmp_idx = idx.copy()
        a = 0
        b = nl
        for i in range(m):
            if go_left[i]:
                buf[lo + a] = tmp_idx[i]
                a += 1
            else:
                buf[lo + b] = tmp_idx[i]
                b += 1
        feature[node] = f
        threshold[node] = t
        gain[node] = s - (n1 * n1 + (m - n1) * (m - n1)) / m
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is expanded first
        st_node[top] = rnode
        st_lo[top] = lo + nl
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lnode
        st_lo[top] = lo
        st_hi[top] = lo + nl
        st_depth[top] = depth + 1
        top += 1
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), n_node[:n_nodes].copy(),
            gain[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # P(class = 1) at each node; leaves use [1 - v, v]
    n_samples: np.ndarray
    gain: np.ndarray

    def predict(self, X):
        return _predict_tree(np.ascontiguousarray(X, dtype=np.float64), self.feature,
                             self.threshold, self.left, self.right, self.value)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "value", "n_samples", "gain")}

    @classmethod
    def from_dict(cls, d):
        ints = ("feature", "left", "right", "n_samples")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else np.float64)
                      for k, v in d.items()})


class ForestModel:
    def __init__(self, trees, columns, config, oob_auc=None):
        self.trees = list(trees)
        self.columns = list(columns)
        self.config = config
        self.oob_auc = oob_auc

    def _X(self, matrix):
        if isinstance(matrix, np.ndarray):
            return matrix
        missing = [c for c in self.columns if c not in matrix.columns]
        if missing:
            raise MissingColumn(missing[0])
        return matrix.select(self.columns).X

    def predict_proba(self, matrix, n_trees=None):
        X = np.ascontiguousarray(self._X(matrix), dtype=np.float64)
        trees = self.trees if n_trees is None else self.trees[:n_trees]
        acc = np.zeros(X.shape[0])
        for t in trees:
            acc += t.predict(X)
        return acc / len(trees)

    def feature_importances(self):
        """Total Gini decrease per column, normalized to sum to one."""
        imp = np.zeros(len(self.columns))
        for t in self.trees:
            internal = t.feature >= 0
            np.add.at(imp, t.feature[internal], t.gain[internal])
        total = imp.sum()
        return dict(zip(self.columns, (imp / total if total > 0 else imp).tolist()))

    def to_json(self):
        return json.dumps({"version": MODEL_VERSION, "kind": "random_forest_gini",
                           "columns": self.columns, "config": asdict(self.config),
                           "trees": [t.to_dict() for t in self.trees]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported forest model version {d.get('version')}")
        return cls([Tree.from_dict(t) for t in d["trees"]], d["columns"],
                   ForestConfig(**d["config"]))


def tree_seed(seed, index):
    """Per-tree seeds; tree k is the same whatever the forest size."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), 0x7EE, index])
    return ss.generate_state(2, dtype=np.uint32)


def _fit_one(X, y, cfg, n_cand, index):
    s = tree_seed(cfg.seed, index)
    rng = np.random.default_rng(s)
    sample = rng.integers(0, X.shape[0], size=X.shape[0])
    depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
    arrays = _build_tree(X, y, sample.astype(np.int64), n_cand, int(cfg.min_samples_leaf),
                         depth, int(s[1] & 0x7FFFFFFF))
    return Tree(*arrays)


def fit_forest(X, y, cfg: ForestConfig, columns=None, jobs=1):
    """Bagged CART trees with random feature subsets at each node.

    ``X`` may be an array or a FeatureMatrix (its columns are then used).
    """
    if columns is None:
        columns = list(getattr(X, "columns", range(np.asarray(X).shape[1])))
        X = getattr(X, "X", X)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    n1 = int(y.sum())
    if n1 < 2 or y.size - n1 < 2:
        raise DegenerateOutcome("forest needs at least two rows of each class")
    n_cand = cfg.n_candidates(X.shape[1])
    work = lambda k: _fit_one(X, y, cfg, n_cand, k)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            trees = list(ex.map(work, range(cfg.n_trees)))
    else:
        trees = [work(k) for k in range(cfg.n_trees)]
    return ForestModel(trees, [str(c) for c in columns], cfg)


def predict_forest(model: ForestModel, matrix):
    return model.predict_proba(matrix)


# -- F-test screening ---------------------------------------------------------

@dataclass(frozen=True)
class ScreeningResult:
    names: list
    f_stat: np.ndarray
    p_value: np.ndarray
    selected: list
    alpha: float


def f_statistics(X, y):
    """One-way ANOVA F (two groups) per column, with p-values from F(1, n-2)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise DegenerateOutcome("F test needs both outcome classes")
    n = n1 + n0
    grand = X.mean(axis=0)
    m1, m0 = X[y].mean(axis=0), X[~y].mean(axis=0)
    ssb = n1 * (m1 - grand) ** 2 + n0 * (m0 - grand) ** 2
    ssw = ((X[y] - m1) ** 2).sum(axis=0) + ((X[~y] - m0) ** 2).sum(axis=0)
    msw = ssw / (n - 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(msw > 0, ssb / np.where(msw > 0, msw, 1.0),
                     np.where(ssb > 0, np.inf, 0.0))
    p = np.where(np.isinf(F), 0.0, f_dist.sf(F, 1, n - 2))
    return F, p


def f_test_screen(X, y, alpha=0.05, names=None):
    if names is None:
        names = list(getattr(X, "columns", range(np.asarray(getattr(X, "X", X)).shape[1])))
    X = getattr(X, "X", X)
    F, p = f_statistics(X, y)
    selected = [nm for nm, pv in zip(names, p) if pv < alpha]
    return ScreeningResult(list(names), F, p, selected, float(alpha))


# -- grid search --------------------------------------------------------------

DEFAULT_GRID = {"n_trees": (100, 300), "max_features": ("sqrt", 0.3),
                "min_samples_leaf": (1, 5, 20), "alpha": (0.05,)}


def expand_grid(grid):
    keys = ("alpha", "n_trees", "max_features", "min_samples_leaf", "max_depth")
    axes = [list(grid.get(k, (None,) if k == "max_depth" else ())) for k in keys]
    return [dict(zip(keys, vals)) for vals in itertools.product(*axes)]


def _parsimony_key(cell):
    mf = cell["max_features"]
    return (cell["n_trees"], -cell["min_samples_leaf"], str(cell["alpha"]), str(mf),
            str(cell.get("max_depth")))


@dataclass
class GridResult:
    best: dict
    table: list  # one dict per cell
    oof_scores: np.ndarray  # out-of-fold scores of the best cell

    def table_csv_rows(self):
        header = ["cell", "alpha", "n_trees", "max_features", "min_samples_leaf", "max_depth",
                  "mean_auc", "fold_aucs"]
        rows = [header]
        for i, r in enumerate(self.table):
            rows.append([i, r["alpha"], r["n_trees"], r["max_features"], r["min_samples_leaf"],
                         "" if r["max_depth"] is None else r["max_depth"], repr(r["mean_auc"]),
                         ";".join(repr(a) for a in r["fold_aucs"])])
        return rows


def grid_search(X, y, cells, folds=5, seed=0, names=None, jobs=1):
    """Stratified k-fold CV over grid cells; screening is refit in every training fold.

    Cells differing only in ``n_trees`` share one forest per fold and are
    scored on tree prefixes, which is exactly what a smaller forest with the
    same seed would produce.  Best cell: highest mean AUROC, then fewer trees,
    then larger ``min_samples_leaf``, then lexicographic.
    """
    if not cells:
        raise ValueError("empty grid")
    if names is None:
        names = list(getattr(X, "columns", range(np.asarray(getattr(X, "X", X)).shape[1])))
    X = np.ascontiguousarray(getattr(X, "X", X), dtype=np.float64)
    y = np.asarray(y).astype(bool)
    fold_id = stratified_folds(y, folds, seed)

    screens = {}
    for alpha in sorted({c["alpha"] for c in cells}):
        for k in range(folds):
            tr = fold_id != k
            sel = f_test_screen(X[tr], y[tr], alpha, list(range(X.shape[1]))).selected
            screens[(alpha, k)] = sel

    groups = {}
    for i, c in enumerate(cells):
        key = (c["alpha"], str(c["max_features"]), c["min_samples_leaf"], c.get("max_depth"))
        groups.setdefault(key, []).append(i)

    fold_aucs = [[0.0] * folds for _ in cells]
    oof = [np.full(y.size, np.nan) for _ in cells]
    for key, members in groups.items():
        c0 = cells[members[0]]
        biggest = max(cells[i]["n_trees"] for i in members)
        for k in range(folds):
            tr, va = fold_id != k, fold_id == k
            sel = screens[(c0["alpha"], k)]
            if not sel:
                # nothing passes the screen: constant prediction
                for i in members:
                    fold_aucs[i][k] = 0.5
                    oof[i][va] = y[tr].mean()
                continue
            cfg = ForestConfig(biggest, c0["max_features"], c0["min_samples_leaf"],
                               c0.get("max_depth"), seed=seed * 1000 + k)
            model = fit_forest(X[tr][:, sel], y[tr], cfg, columns=[names[j] for j in sel],
                               jobs=jobs)
            Xv = X[va][:, sel]
            for i in members:
                pred = model.predict_proba(Xv, n_trees=cells[i]["n_trees"])
                oof[i][va] = pred
                fold_aucs[i][k] = auc_score(pred, y[va])

    table = []
    for i, c in enumerate(cells):
        row = dict(c)
        row.setdefault("max_depth", None)
        row["fold_aucs"] = fold_aucs[i]
        row["mean_auc"] = float(np.mean(fold_aucs[i]))
        table.append(row)
    best_i = min(range(len(cells)),
                 key=lambda i: (-table[i]["mean_auc"], _parsimony_key(table[i])))
    best = {k: table[best_i][k] for k in ("alpha", "n_trees", "max_features",
                                          "min_samples_leaf", "max_depth")}
    return GridResult(best, table, oof[best_i])
