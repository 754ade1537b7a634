"""End-to-end workflow: cohort -> labels -> cleaning -> features -> split ->
preop model -> stacked forests -> evaluation report, driven by one config file."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

from .cohort import DEFAULT_SIGNAL_RANGES, OUTCOMES, load_cohort, split_cohort, write_cohort
from .errors import ConfigError, PeriopError, SchemaMismatch
from .evaluation import MODEL_NAMES, REPORT_SCHEMA_VERSION, build_report
from .features import (DEFAULT_ABNORMAL_RANGES, DEFAULT_OCCUPANCY_RANGES, FeatureConfig,
                       assemble_matrix, clean_cohort, extract_raw_features, fit_encoders)
from .forest import DEFAULT_GRID
from .outcomes import label_cohort, write_labels
from .preop import DEFAULT_LAMBDA_GRID
from .stacking import SuiteSettings, train_comparison_suite
from .synth import DEFAULT_INTRAOP_WEIGHTS, DEFAULT_PREOP_WEIGHTS, SynthConfig, generate_synthetic_cohort

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 2024
    train_fraction: float = 0.70
    output_dir: str = "runs"
    outcomes: tuple = OUTCOMES
    models: tuple = MODEL_NAMES
    bootstrap_n: int = 1000
    jobs: int = 1
    # input files; when absent a synthetic cohort is generated
    patients: str | None = None
    timeseries: str | None = None
    labs: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    signal_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIGNAL_RANGES))
    features: FeatureConfig = field(default_factory=FeatureConfig)
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    spline_df: int = 4
    folds: int = 5
    forest_grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))

    def validate(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("run.train_fraction must lie strictly between 0 and 1")
        if self.bootstrap_n < 200:
            raise ConfigError("run.bootstrap_n must be at least 200")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        bad = set(self.outcomes) - set(OUTCOMES)
        if bad:
            raise ConfigError(f"unknown outcomes {sorted(bad)}")
        bad = set(self.models) - set(MODEL_NAMES)
        if bad:
            raise ConfigError(f"unknown models {sorted(bad)}")
        given = [p is not None for p in (self.patients, self.timeseries, self.labs)]
        if any(given) and not all(given):
            raise ConfigError("data.patients, data.timeseries and data.labs go together")
        for k in ("n_trees", "max_features", "min_samples_leaf", "alpha"):
            if not self.forest_grid.get(k):
                raise ConfigError(f"forest.{k} must list at least one value")
        if not self.lambda_grid:
            raise ConfigError("preop.lambda_grid must list at least one value")
        return self

    def canonical(self):
        """JSON-able view used for hashing and the report header."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("jobs")
        d["features"].pop("jobs", None)
        return _jsonable(d)

    def digest(self):
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_dir(self):
        return os.path.join(self.output_dir, f"run-{self.digest()}")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "-inf"
    return x


# -- config file --------------------------------------------------------------

def _float(s):
    s = s.strip().lower()
    if s in ("inf", "+inf"):
        return math.inf
    if s == "-inf":
        return -math.inf
    return float(s)


def _list(s, conv=str):
    return tuple(conv(v.strip()) for v in s.split(",") if v.strip())


def _interval(s):
    lo, hi = s.split(":")
    return (_float(lo), _float(hi))


def _max_features(s):
    s = s.strip()
    return s if s in ("sqrt", "log2", "all") else float(s)


def _depth(s):
    return None if s.strip().lower() in ("none", "") else int(s)


def _bool(s):
    return s.strip().lower() in ("1", "true", "yes", "on")


_SCHEMA = {
    "run": {"seed": int, "train_fraction": float, "output_dir": str,
            "outcomes": lambda s: _list(s), "models": lambda s: _list(s),
            "bootstrap_n": int, "jobs": int},
    "data": {"patients": str, "timeseries": str, "labs": str},
    "synth": {"n_patients": int, "target_prevalence_7day": float,
              "sampling_interval_min": float, "artifact_rate": float},
    "cleaning": {"window_w": int, "extreme_sd": float, "peak_sd": float,
                 "tail_fraction": float, "min_samples": int},
    "features": {"encoder_alpha": float, "onehot_max_levels": int, "missing_threshold": float},
    "preop": {"lambda_grid": lambda s: _list(s, float), "df": int, "folds": int},
    "forest": {"n_trees": lambda s: _list(s, int), "max_features": lambda s: _list(s, _max_features),
               "min_samples_leaf": lambda s: _list(s, int), "max_depth": lambda s: _list(s, _depth),
               "alpha": lambda s: _list(s, float)},
}

# sections whose keys are free-form names
_OPEN = {
    "synth.preop_weight": float,
    "synth.intraop_weight": float,
    "signals": _interval,
    "features.occupancy": lambda s: [_interval(v) for v in s.split(",") if v.strip()],
    "features.abnormal": _interval,
}


def parse_config(text, overrides=None) -> PipelineConfig:
    """Parse the INI-style config; unknown sections or keys raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section in _SCHEMA:
            schema = _SCHEMA[section]
            for key, raw in cp.items(section):
                if key not in schema:
                    raise ConfigError(f"unknown key {section}.{key}")
                try:
                    values[(section, key)] = schema[key](raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from None
        elif section in _OPEN:
            for key, raw in cp.items(section):
                try:
                    values[(section, key)] = _OPEN[section](raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from None
        else:
            raise ConfigError(f"unknown section [{section}]")
    for k, v in (overrides or {}).items():
        values[k] = v

    get = lambda sec, key, default: values.get((sec, key), default)
    seed = get("run", "seed", 2024)

    pre_w = dict(DEFAULT_PREOP_WEIGHTS)
    intra_w = dict(DEFAULT_INTRAOP_WEIGHTS)
    for (sec, key), v in values.items():
        if sec == "synth.preop_weight":
            if key not in pre_w:
                raise ConfigError(f"unknown preop weight {key!r}")
            pre_w[key] = v
        elif sec == "synth.intraop_weight":
            if key not in intra_w:
                raise ConfigError(f"unknown intraop weight {key!r}")
            intra_w[key] = v
    try:
        synth = SynthConfig(
            n_patients=get("synth", "n_patients", 3000), seed=seed,
            target_prevalence_7day=get("synth", "target_prevalence_7day", 0.40),
            preop_effect_weights=pre_w, intraop_effect_weights=intra_w,
            sampling_interval_min=get("synth", "sampling_interval_min", 3.0),
            artifact_rate=get("synth", "artifact_rate", 0.01))
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from None

    ranges = dict(DEFAULT_SIGNAL_RANGES)
    occupancy = {k: list(v) for k, v in DEFAULT_OCCUPANCY_RANGES.items()}
    abnormal = dict(DEFAULT_ABNORMAL_RANGES)
    for (sec, key), v in values.items():
        if sec == "signals":
            ranges[key] = v
        elif sec == "features.occupancy":
            occupancy[key] = v
        elif sec == "features.abnormal":
            abnormal[key] = v

    feats = FeatureConfig(
        window_w=get("cleaning", "window_w", 15), extreme_sd=get("cleaning", "extreme_sd", 4.0),
        peak_sd=get("cleaning", "peak_sd", 3.0), tail_fraction=get("cleaning", "tail_fraction", 0.005),
        min_samples=get("cleaning", "min_samples", 31), occupancy_ranges=occupancy,
        abnormal_ranges=abnormal, encoder_alpha=get("features", "encoder_alpha", 1.0),
        onehot_max_levels=get("features", "onehot_max_levels", 5),
        missing_threshold=get("features", "missing_threshold", 0.4), seed=seed,
        jobs=get("run", "jobs", 1))
    if feats.window_w < 1 or feats.encoder_alpha <= 0 or not 0 <= feats.missing_threshold <= 1:
        raise ConfigError("cleaning.window_w >= 1, features.encoder_alpha > 0 and "
                          "features.missing_threshold in [0, 1] are required")

    grid = dict(DEFAULT_GRID)
    for key in ("n_trees", "max_features", "min_samples_leaf", "max_depth", "alpha"):
        if ("forest", key) in values:
            grid[key] = values[("forest", key)]

    cfg = PipelineConfig(
        seed=seed, train_fraction=get("run", "train_fraction", 0.70),
        output_dir=get("run", "output_dir", "runs"), outcomes=get("run", "outcomes", OUTCOMES),
        models=get("run", "models", MODEL_NAMES), bootstrap_n=get("run", "bootstrap_n", 1000),
        jobs=get("run", "jobs", 1), patients=get("data", "patients", None),
        timeseries=get("data", "timeseries", None), labs=get("data", "labs", None),
        synth=synth, signal_ranges=ranges, features=feats,
        lambda_grid=get("preop", "lambda_grid", DEFAULT_LAMBDA_GRID),
        spline_df=get("preop", "df", 4), folds=get("preop", "folds", 5), forest_grid=grid)
    return cfg.validate()


def load_config(path, seed=None, output_dir=None, jobs=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    overrides = {}
    if seed is not None:
        overrides[("run", "seed")] = int(seed)
    if output_dir is not None:
        overrides[("run", "output_dir")] = output_dir
    if jobs is not None:
        overrides[("run", "jobs")] = int(jobs)
    cfg = parse_config(text, overrides)
    base = os.path.dirname(os.path.abspath(path))
    for attr in ("patients", "timeseries", "labs"):
        p = getattr(cfg, attr)
        if p is not None and not os.path.isabs(p):
            setattr(cfg, attr, os.path.join(base, p))
    return cfg


# -- stages -------------------------------------------------------------------

class StageError(PeriopError):
    """A module error tagged with the pipeline stage where it happened."""

    def __init__(self, stage, err):
        self.stage = stage
        self.original = err
        self.exit_code = getattr(err, "exit_code", 1)
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, PeriopError) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def obtain_cohort(cfg: PipelineConfig):
    if cfg.patients is not None:
        return load_cohort(cfg.patients, cfg.timeseries, cfg.labs, cfg.signal_ranges)
    return generate_synthetic_cohort(cfg.synth)


@dataclass
class Experiment:
    """Everything one run produces before it is written out."""

    cohort: object
    train_ids: list
    test_ids: list
    cleaning: object
    results: dict  # outcome -> {"ids", "labels", "models": {name: {...}}}
    suites: dict
    matrices: dict


def run_experiment(cfg: PipelineConfig, cohort=None, split=None) -> Experiment:
    """Run every stage in memory.

    ``split`` optionally fixes ``(train_ids, test_ids)`` instead of drawing the
    stratified random split.
    """
    with _stage("cohort"):
        cohort = cohort if cohort is not None else obtain_cohort(cfg)
    with _stage("label"):
        if cohort.labels is None:
            cohort = label_cohort(cohort)
    with _stage("clean"):
        cleaned, cleaning = clean_cohort(cohort, cfg.features)
    with _stage("split"):
        if split is None:
            train, test = split_cohort(cleaned, cfg.train_fraction, cfg.seed)
            train_ids, test_ids = train.ids, test.ids
        else:
            train_ids, test_ids = list(split[0]), list(split[1])
    with _stage("features"):
        raw = extract_raw_features(cleaned, cfg.features)

    settings = SuiteSettings(forest_grid=cfg.forest_grid, lambda_grid=cfg.lambda_grid,
                             spline_df=cfg.spline_df, folds=cfg.folds, seed=cfg.seed,
                             jobs=cfg.jobs, models=tuple(cfg.models))
    results, suites, matrices = {}, {}, {}
    for outcome in cfg.outcomes:
        with _stage(f"features:{outcome}"):
            encoders = fit_encoders(cleaned, outcome, cfg.features, train_ids)
            fm = assemble_matrix(cleaned, encoders, cfg.features, train_ids, raw, cleaning)
            pre_tr = fm.select(block="preop").rows_for(train_ids)
            in_tr = fm.select(block="intraop").rows_for(train_ids)
            pre_te = fm.select(block="preop").rows_for(test_ids)
            in_te = fm.select(block="intraop").rows_for(test_ids)
            matrices[outcome] = fm
        with _stage(f"model:{outcome}"):
            suite = train_comparison_suite(pre_tr, in_tr, outcome, settings)
            suites[outcome] = suite
        with _stage(f"score:{outcome}"):
            scores = suite.predict(pre_te, in_te)
            cut = suite.cutoffs()
            results[outcome] = {
                "ids": list(test_ids), "labels": pre_te.outcomes[outcome],
                "models": {name: {"test_scores": s, "cutoff": cut[name]}
                           for name, s in scores.items()},
            }
    return Experiment(cleaned, train_ids, test_ids, cleaning, results, suites, matrices)


def _write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(rows)


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def cmd_synth(cfg: PipelineConfig, out_dir=None):
    """Write a synthetic cohort plus ``manifest.json``; returns the output directory."""
    out_dir = out_dir or os.path.join(cfg.output_dir, f"synth-{cfg.synth.seed}")
    with _stage("synth"):
        cohort = generate_synthetic_cohort(cfg.synth)
        paths = write_cohort(cohort, out_dir)
    with _stage("label"):
        labeled = label_cohort(cohort)
    manifest = {
        "seed": cfg.synth.seed, "n_patients": len(cohort),
        "target_prevalence_7day": cfg.synth.target_prevalence_7day,
        "realized_prevalence": {o: float(labeled.outcome(o).mean()) for o in OUTCOMES},
        "files": {k: os.path.basename(v) for k, v in paths.items()},
        "synth_config": _jsonable(asdict(cfg.synth)),
    }
    _dump(os.path.join(out_dir, "manifest.json"), manifest)
    return out_dir


def cmd_label(cfg: PipelineConfig, out_dir=None):
    out_dir = out_dir or cfg.run_dir()
    os.makedirs(out_dir, exist_ok=True)
    with _stage("cohort"):
        cohort = obtain_cohort(cfg)
    with _stage("label"):
        labeled = label_cohort(cohort)
        path = os.path.join(out_dir, "labels.csv")
        write_labels(labeled, path)
    return path


def cmd_features(cfg: PipelineConfig, out_dir=None, outcome="aki_7day"):
    out_dir = out_dir or cfg.run_dir()
    os.makedirs(out_dir, exist_ok=True)
    with _stage("cohort"):
        cohort = obtain_cohort(cfg)
    with _stage("label"):
        cohort = label_cohort(cohort)
    with _stage("clean"):
        cleaned, cleaning = clean_cohort(cohort, cfg.features)
    with _stage("split"):
        train, _ = split_cohort(cleaned, cfg.train_fraction, cfg.seed)
    with _stage("features"):
        encoders = fit_encoders(cleaned, outcome, cfg.features, train.ids)
        fm = assemble_matrix(cleaned, encoders, cfg.features, train.ids, report=cleaning)
        fm.to_csv(os.path.join(out_dir, "features.csv"))
        with open(os.path.join(out_dir, "feature_manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(fm.manifest_json() + "\n")
        with open(os.path.join(out_dir, "cleaning.json"), "w", encoding="utf-8") as fh:
            fh.write(cleaning.to_json() + "\n")
    return os.path.join(out_dir, "features.csv")


def cmd_run(cfg: PipelineConfig, out_dir=None):
    """Full workflow; writes report.json and companions, returns the run directory."""
    out_dir = out_dir or cfg.run_dir()
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    exp = run_experiment(cfg)
    with open(os.path.join(out_dir, "cleaning.json"), "w", encoding="utf-8") as fh:
        fh.write(exp.cleaning.to_json() + "\n")

    with _stage("evaluate"):
        report = build_report(exp.results, cfg.bootstrap_n, cfg.seed)
    report["config"] = cfg.canonical()
    report["config_digest"] = cfg.digest()
    report["cohort"] = {"n_patients": len(exp.cohort), "n_train": len(exp.train_ids),
                        "n_test": len(exp.test_ids),
                        "prevalence": {o: float(exp.cohort.outcome(o).mean()) for o in OUTCOMES}}
    for outcome, suite in exp.suites.items():
        block = report["outcomes"][outcome]
        block["selection"] = {}
        if suite.preop is not None:
            block["selection"]["preop_lambda"] = suite.preop.lam
        for name, stage in suite.stages.items():
            block["selection"][name] = {"best": stage.grid.best, "n_selected": len(stage.selected)}

    models_dir = os.path.join(out_dir, "models")
    os.makedirs(models_dir, exist_ok=True)
    for outcome, suite in exp.suites.items():
        if suite.preop is not None:
            with open(os.path.join(models_dir, f"{outcome}_preop.json"), "w", encoding="utf-8") as fh:
                fh.write(suite.preop.to_json())
        for name, stage in suite.stages.items():
            if stage.model is not None:
                with open(os.path.join(models_dir, f"{outcome}_{name}.json"), "w",
                          encoding="utf-8") as fh:
                    fh.write(stage.model.to_json())
            _write_csv(os.path.join(out_dir, f"grid_{outcome}_{name}.csv"),
                       stage.grid.table_csv_rows())

    # training rows carry their out-of-fold score (the value the proposed
    # forest was trained on); test rows carry the refit model's prediction
    for outcome, suite in exp.suites.items():
        if suite.preop is None:
            continue
        test_scores = suite.preop.predict(
            exp.matrices[outcome].select(block="preop").rows_for(exp.test_ids))
        rows = [["patient_id", "preop_score", "split"]]
        rows += [[pid, repr(float(s)), "train"] for pid, s in zip(exp.train_ids, suite.preop.oof_scores)]
        rows += [[pid, repr(float(s)), "test"] for pid, s in zip(exp.test_ids, test_scores)]
        _write_csv(os.path.join(out_dir, f"preop_scores_{outcome}.csv"), rows)

    roc_rows = [["outcome", "model", "fpr", "tpr", "threshold"]]
    for outcome, block in sorted(report["outcomes"].items()):
        for name, pts in sorted(block["roc"].items()):
            roc_rows += [[outcome, name, repr(a), repr(b), "inf" if c is None else repr(c)]
                         for a, b, c in pts]
    _write_csv(os.path.join(out_dir, "roc.csv"), roc_rows)
    flow_rows = [["outcome", "quadrant", "count"]]
    for outcome, block in sorted(report["outcomes"].items()):
        for q, n in sorted(block.get("reclassification", {}).items()):
            flow_rows.append([outcome, q, n])
    _write_csv(os.path.join(out_dir, "reclassification.csv"), flow_rows)
    score_rows = [["outcome", "patient_id", "label"] + list(MODEL_NAMES)]
    for outcome, res in sorted(exp.results.items()):
        for i, pid in enumerate(res["ids"]):
            score_rows.append([outcome, pid, int(res["labels"][i])] + [
                repr(float(res["models"][m]["test_scores"][i])) if m in res["models"] else ""
                for m in MODEL_NAMES])
    _write_csv(os.path.join(out_dir, "scores.csv"), score_rows)

    _dump(os.path.join(out_dir, "report.json"), report)
    # wall-clock data lives apart from the deterministic report
    _dump(os.path.join(out_dir, "run_meta.json"),
          {"started_unix": started, "elapsed_s": time.time() - started,
           "config_digest": cfg.digest()})
    return out_dir


def load_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"cannot read report {path}: {exc}") from None
    if not isinstance(report, dict) or report.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise SchemaMismatch("report schema version mismatch")
    outs = report.get("outcomes")
    if not isinstance(outs, dict) or not outs:
        raise SchemaMismatch("report has no outcomes")
    for o, block in outs.items():
        try:
            for name, m in block["models"].items():
                float(m["metrics"]["auc"]["point"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"outcome {o}: malformed model block ({exc})") from None
    return report


def cmd_compare(report_path, out_path=None):
    """AUROC grid (outcome x model) and NRI line; writes ``figure5.csv``."""
    report = load_report(report_path)
    rows = [["outcome", "model", "auc", "auc_lo", "auc_hi"]]
    lines = []
    models = [m for m in MODEL_NAMES if any(m in b["models"] for b in report["outcomes"].values())]
    lines.append("outcome".ljust(14) + "".join(m.rjust(14) for m in models))
    for outcome, block in sorted(report["outcomes"].items()):
        cells = []
        for m in models:
            if m in block["models"]:
                auc = block["models"][m]["metrics"]["auc"]
                rows.append([outcome, m, auc["point"], auc["lo"], auc["hi"]])
                cells.append(f"{auc['point']:.3f}".rjust(14))
            else:
                cells.append("-".rjust(14))
        lines.append(outcome.ljust(14) + "".join(cells))
    for outcome, block in sorted(report["outcomes"].items()):
        if "nri" in block:
            n = block["nri"]
            lines.append(f"NRI {outcome} ({n['candidate']} vs {n['reference']}): "
                         f"{100 * n['nri']:.2f}% [{n['ci']['lo']:.3f}, {n['ci']['hi']:.3f}] "
                         f"p={n['p_value']:.3g}")
    out_path = out_path or os.path.join(os.path.dirname(os.path.abspath(report_path)), "figure5.csv")
    _write_csv(out_path, rows)
    return "\n".join(lines), out_path
