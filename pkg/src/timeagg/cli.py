"""Command-line pipeline: synth, prepare, tune, train, eval, importance, confusion.

Settings come from a flat ``key = value`` config file (``#`` starts a comment,
lists are comma-separated, booleans are ``true``/``false``) and can be
overridden by ``--key value`` flags.  Every output lands in ``--out``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import synthgen
from .architectures import (
    ALL_KINDS,
    ArchitectureKind,
    HyperParams,
    NumericError,
    TrainConfig,
    predict,
    train,
)
from .artifact import load_model, save_model
from .cohort import (
    Cohort,
    DataError,
    build_grids,
    fit_stats,
    grids_to_arrays,
    prepare_grids,
    read_cohort,
    read_schema,
    stratified_split,
    write_cohort,
    write_grids_csv,
    write_schema,
)
from .interpret import (
    confusion_plot,
    heatmap_svg,
    permutation_importance,
    scatter_svg,
    write_embedding_csv,
    write_heatmap_csv,
)
from .metrics import delong_ci, format_ci
from .tuner import SearchSpace, run_study, training_objective

SPLIT_NAMES = {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}
HOLDOUT_FRACTION = 0.1


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    out: str = "run"
    seed: int = 0
    cohort: str = ""
    schema: str = ""
    splits: str = ""
    cohort_b: str = ""
    # windowing and splitting
    window_len: int = 100
    n_windows: int = 3
    fractions: tuple = (0.638, 0.161, 0.201)
    # synthetic cohort
    n_patients: int = 578
    mean_visits: float = 6.0
    visit_gap_median: float = 100.0
    signal_strength: float = 0.7
    prevalence_target: float = 0.4
    extra_noise_vars: int = 0
    benchmark_pair: bool = False
    # models
    kind: str = "tdd_gru"
    sweep: bool = False
    n_trials: int = 30
    max_epochs: int = 200
    batch_size: int = 64
    merge_val: bool = False
    hyperparams: str = ""
    artifact: str = ""
    split: str = "test"
    # interpretation
    rounds: int = 20
    perplexity: float = 30.0
    tsne_iters: int = 1000

    def path(self, name):
        return os.path.join(self.out, name)

    @property
    def cohort_path(self):
        return self.cohort or self.path("cohort.jsonl")

    @property
    def schema_path(self):
        return self.schema or self.path("schema.json")

    @property
    def splits_path(self):
        return self.splits or self.path("splits.json")

    def kinds(self):
        if self.sweep:
            return list(ALL_KINDS)
        try:
            return [ArchitectureKind(self.kind)]
        except ValueError:
            raise UsageError(f"unknown architecture kind {self.kind!r}; "
                             f"choose from {', '.join(k.value for k in ALL_KINDS)}") from None


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(key, raw):
    default = FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw.strip('"').strip("'")


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="timeagg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="flat key = value config file")
    for name in FIELDS:
        flag = "--" + name.replace("_", "-")
        if isinstance(FIELDS[name].default, bool):
            parser.add_argument(flag, dest=name, nargs="?", const="true", default=None)
        else:
            parser.add_argument(flag, dest=name, default=None)
    parser.add_argument("command", choices=sorted(COMMANDS))
    return parser


def resolve_config(args):
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    for name in FIELDS:
        raw = getattr(args, name)
        if raw is not None:
            values[name] = _convert(name, raw)
    cfg = RunConfig(**values)
    cfg.kinds()
    return cfg


# ---------------------------------------------------------------- data access

def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path}: invalid JSON ({exc.msg})") from None


def load_cohort(cfg, path=None):
    schema = read_schema(cfg.schema_path)
    return read_cohort(path or cfg.cohort_path, schema)


def load_splits(cfg, cohort):
    d = _load_json(cfg.splits_path, "splits file")
    by_id = {p.id: p for p in cohort.patients}
    out = {}
    for name, ids in d.get("splits", {}).items():
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"split {name!r} references unknown patient {missing[0]!r}")
        out[name] = Cohort(cohort.schema, [by_id[i] for i in ids])
    return out


def _require(splits, name):
    if name not in splits:
        raise DataError(f"split {name!r} not found (have: {', '.join(sorted(splits))})")
    return splits[name]


def _schema_matches(model, cohort):
    mine = [(v.name, v.kind) for v in model.schema]
    theirs = [(v.name, v.kind) for v in cohort.schema]
    if mine != theirs:
        raise DataError("model schema does not match the cohort schema")


def model_arrays(model, cohort):
    """Grids for ``cohort`` standardized with the model's own statistics."""
    _schema_matches(model, cohort)
    grids = prepare_grids(build_grids(cohort, model.window_len, model.n_windows),
                          model.stats, model.schema)
    return grids, grids_to_arrays(grids)


def _artifact_paths(cfg):
    if cfg.artifact and not cfg.sweep:
        return [cfg.artifact]
    return [cfg.path(f"model_{k.value}.json") for k in cfg.kinds()]


# -------------------------------------------------------------------- commands

def cmd_synth(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    gen = synthgen.GeneratorConfig(
        n_patients=cfg.n_patients, mean_visits=cfg.mean_visits,
        visit_gap_median=cfg.visit_gap_median, signal_strength=cfg.signal_strength,
        seed=cfg.seed, prevalence_target=cfg.prevalence_target,
        extra_noise_vars=cfg.extra_noise_vars)
    try:
        gen.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.benchmark_pair:
        cohort, shifted = synthgen.make_benchmark_pair(
            cfg.seed, n_primary=cfg.n_patients, signal_strength=cfg.signal_strength)
        write_cohort(shifted, cfg.path("cohort_shifted.jsonl"))
    else:
        cohort = synthgen.generate_cohort(gen)
    write_cohort(cohort, cfg.cohort_path)
    write_schema(cohort.schema, cfg.schema_path)
    prevalence = np.mean([p.outcome.label for p in cohort.patients])
    print(f"synth: n_patients={len(cohort.patients)} prevalence={prevalence:.3f} "
          f"-> {cfg.cohort_path}")


def cmd_prepare(cfg):
    cohort = load_cohort(cfg)
    names = SPLIT_NAMES.get(len(cfg.fractions),
                            tuple(f"split{i}" for i in range(len(cfg.fractions))))
    parts = stratified_split(cohort, cfg.fractions, cfg.seed)
    _dump_json({"fractions": list(cfg.fractions), "seed": cfg.seed,
                "splits": {n: [p.id for p in c.patients] for n, c in zip(names, parts)}},
               cfg.splits_path)
    grids = build_grids(cohort, cfg.window_len, cfg.n_windows)
    write_grids_csv(grids, cohort.schema, cfg.path("grids.csv"))
    sizes = " ".join(f"{n}={len(c.patients)}" for n, c in zip(names, parts))
    print(f"prepare: {sizes} -> {cfg.splits_path}")


def _fit_data(cfg, splits, schema, names):
    """Standardization stats from the named splits, plus their arrays."""
    cohort = Cohort(schema, [p for n in names for p in _require(splits, n).patients])
    raw = build_grids(cohort, cfg.window_len, cfg.n_windows)
    stats = fit_stats(raw, schema)
    return cohort, stats


def _arrays(cfg, cohort, stats):
    grids = prepare_grids(build_grids(cohort, cfg.window_len, cfg.n_windows), stats, cohort.schema)
    return grids_to_arrays(grids)


def cmd_tune(cfg):
    cohort = load_cohort(cfg)
    splits = load_splits(cfg, cohort)
    train_c, stats = _fit_data(cfg, splits, cohort.schema, ["train"])
    train_xy = _arrays(cfg, train_c, stats)
    val_xy = _arrays(cfg, _require(splits, "val"), stats)
    tc = TrainConfig(cfg.batch_size, cfg.max_epochs, cfg.seed)
    for kind in cfg.kinds():
        space = SearchSpace.default(conv=kind.is_conv)
        with open(cfg.path(f"study_{kind.value}.jsonl"), "w") as log:
            best, trials = run_study(training_objective(kind, train_xy, val_xy, tc),
                                     space, cfg.n_trials, cfg.seed, log)
        hp = HyperParams(**best.params).to_dict()
        _dump_json({"kind": kind.value, "hyperparams": hp, "objective": best.objective,
                    "trial": best.number, "seed": best.seed}, cfg.path(f"best_{kind.value}.json"))
        print(f"tune: {kind.value} best val BCE={best.objective:.4f} (trial {best.number} "
              f"of {len(trials)})")


def _hyperparams_for(cfg, kind):
    path = cfg.hyperparams if cfg.hyperparams and not cfg.sweep else cfg.path(f"best_{kind.value}.json")
    d = _load_json(path, "hyperparameter file")
    try:
        return HyperParams(**d.get("hyperparams", d))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad hyperparameters ({exc})") from None


def cmd_train(cfg):
    cohort = load_cohort(cfg)
    splits = load_splits(cfg, cohort)
    tc = TrainConfig(cfg.batch_size, cfg.max_epochs, cfg.seed)
    if cfg.merge_val:
        fit_c, stats = _fit_data(cfg, splits, cohort.schema, ["train", "val"])
        inner, holdout = stratified_split(fit_c, [1.0 - HOLDOUT_FRACTION, HOLDOUT_FRACTION], cfg.seed)
        extra = {"merge_val": True, "n_fit": len(fit_c.patients),
                 "n_holdout": len(holdout.patients)}
    else:
        inner, stats = _fit_data(cfg, splits, cohort.schema, ["train"])
        holdout = _require(splits, "val")
        extra = {"merge_val": False, "n_fit": len(inner.patients),
                 "n_holdout": len(holdout.patients)}
    train_xy, val_xy = _arrays(cfg, inner, stats), _arrays(cfg, holdout, stats)
    for kind in cfg.kinds():
        model = train(kind, _hyperparams_for(cfg, kind), train_xy, val_xy, tc,
                      stats=stats, schema=cohort.schema)
        model.window_len = cfg.window_len
        path = cfg.artifact if cfg.artifact and not cfg.sweep else cfg.path(f"model_{kind.value}.json")
        save_model(model, path, extra)
        print(f"train: {kind.value} fit on {extra['n_fit']} patients, best epoch "
              f"{model.best_epoch}/{len(model.history['val_loss'])} "
              f"val BCE={min(model.history['val_loss']):.4f} -> {path}")


def cmd_eval(cfg):
    cohort = load_cohort(cfg)
    target = _require(load_splits(cfg, cohort), cfg.split)
    rows = []
    for path in _artifact_paths(cfg):
        model = load_model(path)
        _, (X, y) = model_arrays(model, target)
        try:
            auc, lo, hi = delong_ci(predict(model, X), y)
        except ValueError as exc:
            raise DataError(f"split {cfg.split!r}: {exc}") from None
        rows.append((model.kind.value, auc, lo, hi))
    rows.sort(key=lambda r: (-r[1], r[0]))
    _dump_json({"split": cfg.split,
                "models": [{"kind": k, "auc": a, "lo": lo, "hi": hi} for k, a, lo, hi in rows]},
               cfg.path(f"eval_{cfg.split}.json"))
    width = max(len(r[0]) for r in rows)
    for kind, auc, lo, hi in rows:
        print(f"{kind:<{width}}  {format_ci(auc, lo, hi)}")


def cmd_importance(cfg):
    cohort = load_cohort(cfg)
    splits = load_splits(cfg, cohort)
    for path in _artifact_paths(cfg):
        model = load_model(path)
        test_grids, _ = model_arrays(model, _require(splits, cfg.split))
        train_grids, _ = model_arrays(model, _require(splits, "train"))
        hm = permutation_importance(model, test_grids, train_grids, cfg.rounds, cfg.seed)
        stem = cfg.path(f"importance_{model.kind.value}")
        write_heatmap_csv(hm, stem + ".csv")
        with open(stem + ".svg", "w") as fh:
            fh.write(heatmap_svg(hm))
        var, w = hm.most_negative()
        print(f"importance: {model.kind.value} baseline auROC={hm.baseline_auroc:.3f}, "
              f"most important cell {var}@w{w} -> {stem}.csv")


def cmd_confusion(cfg):
    cohort = load_cohort(cfg)
    splits = load_splits(cfg, cohort)
    for path in _artifact_paths(cfg):
        model = load_model(path)
        cohorts = [(cfg.split, _require(splits, cfg.split))]
        if cfg.cohort_b:
            other = read_cohort(cfg.cohort_b, cohort.schema)
            tag = os.path.splitext(os.path.basename(cfg.cohort_b))[0]
            cohorts.append((tag, other))
        plots = []
        for tag, c in cohorts:
            grids, _ = model_arrays(model, c)
            try:
                plots.append(confusion_plot(model, grids, tag, cfg.perplexity,
                                            cfg.tsne_iters, cfg.seed))
            except ValueError as exc:
                raise DataError(f"cohort {tag!r}: {exc}") from None
        stem = cfg.path(f"confusion_{model.kind.value}")
        write_embedding_csv(plots, stem + ".csv")
        with open(stem + ".svg", "w") as fh:
            fh.write(scatter_svg(plots))
        counts = ", ".join(f"{p.cohort_tag}={len(p.patient_ids)}" for p in plots)
        print(f"confusion: {model.kind.value} {counts} -> {stem}.svg")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "tune": cmd_tune,
    "train": cmd_train,
    "eval": cmd_eval,
    "importance": cmd_importance,
    "confusion": cmd_confusion,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = resolve_config(args)
        if args.command != "synth" and not os.path.isdir(cfg.out):
            os.makedirs(cfg.out, exist_ok=True)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"timeagg: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"timeagg: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"timeagg: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"timeagg: numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"timeagg: data error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
