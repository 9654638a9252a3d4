"""Batch command line: gen / featurize / train / predict / eval / blend /
stack / listwise, wiring data infrastructure, individual models, and
ensembles into one reproducible pipeline.

Logs go to stderr, data to files or stdout. Exit codes: 0 success, 2 usage
or config error, 3 feature-schema mismatch on model load.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import ensemble, features, metrics, model_io, schema
from .base import SchemaMismatchError
from .fm import FactorizationMachineModel, FmParams
from .linear_models import FtrlConfig, FtrlRanker, WeightedLogisticRegression, WeightedLrConfig
from .tree_models import (
    BoostParams,
    ExtraTreesModel,
    GradientBoostedModel,
    LambdaMartModel,
    PerCountryForest,
    RandomForestModel,
    TreeParams,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# key -> (parser, default). Unknown keys are rejected, no silent typos.
CONFIG_REGISTRY: dict[str, tuple] = {
    "seed": (int, 42),
    "k": (int, 38),
    "zero_gain": (str, "exclude"),
    "gain": (str, "exp"),
    "preset": (str, "base"),
    "model": (str, "lambdamart"),
    "balance": (str, "auto"),  # auto | 0 | 1
    "sample": (float, 1.0),
    "threads": (int, 0),
    "lr.alpha": (float, 0.0),  # 0 = pick #neg/#pos from the data
    "lr.learning_rate": (float, 0.1),
    "lr.epochs": (int, 300),
    "lr.l2": (float, 1e-6),
    "ftrl.alpha": (float, 0.1),
    "ftrl.beta": (float, 1.0),
    "ftrl.l1": (float, 1.0),
    "ftrl.l2": (float, 1.0),
    "ftrl.epochs": (int, 1),
    "ftrl.pair_cap": (int, 100),
    "ftrl.pointwise": (_parse_bool, False),
    "tree.max_depth": (int, 4),
    "tree.min_samples_leaf": (int, 10),
    "tree.feature_subsample": (float, 1.0),
    "boost.n_trees": (int, 100),
    "boost.shrinkage": (float, 0.1),
    "boost.loss": (str, "logistic"),
    "boost.subsample": (float, 1.0),
    "boost.sigma": (float, 1.0),
    "boost.early_stop": (int, 0),
    "forest.n_trees": (int, 100),
    "forest.max_depth": (int, 12),
    "forest.min_samples_leaf": (int, 10),
    "forest.feature_subsample": (float, 0.7),
    "pcrf.min_rows": (int, 200),
    "fm.k": (int, 8),
    "fm.init_std": (float, 0.01),
    "fm.learning_rate": (float, 0.01),
    "fm.epochs": (int, 10),
    "fm.l2": (float, 1e-4),
    "fm.loss": (str, "logistic"),
    "stack.n_trees": (int, 120),
    "stack.max_depth": (int, 3),
    "stack.extras": (str, "prop_location_score1,prop_location_score2,price_usd"),
    "listwise.n_trees": (int, 30),
    "listwise.max_depth": (int, 3),
    "listwise.min_samples_leaf": (int, 20),
}

MODEL_KINDS = (
    "weighted_lr",
    "ftrl",
    "gbm",
    "random_forest",
    "ert",
    "per_country_rf",
    "fm",
    "lambdamart",
)

# paper recipe: tree ensembles on pointwise targets train on balanced rows
BALANCE_DEFAULT = {"gbm": True, "random_forest": True, "ert": True}


def load_config(path: str | None, overrides: list[str]) -> dict:
    values = {key: default for key, (_, default) in CONFIG_REGISTRY.items()}
    pairs = []
    if path:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {line_no}: expected key=value")
                key, _, raw = line.partition("=")
                pairs.append((key.strip(), raw.strip()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set wants key=value, got {item!r}")
        key, _, raw = item.partition("=")
        pairs.append((key.strip(), raw.strip()))
    for key, raw in pairs:
        if key not in CONFIG_REGISTRY:
            raise ConfigError(f"unknown config key: {key}")
        parser, _ = CONFIG_REGISTRY[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}")
    return values


def _config_hash(values: dict) -> str:
    canonical = "\n".join(f"{k}={values[k]}" for k in sorted(values))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def log(msg: str):
    print(msg, file=sys.stderr)


def _tree_params(cfg, prefix="tree") -> TreeParams:
    return TreeParams(
        max_depth=cfg[f"{prefix}.max_depth"],
        min_samples_leaf=cfg[f"{prefix}.min_samples_leaf"],
        feature_subsample=cfg[f"{prefix}.feature_subsample"],
    )


def _boost_params(cfg, loss=None) -> BoostParams:
    return BoostParams(
        n_trees=cfg["boost.n_trees"],
        shrinkage=cfg["boost.shrinkage"],
        loss=loss or cfg["boost.loss"],
        subsample=cfg["boost.subsample"],
        seed=cfg["seed"],
        k=cfg["k"],
        sigma=cfg["boost.sigma"],
    )


def make_model(cfg: dict):
    kind = cfg["model"]
    if kind == "weighted_lr":
        alpha = cfg["lr.alpha"] if cfg["lr.alpha"] > 0 else None
        return WeightedLogisticRegression(
            WeightedLrConfig(
                alpha=alpha,
                learning_rate=cfg["lr.learning_rate"],
                epochs=cfg["lr.epochs"],
                l2=cfg["lr.l2"],
                seed=cfg["seed"],
            )
        )
    if kind == "ftrl":
        return FtrlRanker(
            FtrlConfig(
                alpha=cfg["ftrl.alpha"],
                beta=cfg["ftrl.beta"],
                l1=cfg["ftrl.l1"],
                l2=cfg["ftrl.l2"],
                epochs=cfg["ftrl.epochs"],
                seed=cfg["seed"],
                pair_cap=cfg["ftrl.pair_cap"],
                pointwise=cfg["ftrl.pointwise"],
            )
        )
    if kind == "gbm":
        return GradientBoostedModel(_boost_params(cfg), _tree_params(cfg))
    if kind == "random_forest":
        return RandomForestModel(cfg["forest.n_trees"], _tree_params(cfg, "forest"), cfg["seed"])
    if kind == "ert":
        return ExtraTreesModel(cfg["forest.n_trees"], _tree_params(cfg, "forest"), cfg["seed"])
    if kind == "per_country_rf":
        fallback = FtrlRanker(
            FtrlConfig(
                alpha=cfg["ftrl.alpha"],
                beta=cfg["ftrl.beta"],
                l1=cfg["ftrl.l1"],
                l2=cfg["ftrl.l2"],
                epochs=cfg["ftrl.epochs"],
                seed=cfg["seed"],
                pair_cap=cfg["ftrl.pair_cap"],
            )
        )
        return PerCountryForest(
            fallback,
            n_trees=cfg["forest.n_trees"],
            tree=_tree_params(cfg, "forest"),
            min_rows=cfg["pcrf.min_rows"],
            seed=cfg["seed"],
        )
    if kind == "fm":
        return FactorizationMachineModel(
            FmParams(
                k=cfg["fm.k"],
                init_std=cfg["fm.init_std"],
                learning_rate=cfg["fm.learning_rate"],
                epochs=cfg["fm.epochs"],
                l2=cfg["fm.l2"],
                seed=cfg["seed"],
                loss=cfg["fm.loss"],
            )
        )
    if kind == "lambdamart":
        return LambdaMartModel(
            _boost_params(cfg, loss="lambdarank"),
            _tree_params(cfg),
            early_stop_rounds=cfg["boost.early_stop"],
        )
    raise ConfigError(f"unknown model kind: {kind} (have: {', '.join(MODEL_KINDS)})")


def _has_label_columns(path) -> bool:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
    return all(c in header for c in schema.LABEL_COLUMNS)


def _load_auto(path) -> schema.Dataset:
    return schema.load_csv(path, has_labels=_has_label_columns(path))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.queries < 1 or args.per_query < 1 or args.countries < 1:
        log("gen: --queries, --per-query, --countries must be >= 1")
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.csv")
    test_path = os.path.join(args.out, "test.csv")
    meta_path = os.path.join(args.out, "meta.txt")
    for path in (train_path, test_path, meta_path):
        if os.path.exists(path) and not args.force:
            log(f"gen: refusing to overwrite {path} (use --force)")
            return EXIT_USAGE
    seed = args.seed if args.seed is not None else cfg["seed"]
    train_cfg = schema.SynthConfig(
        n_queries=args.queries,
        impressions_per_query=args.per_query,
        n_countries=args.countries,
        seed=seed,
    )
    test_queries = args.test_queries if args.test_queries else max(1, args.queries // 2)
    test_cfg = schema.SynthConfig(
        n_queries=test_queries,
        impressions_per_query=args.per_query,
        n_countries=args.countries,
        seed=seed + 1,
        srch_id_start=args.queries + 1,
    )
    train_ds = schema.generate_synthetic(train_cfg)
    test_ds = schema.generate_synthetic(test_cfg)
    schema.write_csv(train_ds, train_path, include_labels=True)
    schema.write_csv(test_ds, test_path, include_labels=False)
    beta = ",".join(f"{k}:{v}" for k, v in schema.PLANTED_BETA.items())
    lines = [
        f"queries={args.queries}",
        f"test_queries={test_queries}",
        f"per_query={args.per_query}",
        f"countries={args.countries}",
        f"seed={seed}",
        f"positive_rate_target={train_cfg.positive_rate}",
        f"utility_noise={train_cfg.utility_noise}",
        f"beta={beta}",
        f"config_hash={_config_hash(cfg)}",
    ]
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    log(f"gen: wrote {train_path} ({train_ds.n_rows} rows), {test_path} ({test_ds.n_rows} rows)")
    return EXIT_OK


def _fit_bundle(cfg, data_path, test_path=None):
    ds = schema.load_csv(data_path, has_labels=True)
    train, valid = schema.split_validation(ds)
    if cfg["sample"] < 1.0:
        train = schema.sample_fraction(train, cfg["sample"], cfg["seed"])
    test_ds = _load_auto(test_path) if test_path else None
    pipeline = features.preset_pipeline(cfg["preset"])
    fitted = pipeline.fit(train, test_ds=test_ds, seed=cfg["seed"])
    fm_train = fitted.apply(train)
    grades = train.grades()
    countries = train.row_countries()
    balance_flag = BALANCE_DEFAULT.get(cfg["model"], False)
    if cfg["balance"] != "auto":
        balance_flag = _parse_bool(cfg["balance"])
    if balance_flag:
        mask = schema.balance_mask(fm_train.srch_ids, grades, cfg["seed"])
        fm_train = fm_train.take(np.flatnonzero(mask))
        grades = grades[mask]
        countries = countries[mask]
        log(f"train: balanced rows {int(mask.sum())} of {len(mask)}")
    model = make_model(cfg)
    if cfg["model"] == "lambdamart" and valid.groups:
        fm_valid = fitted.apply(valid)
        model.fit(fm_train, grades, valid=(fm_valid, valid.grades()))
        if model.valid_history:
            log(f"train: validation ndcg@{cfg['k']} per stage, last={model.valid_history[-1]:.6f}")
    else:
        model.fit(fm_train, grades, countries=countries)
    return fitted, model, fm_train


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.model:
        cfg["model"] = args.model
    if args.preset:
        cfg["preset"] = args.preset
    if cfg["model"] not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind: {cfg['model']}")
    fitted, model, fm_train = _fit_bundle(cfg, args.data, args.test_data)
    model_io.save_bundle(args.out, fitted, model)
    log(
        f"train: {cfg['model']} on {len(fm_train.values)} rows x "
        f"{len(fm_train.columns)} features -> {args.out}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    fitted, model = model_io.load_bundle(args.model)
    ds = _load_auto(args.data)
    fm = fitted.apply(ds)
    scores = model.predict(fm, countries=ds.row_countries())
    scores.write_tsv(args.out)
    log(f"predict: {len(scores)} rows -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    scores = metrics.ScoreList.read_tsv(args.scores)
    ds = schema.load_csv(args.data, has_labels=True)
    report = metrics.evaluate(
        scores, ds, k=cfg["k"], zero_gain=cfg["zero_gain"], gain=cfg["gain"]
    )
    for line in report.format_lines():
        print(line)
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.preset:
        cfg["preset"] = args.preset
    ds = _load_auto(args.data)
    test_ds = _load_auto(args.test_data) if args.test_data else None
    fitted = features.preset_pipeline(cfg["preset"]).fit(ds, test_ds=test_ds, seed=cfg["seed"])
    fm = fitted.apply(ds)
    if args.format == "tsv":
        fm.write_tsv(args.out)
    else:
        grades = ds.grades() if ds.labeled else None
        fm.write_ranking_text(args.out, grades)
    log(f"featurize: {len(fm.values)} rows x {len(fm.columns)} columns -> {args.out}")
    return EXIT_OK


def cmd_blend(args) -> int:
    spec = ensemble.parse_blend_spec(args.spec)
    inputs = {name: metrics.ScoreList.read_tsv(path) for name, path in spec.inputs.items()}
    blended = ensemble.linear_blend(inputs, spec.weights, spec.normalization)
    blended.write_tsv(args.out)
    log(f"blend: {sorted(spec.inputs)} ({spec.normalization}) -> {args.out}")
    return EXIT_OK


def _base_train_ids(paths) -> np.ndarray:
    ids: list[np.ndarray] = []
    for path in paths or []:
        kind, meta, arrays = model_io.load_envelope(path)
        key = "model/train_srch_ids" if kind == "bundle" else "train_srch_ids"
        if key in arrays:
            ids.append(arrays[key])
    return np.unique(np.concatenate(ids)) if ids else np.zeros(0, dtype=np.int64)


def _stack_extras(cfg, ds):
    extras = [c.strip() for c in cfg["stack.extras"].split(",") if c.strip()]
    if not extras:
        return None
    fitted = features.Pipeline([], keep=extras).fit(ds, seed=cfg["seed"])
    return fitted.apply(ds), fitted


def cmd_stack(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = ensemble.parse_blend_spec(args.spec)
    inputs = {name: metrics.ScoreList.read_tsv(path) for name, path in spec.inputs.items()}
    if args.model:  # apply mode
        kind, meta, arrays = model_io.load_envelope(args.model)
        stacker = model_io.model_from_state(meta, arrays)
        extras = None
        if getattr(stacker, "extra_columns", None):
            if not args.data:
                log("stack: this stacker needs --data for its extra feature columns")
                return EXIT_USAGE
            ds = _load_auto(args.data)
            fitted = features.Pipeline([], keep=stacker.extra_columns).fit(ds, seed=cfg["seed"])
            extras = fitted.apply(ds)
        scores = stacker.predict(inputs, extras)
        scores.write_tsv(args.out)
        log(f"stack: applied {args.model} -> {args.out}")
        return EXIT_OK
    ds = schema.load_csv(args.data, has_labels=True)
    extras_fm = None
    built = _stack_extras(cfg, ds)
    if built is not None:
        extras_fm, _ = built
    stacker = ensemble.GbmStacker(
        BoostParams(
            n_trees=cfg["stack.n_trees"], loss="logistic", seed=cfg["seed"],
            shrinkage=cfg["boost.shrinkage"],
        ),
        TreeParams(max_depth=cfg["stack.max_depth"]),
    )
    stacker.fit(
        inputs,
        ds,
        extras=extras_fm,
        base_train_srch_ids=_base_train_ids(args.base_model) if args.base_model else None,
        allow_leakage=args.allow_leakage,
    )
    meta, arrays = stacker.state()
    model_io.save_envelope(args.out, stacker.kind, meta, arrays)
    log(f"stack: fitted on {ds.n_rows} rows -> {args.out}")
    return EXIT_OK


def cmd_listwise(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = ensemble.parse_blend_spec(args.spec)
    inputs = {name: metrics.ScoreList.read_tsv(path) for name, path in spec.inputs.items()}
    if args.model:  # apply mode
        kind, meta, arrays = model_io.load_envelope(args.model)
        ensembler = model_io.model_from_state(meta, arrays)
        scores = ensembler.predict(inputs)
        scores.write_tsv(args.out)
        log(f"listwise: applied {args.model} -> {args.out}")
        return EXIT_OK
    ds = schema.load_csv(args.data, has_labels=True)
    ensembler = ensemble.ListwiseEnsembler(
        BoostParams(
            n_trees=cfg["listwise.n_trees"],
            loss="lambdarank",
            seed=cfg["seed"],
            shrinkage=cfg["boost.shrinkage"],
            k=cfg["k"],
        ),
        TreeParams(
            max_depth=cfg["listwise.max_depth"],
            min_samples_leaf=cfg["listwise.min_samples_leaf"],
        ),
        normalization=spec.normalization,
    )
    ensembler.fit(
        inputs,
        ds,
        base_train_srch_ids=_base_train_ids(args.base_model) if args.base_model else None,
        allow_leakage=args.allow_leakage,
    )
    meta, arrays = ensembler.state()
    model_io.save_envelope(args.out, ensembler.kind, meta, arrays)
    log(f"listwise: fitted on {ds.n_rows} rows -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hotelrank",
        description="Hotel-search learning-to-rank pipeline (batch commands)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=0,
                       help="cap internal parallelism (advisory; compute is deterministic)")

    p = sub.add_parser("gen", help="generate synthetic train/test CSVs")
    common(p)
    p.add_argument("--queries", type=int, required=True)
    p.add_argument("--per-query", type=int, required=True)
    p.add_argument("--countries", type=int, default=20)
    p.add_argument("--test-queries", type=int, default=0, help="default: queries // 2")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("featurize", help="fit a preset pipeline and export the matrix")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", help="unlabeled rows joined into count features")
    p.add_argument("--preset", help="pipeline preset name")
    p.add_argument("--format", choices=("tsv", "ranklib"), default="tsv")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train one ranker and save the bundle")
    common(p)
    p.add_argument("--data", required=True, help="labeled training CSV")
    p.add_argument("--test-data", help="unlabeled rows joined into count features")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--preset", help="pipeline preset name")
    p.add_argument("-o", "--out", required=True, help="model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a dataset with a trained bundle")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", required=True, help="score TSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="NDCG@k of a score file against labeled data")
    common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True, help="labeled CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("blend", help="z-score linear blend per a spec file")
    common(p)
    p.add_argument("--spec", required=True)
    p.add_argument("-o", "--out", required=True, help="score TSV")
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("stack", help="GBM stacker over score files (fit or apply)")
    common(p)
    p.add_argument("--spec", required=True, help="input lines name the score files")
    p.add_argument("--data", help="labeled CSV (fit) / raw CSV for extras (apply)")
    p.add_argument("--model", help="apply an already-fitted stacker")
    p.add_argument("--base-model", action="append", default=[],
                   help="base model file(s) used for the leakage check")
    p.add_argument("--allow-leakage", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("listwise", help="LambdaMART ensemble over score files")
    common(p)
    p.add_argument("--spec", required=True)
    p.add_argument("--data", help="labeled CSV (fit mode)")
    p.add_argument("--model", help="apply an already-fitted ensembler")
    p.add_argument("--base-model", action="append", default=[])
    p.add_argument("--allow-leakage", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_listwise)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaMismatchError as exc:
        log(f"error: {exc}")
        return EXIT_SCHEMA
    except (ConfigError, schema.SchemaError, features.PipelineError,
            ensemble.InputMismatchError, ensemble.LeakageError,
            FileNotFoundError, ValueError) as exc:
        log(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
