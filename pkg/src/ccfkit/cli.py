"""``ccfkit`` command line: gen-synthetic, convert, train, eval, sweep, analyze.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, ccf, config, featurestore, fewshot, preprocess
from .errors import ConfigError, ContractError, DataError, FormatError, TrainingError

log = logging.getLogger("ccfkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- shared option groups -------------------------------------------------

# flag -> (config key, type, help)
_TRAIN_FLAGS = {
    "--temperature": ("train.temperature", float, "softmax temperature T (default: 0.1 for shot<5, 0.02 otherwise)"),
    "--beta": ("train.beta", float, "weight of the squared-norm penalty on z (default: 0.05)"),
    "--lr": ("train.learning_rate", float, "Adam learning rate (default: 1e-4)"),
    "--batch-size": ("train.batch_size", int, "mini-batch size (default: 256)"),
    "--max-epochs": ("train.max_epochs", int, "maximum training epochs (default: 100)"),
    "--eval-every": ("train.eval_every", int, "epochs between validation evaluations (default: 1)"),
    "--patience": ("train.patience", int, "evaluations without improvement before stopping (default: 10)"),
    "--val-episodes": ("train.val_episodes", int, "validation episodes per evaluation (default: 200)"),
    "--hidden": ("train.hidden_dim", int, "encoder hidden width (default: 2048)"),
    "--slope": ("train.slope", float, "LeakyReLU negative slope (default: 0.01)"),
    "--ce-weight": ("train.ce_weight", float, "weight of the classification loss; 0 disables it (default: 1)"),
}
_EPISODE_FLAGS = {
    "--way": ("episode.way", int, "classes per episode N (default: 5)"),
    "--shot": ("episode.shot", int, "support samples per class K (default: 1)"),
    "--query": ("episode.query", int, "query samples per class Q (default: 15)"),
    "--episodes": ("episode.episodes", int, "number of episodes (default: 2000)"),
    "--classifier": ("classifier.kind", str, "logistic_regression | cosine | nearest_centroid (default: logistic_regression)"),
    "--l2": ("classifier.l2", float, "logistic regression L2 strength (default: 1.0)"),
}
_BOXCOX_FLAGS = {
    "--boxcox-lambda": ("boxcox.lambda", float, "Box-Cox lambda (default: 0.5)"),
    "--boxcox-shift": ("boxcox.shift", float, "shift added before the transform (default: auto)"),
}
_COMMON_FLAGS = {
    "--seed": ("seed", int, "random seed (required for randomized commands)"),
    "--threads": ("threads", int, "worker threads; results do not depend on it (default: 1)"),
}


def _add_flags(p, table):
    for flag, (key, typ, help_) in table.items():
        p.add_argument(flag, dest=key, type=typ, default=None, help=help_)


def _add_bank_args(p, required=True):
    p.add_argument("--bank", dest="bank.path", required=required, help="feature bank file, .fbk binary or .csv (required)")
    p.add_argument("--bank-format", dest="bank.format", choices=("binary", "csv"), default=None,
                   help="bank format (default: from the file extension)")


def _add_config_arg(p):
    p.add_argument("--config", help="JSON config file with flat dotted keys; flags override it (default: none)")


def _gather(args, tables) -> dict:
    keys = {key for table in tables for key, _, _ in table.values()} | {"bank.path", "bank.format"}
    return {k: v for k, v in vars(args).items() if k in keys and v is not None}


def _config_from(args, tables, extra: dict | None = None) -> dict:
    file_values = config.load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = _gather(args, tables)
    overrides.update(extra or {})
    return config.merge_config(file_values, overrides)


def _require_seed(cfg):
    if cfg["seed"] is None:
        raise ConfigError("this command is randomized; pass --seed explicitly")
    return cfg["seed"]


def _load_bank(cfg) -> featurestore.FeatureBank:
    if not cfg["bank.path"]:
        raise UsageError("a feature bank is required (--bank)")
    return featurestore.load_bank(cfg["bank.path"], cfg["bank.format"])


def _boxcox_params(bank, cfg):
    if not cfg["boxcox.enabled"]:
        return None
    return preprocess.establish_params(bank, cfg["boxcox.lambda"], cfg["boxcox.shift"],
                                       fit=cfg["boxcox.fit"], grid=cfg["boxcox.grid"])


def _prepare(bank, params):
    return preprocess.transform_bank(bank, params) if params is not None else bank


# --- commands -------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    if args.seed is None:
        raise ConfigError("gen-synthetic is randomized; pass --seed explicitly")
    spec = featurestore.SyntheticSpec(
        n_base_classes=args.base, n_val_classes=args.val, n_novel_classes=args.novel,
        feature_dim=args.dim, samples_per_class=args.per_class, centroid_scale=args.centroid_scale,
        within_class_stddev=args.stddev, novel_correlation=args.correlation,
        centroid_rank=None if args.rank == 0 else args.rank, seed=args.seed,
    )
    try:
        spec.validate()
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    bank = featurestore.generate_synthetic(spec)
    featurestore.save_bank(bank, args.output, args.format)
    log.info("wrote %d samples (%d classes) to %s", bank.n_samples, bank.n_classes, args.output)
    return EXIT_OK


def cmd_convert(args) -> int:
    bank = featurestore.load_bank(args.input, args.from_format, splits_path=args.splits)
    featurestore.save_bank(bank, args.output, args.to_format, splits_path=args.splits_out)
    return EXIT_OK


def _train_one(bank_t, cfg, seed, threads):
    tcfg = config.train_config(cfg, seed)
    cb = fewshot.validation_callback(
        bank_t, config.classifier_spec(cfg), cfg["episode.way"], cfg["episode.shot"], cfg["episode.query"],
        tcfg.val_episodes, seed, threads,
    )
    return tcfg, ccf.train(bank_t, tcfg, cb)


def cmd_train(args) -> int:
    cfg = _config_from(args, [_TRAIN_FLAGS, _EPISODE_FLAGS, _BOXCOX_FLAGS, _COMMON_FLAGS],
                       {"boxcox.fit": True} if args.fit_lambda else None)
    bank = _load_bank(cfg)
    seed = _require_seed(cfg)
    params = _boxcox_params(bank, cfg)
    tcfg, result = _train_one(_prepare(bank, params), cfg, seed, cfg["threads"])
    eff = config.effective(cfg)
    ccf.save_checkpoint(result.model, args.output, tcfg, params, extra={"run_config": eff})
    log_path = args.log or str(args.output) + ".log.json"
    _write(log_path, _dump({"config": eff, "boxcox": params.to_dict() if params else None, **result.log_dict()}))
    log.info("best epoch %d (val acc %s); checkpoint %s", result.best_epoch, result.best_val_accuracy, args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from(args, [_EPISODE_FLAGS, _BOXCOX_FLAGS, _COMMON_FLAGS])
    seed = _require_seed(cfg)
    bank = _load_bank(cfg)
    model, meta = (None, {})
    if args.checkpoint:
        model, meta = ccf.load_checkpoint(args.checkpoint)
    elif not args.baseline:
        raise UsageError("eval needs --checkpoint unless --baseline is given")
    if args.no_boxcox:
        params = None
    elif args.checkpoint:
        # the transform the corrector was trained under, possibly none
        params = preprocess.BoxCoxParams.from_dict(meta["boxcox"]) if meta.get("boxcox") else None
    else:
        params = _boxcox_params(bank, cfg)
    bank_t = _prepare(bank, params)
    report = fewshot.evaluate(
        bank_t, args.split, None if args.baseline else model, config.classifier_spec(cfg),
        cfg["episode.way"], cfg["episode.shot"], cfg["episode.query"], cfg["episode.episodes"],
        seed, cfg["threads"],
    )
    eff = config.effective(cfg)
    eff.update({"eval.baseline": bool(args.baseline), "eval.split": args.split,
                "eval.checkpoint": args.checkpoint, "eval.boxcox": params.to_dict() if params else None})
    _write(args.output, report.to_json(config=eff))
    return EXIT_OK


def _parse_list(text: str, cast, what: str) -> list:
    try:
        items = [cast(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {what} list {text!r}") from None
    if not items:
        raise UsageError(f"{what} list is empty")
    return items


def cmd_sweep(args) -> int:
    temps = _parse_list(args.temps, float, "temperature")
    cfg = _config_from(args, [_TRAIN_FLAGS, _EPISODE_FLAGS, _BOXCOX_FLAGS, _COMMON_FLAGS])
    seed0 = _require_seed(cfg)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [seed0 + i for i in range(args.seeds)]
    bank = _load_bank(cfg)
    params = _boxcox_params(bank, cfg)
    bank_t = _prepare(bank, params)
    base = config.train_config(cfg, seed0)
    spec = config.classifier_spec(cfg)

    def score(model, s):
        return fewshot.evaluate(bank_t, "val", model, spec, cfg["episode.way"], cfg["episode.shot"],
                                cfg["episode.query"], base.val_episodes, s).mean_accuracy

    report = analysis.temperature_sweep(bank_t, base, temps, seeds, score=score, threads=cfg["threads"])
    _write(args.output, analysis.rows_to_csv(report.rows))
    if args.json:
        _write(args.json, _dump({"config": config.effective(cfg), **report.to_dict()}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config_from(args, [_COMMON_FLAGS])
    bank = _load_bank(cfg)
    model, meta = ccf.load_checkpoint(args.checkpoint)
    params = preprocess.BoxCoxParams.from_dict(meta["boxcox"]) if meta.get("boxcox") else None
    bank_t = _prepare(bank, params)
    dist = analysis.centroid_distances(bank_t, args.split, model)
    disp = analysis.latent_dispersion(bank_t, model, args.split)
    out = {
        "config": config.effective(cfg),
        "checkpoint": args.checkpoint,
        "boxcox": params.to_dict() if params else None,
        "distance": dist.to_dict(),
        "latent_dispersion": disp,
    }
    _write(args.output, _dump(out))
    if args.csv:
        _write(args.csv, analysis.rows_to_csv(dist.csv_rows()))
    if args.export_latent:
        X, ids = bank_t.split_data(args.split)
        _write(args.export_latent, analysis.latent_csv(model, X, ids))
    return EXIT_OK


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccfkit", description="Feature rectification for few-shot classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a synthetic feature bank",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--base", type=int, default=64, help="number of base classes (default: %(default)s)")
    g.add_argument("--val", type=int, default=16, help="number of validation classes (default: %(default)s)")
    g.add_argument("--novel", type=int, default=20, help="number of novel classes (default: %(default)s)")
    g.add_argument("--dim", type=int, default=64, help="feature dimension (default: %(default)s)")
    g.add_argument("--per-class", type=int, default=100, help="samples per class (default: %(default)s)")
    g.add_argument("--centroid-scale", type=float, default=1.0, help="scale of class centroids (default: %(default)s)")
    g.add_argument("--stddev", type=float, default=1.0, help="within-class standard deviation (default: %(default)s)")
    g.add_argument("--correlation", type=float, default=0.8, help="weight of base-centroid mixtures in novel centroids (default: %(default)s)")
    g.add_argument("--rank", type=int, default=16, help="dimension of the centroid subspace (0 = full) (default: %(default)s)")
    g.add_argument("--seed", type=int, default=None, help="random seed (required)")
    g.add_argument("--format", choices=("binary", "csv"), default=None, help="output format (default: from extension)")
    g.add_argument("-o", "--output", required=True, help="output bank path (required)")
    g.set_defaults(func=cmd_gen_synthetic)

    c = sub.add_parser("convert", help="convert a bank between binary and CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    c.add_argument("input", help="input bank")
    c.add_argument("output", help="output bank")
    c.add_argument("--from", dest="from_format", choices=("binary", "csv"), default=None, help="input format (default: from extension)")
    c.add_argument("--to", dest="to_format", choices=("binary", "csv"), default=None, help="output format (default: from extension)")
    c.add_argument("--splits", default=None, help="split map JSON for a CSV input (default: <stem>.splits.json)")
    c.add_argument("--splits-out", default=None, help="split map JSON for a CSV output (default: <stem>.splits.json)")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train the corrector with early stopping")
    _add_config_arg(t)
    _add_bank_args(t, required=False)
    _add_flags(t, _TRAIN_FLAGS)
    _add_flags(t, _EPISODE_FLAGS)
    _add_flags(t, _BOXCOX_FLAGS)
    t.add_argument("--fit-lambda", action="store_true", help="fit the Box-Cox lambda on base features (default: off)")
    _add_flags(t, _COMMON_FLAGS)
    t.add_argument("-o", "--output", required=True, help="checkpoint path (required)")
    t.add_argument("--log", default=None, help="training log JSON (default: <checkpoint>.log.json)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="episodic few-shot evaluation")
    _add_config_arg(e)
    _add_bank_args(e, required=False)
    e.add_argument("--checkpoint", default=None, help="trained corrector checkpoint (default: none, evaluates the baseline)")
    e.add_argument("--baseline", action="store_true", help="fit the classifier on original support features only (default: off)")
    e.add_argument("--no-boxcox", action="store_true", help="skip the Box-Cox transform (default: off)")
    e.add_argument("--split", default="novel", choices=("base", "val", "novel"), help="split to sample episodes from (default: novel)")
    _add_flags(e, _EPISODE_FLAGS)
    _add_flags(e, _BOXCOX_FLAGS)
    _add_flags(e, _COMMON_FLAGS)
    e.add_argument("-o", "--output", default="-", help="report JSON path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train across temperatures and seeds")
    _add_config_arg(s)
    _add_bank_args(s, required=False)
    s.add_argument("--temps", required=True, help="comma-separated temperatures, e.g. 0.02,0.1,1 (required)")
    s.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed (default: 1)")
    _add_flags(s, _TRAIN_FLAGS)
    _add_flags(s, _EPISODE_FLAGS)
    _add_flags(s, _BOXCOX_FLAGS)
    _add_flags(s, _COMMON_FLAGS)
    s.add_argument("-o", "--output", default="-", help="CSV path, one row per (temperature, seed) (default: stdout)")
    s.add_argument("--json", default=None, help="also write the report as JSON (default: none)")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="centroid distances and latent dispersion for a checkpoint")
    _add_config_arg(a)
    _add_bank_args(a, required=False)
    a.add_argument("--checkpoint", required=True, help="trained corrector checkpoint (required)")
    a.add_argument("--split", default="novel", choices=("base", "val", "novel"), help="split to analyze (default: novel)")
    _add_flags(a, _COMMON_FLAGS)
    a.add_argument("-o", "--output", default="-", help="report JSON path (default: stdout)")
    a.add_argument("--csv", default=None, help="per-class distance CSV (default: none)")
    a.add_argument("--export-latent", default=None, help="CSV of z and rectified features per sample (default: none)")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
