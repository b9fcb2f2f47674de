"""``fairload`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure (and for a sweep where more than 10% of folds failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dvae, harness
from .baselines import KnnModel, knn_predict
from .errors import ContractError, DataError, NumericError, ParameterError
from .fairmetrics import GroupedPredictions, report
from .pipeline import Dataset, normalize
from .synthgait import GeneratorConfig, generate_balanced_splits

logger = logging.getLogger("fairload")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="random seed (env FAIRLOAD_SEED)")
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--out", type=Path, default=None, help="output file or directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    p.add_argument("--quiet", action="store_true", help="only report errors")
    return p


def _train_flags(p):
    p.add_argument("--mode", choices=dvae.MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, dest="learning_rate")
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--arch-scale", type=float, default=None)
    p.add_argument("--decoder-variance", choices=("fixed_unit", "learned_scalar"),
                   default=None, dest="decoder_variance_mode")


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = _Parser(prog="fairload", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", parents=[g], help="generate a synthetic gait dataset")
    p.add_argument("--n-male", type=int)
    p.add_argument("--n-female", type=int)
    p.add_argument("--channels", type=int, dest="n_channels")
    p.add_argument("--cycles", type=int, dest="cycles_per_trial")
    p.add_argument("--trials", type=int, dest="trials_per_condition")
    p.add_argument("--noise", type=float, dest="noise_std")

    p = sub.add_parser("preprocess", parents=[g], help="z-score a dataset per channel")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--stats-from", type=Path, default=None,
                   help="apply the channel statistics stored in another dataset")

    p = sub.add_parser("train", parents=[g], help="train a dvae or plain_vae model")
    p.add_argument("--dataset", type=Path, required=True)
    _train_flags(p)

    for name, text in (("predict", "per-trial load predictions as CSV"),
                       ("eval", "MAE and fairness metrics as JSON"),
                       ("export-latents", "posterior means per cycle as CSV")):
        p = sub.add_parser(name, parents=[g], help=text)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--dataset", type=Path, required=True)

    sub.add_parser("sweep", parents=[g], help="run a sex-ratio LOSO sweep from --config")

    p = sub.add_parser("summarize", parents=[g], help="summary table and box plots")
    p.add_argument("--results", type=Path, required=True)

    sub.add_parser("selftest", parents=[g], help="run the numerical oracle suite")
    return parser


def _seed(args, default=0):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FAIRLOAD_SEED")
    return int(env) if env else default


def _load_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc


def _overlay(base: dict, args, keys) -> dict:
    out = dict(base)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _require_out(args):
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    return args.out


def _load_any_model(path):
    if (Path(path) / "knn.json").exists():
        return KnnModel.load(path)
    return dvae.load_model(path)


def _predictions(model, ds):
    if model.channel_stats is not None:
        ds = normalize(ds, model.channel_stats)
    rows = []
    for tid, idx in ds.trials().items():
        if isinstance(model, KnnModel):
            pred = float(np.mean(knn_predict(model, ds.data[idx])))
        else:
            pred = dvae.predict_trial(model, ds.data[idx], [ds.trial_ids[i] for i in idx])
        i = idx[0]
        rows.append((ds.subject_ids[i], tid, ds.sexes[i], float(ds.weights[i]), pred))
    return rows


def cmd_gen(args):
    out = _require_out(args)
    cfg = _overlay(_load_json(args.config), args,
                   ["n_male", "n_female", "n_channels", "cycles_per_trial",
                    "trials_per_condition", "noise_std"])
    cfg["seed"] = _seed(args, cfg.get("seed", 0))
    config = GeneratorConfig(**cfg)
    ds, truth = generate_balanced_splits(config)
    ds.save(out)
    truth.save(Path(out) / "ground_truth.json")
    (Path(out) / "generator.json").write_text(json.dumps(config.to_dict(), indent=1))
    logger.info("wrote %d cycles to %s", len(ds), out)


def cmd_preprocess(args):
    out = _require_out(args)
    ds = Dataset.load(args.dataset)
    stats = Dataset.load(args.stats_from).channel_stats if args.stats_from else None
    if args.stats_from and stats is None:
        raise DataError(f"{args.stats_from} carries no channel statistics")
    normalize(ds, stats).save(out)


def cmd_train(args):
    out = _require_out(args)
    cfg = _overlay(_load_json(args.config), args,
                   ["mode", "epochs", "batch_size", "learning_rate", "beta1", "beta2",
                    "decoder_variance_mode"])
    arch_over = cfg.pop("arch", {})
    if args.arch_scale is not None:
        arch_over["arch_scale"] = args.arch_scale
    cfg["seed"] = _seed(args, cfg.get("seed", 0))
    tc = dvae.TrainConfig.from_dict(cfg)
    ds = Dataset.load(args.dataset)
    if ds.channel_stats is None:
        ds = normalize(ds)
    params, log = dvae.train(ds, tc, dvae.default_arch(ds, **arch_over))
    dvae.save_model(params, out)
    dvae.write_training_log(log, Path(out) / "train_log.csv")
    logger.info("final epoch total loss %.4f", log[-1].total)


def cmd_predict(args):
    params = _load_any_model(args.model)
    rows = _predictions(params, Dataset.load(args.dataset))
    lines = ["subject_id,trial_id,sex,weight_kg,predicted_kg"]
    lines += [f"{s},{t},{x},{y!r},{p!r}" for s, t, x, y, p in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    params = _load_any_model(args.model)
    rows = _predictions(params, Dataset.load(args.dataset))
    g = GroupedPredictions.from_arrays([r[2] for r in rows], [r[3] for r in rows],
                                       [r[4] for r in rows], [r[0] for r in rows],
                                       [r[1] for r in rows])
    text = json.dumps(asdict(report(g)), indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_export_latents(args):
    out = _require_out(args)
    params = dvae.load_model(args.model)
    ds = Dataset.load(args.dataset)
    if params.channel_stats is not None:
        ds = normalize(ds, params.channel_stats)
    dvae.export_latents(params, ds, out)


def cmd_sweep(args):
    if args.config is None:
        raise UsageError("sweep needs --config")
    cfg = _load_json(args.config)
    if args.out is not None:
        cfg["output_dir"] = str(args.out)
    if args.seed is not None or ("seeds" not in cfg and os.environ.get("FAIRLOAD_SEED")):
        cfg["seeds"] = [_seed(args)]
    cfg["threads"] = args.threads
    res = harness.run_experiment(harness.ExperimentConfig(**cfg))
    problems = harness.audit_run(res.run_dir)
    if problems:
        raise DataError("fold audit failed: " + "; ".join(problems[:5]))
    logger.info("%d folds, %d failed; results in %s", res.n_folds, res.n_failed,
                res.run_dir / "results.csv")
    if res.failure_fraction > 0.10:
        logger.error("%.0f%% of folds failed", 100 * res.failure_fraction)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_summarize(args):
    harness.summarize(args.results, args.out or Path(args.results).parent)


def cmd_selftest(args):
    from .selftest import run_selftest
    ok = run_selftest(verbose=not args.quiet)
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen": cmd_gen, "preprocess": cmd_preprocess, "train": cmd_train,
    "predict": cmd_predict, "eval": cmd_eval, "export-latents": cmd_export_latents,
    "sweep": cmd_sweep, "summarize": cmd_summarize, "selftest": cmd_selftest,
}


def _configure_logging(quiet: bool):
    """Attach a stderr handler; returns a callable restoring the previous state."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    old_level = logger.level
    logger.addHandler(handler)
    logger.setLevel(logging.ERROR if quiet else logging.INFO)

    def restore():
        logger.removeHandler(handler)
        logger.setLevel(old_level)
    return restore


def main(argv=None) -> int:
    parser = build_parser()
    restore = None
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nfairload: error: missing subcommand")
        restore = _configure_logging(args.quiet)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        code = COMMANDS[args.command](args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"fairload: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ParameterError, ContractError, OSError, KeyError, TypeError) as exc:
        print(f"fairload: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if restore is not None:
            restore()


if __name__ == "__main__":
    sys.exit(main())
