"""Command-line surface: pretrain / cluster / train / eval / plot /
export-episodes, binding flat-key configs to pipeline stages.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical failure.
Failures emit one machine-readable JSON line on stderr."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from . import pipeline
from .errors import ConfigError, ContractError, MissingArtifactError, NumericalError
from .models import predict_regression
from .nn import load_checkpoint, restore_model
from .plotting import render_episode_svg
from .taskgen import TEST_BASE, export_episodes, sample_episode
from .tensor import Rng

log = logging.getLogger("maha")


def _setup_logging() -> None:
    level = os.environ.get("MAHA_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"MAHA_LOG_LEVEL must be one of {sorted(levels)}, got '{level}'")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--out-dir", required=True, help="run artifact directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overrides", nargs="*", default=[], metavar="K=V")


def _resolve(args) -> cfgmod.RunConfig:
    base = None
    stored = os.path.join(args.out_dir, "config.json")
    if args.config is None and os.path.exists(stored):
        with open(stored) as f:
            base = json.load(f)
    return cfgmod.resolve(args.config, args.overrides, args.seed, base_flat=base)


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    result, catalog = pipeline.pretrain(cfg, args.out_dir)
    log.info("pretrain %s at step %d (val %.4f); %d tasks embedded",
             result.status, result.best_step, result.best_val, len(catalog.task_ids))
    return 0


def cmd_cluster(args) -> int:
    cfg = _resolve(args)
    cluster = pipeline.cluster_stage(cfg, args.out_dir)
    log.info("clustered into k=%d (purity %.4f)", cluster.k,
             cluster.purity_by_k.get(cluster.k, float("nan")))
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if cfg.model.kind == "MAHA":
        if not os.path.exists(os.path.join(args.out_dir, "clusters.json")):
            raise MissingArtifactError(
                f"MAHA training needs clusters.json in {args.out_dir}; run pretrain and cluster first")
        results = pipeline.train_clustered(cfg, args.out_dir)
        for c, r in enumerate(results):
            log.info("cluster %d: %s at step %d (val %.4f)", c, r.status, r.best_step, r.best_val)
    else:
        result = pipeline.train_single(cfg, args.out_dir)
        log.info("train %s at step %d (val %.4f)", result.status, result.best_step, result.best_val)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = os.path.join(args.out_dir, "checkpoint.json")
    if not os.path.exists(ckpt):
        raise MissingArtifactError(f"missing checkpoint {ckpt}")
    report = pipeline.evaluate_run(cfg, args.out_dir)
    log.info("%s = %.4f +- %.4f over %d tasks", report.metric, report.mean,
             report.ci95_halfwidth, report.n_tasks)
    return 0


def cmd_plot(args) -> int:
    cfg = _resolve(args)
    if cfg.model.task != "regression":
        raise ConfigError("plot renders regression episodes only")
    ckpt_path = os.path.join(args.out_dir, "checkpoint.json")
    if not os.path.exists(ckpt_path):
        raise MissingArtifactError(f"missing checkpoint {ckpt_path}")
    model = pipeline._load_model_from(ckpt_path, cfg,
                                      "FELD" if cfg.model.kind == "MAHA" else cfg.model.kind)
    plot_dir = os.path.join(args.out_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    episodes = [int(tok) for tok in args.episodes.split(",")] if args.episodes \
        else list(range(args.n_episodes))
    rng = Rng(cfg.seed, "plot")
    for idx in episodes:
        ep = sample_episode(cfg.dataset, TEST_BASE + idx,
                            n_context=cfg.eval.n_context, split=cfg.eval.split)
        mean, var = predict_regression(model, ep.context_x[None], ep.context_y[None],
                                       ep.target_x[None], rng.child("ep", idx),
                                       cfg.loss.mc_samples_eval)
        svg = render_episode_svg(ep, mean[0], var[0])
        path = os.path.join(plot_dir, f"episode_{idx}.svg")
        with open(path, "w") as f:
            f.write(svg)
        log.info("wrote %s", path)
    return 0


def cmd_export_episodes(args) -> int:
    cfg = _resolve(args)
    ids = [TEST_BASE + i for i in range(args.n_episodes)]
    export_episodes(cfg.dataset, ids, args.out_file)
    log.info("wrote %d episodes to %s", len(ids), args.out_file)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maha")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, fn in [("pretrain", cmd_pretrain), ("cluster", cmd_cluster),
                     ("train", cmd_train), ("eval", cmd_eval)]:
        p = sub.add_parser(verb)
        _add_common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("plot")
    _add_common(p)
    p.add_argument("--episodes", default="", help="comma-separated test episode indices")
    p.add_argument("--n-episodes", type=int, default=4)
    p.set_defaults(fn=cmd_plot)
    p = sub.add_parser("export-episodes")
    _add_common(p)
    p.add_argument("--out-file", required=True)
    p.add_argument("--n-episodes", type=int, default=100)
    p.set_defaults(fn=cmd_export_episodes)
    return parser


def _fail(code: str, message: str, exit_code: int) -> int:
    sys.stderr.write(json.dumps({"error_code": code, "message": message}) + "\n")
    return exit_code


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        return _fail("CONFIG", str(e), 2)
    except ContractError as e:
        return _fail("CONFIG", str(e), 2)
    except MissingArtifactError as e:
        code = "MISSING_CHECKPOINT" if "checkpoint" in str(e) else "MISSING_ARTIFACT"
        return _fail(code, str(e), 3)
    except NumericalError as e:
        return _fail("NUMERICAL", str(e), 4)


if __name__ == "__main__":
    sys.exit(main())
