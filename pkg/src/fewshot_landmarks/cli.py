"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or checkpoint error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_run_config, load_config
from .data import build_benchmark, category_by_id, default_registry, dump_samples
from .evaluation import (EPISODES_PER_CATEGORY, METHODS, VARIANTS, Artifacts, ablation_run,
                         feature_similarity, heatmap_export, iter_episodes, make_predictor,
                         run_benchmark, similarity_to_csv, write_results)
from .meta import meta_adapt, meta_predict, _stack_images
from .pipeline import load_artifacts, stage_base, stage_maml, stage_meta, stage_ppnet
from .tensor import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fewshot_landmarks")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _shots(text: str) -> list[int]:
    try:
        vals = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shot list {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"shots must be positive integers, got {text!r}")
    return vals


def _names(allowed):
    def parse(text: str) -> list[str]:
        vals = [s.strip() for s in text.split(",") if s.strip()]
        bad = [v for v in vals if v not in allowed]
        if bad or not vals:
            raise argparse.ArgumentTypeError(f"unknown {', '.join(bad) or 'empty'}; "
                                             f"choose from {', '.join(allowed)}")
        return vals
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--benchmark", type=int, choices=(1, 2, 3, 4), default=2)
    common.add_argument("--out", type=Path, default=Path("run"))
    common.add_argument("--order", choices=("second", "first"))
    common.add_argument("--init", choices=("base", "random"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fewshot-landmarks", description="Few-shot garment landmark detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render samples to PGM/CSV/RLE files")
    g.add_argument("--per-category", type=int, default=8)
    g.add_argument("--categories", choices=("all", "seen", "unseen"), default="all")

    sub.add_parser("train-base", parents=[common], help="supervised base extractor and detectors")
    sub.add_parser("train-ppnet", parents=[common], help="detector-parameter predictor")
    m = sub.add_parser("meta-train", parents=[common], help="meta-learn the extractor initialization")
    m.add_argument("--method", choices=("metacloth", "maml"), default="metacloth")
    m.add_argument("--variant", choices=("full", "ld_keep"), default="full")

    for name, helptext, shots, methods in (
            ("eval", "episodic benchmark", "1,3,5,8,10", "metacloth"),
            ("ablate", "ablation variants", "8", None),
            ("similarity", "landmark feature similarity", "8", None)):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--shots", type=_shots, default=_shots(shots))
        e.add_argument("--episodes", type=int, default=None,
                       help="episodes per unseen category")
        e.add_argument("--run-dir", type=Path, help="checkpoint directory (default: --out)")
        if name == "eval":
            e.add_argument("--method", type=_names(METHODS), default=[methods])
            e.add_argument("--heatmaps", action="store_true",
                           help="export heatmaps of each category's first query image")
        if name == "ablate":
            e.add_argument("--variant", type=_names(VARIANTS), default=list(VARIANTS))
    return p


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.order:
        overrides["order"] = args.order
    if args.init:
        overrides["init"] = args.init
    return build_run_config(overrides, cfg) if overrides else cfg


def _export_heatmaps(art: Artifacts, registry, split, cfg: RunConfig, seed: int, shot: int,
                     out: Path) -> None:
    theta = art.theta if art.theta is not None else art.base.theta0
    for _, ep in iter_episodes(registry, split, [shot], 1, 1, seed, cfg.data):
        res = meta_adapt(theta, art.base, art.phi, ep.support, cfg.model, cfg.meta)
        heat, _ = meta_predict(res.theta, res.omega, _stack_images(ep.query), cfg.model)
        heatmap_export(heat[0], out / "heatmaps" / category_by_id(registry, ep.category_id).name)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _run_config(args)
    registry = default_registry()
    split = build_benchmark(registry, args.benchmark, args.seed)
    out: Path = args.out

    if args.command == "gen-data":
        ids = {"all": [c.id for c in registry], "seen": split.seen,
               "unseen": split.unseen}[args.categories]
        dump_samples(registry, ids, args.per_category, args.seed, cfg.data, out)
        return EXIT_OK
    if args.command == "train-base":
        stage_base(out, registry, split, cfg, args.seed)
        return EXIT_OK
    if args.command == "train-ppnet":
        stage_ppnet(out, registry, split, cfg, args.seed)
        return EXIT_OK
    if args.command == "meta-train":
        if args.method == "maml":
            stage_maml(out, registry, split, cfg, args.seed)
        else:
            stage_meta(out, registry, split, cfg, args.seed,
                       update_detectors=args.variant == "full")
        return EXIT_OK

    run_dir = args.run_dir or out
    episodes = args.episodes if args.episodes is not None else EPISODES_PER_CATEGORY
    if episodes < 1:
        raise UsageError("--episodes must be >= 1")
    if args.command == "eval":
        need = {"metacloth": ("phi", "theta"), "wg": ("phi",), "maml": ("maml",)}
        art = load_artifacts(run_dir, registry, split,
                             need=[k for m in args.method for k in need.get(m, ())])
        preds = {m: make_predictor(m, art, registry, cfg.model, cfg.meta) for m in args.method}
        results, summaries = run_benchmark(preds, registry, split, args.shots, cfg.data, args.seed,
                                           episodes_per_category=episodes)
        write_results(out, results, summaries)
        if args.heatmaps:
            _export_heatmaps(art, registry, split, cfg, args.seed, max(args.shots), out)
        _print_summaries(summaries)
        return EXIT_OK
    if args.command == "ablate":
        need = {"full": ("phi", "theta"), "base_fen": ("phi",), "base_fen_delta": ("phi",),
                "ld_keep": ("phi", "theta_ld_keep"), "ld_keep_delta": ("phi", "theta_ld_keep")}
        art = load_artifacts(run_dir, registry, split,
                             need=[k for v in args.variant for k in need[v]])
        results, summaries = ablation_run(args.variant, art, registry, split, args.shots, cfg.model,
                                          cfg.data, cfg.meta, args.seed,
                                          episodes_per_category=episodes)
        write_results(out, results, summaries)
        _print_summaries(summaries)
        return EXIT_OK
    if args.command == "similarity":
        art = load_artifacts(run_dir, registry, split, need=("phi", "theta", "theta_ld_keep"))
        inits = {"metacloth": (art.theta, True), "base_fen": (art.base.theta0, True),
                 "ld_keep": (art.theta_ld_keep, True)}
        rows = feature_similarity(inits, art, registry, split, args.shots[0], cfg.model, cfg.data,
                                  cfg.meta, args.seed, episodes_per_category=episodes)
        out.mkdir(parents=True, exist_ok=True)
        (out / "similarity.csv").write_text(similarity_to_csv(rows))
        for label in inits:
            mine = [r for r in rows if r.method == label]
            print(f"{label}: same={np.mean([r.same_landmark for r in mine]):.4f} "
                  f"different={np.mean([r.different_landmark for r in mine]):.4f}")
        return EXIT_OK
    raise UsageError(f"unknown command {args.command}")


def _print_summaries(summaries) -> None:
    for s in summaries:
        print(f"{s.method:>16} scheme {s.benchmark} shot {s.shot!s:>4}: "
              f"NE {s.mean:.4f} +- {s.ci95:.4f} (n={s.n})")


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
