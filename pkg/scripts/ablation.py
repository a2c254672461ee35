"""Ablation variants and landmark-feature similarity on a scheme-2 stack.

    python scripts/ablation.py --out runs/main [--shot 8] [--episodes 100]
"""

import argparse
from pathlib import Path

import numpy as np

from fewshot_landmarks.config import RunConfig, load_config
from fewshot_landmarks.data import build_benchmark, default_registry
from fewshot_landmarks.evaluation import (VARIANTS, ablation_run, feature_similarity,
                                          similarity_to_csv, write_results)
from fewshot_landmarks.pipeline import train_all


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/main"))
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shot", type=int, default=8)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--similarity-episodes", type=int, default=50)
    a = p.parse_args()

    cfg = load_config(a.config) if a.config else RunConfig()
    reg = default_registry()
    split = build_benchmark(reg, 2, a.seed)
    art = train_all(a.out, 2, cfg, a.seed, ld_keep=True, reuse=True, registry=reg)

    results, summaries = ablation_run(VARIANTS, art, reg, split, [a.shot], cfg.model, cfg.data,
                                      cfg.meta, a.seed, episodes_per_category=a.episodes)
    write_results(a.out / "ablation", results, summaries)
    for s in summaries:
        if s.shot != "mean":
            print(f"{s.method:>15}: NE {s.mean:.4f} +- {s.ci95:.4f} (n={s.n})")

    inits = {"metacloth": (art.theta, True), "base_fen": (art.base.theta0, True),
             "ld_keep": (art.theta_ld_keep, True)}
    rows = feature_similarity(inits, art, reg, split, a.shot, cfg.model, cfg.data, cfg.meta,
                              a.seed, episodes_per_category=a.similarity_episodes)
    (a.out / "similarity.csv").write_text(similarity_to_csv(rows))
    for label in inits:
        mine = [r for r in rows if r.method == label]
        print(f"{label:>10}: same-landmark {np.mean([r.same_landmark for r in mine]):.4f}, "
              f"different-landmark {np.mean([r.different_landmark for r in mine]):.4f}")


if __name__ == "__main__":
    main()
