"""Train a scheme-2 stack and compare MetaCloth with the baselines at shot 5.

    python scripts/main_result.py --out runs/main [--episodes 100] [--maml]
"""

import argparse
import time
from pathlib import Path

from fewshot_landmarks.config import RunConfig, load_config
from fewshot_landmarks.data import build_benchmark, default_registry
from fewshot_landmarks.evaluation import make_predictor, run_benchmark, write_results
from fewshot_landmarks.pipeline import train_all


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/main"))
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shots", default="5")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--maml", action="store_true", help="also train and evaluate max-way MAML")
    a = p.parse_args()

    cfg = load_config(a.config) if a.config else RunConfig()
    reg = default_registry()
    split = build_benchmark(reg, 2, a.seed)
    t0 = time.time()
    art = train_all(a.out, 2, cfg, a.seed, maml=a.maml, reuse=True, registry=reg)
    t1 = time.time()
    methods = ["metacloth", "ft", "wg", "proto"] + (["maml"] if a.maml else [])
    preds = {m: make_predictor(m, art, reg, cfg.model, cfg.meta) for m in methods}
    shots = [int(s) for s in a.shots.split(",")]
    results, summaries = run_benchmark(preds, reg, split, shots, cfg.data, a.seed,
                                       episodes_per_category=a.episodes)
    write_results(a.out / "eval", results, summaries)
    for s in summaries:
        print(f"{s.method:>10} shot {s.shot!s:>4}: NE {s.mean:.4f} +- {s.ci95:.4f} (n={s.n})")
    print(f"training {t1 - t0:.0f}s, evaluation {time.time() - t1:.0f}s")


if __name__ == "__main__":
    main()
