"""MetaCloth NE against support size on each benchmark scheme.

    python scripts/shot_curve.py --out runs/shots [--schemes 1,2,3,4] [--episodes 100]
"""

import argparse
from pathlib import Path

from fewshot_landmarks.config import RunConfig, load_config
from fewshot_landmarks.data import build_benchmark, default_registry
from fewshot_landmarks.evaluation import make_predictor, run_benchmark, write_results
from fewshot_landmarks.pipeline import train_all


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/shots"))
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schemes", default="1,2,3,4")
    p.add_argument("--shots", default="1,3,5,8,10")
    p.add_argument("--episodes", type=int, default=100)
    a = p.parse_args()

    cfg = load_config(a.config) if a.config else RunConfig()
    reg = default_registry()
    shots = [int(s) for s in a.shots.split(",")]
    for scheme in (int(s) for s in a.schemes.split(",")):
        run = a.out / f"scheme{scheme}"
        art = train_all(run, scheme, cfg, a.seed, reuse=True, registry=reg)
        split = build_benchmark(reg, scheme, a.seed)
        pred = {"metacloth": make_predictor("metacloth", art, reg, cfg.model, cfg.meta)}
        results, summaries = run_benchmark(pred, reg, split, shots, cfg.data, a.seed,
                                           episodes_per_category=a.episodes)
        write_results(run / "eval", results, summaries)
        print(f"scheme {scheme}: " + ", ".join(
            f"K={s.shot} {s.mean:.4f}+-{s.ci95:.4f}" for s in summaries if s.shot != "mean"))


if __name__ == "__main__":
    main()
