"""Training stages wired to checkpoint files in one run directory.

Files written (all in the model checkpoint format): ``theta0.ckpt`` and
``omega0.ckpt`` (base model), ``phi.ckpt`` (detector-parameter predictor),
``theta.ckpt`` (meta extractor), ``theta_ld_keep.ckpt`` (meta extractor trained
without detector re-prediction) and ``maml.ckpt`` (extractor plus 39-row bank).
Each stage also writes ``<stage>_losses.csv``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .baselines import maml_train
from .config import RunConfig
from .data import BenchmarkSplit, CategorySpec, build_benchmark, default_registry
from .evaluation import Artifacts
from .meta import BaseModel, detector_blocks, initial_theta, meta_train, train_base, train_ppnet
from .model import load_params, save_params
from .rng import derive_seed
from .tensor import NumericalError, ParamSet

log = logging.getLogger(__name__)

CHECKPOINTS = {
    "theta0": "theta0.ckpt",
    "omega0": "omega0.ckpt",
    "phi": "phi.ckpt",
    "theta": "theta.ckpt",
    "theta_ld_keep": "theta_ld_keep.ckpt",
    "maml": "maml.ckpt",
}


def _write_losses(path: Path, losses) -> None:
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n")


def _check_finite(stage: str, losses) -> None:
    if not np.all(np.isfinite(losses)):
        raise NumericalError(f"{stage}: non-finite training loss")


def checkpoint_path(run_dir, key: str) -> Path:
    return Path(run_dir) / CHECKPOINTS[key]


def load_base(run_dir, registry: list[CategorySpec], split: BenchmarkSplit) -> BaseModel:
    theta0 = load_params(checkpoint_path(run_dir, "theta0"))
    omega0 = load_params(checkpoint_path(run_dir, "omega0"))
    blocks = detector_blocks(registry, split.seen)
    n_all = sum(b - a for a, b in blocks.values())
    if omega0["ld.weight"].shape[0] != n_all:
        raise ValueError(f"{checkpoint_path(run_dir, 'omega0')} has {omega0['ld.weight'].shape[0]} "
                         f"detectors but the split's seen categories need {n_all}")
    return BaseModel(theta0=theta0, omega0=omega0, blocks=blocks)


def stage_base(run_dir, registry, split: BenchmarkSplit, cfg: RunConfig, seed: int) -> BaseModel:
    base, losses = train_base(registry, split.seen, cfg.model, cfg.data, cfg.meta,
                              derive_seed(seed, 100))
    _check_finite("train-base", losses)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_params(checkpoint_path(run_dir, "theta0"), base.theta0)
    save_params(checkpoint_path(run_dir, "omega0"), base.omega0)
    _write_losses(run_dir / "base_losses.csv", losses)
    return base


def stage_ppnet(run_dir, registry, split: BenchmarkSplit, cfg: RunConfig, seed: int) -> ParamSet:
    base = load_base(run_dir, registry, split)
    phi, losses = train_ppnet(base, registry, split.seen, cfg.model, cfg.data, cfg.meta,
                              derive_seed(seed, 101))
    _check_finite("train-ppnet", losses)
    save_params(checkpoint_path(run_dir, "phi"), phi)
    _write_losses(Path(run_dir) / "ppnet_losses.csv", losses)
    return phi


def stage_meta(run_dir, registry, split: BenchmarkSplit, cfg: RunConfig, seed: int,
               update_detectors: bool = True) -> ParamSet:
    """Meta-train the extractor; ``update_detectors=False`` writes the detector-keeping variant."""
    base = load_base(run_dir, registry, split)
    phi = load_params(checkpoint_path(run_dir, "phi"))
    theta_init = initial_theta(base, cfg.model, cfg.meta, derive_seed(seed, 102))
    theta, losses = meta_train(theta_init, base, phi, registry, split.seen, cfg.model, cfg.data,
                               cfg.meta, derive_seed(seed, 103), update_detectors=update_detectors)
    _check_finite("meta-train", losses)
    key = "theta" if update_detectors else "theta_ld_keep"
    save_params(checkpoint_path(run_dir, key), theta)
    _write_losses(Path(run_dir) / f"{key}_losses.csv", losses)
    return theta


def stage_maml(run_dir, registry, split: BenchmarkSplit, cfg: RunConfig, seed: int) -> ParamSet:
    base = load_base(run_dir, registry, split)
    params, losses = maml_train(base.theta0, registry, split.seen, cfg.model, cfg.data, cfg.meta,
                                derive_seed(seed, 104))
    _check_finite("maml", losses)
    save_params(checkpoint_path(run_dir, "maml"), params)
    _write_losses(Path(run_dir) / "maml_losses.csv", losses)
    return params


def load_artifacts(run_dir, registry, split: BenchmarkSplit, need=()) -> Artifacts:
    """Load whatever checkpoints exist; names in ``need`` must be present."""
    base = load_base(run_dir, registry, split)
    found = {}
    for key in ("phi", "theta", "theta_ld_keep", "maml"):
        p = checkpoint_path(run_dir, key)
        if p.exists():
            found[key] = load_params(p)
        elif key in need:
            raise FileNotFoundError(f"missing checkpoint {p}")
    return Artifacts(base=base, **{k: found.get(k) for k in ("phi", "theta", "theta_ld_keep", "maml")})


def train_all(run_dir, scheme: int, cfg: RunConfig, seed: int, ld_keep: bool = False,
              maml: bool = False, reuse: bool = False,
              registry: list[CategorySpec] | None = None) -> Artifacts:
    """Run every stage a scheme needs. With ``reuse``, stages whose checkpoint exists are skipped."""
    registry = registry or default_registry()
    split = build_benchmark(registry, scheme, seed)
    run_dir = Path(run_dir)

    def have(key):
        return reuse and checkpoint_path(run_dir, key).exists()

    if not (have("theta0") and have("omega0")):
        log.info("scheme %d: training base model", scheme)
        stage_base(run_dir, registry, split, cfg, seed)
    if not have("phi"):
        log.info("scheme %d: training predictor", scheme)
        stage_ppnet(run_dir, registry, split, cfg, seed)
    if not have("theta"):
        log.info("scheme %d: meta-training", scheme)
        stage_meta(run_dir, registry, split, cfg, seed)
    if ld_keep and not have("theta_ld_keep"):
        log.info("scheme %d: meta-training with kept detectors", scheme)
        stage_meta(run_dir, registry, split, cfg, seed, update_detectors=False)
    if maml and not have("maml"):
        log.info("scheme %d: training max-way MAML", scheme)
        stage_maml(run_dir, registry, split, cfg, seed)
    return load_artifacts(run_dir, registry, split)
