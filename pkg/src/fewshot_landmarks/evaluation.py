"""Episodic evaluation: normalized error, confidence intervals, benchmark and
ablation runs, feature-similarity analysis, and result files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .baselines import (ft_adapt, maml_adapt, maml_predict, proto_adapt, proto_predict, wg_adapt)
from .data import (DEFAULT_QUERY, BenchmarkSplit, CategorySpec, DataConfig, Episode,
                   category_by_id, encode_pgm, sample_episode)
from .meta import BaseModel, MetaConfig, _stack_images, _stack_labelmaps, meta_adapt, meta_predict
from .model import ModelConfig, extract_landmark_features, fenet_forward
from .rng import derive_seed
from .tensor import ParamSet

METHODS = ("metacloth", "ft", "maml", "wg", "proto")
VARIANTS = ("full", "base_fen", "base_fen_delta", "ld_keep", "ld_keep_delta")
EPISODES_PER_CATEGORY = 100

Predictor = Callable[[Episode], np.ndarray]


def normalized_error(pred, gt, area: float) -> float:
    """Mean landmark distance divided by the square root of the garment area."""
    return float(np.mean(ne_components(pred, gt, area)))


def ne_components(pred, gt, area: float) -> np.ndarray:
    if area <= 0:
        raise ValueError(f"area must be positive, got {area}")
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return np.linalg.norm(pred - gt, axis=-1) / math.sqrt(area)


def ci95(values) -> float:
    """Normal-approximation half-width 1.96 * s / sqrt(n)."""
    v = np.asarray(values, np.float64)
    if v.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class EpisodeResult:
    method: str
    benchmark: int
    category: str
    shot: int
    episode_seed: int
    components: np.ndarray = field(repr=False)  # (M, N_c)

    @property
    def ne(self) -> float:
        return float(np.mean(self.components))


@dataclass
class Summary:
    method: str
    benchmark: int
    shot: int | str
    mean: float
    ci95: float
    n: int

    def to_dict(self) -> dict:
        return {"method": self.method, "benchmark": self.benchmark, "shot": self.shot,
                "mean": self.mean, "ci95": self.ci95, "n": self.n}


# ---------------------------------------------------------------------------
# trained artifacts -> predictors


@dataclass
class Artifacts:
    base: BaseModel
    phi: ParamSet | None = None
    theta: ParamSet | None = None  # meta-learned extractor
    theta_ld_keep: ParamSet | None = None  # meta-learned without detector re-prediction
    maml: ParamSet | None = None


def _require(obj, what: str):
    if obj is None:
        raise FileNotFoundError(f"missing trained {what}")
    return obj


def make_predictor(name: str, art: Artifacts, registry: list[CategorySpec],
                   model_cfg: ModelConfig, cfg: MetaConfig) -> Predictor:
    """Adapt-then-predict function for a method or ablation variant; returns (M, N_c, 2)."""
    H, W = model_cfg.H, model_cfg.W
    base = art.base

    def metacloth_like(theta: ParamSet, update: bool) -> Predictor:
        phi = _require(art.phi, "predictor parameters")

        def run(ep: Episode) -> np.ndarray:
            res = meta_adapt(theta, base, phi, ep.support, model_cfg, cfg, update_detectors=update)
            return meta_predict(res.theta, res.omega, _stack_images(ep.query), model_cfg)[1]
        return run

    if name in ("metacloth", "full"):
        return metacloth_like(_require(art.theta, "meta extractor"), True)
    if name == "base_fen":
        return metacloth_like(base.theta0, True)
    if name == "base_fen_delta":
        return metacloth_like(base.theta0, False)
    if name == "ld_keep":
        return metacloth_like(_require(art.theta_ld_keep, "detector-keeping meta extractor"), True)
    if name == "ld_keep_delta":
        return metacloth_like(_require(art.theta_ld_keep, "detector-keeping meta extractor"), False)
    if name == "ft":
        def run_ft(ep: Episode) -> np.ndarray:
            theta, omega, _ = ft_adapt(base.theta0, ep.support, model_cfg, cfg.ft_steps, cfg.ft_lr,
                                       seed=ep.seed)
            return meta_predict(theta, omega, _stack_images(ep.query), model_cfg)[1]
        return run_ft
    if name == "wg":
        phi = _require(art.phi, "predictor parameters")

        def run_wg(ep: Episode) -> np.ndarray:
            omega = wg_adapt(base.theta0, phi, ep.support, model_cfg)
            return meta_predict(base.theta0, omega, _stack_images(ep.query), model_cfg)[1]
        return run_wg
    if name == "proto":
        def run_proto(ep: Episode) -> np.ndarray:
            protos = proto_adapt(base.theta0, ep.support, model_cfg)
            return proto_predict(protos, base.theta0, _stack_images(ep.query), model_cfg)
        return run_proto
    if name == "maml":
        params = _require(art.maml, "MAML parameters")

        def run_maml(ep: Episode) -> np.ndarray:
            cat = category_by_id(registry, ep.category_id)
            adapted = maml_adapt(params, ep.support, cat, model_cfg, cfg)
            return maml_predict(adapted, _stack_images(ep.query), cat, model_cfg)
        return run_maml
    raise ValueError(f"unknown method or variant {name!r}")


# ---------------------------------------------------------------------------
# benchmark protocol


def episode_seed(seed: int, category_id: int, index: int) -> int:
    # independent of the shot, so smaller supports are prefixes of larger ones
    return derive_seed(seed, 70, category_id, index)


def iter_episodes(registry, split: BenchmarkSplit, shots, episodes_per_category: int,
                  n_query: int, seed: int, data_cfg: DataConfig):
    """Yield ``(shot, episode)``; each episode is rendered once at the largest shot."""
    kmax = max(shots)
    for cid in split.unseen:
        for i in range(episodes_per_category):
            full = sample_episode(registry, cid, kmax, n_query, episode_seed(seed, cid, i), data_cfg)
            for k in shots:
                yield k, Episode(full.category_id, full.support[:k], full.query, full.seed)


def run_benchmark(predictors: dict[str, Predictor], registry: list[CategorySpec],
                  split: BenchmarkSplit, shots, data_cfg: DataConfig, seed: int = 0,
                  episodes_per_category: int = EPISODES_PER_CATEGORY,
                  n_query: int = DEFAULT_QUERY) -> tuple[list[EpisodeResult], list[Summary]]:
    """Evaluate every predictor on identical episodes of the split's unseen categories."""
    shots = sorted(set(int(k) for k in shots))
    results = []
    for k, ep in iter_episodes(registry, split, shots, episodes_per_category, n_query, seed,
                               data_cfg):
        name = category_by_id(registry, ep.category_id).name
        gt = np.stack([s.coords for s in ep.query])
        areas = np.array([s.area for s in ep.query])
        for method, predict in predictors.items():
            pred = predict(ep)
            comps = np.linalg.norm(pred - gt, axis=-1) / np.sqrt(areas)[:, None]
            results.append(EpisodeResult(method, split.scheme, name, k, ep.seed, comps))
    results = sort_results(results)
    return results, summarize(results)


def sort_results(results: list[EpisodeResult]) -> list[EpisodeResult]:
    return sorted(results, key=lambda r: (r.method, r.benchmark, r.shot, r.category,
                                          r.episode_seed))


def summarize(results) -> list[Summary]:
    """Per (method, benchmark, shot) mean and ci95, plus a ``"mean"`` row over shots.

    Accepts EpisodeResult objects or the row dicts read back from episodes.csv;
    rows are reduced in file order so both give bit-identical sums.
    """
    rows = [{"method": r.method, "benchmark": r.benchmark, "category": r.category,
             "shot": r.shot, "episode_seed": r.episode_seed, "ne": r.ne}
            if isinstance(r, EpisodeResult) else r for r in results]
    rows.sort(key=lambda r: (r["method"], r["benchmark"], r["shot"], r["category"],
                             r["episode_seed"]))
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["benchmark"], r["shot"]), []).append(r["ne"])
    out = []
    for (m, b, k), vals in sorted(groups.items()):
        out.append(Summary(m, b, k, float(np.mean(vals)), ci95(vals), len(vals)))
    for m, b in sorted({(m, b) for m, b, _ in groups}):
        per_shot = [s for s in out if s.method == m and s.benchmark == b]
        pooled = [v for (mm, bb, _), vals in sorted(groups.items()) if (mm, bb) == (m, b)
                  for v in vals]
        out.append(Summary(m, b, "mean", float(np.mean([s.mean for s in per_shot])),
                           ci95(pooled), len(pooled)))
    return out


def find_summary(summaries: list[Summary], method: str, shot) -> Summary:
    for s in summaries:
        if s.method == method and s.shot == shot:
            return s
    raise KeyError(f"no summary for {method} at shot {shot}")


# ---------------------------------------------------------------------------
# files

CSV_HEADER = ["method", "benchmark", "category", "shot", "episode_seed", "ne"]


def results_to_csv(results: list[EpisodeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sort_results(results):
        w.writerow([r.method, r.benchmark, r.category, r.shot, r.episode_seed, repr(r.ne)])
    return buf.getvalue()


def results_from_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{"method": r["method"], "benchmark": int(r["benchmark"]), "category": r["category"],
             "shot": int(r["shot"]), "episode_seed": int(r["episode_seed"]), "ne": float(r["ne"])}
            for r in rows]


def summaries_to_json(summaries: list[Summary]) -> str:
    return json.dumps([s.to_dict() for s in summaries], indent=2, sort_keys=True) + "\n"


def write_results(out_dir, results: list[EpisodeResult], summaries: list[Summary]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "episodes.csv").write_text(results_to_csv(results))
    (out / "summary.json").write_text(summaries_to_json(summaries))


def heatmap_export(heatmaps, out_dir) -> list[Path]:
    """One PGM per landmark channel, scaled so the channel maximum maps to 255."""
    y = heatmaps.data if isinstance(heatmaps, T.Tensor) else np.asarray(heatmaps, np.float64)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create heatmap directory {out}: {e}") from e
    paths = []
    for n, ch in enumerate(y):
        peak = ch.max()
        scaled = ch / peak if peak > 0 else np.zeros_like(ch)
        p = out / f"{n}.pgm"
        p.write_bytes(encode_pgm(scaled))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# ablations and feature similarity


def ablation_run(variants, art: Artifacts, registry, split: BenchmarkSplit, shots,
                 model_cfg: ModelConfig, data_cfg: DataConfig, cfg: MetaConfig, seed: int = 0,
                 episodes_per_category: int = EPISODES_PER_CATEGORY,
                 n_query: int = DEFAULT_QUERY) -> tuple[list[EpisodeResult], list[Summary]]:
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}")
    preds = {v: make_predictor(v, art, registry, model_cfg, cfg) for v in variants}
    return run_benchmark(preds, registry, split, shots, data_cfg, seed, episodes_per_category,
                         n_query)


def cosine(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-300)


def landmark_similarity(before: np.ndarray, after: np.ndarray) -> tuple[float, float]:
    """(same landmark before vs after tuning, distinct landmarks after tuning)."""
    same = float(np.mean(_row_cosines(before, after)))
    n = len(after)
    if n < 2:
        return same, float("nan")
    unit = after / np.maximum(np.linalg.norm(after, axis=1, keepdims=True), 1e-300)
    gram = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return same, float(np.mean(gram[iu]))


@dataclass
class SimilarityRow:
    method: str
    category: str
    same_landmark: float
    different_landmark: float
    n: int


def feature_similarity(inits: dict[str, tuple[ParamSet, bool]], art: Artifacts,
                       registry, split: BenchmarkSplit, shot: int, model_cfg: ModelConfig,
                       data_cfg: DataConfig, cfg: MetaConfig, seed: int = 0,
                       episodes_per_category: int = 50,
                       n_query: int = DEFAULT_QUERY) -> list[SimilarityRow]:
    """Landmark-feature cosine similarities per unseen category.

    ``inits`` maps a label to (extractor before tuning, re-predict detectors).
    Features are pooled over each episode's query images with ground-truth
    labelmaps, before and after the support-set adaptation.
    """
    phi = _require(art.phi, "predictor parameters")
    acc: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for _, ep in iter_episodes(registry, split, [shot], episodes_per_category, n_query, seed,
                               data_cfg):
        name = category_by_id(registry, ep.category_id).name
        q_img, q_lm = _stack_images(ep.query), _stack_labelmaps(ep.query)
        for label, (theta, update) in inits.items():
            res = meta_adapt(theta, art.base, phi, ep.support, model_cfg, cfg, update_detectors=update)
            with T.no_record():
                before = extract_landmark_features(fenet_forward(theta, q_img, model_cfg), q_lm).data
                after = extract_landmark_features(fenet_forward(res.theta, q_img, model_cfg),
                                                  q_lm).data
            acc.setdefault((label, name), []).append(landmark_similarity(before, after))
    rows = []
    for (label, name), vals in sorted(acc.items()):
        v = np.asarray(vals)
        rows.append(SimilarityRow(label, name, float(np.mean(v[:, 0])), float(np.nanmean(v[:, 1])),
                                  len(v)))
    return rows


def similarity_to_csv(rows: list[SimilarityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "category", "same_landmark", "different_landmark", "n"])
    for r in rows:
        w.writerow([r.method, r.category, repr(r.same_landmark), repr(r.different_landmark), r.n])
    return buf.getvalue()
