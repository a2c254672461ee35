"""Comparison methods: fine-tuning, fixed max-way MAML, weight generator, prototypes."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .data import N_SLOTS, CategorySpec, DataConfig, Sample, category_by_id, sample_episode
from .meta import (BaseModel, MetaConfig, _lr_at, _stack_images, _stack_labelmaps, _task_stream,
                   predict_detectors)
from .model import (ModelConfig, detect, extract_landmark_features, fenet_forward, heatmap_loss,
                    init_detectors, ld_forward)
from .rng import derive_seed
from .tensor import ParamSet, Tape, Tensor


class BaselineKind(str, Enum):
    FT = "FT"
    MAML = "MAML"
    WG = "WG"
    PROTO = "PROTO"


def _joint(theta: ParamSet, omega: Tensor) -> ParamSet:
    return ParamSet(list(theta.items()) + [("ld.weight", omega)])


def _split(params: ParamSet) -> tuple[ParamSet, Tensor]:
    theta = ParamSet((k, v) for k, v in params.items() if k != "ld.weight")
    return theta, params["ld.weight"]


# ---------------------------------------------------------------------------
# fine-tuning


def ft_adapt(theta0: ParamSet, support: list[Sample], model_cfg: ModelConfig, steps: int = 50,
             lr: float = 0.01, seed: int = 0) -> tuple[ParamSet, Tensor, list[float]]:
    """Fresh random detectors trained jointly with a copy of the base extractor."""
    n_c = support[0].labelmap.shape[0]
    params = _joint(theta0.copy(), init_detectors(n_c, model_cfg, derive_seed(seed, 50)))
    images, lm = _stack_images(support), _stack_labelmaps(support)
    losses = []
    for _ in range(steps):
        p = params.trainable()
        with Tape():
            loss = heatmap_loss(ld_forward(p["ld.weight"], fenet_forward(p, images, model_cfg)), lm)
            g = T.grad(loss, p)
        params = T.sgd_step(p, g, lr).detach()
        losses.append(loss.item())
    with T.no_record():
        losses.append(heatmap_loss(
            ld_forward(params["ld.weight"], fenet_forward(params, images, model_cfg)), lm).item())
    theta, omega = _split(params)
    return theta, omega, losses


# ---------------------------------------------------------------------------
# max-way MAML


def expand_to_slots(labelmaps: np.ndarray, cat: CategorySpec) -> np.ndarray:
    """(B, N_c, h, w) -> (B, 39, h, w); unoccupied slots stay all-zero."""
    if len(cat.slots) != cat.n_landmarks:
        raise ValueError(f"category {cat.name} has no slot table")
    B, n, h, w = labelmaps.shape
    out = np.zeros((B, N_SLOTS, h, w))
    out[:, list(cat.slots)] = labelmaps
    return out


def maml_loss(params: ParamSet, images: np.ndarray, slot_labelmaps: np.ndarray,
              model_cfg: ModelConfig) -> T.Tensor:
    heat = ld_forward(params["ld.weight"], fenet_forward(params, images, model_cfg))
    return T.xent_heatmap(heat, slot_labelmaps)


def _maml_inner(params: ParamSet, images, lm, steps, lr, model_cfg, create_graph):
    for _ in range(steps):
        g = T.grad(maml_loss(params, images, lm, model_cfg), params, create_graph=create_graph)
        params = T.sgd_step(params, g, lr)
    return params


def maml_train(theta_init: ParamSet, registry: list[CategorySpec], seen: tuple[int, ...],
               model_cfg: ModelConfig, data_cfg: DataConfig, cfg: MetaConfig, seed: int,
               ) -> tuple[ParamSet, list[float]]:
    """Meta-train extractor and a fixed 39-row detector bank through the unrolled inner loop."""
    params = _joint(theta_init.copy(), init_detectors(N_SLOTS, model_cfg, derive_seed(seed, 60)))
    losses = []
    for i, cid, tseed in _task_stream(seen, cfg.n_tasks, derive_seed(seed, 61)):
        cat = category_by_id(registry, cid)
        ep = sample_episode(registry, cid, cfg.train_shot, cfg.train_query, tseed, data_cfg)
        s_lm = expand_to_slots(_stack_labelmaps(ep.support), cat)
        q_lm = expand_to_slots(_stack_labelmaps(ep.query), cat)
        p = params.trainable()
        with Tape():
            adapted = _maml_inner(p, _stack_images(ep.support), s_lm, cfg.inner_steps, cfg.beta1,
                                  model_cfg, create_graph=cfg.order == "second")
            loss = maml_loss(adapted, _stack_images(ep.query), q_lm, model_cfg)
            g = T.grad(loss, p)
        params = T.sgd_step(p, g, _lr_at(cfg.beta2, i, cfg.n_tasks)).detach()
        losses.append(loss.item())
    return params, losses


def maml_adapt(params: ParamSet, support: list[Sample], cat: CategorySpec,
               model_cfg: ModelConfig, cfg: MetaConfig) -> ParamSet:
    lm = expand_to_slots(_stack_labelmaps(support), cat)
    p = params.trainable()
    with Tape():
        adapted = _maml_inner(p, _stack_images(support), lm, cfg.inner_steps, cfg.beta1,
                              model_cfg, create_graph=False)
    return adapted.detach()


def maml_predict(params: ParamSet, images: np.ndarray, cat: CategorySpec,
                 model_cfg: ModelConfig) -> np.ndarray:
    """Coordinates (B, N_c, 2) decoded from the category's occupied slots only."""
    with T.no_record():
        heat = ld_forward(params["ld.weight"], fenet_forward(params, images, model_cfg)).data
    return detect(heat[:, list(cat.slots)], model_cfg.H, model_cfg.W)


# ---------------------------------------------------------------------------
# weight generator


def wg_adapt(theta0: ParamSet, phi: ParamSet, support: list[Sample],
             model_cfg: ModelConfig) -> Tensor:
    """Detectors predicted from base features; the extractor is not tuned."""
    with T.no_record():
        return predict_detectors(theta0, phi, _stack_images(support), _stack_labelmaps(support),
                                 model_cfg)


# ---------------------------------------------------------------------------
# prototypes


def proto_adapt(theta0: ParamSet, support: list[Sample], model_cfg: ModelConfig) -> np.ndarray:
    """One prototype per landmark: the mean landmark-level feature over the support set."""
    with T.no_record():
        feats = fenet_forward(theta0, _stack_images(support), model_cfg)
        return extract_landmark_features(feats, _stack_labelmaps(support)).data


def proto_scores(prototypes: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Negative squared distance of every cell to every prototype: (B, N_c, h, w)."""
    f = features[None] if features.ndim == 3 else features
    diff = f[:, None, :, :, :] - prototypes[None, :, None, None, :]
    return -np.sum(diff * diff, axis=-1)


def proto_predict(prototypes: np.ndarray, theta0: ParamSet, images: np.ndarray,
                  model_cfg: ModelConfig) -> np.ndarray:
    with T.no_record():
        feats = fenet_forward(theta0, images, model_cfg).data
    return detect(proto_scores(prototypes, feats), model_cfg.H, model_cfg.W)
