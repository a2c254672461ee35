"""Training procedures: supervised base model, detector-parameter predictor, and
the meta-learned feature-extractor initialization with its test-time adaptation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import CategorySpec, DataConfig, Episode, Sample, category_by_id, render_sample, sample_episode
from .model import (ModelConfig, argmax_labelmap, detect, extract_landmark_features, fenet_forward,
                    heatmap_loss, init_detectors, init_fenet, init_ppnet, ld_forward, ppnet_forward)
from .rng import Rng, derive_seed
from .tensor import ParamSet, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    beta1: float = 0.04  # inner (adaptation) learning rate
    beta2: float = 0.05  # outer (initialization) learning rate
    gamma: float = 0.002  # detector-parameter predictor learning rate
    inner_steps: int = 5
    n_tasks: int = 4000
    order: str = "second"
    labelmap_source_train: str = "predicted"
    init: str = "base"  # meta initialization: copy of the base extractor, or "random"
    train_shot: int = 5
    train_query: int = 8
    base_lr: float = 0.5
    base_steps: int = 1000
    base_batch: int = 12
    base_loss_threshold: float = 0.0
    ft_steps: int = 50
    ft_lr: float = 0.01

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.gamma, self.base_lr, self.ft_lr) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.order not in ("second", "first"):
            raise ValueError(f"order must be 'second' or 'first', got {self.order!r}")
        if self.labelmap_source_train not in ("predicted", "ground_truth"):
            raise ValueError(f"unknown labelmap source {self.labelmap_source_train!r}")
        if self.init not in ("base", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class BaseModel:
    """Supervised extractor plus one detector per landmark of every seen category."""

    theta0: ParamSet
    omega0: ParamSet  # single entry "ld.weight", (N_all, D)
    blocks: dict[int, tuple[int, int]]  # category id -> [start, stop) rows

    @property
    def n_all(self) -> int:
        return self.omega0["ld.weight"].shape[0]

    def block(self, category_id: int) -> np.ndarray:
        if category_id not in self.blocks:
            raise KeyError(f"category {category_id} has no detector block")
        a, b = self.blocks[category_id]
        return self.omega0["ld.weight"].data[a:b]


@dataclass
class TrainedStack:
    base: BaseModel
    phi: ParamSet
    theta: ParamSet

    @property
    def theta0(self) -> ParamSet:
        return self.base.theta0


@dataclass
class AdaptResult:
    theta: ParamSet  # adapted extractor
    omega: Tensor  # detectors used for prediction
    omega_initial: Tensor  # detectors predicted from base features
    support_losses: list[float] = field(default_factory=list)
    beta1: float = 0.0
    retried: bool = False
    monotone: bool = True


def _lr_at(lr: float, i: int, n: int, milestones=(0.5,)) -> float:
    for m in milestones:
        if i >= int(n * m):
            lr *= 0.1
    return lr


def _stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _stack_labelmaps(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.labelmap for s in samples])


def detector_blocks(registry: list[CategorySpec], seen: tuple[int, ...]) -> dict[int, tuple[int, int]]:
    blocks, start = {}, 0
    for cid in seen:
        n = category_by_id(registry, cid).n_landmarks
        blocks[cid] = (start, start + n)
        start += n
    return blocks


# ---------------------------------------------------------------------------
# supervised base model


def train_base(registry: list[CategorySpec], seen: tuple[int, ...], model_cfg: ModelConfig,
               data_cfg: DataConfig, cfg: MetaConfig, seed: int) -> tuple[BaseModel, list[float]]:
    """Jointly train the base extractor and all seen-category detectors.

    Each sample contributes only its own category's detector block.
    Returns the model and the per-step training losses.
    """
    if not seen:
        raise ValueError("no seen categories")
    blocks = detector_blocks(registry, seen)
    n_all = sum(b - a for a, b in blocks.values())
    theta0 = init_fenet(model_cfg, derive_seed(seed, 10))
    omega0 = ParamSet([("ld.weight", init_detectors(n_all, model_cfg, derive_seed(seed, 11)))])
    rng = Rng(derive_seed(seed, 12))
    losses: list[float] = []
    for step in range(cfg.base_steps):
        cats = [seen[i] for i in rng.integers(cfg.base_batch, len(seen))]
        samples = [render_sample(category_by_id(registry, c), data_cfg,
                                 derive_seed(seed, 13, step, j)) for j, c in enumerate(cats)]
        target = np.zeros((len(samples), n_all, model_cfg.h, model_cfg.w))
        for j, (c, s) in enumerate(zip(cats, samples)):
            a, b = blocks[c]
            target[j, a:b] = s.labelmap
        params = ParamSet(list(theta0.items()) + list(omega0.items())).trainable()
        with Tape():
            feats = fenet_forward(params, _stack_images(samples), model_cfg)
            loss = T.xent_heatmap(ld_forward(params["ld.weight"], feats), target)
            g = T.grad(loss, params)
        lr = _lr_at(cfg.base_lr, step, cfg.base_steps, (0.5, 0.75))
        params = T.sgd_step(params, g, lr).detach()
        theta0 = ParamSet((k, params[k]) for k in theta0.names())
        omega0 = ParamSet([("ld.weight", params["ld.weight"])])
        losses.append(loss.item())
        if cfg.base_loss_threshold > 0 and len(losses) >= 20 and \
                np.mean(losses[-20:]) < cfg.base_loss_threshold:
            break
    return BaseModel(theta0=theta0, omega0=omega0, blocks=blocks), losses


def make_labelmaps(mode: str, samples: list[Sample], base: BaseModel | None,
                   category_id: int, model_cfg: ModelConfig) -> np.ndarray:
    """Labelmaps used for landmark pooling: ground truth, or the base model's argmax cells."""
    if mode == "ground_truth":
        return _stack_labelmaps(samples)
    if mode != "predicted":
        raise ValueError(f"unknown labelmap mode {mode!r}")
    block = base.block(category_id)
    with T.no_record():
        feats = fenet_forward(base.theta0, _stack_images(samples), model_cfg)
        heat = ld_forward(Tensor(block), feats)
    return argmax_labelmap(heat)


# ---------------------------------------------------------------------------
# detector-parameter predictor


def predict_detectors(theta: ParamSet, phi: ParamSet, images: np.ndarray, labelmaps: np.ndarray,
                      model_cfg: ModelConfig) -> Tensor:
    """Pool landmark features through ``theta`` and map them to detector weights."""
    feats = fenet_forward(theta, images, model_cfg)
    return ppnet_forward(phi, extract_landmark_features(feats, labelmaps))


def _task_stream(seen: tuple[int, ...], n_tasks: int, seed: int):
    rng = Rng(derive_seed(seed, 20))
    cats = rng.integers(n_tasks, len(seen))
    for i in range(n_tasks):
        yield i, seen[int(cats[i])], derive_seed(seed, 21, i)


def train_ppnet(base: BaseModel, registry: list[CategorySpec], seen: tuple[int, ...],
                model_cfg: ModelConfig, data_cfg: DataConfig, cfg: MetaConfig, seed: int,
                phi: ParamSet | None = None) -> tuple[ParamSet, list[float]]:
    """Train only the predictor: query loss of the frozen base extractor with predicted detectors."""
    phi = phi if phi is not None else init_ppnet(model_cfg, derive_seed(seed, 30))
    losses = []
    for i, cid, tseed in _task_stream(seen, cfg.n_tasks, seed):
        ep = sample_episode(registry, cid, cfg.train_shot, cfg.train_query, tseed, data_cfg)
        lp = make_labelmaps(cfg.labelmap_source_train, ep.support, base, cid, model_cfg)
        with T.no_record():
            fs = fenet_forward(base.theta0, _stack_images(ep.support), model_cfg)
            fq = fenet_forward(base.theta0, _stack_images(ep.query), model_cfg)
            fpoint = extract_landmark_features(fs, lp)
        ph = phi.trainable()
        with Tape():
            omega = ppnet_forward(ph, fpoint)
            loss = heatmap_loss(ld_forward(omega, fq), _stack_labelmaps(ep.query))
            g = T.grad(loss, ph)
        phi = T.sgd_step(ph, g, _lr_at(cfg.gamma, i, cfg.n_tasks)).detach()
        losses.append(loss.item())
    return phi, losses


# ---------------------------------------------------------------------------
# meta-training


def inner_loop(theta: ParamSet, omega: Tensor, images: np.ndarray, labelmaps: np.ndarray,
               steps: int, lr: float, model_cfg: ModelConfig, create_graph: bool,
               ) -> tuple[ParamSet, list[float]]:
    """``steps`` SGD updates of the extractor on the support loss with detectors fixed.

    Must run inside a tape. With ``create_graph`` the updates stay differentiable
    to second order; otherwise each gradient is a constant, so the adapted
    parameters depend on ``theta`` only through the identity path.
    """
    losses = []
    for _ in range(steps):
        loss = heatmap_loss(ld_forward(omega, fenet_forward(theta, images, model_cfg)), labelmaps)
        g = T.grad(loss, theta, create_graph=create_graph)
        theta = T.sgd_step(theta, g, lr)
        losses.append(loss.item())
    return theta, losses


def task_objective(theta: ParamSet, base: BaseModel, phi: ParamSet, ep: Episode,
                   pool_labelmaps: np.ndarray, model_cfg: ModelConfig, cfg: MetaConfig,
                   update_detectors: bool = True) -> Tensor:
    """Query loss after adapting ``theta`` on the support set; call inside a tape.

    Detectors come from the base features (flow 1); the extractor is tuned on
    the support loss (flow 2); detectors are re-predicted from the tuned
    features (flow 3, skipped when ``update_detectors`` is false); the loss is
    evaluated on the query set with the tuned extractor and detectors.
    """
    s_img, s_lm = _stack_images(ep.support), _stack_labelmaps(ep.support)
    with T.no_record():
        omega = predict_detectors(base.theta0, phi, s_img, pool_labelmaps, model_cfg)
    theta_p, _ = inner_loop(theta, omega, s_img, s_lm, cfg.inner_steps, cfg.beta1, model_cfg,
                            create_graph=cfg.order == "second")
    if update_detectors:
        omega_p = predict_detectors(theta_p, phi, s_img, pool_labelmaps, model_cfg)
    else:
        omega_p = omega
    q_feats = fenet_forward(theta_p, _stack_images(ep.query), model_cfg)
    return heatmap_loss(ld_forward(omega_p, q_feats), _stack_labelmaps(ep.query))


def meta_gradient(theta: ParamSet, base: BaseModel, phi: ParamSet, ep: Episode,
                  pool_labelmaps: np.ndarray, model_cfg: ModelConfig, cfg: MetaConfig,
                  update_detectors: bool = True) -> tuple[ParamSet, float]:
    th = theta.trainable()
    with Tape():
        loss = task_objective(th, base, phi, ep, pool_labelmaps, model_cfg, cfg, update_detectors)
        g = T.grad(loss, th)
    return g, loss.item()


def meta_train(theta_init: ParamSet, base: BaseModel, phi: ParamSet,
               registry: list[CategorySpec], seen: tuple[int, ...], model_cfg: ModelConfig,
               data_cfg: DataConfig, cfg: MetaConfig, seed: int,
               update_detectors: bool = True) -> tuple[ParamSet, list[float]]:
    """Learn the extractor initialization; ``base`` and ``phi`` stay frozen.

    ``update_detectors=False`` trains without re-predicting detectors after
    the inner loop (the detector-keeping ablation).
    """
    theta = theta_init.copy()
    phi = phi.detach()
    losses = []
    for i, cid, tseed in _task_stream(seen, cfg.n_tasks, derive_seed(seed, 40)):
        ep = sample_episode(registry, cid, cfg.train_shot, cfg.train_query, tseed, data_cfg)
        lp = make_labelmaps(cfg.labelmap_source_train, ep.support, base, cid, model_cfg)
        g, loss = meta_gradient(theta, base, phi, ep, lp, model_cfg, cfg, update_detectors)
        theta = T.sgd_step(theta, g, _lr_at(cfg.beta2, i, cfg.n_tasks)).detach()
        losses.append(loss)
    return theta, losses


def initial_theta(base: BaseModel, model_cfg: ModelConfig, cfg: MetaConfig, seed: int) -> ParamSet:
    if cfg.init == "base":
        return base.theta0.copy()
    return init_fenet(model_cfg, derive_seed(seed, 41))


# ---------------------------------------------------------------------------
# meta-test


def support_loss(theta: ParamSet, omega: Tensor, images: np.ndarray, labelmaps: np.ndarray,
                 model_cfg: ModelConfig) -> float:
    with T.no_record():
        return heatmap_loss(ld_forward(omega, fenet_forward(theta, images, model_cfg)),
                            labelmaps).item()


def meta_adapt(theta: ParamSet, base: BaseModel, phi: ParamSet, support: list[Sample],
               model_cfg: ModelConfig, cfg: MetaConfig, update_detectors: bool = True,
               ) -> AdaptResult:
    """Test-time adaptation with ground-truth labelmaps.

    If the support loss ends above where it started, the inner learning rate
    is halved and adaptation rerun once; a second failure is logged and flagged.
    """
    images, lm = _stack_images(support), _stack_labelmaps(support)
    with T.no_record():
        omega = predict_detectors(base.theta0, phi, images, lm, model_cfg)
    lr = cfg.beta1
    retried = False
    while True:
        th = theta.trainable()
        with Tape():
            theta_p, losses = inner_loop(th, omega, images, lm, cfg.inner_steps, lr, model_cfg,
                                         create_graph=False)
        theta_p = theta_p.detach()
        final = support_loss(theta_p, omega, images, lm, model_cfg)
        losses.append(final)
        monotone = final <= losses[0]
        if monotone or retried:
            break
        lr, retried = lr / 2, True
    if not monotone:
        log.warning("support loss rose during adaptation (%.4f -> %.4f) at beta1=%g",
                    losses[0], final, lr)
    if update_detectors:
        with T.no_record():
            omega_p = predict_detectors(theta_p, phi, images, lm, model_cfg)
    else:
        omega_p = omega
    return AdaptResult(theta=theta_p, omega=omega_p, omega_initial=omega, support_losses=losses,
                       beta1=lr, retried=retried, monotone=monotone)


def meta_predict(theta: ParamSet, omega: Tensor, images: np.ndarray,
                 model_cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only prediction: heatmaps (B, N_c, h, w) and pixel coords (B, N_c, 2)."""
    with T.no_record():
        heat = ld_forward(omega, fenet_forward(theta, images, model_cfg)).data
    return heat, detect(heat, model_cfg.H, model_cfg.W)
