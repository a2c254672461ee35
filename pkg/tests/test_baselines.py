import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_landmarks import tensor as T
from fewshot_landmarks.baselines import (BaselineKind, expand_to_slots, ft_adapt, maml_adapt,
                                         maml_loss, maml_predict, maml_train, proto_adapt,
                                         proto_predict, proto_scores, wg_adapt)
from fewshot_landmarks.data import (N_SLOTS, DataConfig, default_registry,
                                    sample_episode)
from fewshot_landmarks.meta import MetaConfig, predict_detectors
from fewshot_landmarks.model import (ModelConfig, extract_landmark_features, fenet_forward,
                                     init_detectors, init_fenet, init_ppnet, params_to_bytes)
from fewshot_landmarks.rng import Rng
from fewshot_landmarks.tensor import ParamSet, Tape, Tensor

from helpers import TINY_DATA, TINY_MODEL, off_kink

REG = default_registry()
MC = ModelConfig()


def stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples])


def test_kinds_are_exhaustive():
    assert {k.value for k in BaselineKind} == {"FT", "MAML", "WG", "PROTO"}


# --- fine-tuning ------------------------------------------------------------


def test_ft_shapes_and_loss():
    theta0 = init_fenet(MC, 0)
    ep = sample_episode(REG, 6, 3, 1, 0)
    theta, omega, losses = ft_adapt(theta0, ep.support, MC, steps=10, lr=0.01, seed=1)
    assert omega.shape == (REG[6].n_landmarks, MC.D)
    assert len(losses) == 11
    assert losses[-1] <= losses[0]
    assert not theta.equal(theta0)


def test_ft_zero_steps_keeps_base_and_random_detectors():
    theta0 = init_fenet(MC, 0)
    ep = sample_episode(REG, 6, 1, 1, 0)
    theta, omega, _ = ft_adapt(theta0, ep.support, MC, steps=0, seed=1)
    assert theta.equal(theta0)
    assert not np.all(omega.data == 0)
    _, omega2, _ = ft_adapt(theta0, ep.support, MC, steps=0, seed=1)
    np.testing.assert_array_equal(omega.data, omega2.data)


def test_ft_leaves_base_alone():
    theta0 = init_fenet(MC, 0)
    before = params_to_bytes(theta0)
    ft_adapt(theta0, sample_episode(REG, 6, 1, 1, 0).support, MC, steps=2)
    assert params_to_bytes(theta0) == before


# --- MAML -------------------------------------------------------------------


def tiny_maml(seed=0):
    return ParamSet(list(off_kink(init_fenet(TINY_MODEL, seed), seed + 1).items())
                    + [("ld.weight", init_detectors(N_SLOTS, TINY_MODEL, seed + 2))])


def test_slot_expansion_places_rows():
    cat = REG[8]
    lm = stack(sample_episode(REG, 8, 2, 1, 0, TINY_DATA).support, "labelmap")
    full = expand_to_slots(lm, cat)
    assert full.shape == (2, N_SLOTS, 4, 4)
    np.testing.assert_array_equal(full[:, list(cat.slots)], lm)
    empty = [i for i in range(N_SLOTS) if i not in cat.slots]
    assert np.all(full[:, empty] == 0)


def test_slot_table_required():
    cat = REG[8]
    broken = dataclasses.replace(cat, slots=cat.slots[:-1])
    with pytest.raises(ValueError):
        expand_to_slots(np.zeros((1, cat.n_landmarks, 8, 8)), broken)


@pytest.mark.parametrize("cid", [8, 12])
def test_maml_masked_slots_have_zero_gradient(cid):
    cat = REG[cid]
    ep = sample_episode(REG, cid, 2, 1, 0, DataConfig(H=32, W=32, h=8, w=8))
    params = ParamSet(list(init_fenet(MC, 0).items())
                      + [("ld.weight", init_detectors(N_SLOTS, MC, 1))])
    lm = expand_to_slots(stack(ep.support, "labelmap"), cat)
    p = params.trainable()
    with Tape():
        g = T.grad(maml_loss(p, stack(ep.support, "image"), lm, MC), p)
    gw = g["ld.weight"].data
    assert gw.shape == (N_SLOTS, MC.D)
    empty = [i for i in range(N_SLOTS) if i not in cat.slots]
    assert np.all(gw[empty] == 0.0)
    assert np.all(np.abs(gw[list(cat.slots)]).sum(axis=1) > 0)


def test_maml_unoccupied_row_does_not_move_loss():
    cat = REG[8]
    ep = sample_episode(REG, 8, 2, 1, 0, TINY_DATA)
    params = tiny_maml()
    lm = expand_to_slots(stack(ep.support, "labelmap"), cat)
    imgs = stack(ep.support, "image")
    base = maml_loss(params, imgs, lm, TINY_MODEL).item()
    free = next(i for i in range(N_SLOTS) if i not in cat.slots)
    w = params["ld.weight"].data.copy()
    w[free] += 100.0
    moved = ParamSet((k, Tensor(w) if k == "ld.weight" else v) for k, v in params.items())
    assert maml_loss(moved, imgs, lm, TINY_MODEL).item() == base


def test_maml_train_and_adapt():
    cfg = MetaConfig(n_tasks=3, inner_steps=1, train_query=2, beta1=0.05, beta2=0.01)
    theta0 = off_kink(init_fenet(TINY_MODEL, 0), 1)
    params, losses = maml_train(theta0, REG, (8,), TINY_MODEL, TINY_DATA, cfg, seed=2)
    assert params["ld.weight"].shape == (N_SLOTS, TINY_MODEL.D)
    assert len(losses) == 3 and np.all(np.isfinite(losses))
    cat = REG[8]
    ep = sample_episode(REG, 8, 2, 3, 0, TINY_DATA)
    assert maml_adapt(params, ep.support, cat, TINY_MODEL,
                      MetaConfig(inner_steps=0)).equal(params)
    adapted = maml_adapt(params, ep.support, cat, TINY_MODEL, cfg)
    assert adapted["ld.weight"].shape == (N_SLOTS, TINY_MODEL.D)
    coords = maml_predict(adapted, stack(ep.query, "image"), cat, TINY_MODEL)
    assert coords.shape == (3, cat.n_landmarks, 2)


# --- weight generator -------------------------------------------------------


def test_wg_is_flow_one():
    theta0, phi = init_fenet(MC, 0), init_ppnet(MC, 1)
    before = params_to_bytes(theta0)
    ep = sample_episode(REG, 10, 3, 1, 0)
    om = wg_adapt(theta0, phi, ep.support, MC)
    ref = predict_detectors(theta0, phi, stack(ep.support, "image"),
                            stack(ep.support, "labelmap"), MC)
    np.testing.assert_array_equal(om.data, ref.data)
    assert om.shape == (REG[10].n_landmarks, MC.D)
    assert params_to_bytes(theta0) == before


# --- prototypes -------------------------------------------------------------


def test_single_support_prototypes_are_landmark_features():
    theta0 = init_fenet(MC, 0)
    ep = sample_episode(REG, 3, 1, 1, 0)
    protos = proto_adapt(theta0, ep.support, MC)
    with T.no_record():
        feats = fenet_forward(theta0, ep.support[0].image[None], MC)
        ref = extract_landmark_features(feats, ep.support[0].labelmap[None]).data
    np.testing.assert_array_equal(protos, ref)


def test_query_equal_to_support_recovers_cells():
    theta0 = off_kink(init_fenet(MC, 0), 1)
    cfg = DataConfig(noise_sigma=0.0)
    ep = sample_episode(REG, 3, 1, 1, 0, cfg)
    s = ep.support[0]
    protos = proto_adapt(theta0, [s], MC)
    with T.no_record():
        feats = fenet_forward(theta0, s.image[None], MC).data
    scores = proto_scores(protos, feats)[0]
    flat = scores.reshape(len(protos), -1)
    # each landmark's own cell has distance zero, the maximum possible score
    own = s.labelmap.reshape(len(protos), -1).argmax(axis=1)
    np.testing.assert_array_equal(flat[np.arange(len(protos)), own], 0.0)
    # argmax may tie only with cells carrying an identical feature vector
    best = flat.argmax(axis=1)
    f = feats[0].reshape(-1, MC.D)
    np.testing.assert_array_equal(f[best], f[own])
    assert proto_predict(protos, theta0, s.image[None], MC).shape == (1, len(protos), 2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), shift=st.floats(-50, 50))
def test_proto_scores_translation_invariant(seed, shift):
    rng = Rng(seed)
    protos = rng.normal(5 * 4).reshape(5, 4)
    feats = rng.normal(2 * 8 * 8 * 4).reshape(2, 8, 8, 4)
    c = shift * rng.normal(4)
    a = proto_scores(protos, feats).reshape(2, 5, -1).argmax(-1)
    b = proto_scores(protos + c, feats + c).reshape(2, 5, -1).argmax(-1)
    np.testing.assert_array_equal(a, b)
