"""Finite-difference oracles and tiny configurations shared by the tests."""

from __future__ import annotations

import numpy as np

from fewshot_landmarks import tensor as T
from fewshot_landmarks.model import ModelConfig
from fewshot_landmarks.data import DataConfig
from fewshot_landmarks.rng import Rng
from fewshot_landmarks.tensor import ParamSet, Tape, Tensor

EPS = 1e-5

# ~358 parameters: small enough for a full finite-difference sweep
TINY_MODEL = ModelConfig(H=16, W=16, h=4, w=4, D=4, hidden=8, channels=(1, 2, 2, 4, 4),
                         ppnet_out_gain=1.0)
TINY_DATA = DataConfig(H=16, W=16, h=4, w=4)


def off_kink(params: ParamSet, seed: int) -> ParamSet:
    """Random nonzero biases so no relu input sits exactly on its kink."""
    rng = Rng(seed)
    return ParamSet((k, Tensor(v.data + 0.1 * rng.normal(v.size).reshape(v.shape)
                               if k.endswith(".b") else v.data)) for k, v in params.items())


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def analytic_grads(f, *arrays):
    """Gradients of ``f(*tensors)`` (a scalar Tensor) for every input array."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape():
        loss = f(*leaves)
        gs = T.gradients(loss, leaves)
    return [g.data for g in gs]


def check_primitive(f, *arrays, tol=1e-4):
    """Compare reverse-mode and central-difference gradients for every input."""
    gs = analytic_grads(f, *arrays)
    errs = []
    for i, a in enumerate(arrays):
        def scalar(x, i=i):
            args = [Tensor(x) if j == i else Tensor(np.asarray(arrays[j], np.float64))
                    for j in range(len(arrays))]
            with T.no_record():
                return f(*args).item()
        errs.append(rel_err(gs[i], fd_grad(scalar, a)))
    assert max(errs) <= tol, errs
    return errs
