"""Decoupled optimization: Muon for decoder weight matrices, Adam for the rest."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NS_COEFFS = (3.4445, -4.7750, 2.0315)


def newton_schulz_orthogonalize(m: np.ndarray, steps: int = 5, coeffs=NS_COEFFS) -> np.ndarray:
    """Approximate the orthogonal polar factor of ``m`` with the quintic iteration.

    ``X <- a X + b (X X^T) X + c (X X^T)^2 X`` starting from ``m / ||m||_F``.
    Singular values are pushed into a band around 1, not exactly onto it.
    A zero matrix maps to zero.
    """
    if m.ndim != 2:
        raise ValueError(f"newton_schulz: expected a matrix, got shape {m.shape}")
    norm = np.linalg.norm(m)
    if norm == 0:
        return np.zeros_like(m)
    a, b, c = coeffs
    x = m / norm
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    for _ in range(steps):
        gram = x @ x.T
        x = a * x + (b * gram + c * (gram @ gram)) @ x
    return x.T if tall else x


@dataclass
class MuonState:
    lr: float = 1e-3
    momentum: float = 0.95
    nesterov: bool = False
    ns_steps: int = 5
    coeffs: tuple = NS_COEFFS
    buffers: dict = field(default_factory=dict)


def muon_step(param: np.ndarray, grad: np.ndarray, state: MuonState, key=None, lr: float | None = None) -> np.ndarray:
    """One Muon update; returns the new parameter array."""
    if param.ndim != 2:
        raise ValueError(f"muon_step: only matrices are routed to Muon, got shape {param.shape}")
    if grad.shape != param.shape:
        raise ValueError(f"muon_step: grad shape {grad.shape} != param shape {param.shape}")
    key = id(param) if key is None else key
    buf = state.buffers.get(key)
    if buf is None:
        buf = np.zeros_like(param)
    buf = state.momentum * buf + grad
    state.buffers[key] = buf
    direction = state.momentum * buf + grad if state.nesterov else buf
    update = newton_schulz_orthogonalize(direction, state.ns_steps, state.coeffs)
    rows, cols = param.shape
    scale = math.sqrt(max(1.0, rows / cols))
    step_lr = state.lr if lr is None else lr
    return (param - (step_lr * scale) * update).astype(param.dtype, copy=False)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    moments: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, key=None, lr: float | None = None) -> np.ndarray:
    if grad.shape != param.shape:
        raise ValueError(f"adam_step: grad shape {grad.shape} != param shape {param.shape}")
    key = id(param) if key is None else key
    m, v = state.moments.get(key, (np.zeros_like(param), np.zeros_like(param)))
    t = state.steps.get(key, 0) + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    state.moments[key] = (m, v)
    state.steps[key] = t
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    step_lr = state.lr if lr is None else lr
    # np.asarray keeps 0-d parameters as arrays (arithmetic on them yields numpy scalars)
    return np.asarray(param - step_lr * m_hat / (np.sqrt(v_hat) + state.eps), dtype=param.dtype)


@dataclass
class Routing:
    muon: dict
    adam_grid: dict
    adam_scalar: dict

    @property
    def adam(self) -> dict:
        return {**self.adam_grid, **self.adam_scalar}


def route_parameters(model) -> Routing:
    """Split parameters: decoder weights to Muon, everything else to Adam.

    Adam parameters are further split into feature grids and the small
    scalar-like ones (biases, beta, log-variances) since they use different
    learning rates.
    """
    muon, grid, scalar = {}, {}, {}
    for name, p in model.named_parameters().items():
        if ".dec." in name and name.endswith(".weight"):
            muon[name] = p
        elif ".grid." in name:
            grid[name] = p
        elif name.endswith(".bias") or name == "beta" or name.startswith("log_var."):
            scalar[name] = p
        else:
            raise ValueError(f"route_parameters: no optimizer for parameter {name!r}")
    for name, p in muon.items():
        if p.value.ndim != 2:
            raise ValueError(f"route_parameters: Muon parameter {name} is not a matrix")
    return Routing(muon=muon, adam_grid=grid, adam_scalar=scalar)


class DecoupledOptimizer:
    """Applies Muon and Adam to a routed model from the gradients stored on its nodes."""

    def __init__(self, model, config, frozen: set | None = None):
        self.routing = route_parameters(model)
        self.frozen = set(frozen or ())
        self.muon = MuonState(lr=config.muon_lr, momentum=config.muon_momentum,
                              nesterov=config.muon_nesterov, ns_steps=config.ns_steps)
        self.adam_grid = AdamState(lr=config.grid_lr, beta1=config.adam_beta1,
                                   beta2=config.adam_beta2, eps=config.adam_eps)
        self.adam_scalar = AdamState(lr=config.scalar_lr, beta1=config.adam_beta1,
                                     beta2=config.adam_beta2, eps=config.adam_eps)
        self.total_steps = max(1, config.iterations)
        self.cosine = config.cosine_decay
        self.t = 0

    def _factor(self) -> float:
        if not self.cosine:
            return 1.0
        return 0.5 * (1 + math.cos(math.pi * min(self.t, self.total_steps) / self.total_steps))

    def step(self):
        f = self._factor()
        for name, p in self.routing.muon.items():
            if name in self.frozen or p.grad is None:
                continue
            p.value = muon_step(p.value, p.grad, self.muon, key=name, lr=self.muon.lr * f)
        for group, state in ((self.routing.adam_grid, self.adam_grid), (self.routing.adam_scalar, self.adam_scalar)):
            for name, p in group.items():
                if name in self.frozen or p.grad is None:
                    continue
                p.value = adam_step(p.value, p.grad, state, key=name, lr=state.lr * f)
        self.t += 1
