"""First-order optimisers operating in place on named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError


def _check_finite(name: str, arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise OptimizerError(f"non-finite {what} in block {name!r}")


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the old norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm > 0:
        for g in grads:
            g *= max_norm / total
    return total


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads=None, clip_norm: float | None = None) -> None:
    """One bias-corrected Adam update.

    ``params`` is an iterable of ``(name, param, grad)`` triples (as produced
    by ``SemiMvaeModel.parameters()``), or of ``(name, param)`` pairs with the
    gradients supplied separately in ``grads`` keyed by name.
    """
    triples = []
    for item in params:
        if len(item) == 3:
            triples.append(item)
        else:
            name, p = item
            triples.append((name, p, grads[name]))
    for name, p, g in triples:
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name!r} {p.shape}")
        _check_finite(name, g, "gradient")
    gs = [np.array(g, dtype=np.float64) for _, _, g in triples]
    if clip_norm is not None:
        clip_global_norm(gs, clip_norm)

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for (name, p, _), g in zip(triples, gs):
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)
        _check_finite(name, p, "parameter")


def sgd_step(params, grads=None, lr: float = 0.01) -> None:
    """Plain gradient descent ``p -= lr * g`` on the same parameter layout as :func:`adam_step`."""
    for item in params:
        if len(item) == 3:
            name, p, g = item
        else:
            name, p = item
            g = grads[name]
        _check_finite(name, np.asarray(g), "gradient")
        p -= lr * np.asarray(g)
        _check_finite(name, p, "parameter")
