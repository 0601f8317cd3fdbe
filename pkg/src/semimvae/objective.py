"""Variational bounds for labeled and unlabeled data and the training objective.

All bound values returned here are ELBOs (higher is better). The training
objective ``F`` is the negated sum, plus the weighted classification loss,
and is what the optimiser minimises.

Gradients come from reverse-mode passes through the same sampled graph that
produced the value, so with the noise held fixed they are exact derivatives
of the returned estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import MultiViewBatch
from .distributions import (
    LOG_2PI,
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    PROB_FLOOR,
    SeededRng,
    expected_log_prior_terms,
    log_cross_terms,
)
from .errors import ConfigError, StateError
from .model import MixturePosterior, SemiMvaeModel, block_of
from .numerics import log_softmax, log_sum_exp

LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))


@dataclass
class ObjectiveConfig:
    T: int = 1
    beta: float = 0.1
    share_noise: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")


@dataclass
class BoundBreakdown:
    recon_per_view: np.ndarray
    log_prior_y: float
    expected_log_prior_z: float
    entropy_bound: float
    total: float
    recon_samples: np.ndarray = field(default=None, repr=False)

    @property
    def recon(self) -> float:
        return float(np.sum(self.recon_per_view))


def entropy_lower_bound(post: MixturePosterior) -> float:
    """Jensen lower bound on the entropy of a Gaussian mixture.

    ``-sum_v w_v * log sum_l w_l N(mu_v | mu_l, S_v + S_l)``, evaluated with
    log-sum-exp over ``l``.
    """
    mu = np.stack([c.mean for c in post.components])
    var = np.stack([c.var for c in post.components])
    logw = log_cross_terms(mu[:, None, :], var[:, None, :], mu[None, :, :], var[None, :, :])
    inner = log_sum_exp(np.log(post.weights)[None, :] + logw, axis=-1)
    return float(-np.dot(post.weights, inner))


class _SampledGraph:
    """ELBO for a stack of (views, label) pairs under fixed noise, with its backward pass.

    ``eps`` has shape ``(P, V, T, d)``: one standard-normal draw per pair,
    mixture component and sample.
    """

    def __init__(self, model: SemiMvaeModel, views, y, eps):
        self.model = model
        V, d = model.num_views, model.latent_dim
        P = len(y)
        T = eps.shape[2]
        self.P, self.T, self.eps = P, T, eps
        C = model.onehot(y) if P else np.zeros((0, model.num_classes))

        mu = np.empty((P, V, d))
        raw = np.empty((P, V, d))
        for v, enc in enumerate(model.encoders):
            out = enc.forward(np.hstack([views[v], C]))
            mu[:, v] = out[:, :d]
            raw[:, v] = out[:, d:]
        self.lv_mask = (raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX)
        lv = np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)
        s = np.exp(lv)
        sd = np.exp(0.5 * lv)
        self.mu, self.s, self.sd = mu, s, sd

        lam = model.view_weights()
        loglam = model.log_view_weights()
        self.lam = lam

        z = mu[:, :, None, :] + sd[:, :, None, :] * eps
        zin = np.hstack([z.reshape(P * V * T, d), np.repeat(C, V * T, axis=0)])
        self.dec_cache = []
        logp = np.empty((V, P, V, T))
        for v, dec in enumerate(model.decoders):
            D = model.config.view_dims[v]
            out = dec.forward(zin)
            rawx = out[:, D:]
            lvx = np.clip(rawx, LOG_VAR_MIN, LOG_VAR_MAX)
            r = np.repeat(views[v], V * T, axis=0) - out[:, :D]
            prec = np.exp(-lvx)
            lp = -0.5 * (D * LOG_2PI + lvx.sum(axis=1) + (r * r * prec).sum(axis=1))
            logp[v] = lp.reshape(P, V, T)
            self.dec_cache.append((r, prec, (rawx >= LOG_VAR_MIN) & (rawx <= LOG_VAR_MAX)))
        self.logp = logp
        self.mean_logp = logp.mean(axis=3)  # (V_dec, P, V_comp)

        self.recon_per_view = (self.mean_logp @ lam).T  # (P, V)
        self.prior_terms = expected_log_prior_terms(mu, s)  # (P, V)
        self.prior = self.prior_terms @ lam

        logw = log_cross_terms(mu[:, :, None, :], s[:, :, None, :], mu[:, None, :, :], s[:, None, :, :])
        a = loglam[None, None, :] + logw
        self.M = log_sum_exp(a, axis=-1)  # (P, V)
        self.wsm = np.exp(a - self.M[..., None])
        self.entropy = -(self.M @ lam)

        self.log_prior_y = model.log_class_prior[np.asarray(y, dtype=np.int64)] if P else np.zeros(0)
        recon = np.zeros(P)
        for v in range(V):
            recon = recon + self.recon_per_view[:, v]
        self.elbo = ((recon + self.log_prior_y) + self.prior) + self.entropy

    def recon_samples(self) -> np.ndarray:
        """Per-sample reconstruction values ``sum_l w_l sum_v log p``; shape ``(P, T)``."""
        return np.einsum("vplt,l->pt", self.logp, self.lam)

    def breakdown(self, p: int) -> BoundBreakdown:
        rpv = self.recon_per_view[p].copy()
        return BoundBreakdown(
            recon_per_view=rpv,
            log_prior_y=float(self.log_prior_y[p]),
            expected_log_prior_z=float(self.prior[p]),
            entropy_bound=float(self.entropy[p]),
            total=float(self.elbo[p]),
            recon_samples=self.recon_samples()[p],
        )

    def backward(self, g) -> None:
        """Accumulate ``sum_p g[p] * d elbo[p]`` into the model's gradient buffers."""
        model = self.model
        g = np.asarray(g, dtype=np.float64)
        V, d, P, T = model.num_views, model.latent_dim, self.P, self.T
        lam, mu, s, sd = self.lam, self.mu, self.s, self.sd

        glam = np.einsum("p,vpl->l", g, self.mean_logp)
        glam += g @ self.prior_terms
        glam += -(g @ self.M)

        dmu = -(g[:, None, None] * lam[None, :, None]) * mu
        ds = np.broadcast_to(-0.5 * g[:, None, None] * lam[None, :, None], mu.shape).copy()

        dM = -g[:, None] * lam[None, :]
        da = dM[..., None] * self.wsm  # (P, V, V) indexed [v, l]
        gloglam = da.sum(axis=(0, 1))
        S = s[:, :, None, :] + s[:, None, :, :]
        r = mu[:, :, None, :] - mu[:, None, :, :]
        dS = da[..., None] * (-0.5 / S + 0.5 * r * r / (S * S))
        dr = da[..., None] * (-r / S)
        ds += dS.sum(axis=2) + dS.sum(axis=1)
        dmu += dr.sum(axis=2) - dr.sum(axis=1)

        dlogp = np.broadcast_to((g[:, None] * lam[None, :] / T)[:, :, None], (P, V, T)).reshape(-1)
        dz = np.zeros((P * V * T, d))
        for v, dec in enumerate(model.decoders):
            r_x, prec, mask = self.dec_cache[v]
            dmx = dlogp[:, None] * r_x * prec
            dlvx = dlogp[:, None] * (0.5 * r_x * r_x * prec - 0.5) * mask
            din = dec.backward(np.hstack([dmx, dlvx]))
            dz += din[:, :d]
        dz = dz.reshape(P, V, T, d)

        dmu += dz.sum(axis=2)
        dlv = 0.5 * sd * (dz * self.eps).sum(axis=2) + ds * s
        dlv = dlv * self.lv_mask
        for v, enc in enumerate(model.encoders):
            enc.backward(np.hstack([dmu[:, v], dlv[:, v]]))

        model.rho_grad += lam * (glam - np.dot(lam, glam)) + (gloglam - lam * gloglam.sum())


def _single_views(model: SemiMvaeModel, X) -> list[np.ndarray]:
    if len(X) != model.num_views or any(x is None for x in X):
        raise ValueError(f"expected all {model.num_views} views")
    return model._check_views([np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in X])


def _draw(rng: SeededRng, shape) -> np.ndarray:
    return rng.normal(shape)


def labeled_bound(model: SemiMvaeModel, X, y: int, rng: SeededRng, cfg: ObjectiveConfig, eps=None):
    """ELBO ``-L(X, y)`` for one datapoint and its term breakdown.

    ``eps`` overrides the noise (shape ``(V, T, d)``); otherwise it is drawn
    from ``rng``.
    """
    views = _single_views(model, X)
    if views[0].shape[0] != 1:
        raise ValueError("labeled_bound takes a single datapoint")
    V, d = model.num_views, model.latent_dim
    if eps is None:
        eps = _draw(rng, (V, cfg.T, d))
    eps = np.asarray(eps, dtype=np.float64).reshape(1, V, -1, d)
    graph = _SampledGraph(model, views, np.array([int(y)]), eps)
    bd = graph.breakdown(0)
    return bd.total, bd


def unlabeled_bound(model: SemiMvaeModel, X, rng: SeededRng, cfg: ObjectiveConfig, eps=None):
    """ELBO ``-U(X)`` by exact enumeration over classes, sharing noise across them."""
    views = _single_views(model, X)
    if views[0].shape[0] != 1:
        raise ValueError("unlabeled_bound takes a single datapoint")
    V, K, d = model.num_views, model.num_classes, model.latent_dim
    if eps is None:
        eps = _draw(rng, (V, cfg.T, d))
    eps = np.asarray(eps, dtype=np.float64).reshape(1, V, -1, d)
    exact = log_softmax(model.classifier_logits(views)[0])
    q = np.exp(exact)
    logq = np.maximum(exact, LOG_PROB_FLOOR)
    graph = _SampledGraph(
        model, [np.repeat(x, K, axis=0) for x in views], np.arange(K), np.repeat(eps, K, axis=0)
    )
    breakdowns = [graph.breakdown(k) for k in range(K)]
    value = float(np.dot(q, graph.elbo) - np.dot(q, logq))
    return value, breakdowns


class BatchObjective(NamedTuple):
    value: float
    grads: dict
    labeled_elbo: float
    unlabeled_elbo: float
    class_loss: float


def batch_objective(
    model: SemiMvaeModel,
    labeled: MultiViewBatch,
    unlabeled: MultiViewBatch,
    rng: SeededRng,
    cfg: ObjectiveConfig,
    keep_grads: bool = True,
) -> BatchObjective:
    """Mean-reduced objective ``F / (N_l + N_u)`` and its gradient.

    ``F = -sum_l ELBO(X, y) - sum_u ELBO_u(X) + alpha * sum_l -log q(y|X)``
    with ``alpha = beta * (N_l + N_u)``. The model's gradient buffers are
    zeroed and then filled; ``grads`` holds copies keyed by parameter name
    unless ``keep_grads`` is off.
    """
    n_l = labeled.size if labeled is not None else 0
    n_u = unlabeled.size if unlabeled is not None else 0
    if n_l + n_u == 0:
        raise ValueError("both labeled and unlabeled batches are empty")
    if n_l and labeled.labels is None:
        raise ValueError("labeled batch carries no labels")
    V, K, d, T = model.num_views, model.num_classes, model.latent_dim, cfg.T
    N = n_l + n_u
    alpha = cfg.beta * N

    model.zero_grad()
    eps_l = _draw(rng, (n_l, V, T, d)) if n_l else np.zeros((0, V, T, d))
    if n_u == 0:
        eps_u = np.zeros((0, V, T, d))
    elif cfg.share_noise:
        eps_u = np.repeat(_draw(rng, (n_u, V, T, d)), K, axis=0)
    else:
        eps_u = _draw(rng, (n_u * K, V, T, d))

    parts = []
    if n_l:
        parts.append(labeled.views)
    if n_u:
        parts.append(unlabeled.views)
    cls_in = np.vstack([np.hstack(p) for p in parts])
    logits = model.classifier.forward(cls_in)
    logq = log_softmax(logits, axis=1)
    floored = logq < LOG_PROB_FLOOR
    logq_f = np.where(floored, LOG_PROB_FLOOR, logq)
    q = np.exp(logq)

    pair_views = []
    for v in range(V):
        chunks = []
        if n_l:
            chunks.append(labeled.views[v])
        if n_u:
            chunks.append(np.repeat(unlabeled.views[v], K, axis=0))
        pair_views.append(np.vstack(chunks))
    pair_y = np.concatenate(
        [labeled.labels if n_l else np.zeros(0, dtype=np.int64), np.tile(np.arange(K), n_u)]
    ).astype(np.int64)
    graph = _SampledGraph(model, pair_views, pair_y, np.concatenate([eps_l, eps_u]))

    elbo_l = graph.elbo[:n_l]
    elbo_u = graph.elbo[n_l:].reshape(n_u, K)
    q_u, logq_u = q[n_l:], logq_f[n_l:]
    neg_u = np.sum(q_u * elbo_u, axis=1) - np.sum(q_u * logq_u, axis=1)
    ce = -logq_f[np.arange(n_l), labeled.labels] if n_l else np.zeros(0)

    F = (-np.sum(elbo_l) - np.sum(neg_u) + alpha * np.sum(ce)) / N

    g_pairs = np.concatenate([np.full(n_l, -1.0 / N), (-q_u / N).reshape(-1)])
    graph.backward(g_pairs)

    G = np.zeros_like(logits)
    if n_l:
        rows = np.arange(n_l)
        G[rows, labeled.labels] = -(alpha / N) * (~floored[rows, labeled.labels])
    if n_u:
        G[n_l:] = -(q_u * (elbo_u - logq_u) - q_u * ~floored[n_l:]) / N
    model.classifier.backward(G - q * G.sum(axis=1, keepdims=True))

    grads = {name: g.copy() for name, _, g in model.parameters()} if keep_grads else {}
    return BatchObjective(
        value=float(F),
        grads=grads,
        labeled_elbo=float(np.mean(elbo_l)) if n_l else float("nan"),
        unlabeled_elbo=float(np.mean(neg_u)) if n_u else float("nan"),
        class_loss=float(np.mean(ce)) if n_l else float("nan"),
    )


def finite_difference_gradient(
    model: SemiMvaeModel,
    labeled: MultiViewBatch,
    unlabeled: MultiViewBatch,
    rng: SeededRng,
    cfg: ObjectiveConfig,
    h: float = 1e-5,
) -> np.ndarray:
    """Central differences of the batch objective with the noise replayed from ``rng``.

    Returns a flat vector in ``model.parameters()`` order. The model's
    parameters are restored afterwards.
    """
    if not isinstance(rng, SeededRng):
        raise StateError("finite differences need a replayable SeededRng")
    start = rng.snapshot()
    theta = model.get_flat()
    grad = np.empty_like(theta)
    probe = theta.copy()
    try:
        for i in range(theta.size):
            probe[i] = theta[i] + h
            model.set_flat(probe)
            fp = batch_objective(model, labeled, unlabeled, start.snapshot(), cfg, keep_grads=False).value
            probe[i] = theta[i] - h
            model.set_flat(probe)
            fm = batch_objective(model, labeled, unlabeled, start.snapshot(), cfg, keep_grads=False).value
            probe[i] = theta[i]
            grad[i] = (fp - fm) / (2.0 * h)
    finally:
        model.set_flat(theta)
    return grad


REL_ERR_FLOOR = 1e-6


def relative_errors(analytic, numeric, floor: float = REL_ERR_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    model: SemiMvaeModel,
    labeled: MultiViewBatch,
    unlabeled: MultiViewBatch,
    rng: SeededRng,
    cfg: ObjectiveConfig,
    h: float = 1e-5,
    corrupt: str | None = None,
) -> dict[str, float]:
    """Max relative error between backprop and finite differences, per parameter block.

    Blocks are ``phi<v>`` (encoder v), ``theta<v>`` (decoder v),
    ``classifier`` and ``rho``. ``corrupt`` names a block whose analytic
    gradient is deliberately perturbed, to exercise the failure path.
    """
    start = rng.snapshot()
    batch_objective(model, labeled, unlabeled, start.snapshot(), cfg, keep_grads=False)
    analytic = model.get_flat_grad()
    numeric = finite_difference_gradient(model, labeled, unlabeled, start, cfg, h)
    names = []
    for name, p, _ in model.parameters():
        names.extend([block_of(name)] * p.size)
    names = np.array(names)
    if corrupt is not None:
        if corrupt not in set(names):
            raise ValueError(f"unknown parameter block {corrupt!r}")
        analytic = analytic.copy()
        analytic[names == corrupt] = analytic[names == corrupt] * 1.5 + 1e-3
    err = relative_errors(analytic, numeric)
    return {str(b): float(err[names == b].max()) for b in dict.fromkeys(names)}


def tiny_problem(seed: int = 0):
    """Two views (3 and 2 features), latent 2, two classes, one hidden unit per layer.

    Returns ``(model, labeled, unlabeled, cfg)`` with three rows in each batch.
    """
    from .model import ModelConfig, init_model

    cfg_m = ModelConfig(
        view_dims=[3, 2],
        num_classes=2,
        latent_dim=2,
        encoder_hidden=[1],
        decoder_hidden=[1],
        classifier_hidden=[1],
    )
    root = SeededRng(seed)
    model = init_model(cfg_m, root.split("init"))
    # move the view weights off the symmetric point so the rho gradient is exercised
    model.rho[:] = root.split("rho").normal(2) * 0.5
    data = root.split("data")
    labeled = MultiViewBatch([data.normal((3, 3)), data.normal((3, 2))], np.array([0, 1, 1]))
    unlabeled = MultiViewBatch([data.normal((3, 3)), data.normal((3, 2))])
    return model, labeled, unlabeled, ObjectiveConfig(T=2, beta=0.5)
